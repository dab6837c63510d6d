// Copyright 2026 The mckv Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "json.hpp"
#include "mckv/corpus.hpp"
#include "mckv/errors.hpp"
#include "mckv/pipeline.hpp"

namespace mckv {
namespace {

PipelineConfig small_config() {
  return parse_config(R"(
    # tiny model and corpus so every mode runs in well under a second
    layers = 4
    doc_len = 320
    num_docs = 2
    query_len = 8
    max_positions = 1024
  )");
}

TEST(Corpus, OverlapExtremesAndTarget) {
  CorpusParams p;
  p.overlap = 0.0;
  auto c = generate_corpus(p);
  for (std::size_t i = 0; i < c.docs.size(); ++i) {
    for (std::size_t j = 0; j < c.docs.size(); ++j) {
      if (i != j) EXPECT_DOUBLE_EQ(common_token_fraction(c.docs[i], c.docs[j]), 0.0);
    }
  }
  p.overlap = 1.0;
  c = generate_corpus(p);
  EXPECT_EQ(c.docs[0], c.docs[1]);
  EXPECT_DOUBLE_EQ(common_token_fraction(c.docs[0], c.docs[2]), 1.0);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    p.overlap = 0.3;
    p.seed = seed;
    c = generate_corpus(p);
    EXPECT_NEAR(common_token_fraction(c.docs[0], c.docs[1]), 0.3, 0.05);
    EXPECT_EQ(c.consensus_len, 154u);
    std::set<std::int32_t> consensus(c.docs[0].begin() + c.consensus_offsets[0],
                                     c.docs[0].begin() + c.consensus_offsets[0] + c.consensus_len);
    for (auto t : c.query) EXPECT_TRUE(consensus.count(t) || t < 128);
    EXPECT_EQ(c.query.size(), 16u);
  }
}

TEST(Corpus, DeterministicAndRoundTrip) {
  CorpusParams p;
  p.seed = 42;
  const auto a = generate_corpus(p);
  const auto b = generate_corpus(p);
  EXPECT_EQ(a.docs, b.docs);
  EXPECT_EQ(a.fingerprint(), b.fingerprint());
  p.seed = 43;
  EXPECT_NE(generate_corpus(p).fingerprint(), a.fingerprint());
  const auto back = corpus_from_json(corpus_to_json(a));
  EXPECT_EQ(back.docs, a.docs);
  EXPECT_EQ(back.query, a.query);
  EXPECT_EQ(back.fingerprint(), a.fingerprint());
  auto j = nlohmann::json::parse(corpus_to_json(a));
  j["docs"][0][0] = j["docs"][0][0].get<int>() + 1;
  EXPECT_THROW(corpus_from_json(j.dump()), FormatError);
  EXPECT_THROW(corpus_from_json("{not json"), FormatError);
}

TEST(Corpus, InvalidParameters) {
  CorpusParams p;
  p.num_docs = 0;
  EXPECT_THROW(generate_corpus(p), ConfigError);
  p = {};
  p.overlap = 1.5;
  EXPECT_THROW(generate_corpus(p), ConfigError);
  p = {};
  p.vocab_size = 6;
  EXPECT_THROW(generate_corpus(p), ConfigError);
  p = {};
  p.query_len = 0;
  EXPECT_THROW(generate_corpus(p), ConfigError);
}

TEST(Config, ParsesKeysAndRejectsUnknown) {
  const auto c = parse_config("mode = reuse_only\nbudget=0.2 # trailing comment\npolicy = fusion\n"
                              "granularity = block\nstable_layers = 3-4\nforce_p = 0.5\n"
                              "heads = 4\nhead_dim = 2\n");
  EXPECT_EQ(c.mode, RunMode::kReuseOnly);
  EXPECT_DOUBLE_EQ(c.schedule.budget, 0.2);
  EXPECT_EQ(c.schedule.policy, UpdatePolicy::kFusion);
  EXPECT_EQ(c.schedule.granularity, FusionGranularity::kBlock);
  EXPECT_EQ(c.stable_layers, "3-4");
  ASSERT_TRUE(c.force_p.has_value());
  EXPECT_DOUBLE_EQ(*c.force_p, 0.5);
  EXPECT_EQ(c.model.hidden_dim, 8u);
  EXPECT_THROW(parse_config("nonsense = 1"), ConfigError);
  EXPECT_THROW(parse_config("budget = lots"), ConfigError);
  EXPECT_THROW(parse_config("just a line"), ConfigError);
  EXPECT_THROW(parse_config("mode = turbo"), ConfigError);
  EXPECT_THROW(parse_config("budget = 0").validate(), ConfigError);
  EXPECT_THROW(parse_config("force_p = 2").validate(), ConfigError);
  EXPECT_THROW(parse_config("personalize = maybe"), ConfigError);
}

TEST(Pipeline, FullRecomputeMatchesBaselineExactly) {
  auto cfg = small_config();
  cfg.mode = RunMode::kFullRecompute;
  const auto r = run_pipeline(cfg);
  EXPECT_DOUBLE_EQ(r.sequence_ratio, 1.0);
  EXPECT_DOUBLE_EQ(r.recomputation_ratio, 1.0);
  EXPECT_EQ(r.final_hidden, r.baseline_hidden);
  EXPECT_TRUE(r.token_agreement);
  EXPECT_DOUBLE_EQ(r.max_relative_error, 0.0);
}

TEST(Pipeline, ModesProduceConsistentReports) {
  const auto weights = load_or_build_model(small_config());
  const auto corpus = load_or_generate_corpus(small_config());
  for (auto mode : {RunMode::kSamkv, RunMode::kReuseOnly, RunMode::kInitialLocalOnly}) {
    auto cfg = small_config();
    cfg.mode = mode;
    const auto r = run_pipeline(cfg, weights, corpus);
    EXPECT_EQ(r.mode, to_string(mode));
    EXPECT_EQ(r.docs.size(), 2u);
    EXPECT_EQ(r.total_tokens, 640u);
    EXPECT_GT(r.sequence_ratio, 0.0);
    EXPECT_LE(r.sequence_ratio, 1.0);
    EXPECT_EQ(r.final_hidden.size(), r.baseline_hidden.size());
    EXPECT_FALSE(r.stable_layers.empty());
    std::uint64_t kept = 0;
    for (const auto& d : r.docs) {
      EXPECT_GE(d.p, 0.0);
      EXPECT_LE(d.p, 1.0);
      for (auto b : d.pinned_blocks) kept += d.block_tokens[b];
      for (const auto& b : d.retained_middle) kept += d.block_tokens[b.block];
    }
    EXPECT_EQ(r.retained_token_layers, kept * 4);
    if (mode == RunMode::kReuseOnly) {
      EXPECT_DOUBLE_EQ(r.recomputation_ratio, 0.0);
    } else {
      EXPECT_GT(r.recomputation_ratio, 0.0);
      EXPECT_LE(r.recomputation_ratio, std::max(0.15, (r.schedule.initial_tokens + r.schedule.local_tokens) / 640.0));
    }
    if (mode == RunMode::kInitialLocalOnly) {
      for (const auto& d : r.docs) EXPECT_TRUE(d.retained_middle.empty());
      EXPECT_EQ(r.schedule.fill_tokens + r.schedule.outlier_tokens, 0u);
    }
  }
}

TEST(Pipeline, ForcedRatioKeepsAllMiddleBlocksAndRecomputesEverything) {
  auto cfg = small_config();
  cfg.force_p = 1.0;
  cfg.set("budget", "1.0");
  const auto r = run_pipeline(cfg);
  EXPECT_DOUBLE_EQ(r.sequence_ratio, 1.0);
  EXPECT_DOUBLE_EQ(r.recomputation_ratio, 1.0);
  EXPECT_LT(r.max_relative_error, 1e-4);
  EXPECT_TRUE(r.token_agreement);
}

TEST(Pipeline, ReportsAreDeterministicAndRoundTrip) {
  const auto cfg = small_config();
  const auto a = run_pipeline(cfg);
  const auto b = run_pipeline(cfg);
  EXPECT_EQ(report_to_json(a, false), report_to_json(b, false));
  const auto back = report_from_json(report_to_json(a, true));
  EXPECT_EQ(report_to_json(back, false), report_to_json(a, false));
  EXPECT_FALSE(back.timing_ms.empty());
  EXPECT_FALSE(nlohmann::json::parse(report_to_json(a, false)).contains("timing_ms"));
  EXPECT_THROW(report_from_json("[]"), FormatError);
}

TEST(Pipeline, CompareRequiresSameCorpusAndModel) {
  auto cfg = small_config();
  const auto a = run_pipeline(cfg);
  cfg.mode = RunMode::kFullRecompute;
  const auto full = run_pipeline(cfg);
  const auto cmp = compare_runs(a, full);
  EXPECT_EQ(cmp.mode_a, "samkv");
  EXPECT_EQ(cmp.mode_b, "full_recompute");
  EXPECT_NEAR(cmp.sequence_ratio_delta, 1.0 - a.sequence_ratio, 1e-12);
  EXPECT_NEAR(cmp.hidden_cosine, a.cosine_to_baseline, 1e-9);
  const auto j = nlohmann::json::parse(comparison_to_json(cmp));
  EXPECT_TRUE(j.contains("hidden_cosine"));
  cfg.set("seed", "99");
  EXPECT_THROW(compare_runs(a, run_pipeline(cfg)), ComparisonError);
  cfg = small_config();
  cfg.set("model_seed", "8");
  EXPECT_THROW(compare_runs(a, run_pipeline(cfg)), ComparisonError);
}

TEST(Pipeline, ErrorsAreTaggedWithStage) {
  auto cfg = small_config();
  cfg.stable_layers = "9-12";
  try {
    run_pipeline(cfg);
    FAIL() << "expected a stage error";
  } catch (const StageError& e) {
    EXPECT_EQ(e.stage(), "stable_layers");
    EXPECT_EQ(e.cause_kind(), "config");
    EXPECT_NE(std::string(e.what()).find("[stable_layers] config error"), std::string::npos);
  }
  cfg = small_config();
  cfg.corpus_path = "/nonexistent/corpus.json";
  try {
    run_pipeline(cfg);
    FAIL() << "expected a stage error";
  } catch (const StageError& e) {
    EXPECT_EQ(e.stage(), "corpus");
  }
}

TEST(Pipeline, CacheDirWritesLoadableCaches) {
  auto cfg = small_config();
  const auto dir = std::filesystem::temp_directory_path() / "mckv_pipeline_caches";
  std::filesystem::remove_all(dir);
  cfg.cache_dir = dir.string();
  run_pipeline(cfg);
  const auto doc = load_cache(dir / "doc-0.mckv");
  EXPECT_EQ(doc.num_tokens(), 320u);
  EXPECT_NO_THROW(doc.validate());
  const auto j = nlohmann::json::parse(cache_to_json(doc));
  EXPECT_EQ(j["doc_id"], "doc-0");
  std::filesystem::remove_all(dir);
}

TEST(Pipeline, LayerAnalysisJson) {
  const auto cfg = small_config();
  const auto w = load_or_build_model(cfg);
  const auto c = load_or_generate_corpus(cfg);
  const auto a = analyze_layers(cfg, w, c);
  EXPECT_EQ(a.docs.size(), 2u);
  const auto j = nlohmann::json::parse(layer_analysis_to_json(a));
  EXPECT_TRUE(j.contains("stable_layers"));
}

#ifdef MCKV_CLI_PATH
struct CliResult {
  int status;
  std::string output;
};

CliResult run_cli(const std::string& args) {
  const std::string cmd = std::string(MCKV_CLI_PATH) + " " + args + " 2>&1";
  CliResult r{0, {}};
  FILE* pipe = popen(cmd.c_str(), "r");
  char buf[4096];
  while (std::fgets(buf, sizeof buf, pipe)) r.output += buf;
  const int raw = pclose(pipe);
  r.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  return r;
}

TEST(Cli, RunCompareAndDump) {
  const auto dir = std::filesystem::temp_directory_path() / "mckv_cli_test";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  const auto base = " --set layers=4 doc_len=256 num_docs=2 query_len=8";
  auto r = run_cli("run --mode samkv --seed 3" + std::string(base) + " --report " + (dir / "a.json").string() +
                   " --cache-dir " + dir.string());
  ASSERT_EQ(r.status, 0) << r.output;
  r = run_cli("run --mode full_recompute --seed 3" + std::string(base) + " --report " + (dir / "b.json").string());
  ASSERT_EQ(r.status, 0) << r.output;
  r = run_cli("compare " + (dir / "a.json").string() + " " + (dir / "b.json").string());
  ASSERT_EQ(r.status, 0) << r.output;
  EXPECT_NE(r.output.find("sequence_ratio_delta"), std::string::npos);
  r = run_cli("dump-cache " + (dir / "doc-1.mckv").string());
  ASSERT_EQ(r.status, 0) << r.output;
  EXPECT_NE(r.output.find("doc-1"), std::string::npos);
  r = run_cli("run --mode full_recompute --seed 4" + std::string(base) + " --report " + (dir / "c.json").string());
  r = run_cli("compare " + (dir / "a.json").string() + " " + (dir / "c.json").string());
  EXPECT_EQ(r.status, 2);
  EXPECT_NE(r.output.find("comparison error"), std::string::npos);
  std::filesystem::remove_all(dir);
}

TEST(Cli, GenCorpusAndErrors) {
  const auto path = std::filesystem::temp_directory_path() / "mckv_cli_corpus.json";
  auto r = run_cli("gen-corpus --seed 5 --docs 2 --doc-len 100 -o " + path.string());
  ASSERT_EQ(r.status, 0) << r.output;
  EXPECT_EQ(load_corpus(path).docs.size(), 2u);
  std::filesystem::remove(path);
  r = run_cli("run --set nonsense=1");
  EXPECT_EQ(r.status, 2);
  EXPECT_NE(r.output.find("config error"), std::string::npos);
  r = run_cli("run --set layers=4 stable_layers=7");
  EXPECT_EQ(r.status, 2);
  EXPECT_NE(r.output.find("[stable_layers] config error"), std::string::npos);
  {
    std::ofstream bogus(path);
    bogus << "not a cache";
  }
  r = run_cli("dump-cache " + path.string());
  EXPECT_EQ(r.status, 2);
  EXPECT_NE(r.output.find("format error"), std::string::npos);
  std::filesystem::remove(path);
}
#endif

}  // namespace
}  // namespace mckv
