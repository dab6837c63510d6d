// Copyright 2026 The mckv Authors
// SPDX-License-Identifier: Apache-2.0

#include <cstdio>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "mckv/corpus.hpp"
#include "mckv/errors.hpp"
#include "mckv/kv_store.hpp"
#include "mckv/model.hpp"
#include "mckv/pipeline.hpp"

namespace {

struct ConfigFlags {
  std::string config_path;
  std::string mode;
  std::vector<std::string> overrides;
  std::uint64_t seed = 0;
  double budget = 0.0;
  std::string policy;
  std::uint32_t block_size = 0;
  std::string report;
  CLI::Option* seed_opt = nullptr;
  CLI::Option* budget_opt = nullptr;
  CLI::Option* block_opt = nullptr;

  void attach(CLI::App* app) {
    app->add_option("--config", config_path, "key = value config file")->check(CLI::ExistingFile);
    app->add_option("--mode", mode, "samkv | full_recompute | reuse_only | initial_local_only");
    seed_opt = app->add_option("--seed", seed, "corpus seed");
    budget_opt = app->add_option("--budget", budget, "recompute budget in (0, 1]");
    app->add_option("--policy", policy, "overwrite | fusion");
    block_opt = app->add_option("--block-size", block_size, "tokens per block");
    app->add_option("--report", report, "output JSON path");
    app->add_option("--set", overrides, "extra key=value config override")->take_all();
  }

  mckv::PipelineConfig resolve() const {
    mckv::PipelineConfig cfg;
    if (!config_path.empty()) cfg = mckv::load_config(config_path, cfg);
    for (const auto& kv : overrides) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw mckv::ConfigError("--set expects key=value, got '" + kv + "'");
      cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (!mode.empty()) cfg.set("mode", mode);
    if (*seed_opt) cfg.set("seed", std::to_string(seed));
    if (*budget_opt) cfg.schedule.budget = budget;
    if (!policy.empty()) cfg.set("policy", policy);
    if (*block_opt) cfg.layout.block_size = block_size;
    if (!report.empty()) cfg.report_path = report;
    cfg.validate();
    return cfg;
  }
};

void emit(const std::string& text, const std::string& path) {
  if (path.empty()) {
    std::cout << text << '\n';
    return;
  }
  std::ofstream out(path);
  if (!out) throw mckv::InputError("cannot write " + path);
  out << text << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sparse multi-context KV cache reuse with selective recomputation"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen-corpus", "Generate a synthetic multi-document corpus");
  mckv::CorpusParams cp;
  std::string gen_out;
  gen->add_option("--seed", cp.seed);
  gen->add_option("--docs", cp.num_docs);
  gen->add_option("--doc-len", cp.doc_len);
  gen->add_option("--overlap", cp.overlap);
  gen->add_option("--query-len", cp.query_len);
  gen->add_option("--vocab", cp.vocab_size);
  gen->add_option("-o,--output", gen_out, "output JSON path (stdout when omitted)");

  auto* run = app.add_subcommand("run", "Run the pipeline and write a report");
  ConfigFlags run_flags;
  run_flags.attach(run);
  std::string run_cache_dir, run_corpus, run_weights;
  run->add_option("--cache-dir", run_cache_dir, "write per-document caches here");
  run->add_option("--corpus", run_corpus, "corpus JSON from gen-corpus");
  run->add_option("--weights", run_weights, "weights file from init-model");

  auto* cmp = app.add_subcommand("compare", "Diff two run reports");
  std::string cmp_a, cmp_b, cmp_out;
  cmp->add_option("report_a", cmp_a)->required()->check(CLI::ExistingFile);
  cmp->add_option("report_b", cmp_b)->required()->check(CLI::ExistingFile);
  cmp->add_option("-o,--output", cmp_out);

  auto* an = app.add_subcommand("analyze-layers", "Block analysis and stable-layer detection");
  ConfigFlags an_flags;
  an_flags.attach(an);

  auto* dump = app.add_subcommand("dump-cache", "Print a document cache file as JSON");
  std::string dump_path;
  bool dump_tensors = false;
  dump->add_option("cache", dump_path)->required()->check(CLI::ExistingFile);
  dump->add_flag("--tensors", dump_tensors, "include K, V and mean keys");

  auto* init = app.add_subcommand("init-model", "Build model weights and write them to a file");
  ConfigFlags init_flags;
  init_flags.attach(init);
  std::string init_out;
  init->add_option("-o,--output", init_out)->required();

  CLI11_PARSE(app, argc, argv);

  const char* where = "cli";
  try {
    if (*gen) {
      where = "gen-corpus";
      emit(mckv::corpus_to_json(mckv::generate_corpus(cp)), gen_out);
    } else if (*run) {
      where = "run";
      auto cfg = run_flags.resolve();
      if (!run_cache_dir.empty()) cfg.cache_dir = run_cache_dir;
      if (!run_corpus.empty()) cfg.corpus_path = run_corpus;
      if (!run_weights.empty()) cfg.weights_path = run_weights;
      const auto report = mckv::run_pipeline(cfg);
      emit(mckv::report_to_json(report), cfg.report_path);
    } else if (*cmp) {
      where = "compare";
      const auto diff = mckv::compare_runs(mckv::load_report(cmp_a), mckv::load_report(cmp_b));
      emit(mckv::comparison_to_json(diff), cmp_out);
    } else if (*an) {
      where = "analyze-layers";
      const auto cfg = an_flags.resolve();
      const auto weights = mckv::load_or_build_model(cfg);
      const auto corpus = mckv::load_or_generate_corpus(cfg);
      emit(mckv::layer_analysis_to_json(mckv::analyze_layers(cfg, weights, corpus)), cfg.report_path);
    } else if (*dump) {
      where = "dump-cache";
      emit(mckv::cache_to_json(mckv::load_cache(dump_path), dump_tensors), "");
    } else if (*init) {
      where = "init-model";
      const auto cfg = init_flags.resolve();
      mckv::save_weights(mckv::build_model(cfg.model), init_out);
    }
  } catch (const mckv::StageError& e) {
    std::cerr << "mckv " << where << ": " << e.what() << '\n';
    return 2;
  } catch (const mckv::Error& e) {
    std::cerr << "mckv " << where << ": [" << where << "] " << e.kind() << " error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "mckv " << where << ": [" << where << "] internal error: " << e.what() << '\n';
    return 3;
  }
  return 0;
}
