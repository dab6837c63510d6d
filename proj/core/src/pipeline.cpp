// Copyright 2026 The mckv Authors
// SPDX-License-Identifier: Apache-2.0

#include "mckv/pipeline.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "json.hpp"
#include "mckv/engine.hpp"
#include "mckv/query_embedding.hpp"

namespace mckv {
namespace {

using json = nlohmann::json;

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

template <class T>
T parse_number(std::string_view key, std::string_view text) {
  T v{};
  const auto* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || ptr != end) {
    throw ConfigError("invalid value '" + std::string(text) + "' for " + std::string(key));
  }
  return v;
}

bool parse_bool(std::string_view key, std::string_view text) {
  if (text == "true" || text == "1" || text == "yes" || text == "on") return true;
  if (text == "false" || text == "0" || text == "no" || text == "off") return false;
  throw ConfigError("invalid boolean '" + std::string(text) + "' for " + std::string(key));
}

class Stopwatch {
 public:
  double lap() {
    const auto now = std::chrono::steady_clock::now();
    const double ms = std::chrono::duration<double, std::milli>(now - last_).count();
    last_ = now;
    return ms;
  }

 private:
  std::chrono::steady_clock::time_point last_ = std::chrono::steady_clock::now();
};

/// Runs `fn` as pipeline stage `name`, tagging library errors and timing it.
template <class Fn>
auto stage(RunReport& report, const char* name, Fn&& fn) {
  Stopwatch watch;
  try {
    if constexpr (std::is_void_v<decltype(fn())>) {
      fn();
      report.timing_ms[name] += watch.lap();
    } else {
      auto out = fn();
      report.timing_ms[name] += watch.lap();
      return out;
    }
  } catch (const StageError&) {
    throw;
  } catch (const Error& e) {
    throw StageError(name, e);
  }
}

double max_relative_error(std::span<const float> got, std::span<const float> want) {
  double worst = 0.0;
  for (std::size_t i = 0; i < got.size() && i < want.size(); ++i) {
    const double denom = std::max(std::abs(static_cast<double>(want[i])), 1e-6);
    worst = std::max(worst, std::abs(static_cast<double>(got[i]) - want[i]) / denom);
  }
  return worst;
}

json summary_json(const Summary& s) {
  return {{"count", s.count}, {"mean", s.mean}, {"min", s.min}, {"max", s.max}};
}

Summary summary_from(const json& j) {
  return {j.at("count").get<std::size_t>(), j.at("mean").get<double>(), j.at("min").get<double>(),
          j.at("max").get<double>()};
}

json finite_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

}  // namespace

const char* to_string(RunMode mode) noexcept {
  switch (mode) {
    case RunMode::kSamkv: return "samkv";
    case RunMode::kFullRecompute: return "full_recompute";
    case RunMode::kReuseOnly: return "reuse_only";
    case RunMode::kInitialLocalOnly: return "initial_local_only";
  }
  return "unknown";
}

RunMode parse_run_mode(std::string_view text) {
  for (auto m : {RunMode::kSamkv, RunMode::kFullRecompute, RunMode::kReuseOnly, RunMode::kInitialLocalOnly}) {
    if (text == to_string(m)) return m;
  }
  throw ConfigError("unknown mode '" + std::string(text) + "'");
}

UpdatePolicy parse_policy(std::string_view text) {
  if (text == "overwrite") return UpdatePolicy::kOverwrite;
  if (text == "fusion") return UpdatePolicy::kFusion;
  throw ConfigError("unknown policy '" + std::string(text) + "'");
}

void PipelineConfig::set(std::string_view key, std::string_view value) {
  const std::string v(value);
  if (key == "mode") {
    mode = parse_run_mode(value);
  } else if (key == "seed") {
    corpus.seed = parse_number<std::uint64_t>(key, value);
  } else if (key == "model_seed") {
    model.seed = parse_number<std::uint64_t>(key, value);
  } else if (key == "layers") {
    model.num_layers = parse_number<std::uint32_t>(key, value);
  } else if (key == "heads") {
    model.num_heads = parse_number<std::uint32_t>(key, value);
    model.hidden_dim = model.num_heads * model.head_dim;
  } else if (key == "head_dim") {
    model.head_dim = parse_number<std::uint32_t>(key, value);
    model.hidden_dim = model.num_heads * model.head_dim;
  } else if (key == "hidden_dim") {
    model.hidden_dim = parse_number<std::uint32_t>(key, value);
  } else if (key == "vocab_size") {
    model.vocab_size = parse_number<std::uint32_t>(key, value);
    corpus.vocab_size = model.vocab_size;
  } else if (key == "positional") {
    if (value == "none") {
      model.positional_mode = PositionalMode::kNone;
    } else if (value == "absolute") {
      model.positional_mode = PositionalMode::kAbsoluteLearned;
    } else {
      throw ConfigError("unknown positional mode '" + v + "'");
    }
  } else if (key == "max_positions") {
    model.max_positions = parse_number<std::uint32_t>(key, value);
  } else if (key == "weights") {
    weights_path = v;
  } else if (key == "corpus") {
    corpus_path = v;
  } else if (key == "num_docs") {
    corpus.num_docs = parse_number<std::uint32_t>(key, value);
  } else if (key == "doc_len") {
    corpus.doc_len = parse_number<std::uint32_t>(key, value);
  } else if (key == "overlap") {
    corpus.overlap = parse_number<double>(key, value);
  } else if (key == "query_len") {
    corpus.query_len = parse_number<std::uint32_t>(key, value);
  } else if (key == "block_size") {
    layout.block_size = parse_number<std::uint32_t>(key, value);
  } else if (key == "n_initial") {
    layout.n_initial = parse_number<std::uint32_t>(key, value);
  } else if (key == "n_local") {
    layout.n_local = parse_number<std::uint32_t>(key, value);
  } else if (key == "budget") {
    schedule.budget = parse_number<double>(key, value);
  } else if (key == "policy") {
    schedule.policy = parse_policy(value);
  } else if (key == "granularity") {
    if (value == "token") {
      schedule.granularity = FusionGranularity::kToken;
    } else if (value == "block") {
      schedule.granularity = FusionGranularity::kBlock;
    } else {
      throw ConfigError("unknown granularity '" + v + "'");
    }
  } else if (key == "fill_budget") {
    schedule.fill_budget = parse_bool(key, value);
  } else if (key == "per_layer_schedule") {
    schedule.per_layer = parse_bool(key, value);
  } else if (key == "stable_layers") {
    stable_layers = v;
  } else if (key == "stability_threshold") {
    stable_options.threshold_ratio = parse_number<double>(key, value);
  } else if (key == "trailing_fraction") {
    stable_options.trailing_fraction = parse_number<double>(key, value);
  } else if (key == "force_p") {
    if (value == "none") {
      force_p.reset();
    } else {
      force_p = parse_number<double>(key, value);
    }
  } else if (key == "cross_context_filter") {
    cross_context_filter = parse_bool(key, value);
  } else if (key == "anchor_below_min") {
    if (value == "zero") {
      anchor_below_min = AnchorBelowMin::kZero;
    } else if (value == "one") {
      anchor_below_min = AnchorBelowMin::kOne;
    } else {
      throw ConfigError("anchor_below_min must be zero or one");
    }
  } else if (key == "layer_specific") {
    layer_specific = parse_bool(key, value);
  } else if (key == "personalize") {
    personalize = parse_bool(key, value);
  } else if (key == "report") {
    report_path = v;
  } else if (key == "cache_dir") {
    cache_dir = v;
  } else {
    throw ConfigError("unknown config key '" + std::string(key) + "'");
  }
}

void PipelineConfig::validate() const {
  if (weights_path.empty()) model.validate();
  if (layout.block_size == 0) throw ConfigError("block_size must be positive");
  if (!(schedule.budget > 0.0) || schedule.budget > 1.0) throw ConfigError("budget must lie in (0, 1]");
  if (force_p && !(*force_p >= 0.0 && *force_p <= 1.0)) throw ConfigError("force_p must lie in [0, 1]");
  if (!(stable_options.threshold_ratio > 0.0 && stable_options.threshold_ratio <= 1.0)) {
    throw ConfigError("stability_threshold must lie in (0, 1]");
  }
  if (!(stable_options.trailing_fraction > 0.0 && stable_options.trailing_fraction <= 1.0)) {
    throw ConfigError("trailing_fraction must lie in (0, 1]");
  }
}

PipelineConfig parse_config(std::string_view text, PipelineConfig base) {
  std::size_t line_no = 0;
  std::istringstream in{std::string(text)};
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const auto body = trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(line_no) + ": expected key = value");
    }
    const auto key = trim(std::string_view(body).substr(0, eq));
    const auto value = trim(std::string_view(body).substr(eq + 1));
    if (key.empty()) throw ConfigError("line " + std::to_string(line_no) + ": empty key");
    base.set(key, value);
  }
  return base;
}

PipelineConfig load_config(const std::filesystem::path& path, PipelineConfig base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), std::move(base));
}

StageError::StageError(std::string stage, const Error& cause)
    : Error(cause.kind(), "[" + stage + "] " + cause.kind() + " error: " + cause.what()),
      stage_(std::move(stage)),
      cause_kind_(cause.kind()) {}

Summary summarize(const std::vector<double>& values) {
  Summary s;
  s.count = values.size();
  if (values.empty()) return s;
  s.min = *std::min_element(values.begin(), values.end());
  s.max = *std::max_element(values.begin(), values.end());
  double sum = 0.0;
  for (double v : values) sum += v;
  s.mean = sum / static_cast<double>(values.size());
  return s;
}

ModelWeights load_or_build_model(const PipelineConfig& config) {
  if (!config.weights_path.empty()) return load_weights(config.weights_path);
  return build_model(config.model);
}

Corpus load_or_generate_corpus(const PipelineConfig& config) {
  if (!config.corpus_path.empty()) return load_corpus(config.corpus_path);
  return generate_corpus(config.corpus);
}

RunReport run_pipeline(const PipelineConfig& config) {
  RunReport scratch;
  config.validate();
  const auto weights = stage(scratch, "model", [&] { return load_or_build_model(config); });
  const auto corpus = stage(scratch, "corpus", [&] { return load_or_generate_corpus(config); });
  auto report = run_pipeline(config, weights, corpus);
  for (const auto& [k, v] : scratch.timing_ms) report.timing_ms[k] += v;
  return report;
}

RunReport run_pipeline(const PipelineConfig& config, const ModelWeights& weights, const Corpus& corpus) {
  config.validate();
  RunReport report;
  report.mode = to_string(config.mode);
  report.seed = corpus.params.seed;
  report.corpus_fingerprint = corpus.fingerprint();
  report.model_checksum = weights.checksum();
  report.num_layers = weights.spec.num_layers;
  report.policy = to_string(config.schedule.policy);
  for (const auto& d : corpus.docs) report.total_tokens += d.size();
  const auto ids = corpus.doc_ids();
  const std::uint32_t n_layers = weights.spec.num_layers;

  stage(report, "baseline", [&] {
    std::vector<std::int32_t> joint;
    for (const auto& d : corpus.docs) joint.insert(joint.end(), d.begin(), d.end());
    joint.insert(joint.end(), corpus.query.begin(), corpus.query.end());
    const auto fwd = prefill_full(weights, joint);
    const auto last = fwd.hidden.row(fwd.hidden.rows() - 1);
    report.baseline_hidden.assign(last.begin(), last.end());
    report.baseline_token = greedy_token(logits(weights, report.baseline_hidden));
  });

  auto finish = [&](std::vector<float> hidden, std::int32_t token) {
    report.final_hidden = std::move(hidden);
    report.next_token = token;
    report.token_agreement = report.next_token == report.baseline_token;
    report.cosine_to_baseline = cosine(report.final_hidden, report.baseline_hidden);
    report.max_relative_error = max_relative_error(report.final_hidden, report.baseline_hidden);
  };

  if (config.mode == RunMode::kFullRecompute) {
    report.retained_token_layers = report.total_tokens * n_layers;
    report.sequence_ratio = 1.0;
    report.recomputation_ratio = 1.0;
    report.schedule.total_tokens = report.total_tokens;
    report.schedule.scheduled_tokens = report.total_tokens;
    report.schedule.recomputation_ratio = 1.0;
    finish(report.baseline_hidden, report.baseline_token);
    return report;
  }

  std::vector<DocumentCache> docs;
  std::vector<DocumentAnalysis> analyses;
  stage(report, "prefill", [&] {
    for (std::size_t i = 0; i < corpus.docs.size(); ++i) {
      auto pre = prefill_document_with_attention(weights, ids[i], corpus.docs[i], config.layout,
                                                 QRetention::kPivotal);
      if (!config.cache_dir.empty()) {
        std::filesystem::create_directories(config.cache_dir);
        save_cache(pre.cache, std::filesystem::path(config.cache_dir) / (ids[i] + ".mckv"));
      }
      analyses.push_back(analyze_document(pre.attention, pre.cache.blocks));
      docs.push_back(std::move(pre.cache));
    }
  });

  stage(report, "stable_layers", [&] {
    std::vector<LayerAlphas> alphas;
    for (const auto& a : analyses) alphas.push_back(layer_alphas(a));
    report.stable_report = detect_stable_layers(alphas, config.stable_options);
    if (config.stable_layers != "auto") {
      report.stable_report.stable_layers = parse_layer_preset(config.stable_layers, n_layers);
      report.stable_report.preset = true;
      report.stable_report.fallback_used = false;
    }
    report.stable_layers = report.stable_report.stable_layers;
  });
  const auto& stable = report.stable_layers;

  const auto q_que = stage(report, "query_embedding",
                           [&] { return generic_query_vector(weights, corpus.query, docs); });

  std::vector<QueryVector> q_hat;
  stage(report, "personalize", [&] {
    std::vector<LocalQCache> locals;
    for (const auto& d : docs) locals.push_back(local_q_cache(d));
    std::vector<double> cosines;
    for (const auto& d : docs) {
      if (!config.personalize) {
        q_hat.push_back(q_que);
        continue;
      }
      PersonalizeDetail detail;
      q_hat.push_back(personalize(q_que, locals, d.doc_id, &detail));
      cosines.insert(cosines.end(), detail.cosines.begin(), detail.cosines.end());
    }
    report.query_local_cosine = summarize(cosines);
  });

  std::vector<SelectionPlan> plans;
  stage(report, "selection", [&] {
    for (std::uint32_t i = 0; i < docs.size(); ++i) {
      std::vector<double> per_layer;
      double p = 0.0;
      if (config.mode == RunMode::kInitialLocalOnly) {
        p = 0.0;
      } else if (config.force_p) {
        p = *config.force_p;
      } else {
        const auto scores = anchor_scores(q_hat[i], docs[i], analyses[i].layers, stable);
        if (!scores.empty) {
          for (const auto& s : scores.layers) {
            per_layer.push_back(layer_p(s.s_anc, s.s_max, s.s_min, config.anchor_below_min));
          }
          p = doc_p(per_layer);
        }
      }
      auto plan = select_blocks(q_hat[i], docs[i], p, stable, i);
      plan.layer_p = std::move(per_layer);
      plans.push_back(std::move(plan));
    }
  });

  stage(report, "cross_context_filter", [&] {
    if (config.cross_context_filter && !config.force_p && config.mode != RunMode::kInitialLocalOnly) {
      plans = cross_context_filter(std::move(plans));
    }
    if (config.layer_specific) {
      for (std::size_t i = 0; i < plans.size(); ++i) specialize_layers(plans[i], q_hat[i], docs[i]);
    }
  });

  const auto schedule = stage(report, "schedule", [&] {
    if (config.mode == RunMode::kReuseOnly) {
      RecomputeSchedule empty;
      empty.policy = config.schedule.policy;
      empty.granularity = config.schedule.granularity;
      empty.layers.assign(n_layers, {});
      report.schedule.total_tokens = report.total_tokens;
      return empty;
    }
    return build_schedule(plans, docs, analyses, stable, config.schedule, &report.schedule);
  });
  report.recomputation_ratio = report.schedule.recomputation_ratio;

  auto aligned = stage(report, "align", [&] { return align_layers(plans, docs); });
  RecomputeTrace trace;
  const auto rebuilt = stage(report, "recompute", [&] {
    return run_recompute(std::move(aligned), schedule, weights, &trace);
  });
  report.key_theta = summarize(trace.key_thetas);
  report.value_theta = summarize(trace.value_thetas);

  const auto answer = stage(report, "final_prefill",
                            [&] { return final_answer_prefill(weights, corpus.query, rebuilt); });

  for (const auto& plan : plans) {
    DocReport d;
    d.doc_id = plan.doc_id;
    d.p = plan.p;
    d.layer_p = plan.layer_p;
    d.pinned_blocks = plan.pinned_blocks;
    d.retained_middle = plan.retained_middle;
    d.layer_middle = plan.layer_middle;
    d.block_tokens = plan.block_tokens;
    d.total_tokens = plan.total_tokens;
    d.middle_blocks = plan.middle_block_count();
    d.sequence_ratio = plan.sequence_ratio;
    report.retained_token_layers += plan.retained_token_layers();
    report.docs.push_back(std::move(d));
  }
  report.sequence_ratio = static_cast<double>(report.retained_token_layers) /
                          (static_cast<double>(report.total_tokens) * n_layers);
  finish(answer.hidden, answer.token);
  return report;
}

std::string report_to_json(const RunReport& r, bool with_timing) {
  json j;
  j["mode"] = r.mode;
  j["seed"] = r.seed;
  j["corpus_fingerprint"] = r.corpus_fingerprint;
  j["model_checksum"] = r.model_checksum;
  j["num_layers"] = r.num_layers;
  j["total_tokens"] = r.total_tokens;
  j["retained_token_layers"] = r.retained_token_layers;
  j["sequence_ratio"] = r.sequence_ratio;
  j["recomputation_ratio"] = r.recomputation_ratio;
  j["policy"] = r.policy;
  j["docs"] = json::array();
  for (const auto& d : r.docs) {
    json blocks = json::array();
    for (const auto& b : d.retained_middle) {
      blocks.push_back({{"block", b.block}, {"score", b.score}, {"normalized", b.normalized}});
    }
    j["docs"].push_back({{"doc_id", d.doc_id},
                         {"p", d.p},
                         {"layer_p", d.layer_p},
                         {"pinned_blocks", d.pinned_blocks},
                         {"retained_middle", blocks},
                         {"layer_middle", d.layer_middle},
                         {"block_tokens", d.block_tokens},
                         {"total_tokens", d.total_tokens},
                         {"middle_blocks", d.middle_blocks},
                         {"sequence_ratio", d.sequence_ratio}});
  }
  j["stable_layers"] = r.stable_layers;
  j["stable_layer_report"] = {{"scores", r.stable_report.scores},
                              {"threshold", r.stable_report.threshold},
                              {"fallback_used", r.stable_report.fallback_used},
                              {"preset", r.stable_report.preset},
                              {"beta_blocks", r.stable_report.beta_blocks}};
  j["schedule"] = {{"initial_tokens", r.schedule.initial_tokens},
                   {"local_tokens", r.schedule.local_tokens},
                   {"outlier_tokens", r.schedule.outlier_tokens},
                   {"fill_tokens", r.schedule.fill_tokens},
                   {"dropped_tokens", r.schedule.dropped_tokens},
                   {"scheduled_tokens", r.schedule.scheduled_tokens},
                   {"total_tokens", r.schedule.total_tokens}};
  j["theta"] = {{"key", summary_json(r.key_theta)}, {"value", summary_json(r.value_theta)}};
  j["query_local_cosine"] = summary_json(r.query_local_cosine);
  j["final_hidden"] = r.final_hidden;
  j["baseline_hidden"] = r.baseline_hidden;
  j["next_token"] = r.next_token;
  j["baseline_token"] = r.baseline_token;
  j["token_agreement"] = r.token_agreement;
  j["cosine_to_baseline"] = r.cosine_to_baseline;
  j["max_relative_error"] = r.max_relative_error;
  if (with_timing) j["timing_ms"] = r.timing_ms;
  return j.dump(2);
}

RunReport report_from_json(const std::string& text) {
  try {
    const auto j = json::parse(text);
    RunReport r;
    r.mode = j.at("mode").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.corpus_fingerprint = j.at("corpus_fingerprint").get<std::string>();
    r.model_checksum = j.at("model_checksum").get<std::uint64_t>();
    r.num_layers = j.at("num_layers").get<std::uint32_t>();
    r.total_tokens = j.at("total_tokens").get<std::uint64_t>();
    r.retained_token_layers = j.at("retained_token_layers").get<std::uint64_t>();
    r.sequence_ratio = j.at("sequence_ratio").get<double>();
    r.recomputation_ratio = j.at("recomputation_ratio").get<double>();
    r.policy = j.at("policy").get<std::string>();
    for (const auto& jd : j.at("docs")) {
      DocReport d;
      d.doc_id = jd.at("doc_id").get<std::string>();
      d.p = jd.at("p").get<double>();
      d.layer_p = jd.at("layer_p").get<std::vector<double>>();
      d.pinned_blocks = jd.at("pinned_blocks").get<std::vector<std::uint32_t>>();
      for (const auto& b : jd.at("retained_middle")) {
        d.retained_middle.push_back({b.at("block").get<std::uint32_t>(), b.at("score").get<double>(),
                                     b.at("normalized").get<double>()});
      }
      d.layer_middle = jd.at("layer_middle").get<std::vector<std::vector<std::uint32_t>>>();
      d.block_tokens = jd.at("block_tokens").get<std::vector<std::uint32_t>>();
      d.total_tokens = jd.at("total_tokens").get<std::uint32_t>();
      d.middle_blocks = jd.at("middle_blocks").get<std::uint32_t>();
      d.sequence_ratio = jd.at("sequence_ratio").get<double>();
      r.docs.push_back(std::move(d));
    }
    r.stable_layers = j.at("stable_layers").get<std::vector<std::uint32_t>>();
    const auto& sr = j.at("stable_layer_report");
    r.stable_report.scores = sr.at("scores").get<std::vector<std::uint32_t>>();
    r.stable_report.stable_layers = r.stable_layers;
    r.stable_report.threshold = sr.at("threshold").get<double>();
    r.stable_report.fallback_used = sr.at("fallback_used").get<bool>();
    r.stable_report.preset = sr.at("preset").get<bool>();
    r.stable_report.beta_blocks = sr.at("beta_blocks").get<std::vector<std::uint32_t>>();
    const auto& s = j.at("schedule");
    r.schedule.initial_tokens = s.at("initial_tokens").get<std::size_t>();
    r.schedule.local_tokens = s.at("local_tokens").get<std::size_t>();
    r.schedule.outlier_tokens = s.at("outlier_tokens").get<std::size_t>();
    r.schedule.fill_tokens = s.at("fill_tokens").get<std::size_t>();
    r.schedule.dropped_tokens = s.at("dropped_tokens").get<std::size_t>();
    r.schedule.scheduled_tokens = s.at("scheduled_tokens").get<std::size_t>();
    r.schedule.total_tokens = s.at("total_tokens").get<std::size_t>();
    r.schedule.recomputation_ratio = r.recomputation_ratio;
    r.key_theta = summary_from(j.at("theta").at("key"));
    r.value_theta = summary_from(j.at("theta").at("value"));
    r.query_local_cosine = summary_from(j.at("query_local_cosine"));
    r.final_hidden = j.at("final_hidden").get<std::vector<float>>();
    r.baseline_hidden = j.at("baseline_hidden").get<std::vector<float>>();
    r.next_token = j.at("next_token").get<std::int32_t>();
    r.baseline_token = j.at("baseline_token").get<std::int32_t>();
    r.token_agreement = j.at("token_agreement").get<bool>();
    r.cosine_to_baseline = j.at("cosine_to_baseline").get<double>();
    r.max_relative_error = j.at("max_relative_error").get<double>();
    if (j.contains("timing_ms")) r.timing_ms = j["timing_ms"].get<std::map<std::string, double>>();
    return r;
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed report: ") + e.what());
  }
}

void save_report(const RunReport& report, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write " + path.string());
  out << report_to_json(report) << '\n';
}

RunReport load_report(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return report_from_json(ss.str());
}

RunComparison compare_runs(const RunReport& a, const RunReport& b) {
  if (a.corpus_fingerprint != b.corpus_fingerprint || a.seed != b.seed) {
    throw ComparisonError("reports come from different corpora (" + a.corpus_fingerprint + " vs " +
                          b.corpus_fingerprint + ")");
  }
  if (a.model_checksum != b.model_checksum) throw ComparisonError("reports come from different models");
  RunComparison c;
  c.mode_a = a.mode;
  c.mode_b = b.mode;
  c.sequence_ratio_delta = b.sequence_ratio - a.sequence_ratio;
  c.recomputation_ratio_delta = b.recomputation_ratio - a.recomputation_ratio;
  c.hidden_cosine = cosine(a.final_hidden, b.final_hidden);
  c.baseline_cosine_delta = b.cosine_to_baseline - a.cosine_to_baseline;
  c.token_agreement = a.next_token == b.next_token;
  for (std::size_t i = 0; i < a.docs.size() && i < b.docs.size(); ++i) {
    c.p_deltas.push_back(b.docs[i].p - a.docs[i].p);
  }
  return c;
}

std::string comparison_to_json(const RunComparison& c) {
  json j = {{"mode_a", c.mode_a},
            {"mode_b", c.mode_b},
            {"sequence_ratio_delta", c.sequence_ratio_delta},
            {"recomputation_ratio_delta", c.recomputation_ratio_delta},
            {"hidden_cosine", c.hidden_cosine},
            {"baseline_cosine_delta", c.baseline_cosine_delta},
            {"token_agreement", c.token_agreement},
            {"p_deltas", c.p_deltas}};
  return j.dump(2);
}

LayerAnalysis analyze_layers(const PipelineConfig& config, const ModelWeights& weights, const Corpus& corpus) {
  LayerAnalysis out;
  out.doc_ids = corpus.doc_ids();
  std::vector<LayerAlphas> alphas;
  for (std::size_t i = 0; i < corpus.docs.size(); ++i) {
    const auto pre = prefill_document_with_attention(weights, out.doc_ids[i], corpus.docs[i], config.layout,
                                                     QRetention::kNone);
    out.docs.push_back(analyze_document(pre.attention, pre.cache.blocks));
    alphas.push_back(layer_alphas(out.docs.back()));
  }
  out.report = detect_stable_layers(alphas, config.stable_options);
  if (config.stable_layers != "auto") {
    out.report.stable_layers = parse_layer_preset(config.stable_layers, weights.spec.num_layers);
    out.report.preset = true;
    out.report.fallback_used = false;
  }
  return out;
}

std::string layer_analysis_to_json(const LayerAnalysis& a) {
  json j;
  j["scores"] = a.report.scores;
  j["stable_layers"] = a.report.stable_layers;
  j["threshold"] = a.report.threshold;
  j["fallback_used"] = a.report.fallback_used;
  j["preset"] = a.report.preset;
  j["beta_blocks"] = a.report.beta_blocks;
  j["docs"] = json::array();
  for (std::size_t i = 0; i < a.docs.size(); ++i) {
    json layers = json::array();
    for (const auto& layer : a.docs[i].layers) {
      json blocks = json::array();
      for (const auto& b : layer) {
        blocks.push_back({{"block", b.block},
                          {"alpha", finite_or_null(b.alpha)},
                          {"rank", b.importance_rank},
                          {"unimportance", b.unimportance_score},
                          {"representative_token", b.representative_token},
                          {"fit_failed", b.fit_failed}});
      }
      layers.push_back(std::move(blocks));
    }
    j["docs"].push_back({{"doc_id", a.doc_ids[i]}, {"layers", std::move(layers)}});
  }
  return j.dump(2);
}

std::string cache_to_json(const DocumentCache& c, bool with_tensors) {
  json j;
  j["doc_id"] = c.doc_id;
  j["generation"] = c.generation == Generation::kOld ? "old" : "new";
  j["num_heads"] = c.num_heads;
  j["head_dim"] = c.head_dim;
  j["num_layers"] = c.num_layers();
  j["layout"] = {{"block_size", c.layout.block_size},
                 {"n_initial", c.layout.n_initial},
                 {"n_local", c.layout.n_local}};
  j["num_tokens"] = c.num_tokens();
  j["tokens"] = c.token_ids;
  j["blocks"] = json::array();
  for (const auto& b : c.blocks) {
    j["blocks"].push_back({{"index", b.index},
                           {"start", b.span.start},
                           {"end", b.span.end},
                           {"role", to_string(b.role)},
                           {"has_queries", c.block_has_queries(b.index)}});
  }
  j["layers"] = json::array();
  for (const auto& l : c.layers) {
    json jl = {{"key_checksum", checksum(l.keys.data())},
               {"value_checksum", checksum(l.values.data())},
               {"has_queries", !l.queries.empty()}};
    if (with_tensors) {
      jl["keys"] = std::vector<float>(l.keys.data().begin(), l.keys.data().end());
      jl["values"] = std::vector<float>(l.values.data().begin(), l.values.data().end());
      jl["mean_keys"] = std::vector<float>(l.mean_keys.data().begin(), l.mean_keys.data().end());
    }
    j["layers"].push_back(std::move(jl));
  }
  return j.dump(2);
}

}  // namespace mckv
