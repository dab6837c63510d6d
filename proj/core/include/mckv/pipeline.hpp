// Copyright 2026 The mckv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "mckv/block_analysis.hpp"
#include "mckv/corpus.hpp"
#include "mckv/errors.hpp"
#include "mckv/kv_store.hpp"
#include "mckv/model.hpp"
#include "mckv/recompute.hpp"
#include "mckv/selection.hpp"

namespace mckv {

enum class RunMode : std::uint8_t { kSamkv, kFullRecompute, kReuseOnly, kInitialLocalOnly };

const char* to_string(RunMode mode) noexcept;
RunMode parse_run_mode(std::string_view text);
UpdatePolicy parse_policy(std::string_view text);

struct PipelineConfig {
  RunMode mode = RunMode::kSamkv;
  ModelSpec model{.positional_mode = PositionalMode::kAbsoluteLearned, .seed = 7};
  /// Load weights from this file instead of building them from `model`.
  std::string weights_path;
  CorpusParams corpus;
  /// Load the corpus from this JSON file instead of generating it.
  std::string corpus_path;
  BlockLayout layout;
  ScheduleOptions schedule;
  /// "auto" or a preset accepted by parse_layer_preset.
  std::string stable_layers = "auto";
  StableLayerOptions stable_options;
  /// Skips scoring and the cross-context filter and keeps this share of
  /// middle blocks in every document.
  std::optional<double> force_p;
  bool cross_context_filter = true;
  AnchorBelowMin anchor_below_min = AnchorBelowMin::kZero;
  bool layer_specific = false;
  bool personalize = true;
  std::string report_path;
  /// When set, every document cache is written here as <doc_id>.mckv.
  std::string cache_dir;

  /// Applies one `key = value` setting; throws ConfigError on unknown keys.
  void set(std::string_view key, std::string_view value);
  void validate() const;
};

/// Parses `key = value` lines; `#` starts a comment.
PipelineConfig parse_config(std::string_view text, PipelineConfig base = {});
PipelineConfig load_config(const std::filesystem::path& path, PipelineConfig base = {});

/// An error raised inside a pipeline stage, tagged with that stage.
class StageError : public Error {
 public:
  StageError(std::string stage, const Error& cause);
  const std::string& stage() const noexcept { return stage_; }
  const std::string& cause_kind() const noexcept { return cause_kind_; }

 private:
  std::string stage_;
  std::string cause_kind_;
};

struct Summary {
  std::size_t count = 0;
  double mean = 0.0;
  double min = 0.0;
  double max = 0.0;
};
Summary summarize(const std::vector<double>& values);

struct DocReport {
  std::string doc_id;
  double p = 0.0;
  std::vector<double> layer_p;
  std::vector<std::uint32_t> pinned_blocks;
  std::vector<ScoredBlock> retained_middle;
  std::vector<std::vector<std::uint32_t>> layer_middle;
  std::vector<std::uint32_t> block_tokens;
  std::uint32_t total_tokens = 0;
  std::uint32_t middle_blocks = 0;
  double sequence_ratio = 0.0;
};

struct RunReport {
  std::string mode;
  std::uint64_t seed = 0;
  std::string corpus_fingerprint;
  std::uint64_t model_checksum = 0;
  std::uint32_t num_layers = 0;
  std::uint64_t total_tokens = 0;
  std::uint64_t retained_token_layers = 0;
  double sequence_ratio = 0.0;
  double recomputation_ratio = 0.0;
  std::vector<DocReport> docs;
  std::vector<std::uint32_t> stable_layers;
  StableLayerReport stable_report;
  ScheduleStats schedule;
  std::string policy;
  Summary key_theta;
  Summary value_theta;
  Summary query_local_cosine;
  std::vector<float> final_hidden;
  std::vector<float> baseline_hidden;
  std::int32_t next_token = -1;
  std::int32_t baseline_token = -1;
  bool token_agreement = false;
  double cosine_to_baseline = 0.0;
  double max_relative_error = 0.0;
  std::map<std::string, double> timing_ms;
};

/// Runs the configured mode and, for every mode, the full-recompute baseline.
RunReport run_pipeline(const PipelineConfig& config);
RunReport run_pipeline(const PipelineConfig& config, const ModelWeights& weights, const Corpus& corpus);

/// `with_timing = false` drops the wall-clock object, leaving a report that
/// is byte-identical across runs with the same configuration.
std::string report_to_json(const RunReport& report, bool with_timing = true);
RunReport report_from_json(const std::string& text);
void save_report(const RunReport& report, const std::filesystem::path& path);
RunReport load_report(const std::filesystem::path& path);

struct RunComparison {
  std::string mode_a;
  std::string mode_b;
  double sequence_ratio_delta = 0.0;       // b - a
  double recomputation_ratio_delta = 0.0;  // b - a
  double hidden_cosine = 0.0;              // between the two final hidden states
  double baseline_cosine_delta = 0.0;      // b - a
  bool token_agreement = false;
  std::vector<double> p_deltas;            // per document, b - a
};

/// Throws ComparisonError when the reports come from different corpora.
RunComparison compare_runs(const RunReport& a, const RunReport& b);
std::string comparison_to_json(const RunComparison& c);

/// Prefills and analyses every corpus document and detects the stable layers.
struct LayerAnalysis {
  StableLayerReport report;
  std::vector<std::string> doc_ids;
  std::vector<DocumentAnalysis> docs;
};
LayerAnalysis analyze_layers(const PipelineConfig& config, const ModelWeights& weights, const Corpus& corpus);
std::string layer_analysis_to_json(const LayerAnalysis& analysis);

ModelWeights load_or_build_model(const PipelineConfig& config);
Corpus load_or_generate_corpus(const PipelineConfig& config);

std::string cache_to_json(const DocumentCache& cache, bool with_tensors = false);

}  // namespace mckv
