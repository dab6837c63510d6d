// Copyright 2026 The mckv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mckv/block_analysis.hpp"
#include "mckv/engine.hpp"
#include "mckv/kv_store.hpp"
#include "mckv/schedule.hpp"
#include "mckv/selection.hpp"

namespace mckv {

struct ScheduleOptions {
  /// Upper bound on scheduled tokens as a fraction of all original tokens.
  double budget = 0.15;
  UpdatePolicy policy = UpdatePolicy::kOverwrite;
  FusionGranularity granularity = FusionGranularity::kToken;
  /// Top up the budget with the remaining retained middle tokens, ordered by
  /// sustained attention, after the alpha outliers.
  bool fill_budget = true;
  /// Schedule each token only at the layers where it is needed instead of
  /// the union over layers.
  bool per_layer = false;
};

struct ScheduleStats {
  std::size_t initial_tokens = 0;
  std::size_t local_tokens = 0;
  std::size_t outlier_tokens = 0;   // alpha outliers kept
  std::size_t fill_tokens = 0;      // budget top-up kept
  std::size_t dropped_tokens = 0;   // high-attention candidates cut by the budget
  std::size_t scheduled_tokens = 0;
  std::size_t total_tokens = 0;
  double recomputation_ratio = 0.0;
};

/// `docs` and `analyses` are indexed by SelectionPlan::doc_index.
RecomputeSchedule build_schedule(std::span<const SelectionPlan> plans,
                                 std::span<const DocumentCache> docs,
                                 std::span<const DocumentAnalysis> analyses,
                                 std::span<const std::uint32_t> stable_layers,
                                 const ScheduleOptions& options, ScheduleStats* stats = nullptr);

/// Exposes the union of each document's retained blocks at every layer;
/// blocks a layer did not keep become padding carrying the prefilled K,V.
CompositeCache align_layers(std::span<const SelectionPlan> plans, std::span<const DocumentCache> docs);

/// recompute_selective followed by strip_padding.
CompositeCache run_recompute(CompositeCache aligned, const RecomputeSchedule& schedule,
                             const ModelWeights& weights, RecomputeTrace* trace = nullptr);

struct AnswerResult {
  std::vector<float> hidden;  // final-layer hidden state of the last query token
  std::vector<float> logits;
  std::int32_t token = -1;
};

/// Incremental prefill of the query over the rebuilt cache, greedy pick.
AnswerResult final_answer_prefill(const ModelWeights& weights, std::span<const std::int32_t> query_tokens,
                                  const CompositeCache& cache);

struct TraceViolations {
  std::size_t rule1 = 0;  // scheduled (token, n) lacking an output at some layer below n
  std::size_t rule2 = 0;  // unscheduled (token, layer) whose K,V were recomputed
};

TraceViolations check_trace(const RecomputeTrace& trace, const RecomputeSchedule& schedule);

std::string trace_to_json(const RecomputeTrace& trace);

}  // namespace mckv
