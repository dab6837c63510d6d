// Copyright 2026 The mckv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mckv/block_analysis.hpp"
#include "mckv/kv_store.hpp"
#include "mckv/query_embedding.hpp"

namespace mckv {

/// Inner products of the personalized query with the anchor, max and min
/// block keys at one stable layer, averaged over heads.
struct LayerAnchorScores {
  std::uint32_t layer = 0;
  float s_anc = 0.0f;
  float s_max = 0.0f;
  float s_min = 0.0f;
  std::uint32_t max_block = 0;
  std::uint32_t min_block = 0;
};

struct AnchorScores {
  std::string doc_id;
  bool empty = true;  // document has no middle blocks
  std::vector<LayerAnchorScores> layers;
};

/// `attrs[layer]` holds the block attributes of every block at that layer.
AnchorScores anchor_scores(const QueryVector& q_hat, const DocumentCache& doc,
                           std::span<const std::vector<BlockAttribute>> attrs,
                           std::span<const std::uint32_t> stable_layers);

/// Keep ratio used when the anchor score falls at or below s_min.
enum class AnchorBelowMin : std::uint8_t { kZero, kOne };

/// Per-layer keep ratio: (s_max - s_anc) / (s_max - s_min) when
/// s_anc lies in (s_min, s_max], otherwise 0.
double layer_p(double s_anc, double s_max, double s_min,
               AnchorBelowMin below_min = AnchorBelowMin::kZero) noexcept;

/// Mean of the per-layer ratios over the stable layers.
double doc_p(std::span<const double> per_layer);

struct ScoredBlock {
  std::uint32_t block = 0;
  double score = 0.0;
  double normalized = 0.0;  // set by cross_context_filter
};

/// Per-document retention decision.
struct SelectionPlan {
  std::string doc_id;
  std::uint32_t doc_index = 0;
  std::uint32_t num_layers = 0;
  double p = 0.0;
  std::vector<double> layer_p;                  // per stable layer
  std::vector<std::uint32_t> pinned_blocks;     // initial and local, ascending
  std::vector<ScoredBlock> middle_scores;       // every middle block, ascending
  std::vector<ScoredBlock> retained_middle;     // ascending block index
  /// Optional per-layer middle sets; empty means retained_middle at every layer.
  std::vector<std::vector<std::uint32_t>> layer_middle;
  std::vector<std::uint32_t> block_tokens;      // token count per block
  std::uint32_t total_tokens = 0;
  double sequence_ratio = 0.0;

  std::uint32_t middle_block_count() const noexcept {
    return static_cast<std::uint32_t>(middle_scores.size());
  }
  /// Pinned plus middle blocks kept at `layer`, ascending.
  std::vector<std::uint32_t> retained_blocks(std::uint32_t layer) const;
  /// Kept tokens summed over layers.
  std::uint64_t retained_token_layers() const;
  void refresh_sequence_ratio();
};

/// Head-and-layer mean of <q_hat, mean key> for each middle block over
/// `stable_layers`; keeps the top ceil(p * M), earlier block on ties.
SelectionPlan select_blocks(const QueryVector& q_hat, const DocumentCache& doc, double p,
                            std::span<const std::uint32_t> stable_layers,
                            std::uint32_t doc_index = 0);

/// Re-picks the same number of middle blocks independently at every layer
/// from that layer's scores.
void specialize_layers(SelectionPlan& plan, const QueryVector& q_hat, const DocumentCache& doc);

/// Min-max normalises retained scores per context, pools them and keeps
/// the global top floor(T / D). Pinned blocks are never touched.
std::vector<SelectionPlan> cross_context_filter(std::vector<SelectionPlan> plans);

}  // namespace mckv
