// Copyright 2026 The mckv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mckv/kv_store.hpp"
#include "mckv/model.hpp"
#include "mckv/schedule.hpp"
#include "mckv/tensor.hpp"

namespace mckv {

enum class AttentionCapture : std::uint8_t { kNone, kHeadMean, kPerHead };

/// Which query rows a document prefill keeps.
enum class QRetention : std::uint8_t { kNone, kPivotal, kAll };

struct ForwardOptions {
  bool retain_queries = false;
  AttentionCapture capture = AttentionCapture::kNone;
};

/// Activations of the processed (new) tokens at one layer. Attention rows
/// cover the context followed by the new tokens; entries above the causal
/// diagonal are zero.
struct LayerActivation {
  Matrix queries;
  Matrix keys;
  Matrix values;
  std::vector<Matrix> head_attention;  // kPerHead only
  Matrix mean_attention;               // kHeadMean and kPerHead
};

struct ForwardResult {
  std::vector<LayerActivation> layers;
  Matrix hidden;  // final hidden state per new token
};

/// Causal prefill of a whole sequence from scratch.
ForwardResult prefill_full(const ModelWeights& weights, std::span<const std::int32_t> tokens,
                           const ForwardOptions& options = {});

/// Wraps prefill activations into a block-tiled document cache.
DocumentCache make_document_cache(std::string doc_id, std::span<const std::int32_t> tokens,
                                  const ModelWeights& weights, ForwardResult&& forward,
                                  const BlockLayout& layout, QRetention retention);

DocumentCache prefill_document(const ModelWeights& weights, std::string doc_id,
                               std::span<const std::int32_t> tokens,
                               const BlockLayout& layout = {},
                               QRetention retention = QRetention::kPivotal);

/// Document prefill that also returns the head-mean attention map per layer.
struct DocumentPrefill {
  DocumentCache cache;
  std::vector<Matrix> attention;
};
DocumentPrefill prefill_document_with_attention(const ModelWeights& weights, std::string doc_id,
                                                std::span<const std::int32_t> tokens,
                                                const BlockLayout& layout = {},
                                                QRetention retention = QRetention::kPivotal);

/// New tokens attend to `context` (per layer, in row order) and then causally
/// to themselves. Positions continue from `context.next_position`. Queries
/// are always returned.
ForwardResult incremental_prefill(const ModelWeights& weights, std::span<const std::int32_t> tokens,
                                  const CompositeCache& context, const ForwardOptions& options = {});

/// Recomputes scheduled K,V in an aligned composite cache. A token flagged at
/// layer n has its output computed at every layer below n, attending over the
/// composite as it stands at that layer; unflagged entries are left
/// byte-identical.
void recompute_selective(const ModelWeights& weights, CompositeCache& aligned,
                         const RecomputeSchedule& schedule, RecomputeTrace* trace = nullptr);

/// Tied-embedding logits of one hidden state.
std::vector<float> logits(const ModelWeights& weights, std::span<const float> hidden);
std::int32_t greedy_token(std::span<const float> logits) noexcept;

}  // namespace mckv
