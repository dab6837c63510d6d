// Copyright 2026 The mckv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mckv/kv_store.hpp"
#include "mckv/model.hpp"

namespace mckv {

enum class QueryProvenance : std::uint8_t { kGeneric, kPersonalized };

/// One pooled query per layer; each layer vector holds the heads back to back.
struct QueryVector {
  std::uint32_t num_heads = 0;
  std::uint32_t head_dim = 0;
  std::vector<std::vector<float>> layers;
  QueryProvenance provenance = QueryProvenance::kGeneric;
  std::string doc_id;  // set for personalized vectors

  std::span<const float> head(std::uint32_t layer, std::uint32_t h) const {
    return std::span<const float>(layers[layer]).subspan(std::size_t{h} * head_dim, head_dim);
  }
};

/// Mean of the document's retained query rows over its local blocks.
struct LocalQCache {
  std::string doc_id;
  std::uint32_t num_heads = 0;
  std::uint32_t head_dim = 0;
  std::vector<std::vector<float>> layers;
  bool fell_back_to_initial = false;
};

/// Mean pooling of the query tokens' Q rows after an incremental prefill over
/// the initial+local composite of `docs`.
QueryVector generic_query_vector(const ModelWeights& weights, std::span<const std::int32_t> query_tokens,
                                 std::span<const DocumentCache> docs);

LocalQCache local_q_cache(const DocumentCache& doc);

struct PersonalizeDetail {
  /// Raw cosine per (other document, layer, head), flattened in that order.
  std::vector<double> cosines;
  /// Coefficient |cos|/(D-1) applied to each term, same order.
  std::vector<double> coefficients;
};

/// Adds the |cos|-weighted local queries of every other document to q_que,
/// per layer and head, scaled by 1/(D-1). D = 1 leaves q_que unchanged.
QueryVector personalize(const QueryVector& q_que, std::span<const LocalQCache> locals,
                        std::string_view target_doc, PersonalizeDetail* detail = nullptr);

}  // namespace mckv
