// Copyright 2026 The mckv Authors
// SPDX-License-Identifier: Apache-2.0

#include "mckv/query_embedding.hpp"

#include <algorithm>
#include <cmath>

#include "mckv/engine.hpp"
#include "mckv/errors.hpp"

namespace mckv {

QueryVector generic_query_vector(const ModelWeights& weights,
                                 std::span<const std::int32_t> query_tokens,
                                 std::span<const DocumentCache> docs) {
  if (docs.empty()) throw InputError("generic query vector needs at least one document");
  if (query_tokens.empty()) throw InputError("empty query");
  const auto composite = build_composite_initial_local(docs);
  const auto fwd = incremental_prefill(weights, query_tokens, composite);

  QueryVector q;
  q.num_heads = weights.spec.num_heads;
  q.head_dim = weights.spec.head_dim;
  q.provenance = QueryProvenance::kGeneric;
  const auto n = static_cast<double>(query_tokens.size());
  for (const auto& layer : fwd.layers) {
    std::vector<double> acc(layer.queries.cols(), 0.0);
    for (std::size_t r = 0; r < layer.queries.rows(); ++r) {
      const auto row = layer.queries.row(r);
      for (std::size_t c = 0; c < acc.size(); ++c) acc[c] += row[c];
    }
    std::vector<float> mean(acc.size());
    for (std::size_t c = 0; c < acc.size(); ++c) mean[c] = static_cast<float>(acc[c] / n);
    q.layers.push_back(std::move(mean));
  }
  return q;
}

LocalQCache local_q_cache(const DocumentCache& doc) {
  LocalQCache out;
  out.doc_id = doc.doc_id;
  out.num_heads = doc.num_heads;
  out.head_dim = doc.head_dim;
  auto source = doc.blocks_with_role(BlockRole::kLocal);
  if (source.empty()) {
    source = doc.blocks_with_role(BlockRole::kInitial);
    out.fell_back_to_initial = true;
  }
  if (source.empty()) throw StateError("document " + doc.doc_id + " has no pivotal blocks");
  for (auto b : source) {
    if (!doc.block_has_queries(b)) {
      throw StateError("document " + doc.doc_id + " block " + std::to_string(b) +
                       " was prefilled without Q retention");
    }
  }
  for (const auto& kv : doc.layers) {
    std::vector<double> acc(doc.hidden_dim(), 0.0);
    std::size_t rows = 0;
    for (auto b : source) {
      const auto& span = doc.blocks[b].span;
      for (auto p = span.start; p < span.end; ++p) {
        const auto row = kv.queries.row(p);
        for (std::size_t c = 0; c < acc.size(); ++c) acc[c] += row[c];
        ++rows;
      }
    }
    std::vector<float> mean(acc.size());
    for (std::size_t c = 0; c < acc.size(); ++c) {
      mean[c] = static_cast<float>(acc[c] / static_cast<double>(rows));
    }
    out.layers.push_back(std::move(mean));
  }
  return out;
}

QueryVector personalize(const QueryVector& q_que, std::span<const LocalQCache> locals,
                        std::string_view target_doc, PersonalizeDetail* detail) {
  if (locals.empty()) throw InputError("personalize needs at least one local Q cache");
  const auto target = std::find_if(locals.begin(), locals.end(),
                                   [&](const LocalQCache& l) { return l.doc_id == target_doc; });
  if (target == locals.end()) {
    throw InputError("target document '" + std::string(target_doc) + "' not among local caches");
  }
  for (const auto& l : locals) {
    if (l.layers.size() != q_que.layers.size() || l.num_heads != q_que.num_heads ||
        l.head_dim != q_que.head_dim) {
      throw InputError("local Q cache shape does not match the query vector");
    }
  }
  QueryVector out = q_que;
  out.provenance = QueryProvenance::kPersonalized;
  out.doc_id = std::string(target_doc);
  const std::size_t d = locals.size();
  if (d == 1) return out;
  const double norm = 1.0 / static_cast<double>(d - 1);
  const std::uint32_t hd = q_que.head_dim;

  for (std::size_t j = 0; j < d; ++j) {
    if (&locals[j] == &*target) continue;
    for (std::size_t l = 0; l < q_que.layers.size(); ++l) {
      for (std::uint32_t h = 0; h < q_que.num_heads; ++h) {
        const auto qh = q_que.head(static_cast<std::uint32_t>(l), h);
        const auto loc = std::span<const float>(locals[j].layers[l]).subspan(std::size_t{h} * hd, hd);
        const double cos = cosine(qh, loc);
        const double coef = std::abs(cos) * norm;
        if (detail) {
          detail->cosines.push_back(cos);
          detail->coefficients.push_back(coef);
        }
        auto dst = std::span<float>(out.layers[l]).subspan(std::size_t{h} * hd, hd);
        for (std::uint32_t c = 0; c < hd; ++c) {
          dst[c] = static_cast<float>(dst[c] + coef * loc[c]);
        }
      }
    }
  }
  return out;
}

}  // namespace mckv
