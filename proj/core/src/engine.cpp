// Copyright 2026 The mckv Authors
// SPDX-License-Identifier: Apache-2.0

#include "mckv/engine.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

#include "mckv/errors.hpp"

namespace mckv {
namespace {

// out = x * W for a row vector x.
void project(std::span<const float> x, const Matrix& w, std::span<float> out) {
  std::fill(out.begin(), out.end(), 0.0f);
  for (std::size_t k = 0; k < x.size(); ++k) {
    const float xk = x[k];
    const auto wk = w.row(k);
    for (std::size_t j = 0; j < out.size(); ++j) out[j] += xk * wk[j];
  }
}

void embed(const ModelWeights& w, std::int32_t token, std::uint32_t position,
           std::span<float> out) {
  if (token < 0 || static_cast<std::uint32_t>(token) >= w.spec.vocab_size) {
    throw InputError("token id " + std::to_string(token) + " outside vocabulary of " +
                     std::to_string(w.spec.vocab_size));
  }
  const auto e = w.embedding.row(static_cast<std::size_t>(token));
  std::copy(e.begin(), e.end(), out.begin());
  if (w.spec.positional_mode == PositionalMode::kAbsoluteLearned) {
    if (position >= w.spec.max_positions) {
      throw InputError("position " + std::to_string(position) + " exceeds max_positions");
    }
    const auto p = w.positions.row(position);
    for (std::size_t c = 0; c < out.size(); ++c) out[c] += p[c];
  }
}

// Multi-head softmax attention of one query row over the first `visible`
// rows of keys/values. `probs`, when non-null, receives per-head weights
// laid out head-major (heads x visible).
void attend(std::span<const float> query, const Matrix& keys, const Matrix& values,
            std::size_t visible, std::uint32_t heads, std::uint32_t head_dim,
            std::span<float> out, std::vector<float>& scratch, float* probs) {
  const float scale = 1.0f / std::sqrt(static_cast<float>(head_dim));
  const std::size_t hidden = keys.cols();
  scratch.resize(static_cast<std::size_t>(heads) * (visible + 1));
  float* totals = scratch.data() + static_cast<std::size_t>(heads) * visible;
  std::fill(out.begin(), out.end(), 0.0f);
  const float* kdata = keys.data().data();
  for (std::size_t j = 0; j < visible; ++j) {
    const float* krow = kdata + j * hidden;
    for (std::uint32_t h = 0; h < heads; ++h) {
      const std::size_t off = static_cast<std::size_t>(h) * head_dim;
      float acc = 0.0f;
      for (std::uint32_t c = 0; c < head_dim; ++c) acc += query[off + c] * krow[off + c];
      scratch[h * visible + j] = acc * scale;
    }
  }
  for (std::uint32_t h = 0; h < heads; ++h) {
    float* s = scratch.data() + h * visible;
    const float max_score = *std::max_element(s, s + visible);
    float total = 0.0f;
    for (std::size_t j = 0; j < visible; ++j) {
      s[j] = std::exp(s[j] - max_score);
      total += s[j];
    }
    totals[h] = total;
  }
  const float* vdata = values.data().data();
  for (std::size_t j = 0; j < visible; ++j) {
    const float* vrow = vdata + j * hidden;
    for (std::uint32_t h = 0; h < heads; ++h) {
      const float p = scratch[h * visible + j] / totals[h];
      if (probs) probs[h * visible + j] = p;
      const std::size_t off = static_cast<std::size_t>(h) * head_dim;
      for (std::uint32_t c = 0; c < head_dim; ++c) out[off + c] += p * vrow[off + c];
    }
  }
}

// Shared forward over new tokens given per-layer context K/V.
ForwardResult forward(const ModelWeights& w, std::span<const std::int32_t> tokens,
                      const CompositeCache* context, const ForwardOptions& opts,
                      bool keep_queries) {
  const auto& spec = w.spec;
  const std::size_t n = tokens.size();
  const std::size_t hidden = spec.hidden_dim;
  const std::uint32_t first_position = context ? context->next_position : 0;

  Matrix h(n, hidden);
  for (std::size_t i = 0; i < n; ++i) {
    embed(w, tokens[i], first_position + static_cast<std::uint32_t>(i), h.row(i));
  }

  ForwardResult result;
  result.layers.resize(spec.num_layers);
  std::vector<float> scratch;
  std::vector<float> probs;
  std::vector<float> attn_out(hidden), proj_out(hidden);

  for (std::uint32_t l = 0; l < spec.num_layers; ++l) {
    const auto& lw = w.layers[l];
    auto& act = result.layers[l];
    const std::size_t m = context ? context->layers[l].rows.size() : 0;
    const std::size_t total = m + n;

    Matrix q(n, hidden);
    Matrix keys(total, hidden);
    Matrix values(total, hidden);
    if (context) {
      const auto& cl = context->layers[l];
      std::copy(cl.keys.data().begin(), cl.keys.data().end(), keys.data().begin());
      std::copy(cl.values.data().begin(), cl.values.data().end(), values.data().begin());
    }
    for (std::size_t i = 0; i < n; ++i) {
      project(h.row(i), lw.query, q.row(i));
      project(h.row(i), lw.key, keys.row(m + i));
      project(h.row(i), lw.value, values.row(m + i));
    }

    const bool capture = opts.capture != AttentionCapture::kNone;
    if (capture) act.mean_attention = Matrix(n, total);
    if (opts.capture == AttentionCapture::kPerHead) {
      act.head_attention.assign(spec.num_heads, Matrix(n, total));
    }
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t visible = m + i + 1;
      if (capture) probs.assign(static_cast<std::size_t>(spec.num_heads) * visible, 0.0f);
      attend(q.row(i), keys, values, visible, spec.num_heads, spec.head_dim, attn_out, scratch,
             capture ? probs.data() : nullptr);
      if (capture) {
        auto mean_row = act.mean_attention.row(i);
        for (std::uint32_t hd = 0; hd < spec.num_heads; ++hd) {
          for (std::size_t j = 0; j < visible; ++j) {
            const float p = probs[hd * visible + j];
            mean_row[j] += p / static_cast<float>(spec.num_heads);
            if (!act.head_attention.empty()) act.head_attention[hd](i, j) = p;
          }
        }
      }
      project(attn_out, lw.output, proj_out);
      auto hr = h.row(i);
      for (std::size_t c = 0; c < hidden; ++c) hr[c] += proj_out[c];
    }

    if (keep_queries) act.queries = std::move(q);
    act.keys = Matrix(n, hidden);
    act.values = Matrix(n, hidden);
    std::copy(keys.data().begin() + m * hidden, keys.data().end(), act.keys.data().begin());
    std::copy(values.data().begin() + m * hidden, values.data().end(), act.values.data().begin());
  }
  result.hidden = std::move(h);
  return result;
}

}  // namespace

ForwardResult prefill_full(const ModelWeights& weights, std::span<const std::int32_t> tokens,
                           const ForwardOptions& options) {
  if (tokens.empty()) throw InputError("prefill needs at least one token");
  return forward(weights, tokens, nullptr, options, options.retain_queries);
}

DocumentCache make_document_cache(std::string doc_id, std::span<const std::int32_t> tokens,
                                  const ModelWeights& weights, ForwardResult&& fwd,
                                  const BlockLayout& layout, QRetention retention) {
  DocumentCache c;
  c.doc_id = std::move(doc_id);
  c.token_ids.assign(tokens.begin(), tokens.end());
  c.num_heads = weights.spec.num_heads;
  c.head_dim = weights.spec.head_dim;
  c.layout = layout;
  c.blocks = tile_blocks(c.num_tokens(), layout);
  c.query_retained.assign(c.num_tokens(), 0);
  for (const auto& b : c.blocks) {
    const bool keep = retention == QRetention::kAll ||
                      (retention == QRetention::kPivotal && b.role != BlockRole::kMiddle);
    if (!keep) continue;
    for (auto p = b.span.start; p < b.span.end; ++p) c.query_retained[p] = 1;
  }
  c.layers.resize(fwd.layers.size());
  for (std::size_t l = 0; l < fwd.layers.size(); ++l) {
    auto& src = fwd.layers[l];
    auto& kv = c.layers[l];
    kv.keys = std::move(src.keys);
    kv.values = std::move(src.values);
    if (retention != QRetention::kNone && !src.queries.empty()) {
      kv.queries = std::move(src.queries);
      for (std::size_t r = 0; r < kv.queries.rows(); ++r) {
        if (!c.query_retained[r]) {
          auto row = kv.queries.row(r);
          std::fill(row.begin(), row.end(), 0.0f);
        }
      }
    }
    kv.mean_keys = block_mean_keys(kv.keys, c.blocks);
  }
  if (retention == QRetention::kNone) std::fill(c.query_retained.begin(), c.query_retained.end(), 0);
  return c;
}

DocumentCache prefill_document(const ModelWeights& weights, std::string doc_id,
                               std::span<const std::int32_t> tokens, const BlockLayout& layout,
                               QRetention retention) {
  ForwardOptions opts;
  opts.retain_queries = retention != QRetention::kNone;
  auto fwd = prefill_full(weights, tokens, opts);
  return make_document_cache(std::move(doc_id), tokens, weights, std::move(fwd), layout, retention);
}

DocumentPrefill prefill_document_with_attention(const ModelWeights& weights, std::string doc_id,
                                                std::span<const std::int32_t> tokens,
                                                const BlockLayout& layout, QRetention retention) {
  ForwardOptions opts;
  opts.retain_queries = retention != QRetention::kNone;
  opts.capture = AttentionCapture::kHeadMean;
  auto fwd = prefill_full(weights, tokens, opts);
  DocumentPrefill out;
  for (auto& l : fwd.layers) out.attention.push_back(std::move(l.mean_attention));
  out.cache = make_document_cache(std::move(doc_id), tokens, weights, std::move(fwd), layout,
                                  retention);
  return out;
}

ForwardResult incremental_prefill(const ModelWeights& weights, std::span<const std::int32_t> tokens,
                                  const CompositeCache& context, const ForwardOptions& options) {
  if (tokens.empty()) throw InputError("incremental prefill needs at least one token");
  if (context.num_layers() != weights.spec.num_layers) {
    throw CacheError("context cache has " + std::to_string(context.num_layers()) +
                     " layers, model has " + std::to_string(weights.spec.num_layers));
  }
  for (const auto& l : context.layers) {
    if (l.keys.rows() != l.rows.size() || l.values.rows() != l.rows.size() ||
        (l.keys.rows() > 0 && l.keys.cols() != weights.spec.hidden_dim)) {
      throw CacheError("context cache tensors do not match the model");
    }
  }
  return forward(weights, tokens, &context, options, true);
}

void recompute_selective(const ModelWeights& w, CompositeCache& cache,
                         const RecomputeSchedule& schedule, RecomputeTrace* trace) {
  const auto& spec = w.spec;
  const std::uint32_t n_layers = spec.num_layers;
  if (cache.num_layers() != n_layers) throw CacheError("aligned cache layer count mismatch");
  if (!cache.is_aligned()) throw CacheError("recompute needs a layer-aligned cache");
  if (!schedule.layers.empty() && schedule.layers.size() != n_layers) {
    throw ScheduleError("schedule layer count does not match the model");
  }
  const std::size_t hidden = spec.hidden_dim;
  const auto& rows = cache.layers.front().rows;
  const std::size_t n_rows = rows.size();

  std::map<TokenKey, std::size_t> row_of;
  for (std::size_t r = 0; r < n_rows; ++r) row_of[{rows[r].doc, rows[r].offset}] = r;

  std::vector<std::vector<std::uint8_t>> flagged(n_layers, std::vector<std::uint8_t>(n_rows, 0));
  std::vector<int> top(n_rows, -1);
  for (std::size_t l = 0; l < schedule.layers.size(); ++l) {
    for (const auto& t : schedule.layers[l]) {
      auto it = row_of.find(t.key);
      if (it == row_of.end()) {
        throw ScheduleError("schedule references doc " + std::to_string(t.key.doc) +
                            " position " + std::to_string(t.key.offset) +
                            " absent from the aligned cache");
      }
      flagged[l][it->second] = 1;
      top[it->second] = std::max(top[it->second], static_cast<int>(l));
    }
  }

  if (trace) {
    trace->rows.clear();
    for (const auto& r : rows) trace->rows.push_back({r.doc, r.offset});
    trace->cells.assign(n_layers, std::vector<TraceCell>(n_rows));
    for (std::uint32_t l = 0; l < n_layers; ++l) {
      for (std::size_t r = 0; r < n_rows; ++r) {
        trace->cells[l][r].padding = cache.layers[l].rows[r].padding;
      }
    }
  }

  std::vector<std::vector<float>> h(n_rows);
  for (std::size_t r = 0; r < n_rows; ++r) {
    if (top[r] < 0) continue;
    h[r].resize(hidden);
    embed(w, rows[r].token_id, rows[r].position, h[r]);
  }

  std::vector<float> q(hidden), attn_out(hidden), proj_out(hidden), scratch;
  for (std::uint32_t l = 0; l < n_layers; ++l) {
    const auto& lw = w.layers[l];
    auto& layer = cache.layers[l];

    // K,V of flagged rows first, so later outputs at this layer see them.
    std::vector<std::size_t> targets;
    for (std::size_t r = 0; r < n_rows; ++r) {
      if (flagged[l][r]) targets.push_back(r);
    }
    Matrix new_keys(targets.size(), hidden);
    Matrix new_values(targets.size(), hidden);
    for (std::size_t i = 0; i < targets.size(); ++i) {
      project(h[targets[i]], lw.key, new_keys.row(i));
      project(h[targets[i]], lw.value, new_values.row(i));
    }
    if (schedule.policy == UpdatePolicy::kFusion) {
      // Groups of target indices sharing one fusion weight.
      std::vector<std::vector<std::size_t>> groups;
      if (schedule.granularity == FusionGranularity::kToken) {
        for (std::size_t i = 0; i < targets.size(); ++i) groups.push_back({i});
      } else {
        std::map<std::pair<std::uint32_t, std::uint32_t>, std::size_t> group_of;
        for (std::size_t i = 0; i < targets.size(); ++i) {
          const auto& ref = rows[targets[i]];
          auto [it, inserted] = group_of.try_emplace({ref.doc, ref.block}, groups.size());
          if (inserted) groups.emplace_back();
          groups[it->second].push_back(i);
        }
      }
      auto blend = [&](Matrix& fresh, const Matrix& old, std::vector<double>* thetas) {
        for (const auto& g : groups) {
          std::vector<float> f, o;
          for (auto i : g) {
            const auto fr = fresh.row(i);
            const auto orow = old.row(targets[i]);
            f.insert(f.end(), fr.begin(), fr.end());
            o.insert(o.end(), orow.begin(), orow.end());
          }
          const float theta = fusion_theta(f, o);
          if (thetas) thetas->push_back(theta);
          for (auto i : g) fuse(old.row(targets[i]), fresh.row(i), theta);
        }
      };
      blend(new_keys, layer.keys, trace ? &trace->key_thetas : nullptr);
      blend(new_values, layer.values, trace ? &trace->value_thetas : nullptr);
    }
    for (std::size_t i = 0; i < targets.size(); ++i) {
      std::copy(new_keys.row(i).begin(), new_keys.row(i).end(), layer.keys.row(targets[i]).begin());
      std::copy(new_values.row(i).begin(), new_values.row(i).end(),
                layer.values.row(targets[i]).begin());
      if (trace) trace->cells[l][targets[i]].kv_recomputed = true;
    }

    // Outputs for rows that are flagged somewhere above this layer.
    for (std::size_t r = 0; r < n_rows; ++r) {
      if (top[r] <= static_cast<int>(l)) continue;
      project(h[r], lw.query, q);
      attend(q, layer.keys, layer.values, r + 1, spec.num_heads, spec.head_dim, attn_out, scratch,
             nullptr);
      project(attn_out, lw.output, proj_out);
      for (std::size_t c = 0; c < hidden; ++c) h[r][c] += proj_out[c];
      if (trace) trace->cells[l][r].output_computed = true;
    }
  }
}

std::vector<float> logits(const ModelWeights& weights, std::span<const float> hidden) {
  std::vector<float> out(weights.spec.vocab_size);
  for (std::size_t t = 0; t < out.size(); ++t) out[t] = dot(hidden, weights.embedding.row(t));
  return out;
}

std::int32_t greedy_token(std::span<const float> logits) noexcept {
  if (logits.empty()) return -1;
  return static_cast<std::int32_t>(std::max_element(logits.begin(), logits.end()) -
                                   logits.begin());
}

}  // namespace mckv
