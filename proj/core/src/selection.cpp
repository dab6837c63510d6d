// Copyright 2026 The mckv Authors
// SPDX-License-Identifier: Apache-2.0

#include "mckv/selection.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mckv/errors.hpp"

namespace mckv {
namespace {

double head_mean_dot(const QueryVector& q, std::uint32_t layer, std::span<const float> key) {
  double acc = 0.0;
  for (std::uint32_t h = 0; h < q.num_heads; ++h) {
    const auto qh = q.head(layer, h);
    const auto kh = key.subspan(std::size_t{h} * q.head_dim, q.head_dim);
    double d = 0.0;
    for (std::uint32_t c = 0; c < q.head_dim; ++c) d += static_cast<double>(qh[c]) * kh[c];
    acc += d;
  }
  return acc / q.num_heads;
}

void check_stable(std::span<const std::uint32_t> stable, std::uint32_t num_layers) {
  if (stable.empty()) throw ConfigError("stable layer set is empty");
  for (auto l : stable) {
    if (l >= num_layers) throw ConfigError("stable layer " + std::to_string(l) + " out of range");
  }
}

// Top `k` of `scored` by score (desc), earlier block first on ties.
std::vector<ScoredBlock> top_k(std::vector<ScoredBlock> scored, std::size_t k) {
  std::stable_sort(scored.begin(), scored.end(),
                   [](const ScoredBlock& a, const ScoredBlock& b) { return a.score > b.score; });
  scored.resize(std::min(k, scored.size()));
  std::sort(scored.begin(), scored.end(),
            [](const ScoredBlock& a, const ScoredBlock& b) { return a.block < b.block; });
  return scored;
}

}  // namespace

AnchorScores anchor_scores(const QueryVector& q_hat, const DocumentCache& doc,
                           std::span<const std::vector<BlockAttribute>> attrs,
                           std::span<const std::uint32_t> stable_layers) {
  check_stable(stable_layers, doc.num_layers());
  if (q_hat.layers.size() != doc.num_layers()) throw InputError("query/doc layer mismatch");
  if (attrs.size() != doc.num_layers()) throw InputError("block attributes needed per layer");
  AnchorScores out;
  out.doc_id = doc.doc_id;
  const auto middle = doc.blocks_with_role(BlockRole::kMiddle);
  if (middle.empty()) return out;
  out.empty = false;

  std::vector<std::uint32_t> pivotal = doc.blocks_with_role(BlockRole::kInitial);
  for (auto b : doc.blocks_with_role(BlockRole::kLocal)) pivotal.push_back(b);

  for (auto l : stable_layers) {
    const auto& layer_attrs = attrs[l];
    if (layer_attrs.size() != doc.blocks.size()) throw InputError("attribute count mismatch");
    const auto& mk = doc.layers[l].mean_keys;

    std::vector<double> anchor(doc.hidden_dim(), 0.0);
    for (auto b : pivotal) {
      const auto row = mk.row(b);
      for (std::size_t c = 0; c < anchor.size(); ++c) anchor[c] += row[c];
    }
    std::vector<float> anchor_key(anchor.size());
    for (std::size_t c = 0; c < anchor.size(); ++c) {
      anchor_key[c] = static_cast<float>(anchor[c] / static_cast<double>(pivotal.size()));
    }

    std::uint32_t max_block = middle.front();
    std::uint32_t min_block = middle.front();
    for (auto b : middle) {
      if (layer_attrs[b].alpha < layer_attrs[max_block].alpha) max_block = b;
      if (layer_attrs[b].unimportance_score < layer_attrs[min_block].unimportance_score) {
        min_block = b;
      }
    }
    LayerAnchorScores s;
    s.layer = l;
    s.max_block = max_block;
    s.min_block = min_block;
    s.s_anc = static_cast<float>(head_mean_dot(q_hat, l, anchor_key));
    s.s_max = static_cast<float>(head_mean_dot(q_hat, l, mk.row(max_block)));
    s.s_min = static_cast<float>(head_mean_dot(q_hat, l, mk.row(min_block)));
    out.layers.push_back(s);
  }
  return out;
}

double layer_p(double s_anc, double s_max, double s_min, AnchorBelowMin below_min) noexcept {
  if (s_anc > s_min && s_anc <= s_max) return (s_max - s_anc) / (s_max - s_min);
  if (below_min == AnchorBelowMin::kOne && s_anc <= s_min && s_min < s_max) return 1.0;
  return 0.0;
}

double doc_p(std::span<const double> per_layer) {
  if (per_layer.empty()) throw ConfigError("doc_p needs at least one stable layer");
  return std::accumulate(per_layer.begin(), per_layer.end(), 0.0) /
         static_cast<double>(per_layer.size());
}

std::vector<std::uint32_t> SelectionPlan::retained_blocks(std::uint32_t layer) const {
  std::vector<std::uint32_t> out = pinned_blocks;
  if (!layer_middle.empty()) {
    const auto& lm = layer_middle.at(layer);
    out.insert(out.end(), lm.begin(), lm.end());
  } else {
    for (const auto& b : retained_middle) out.push_back(b.block);
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::uint64_t SelectionPlan::retained_token_layers() const {
  std::uint64_t total = 0;
  for (std::uint32_t l = 0; l < num_layers; ++l) {
    for (auto b : retained_blocks(l)) total += block_tokens.at(b);
  }
  return total;
}

void SelectionPlan::refresh_sequence_ratio() {
  const double denom = static_cast<double>(total_tokens) * num_layers;
  sequence_ratio = denom > 0 ? static_cast<double>(retained_token_layers()) / denom : 0.0;
}

SelectionPlan select_blocks(const QueryVector& q_hat, const DocumentCache& doc, double p,
                            std::span<const std::uint32_t> stable_layers, std::uint32_t doc_index) {
  check_stable(stable_layers, doc.num_layers());
  if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("P must lie in [0, 1]");
  SelectionPlan plan;
  plan.doc_id = doc.doc_id;
  plan.doc_index = doc_index;
  plan.num_layers = doc.num_layers();
  plan.p = p;
  plan.total_tokens = doc.num_tokens();
  for (const auto& b : doc.blocks) {
    plan.block_tokens.push_back(b.span.size());
    if (b.role != BlockRole::kMiddle) {
      plan.pinned_blocks.push_back(b.index);
      continue;
    }
    double score = 0.0;
    for (auto l : stable_layers) score += head_mean_dot(q_hat, l, doc.layers[l].mean_keys.row(b.index));
    plan.middle_scores.push_back({b.index, score / static_cast<double>(stable_layers.size()), 0.0});
  }
  const auto m = plan.middle_scores.size();
  // ceil(P*M) with a small slack so 0.3*10 does not round up to 4.
  const auto k = p > 0.0 ? static_cast<std::size_t>(std::ceil(p * static_cast<double>(m) - 1e-9))
                         : std::size_t{0};
  plan.retained_middle = top_k(plan.middle_scores, k);
  plan.refresh_sequence_ratio();
  return plan;
}

void specialize_layers(SelectionPlan& plan, const QueryVector& q_hat, const DocumentCache& doc) {
  const auto k = plan.retained_middle.size();
  plan.layer_middle.assign(plan.num_layers, {});
  for (std::uint32_t l = 0; l < plan.num_layers; ++l) {
    std::vector<ScoredBlock> scored;
    for (const auto& s : plan.middle_scores) {
      scored.push_back({s.block, head_mean_dot(q_hat, l, doc.layers[l].mean_keys.row(s.block)), 0.0});
    }
    for (const auto& b : top_k(std::move(scored), k)) plan.layer_middle[l].push_back(b.block);
  }
  plan.refresh_sequence_ratio();
}

std::vector<SelectionPlan> cross_context_filter(std::vector<SelectionPlan> plans) {
  if (plans.empty()) throw InputError("cross-context filter needs at least one plan");
  std::size_t total = 0;
  for (const auto& p : plans) total += p.retained_middle.size();
  if (total == 0) return plans;

  struct Candidate {
    std::size_t plan;
    std::size_t slot;
    double normalized;
  };
  std::vector<Candidate> pool;
  for (std::size_t i = 0; i < plans.size(); ++i) {
    auto& kept = plans[i].retained_middle;
    if (kept.empty()) continue;
    const auto [lo, hi] = std::minmax_element(kept.begin(), kept.end(),
        [](const ScoredBlock& a, const ScoredBlock& b) { return a.score < b.score; });
    const double min_s = lo->score;
    const double range = hi->score - lo->score;
    for (std::size_t s = 0; s < kept.size(); ++s) {
      kept[s].normalized = range > 0.0 ? (kept[s].score - min_s) / range : 1.0;
      pool.push_back({i, s, kept[s].normalized});
    }
  }
  const std::size_t keep = total / plans.size();
  std::stable_sort(pool.begin(), pool.end(), [](const Candidate& a, const Candidate& b) {
    return a.normalized > b.normalized;
  });
  std::vector<std::vector<std::uint8_t>> survive(plans.size());
  for (std::size_t i = 0; i < plans.size(); ++i) survive[i].assign(plans[i].retained_middle.size(), 0);
  for (std::size_t r = 0; r < keep; ++r) survive[pool[r].plan][pool[r].slot] = 1;

  for (std::size_t i = 0; i < plans.size(); ++i) {
    auto& plan = plans[i];
    std::vector<ScoredBlock> kept;
    for (std::size_t s = 0; s < plan.retained_middle.size(); ++s) {
      if (survive[i][s]) kept.push_back(plan.retained_middle[s]);
    }
    plan.retained_middle = std::move(kept);
    for (auto& layer : plan.layer_middle) {
      std::erase_if(layer, [&](std::uint32_t b) {
        return std::none_of(plan.retained_middle.begin(), plan.retained_middle.end(),
                            [&](const ScoredBlock& s) { return s.block == b; });
      });
    }
    plan.refresh_sequence_ratio();
  }
  return plans;
}

}  // namespace mckv
