// Copyright 2026 The mckv Authors
// SPDX-License-Identifier: Apache-2.0

#include "mckv/recompute.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "json.hpp"

#include "mckv/errors.hpp"

namespace mckv {
namespace {

struct Candidate {
  TokenKey key;
  double priority;  // lower sorts first
  std::set<std::uint32_t> layers;
  bool outlier;
};

}  // namespace

RecomputeSchedule build_schedule(std::span<const SelectionPlan> plans,
                                 std::span<const DocumentCache> docs,
                                 std::span<const DocumentAnalysis> analyses,
                                 std::span<const std::uint32_t> stable_layers,
                                 const ScheduleOptions& options, ScheduleStats* stats) {
  if (!(options.budget > 0.0) || options.budget > 1.0) {
    throw ConfigError("recompute budget must lie in (0, 1]");
  }
  if (plans.empty()) throw InputError("schedule needs at least one plan");
  const std::uint32_t n_layers = plans.front().num_layers;
  for (auto l : stable_layers) {
    if (l >= n_layers) throw ConfigError("stable layer out of range");
  }

  RecomputeSchedule schedule;
  schedule.policy = options.policy;
  schedule.granularity = options.granularity;
  schedule.layers.assign(n_layers, {});

  ScheduleStats st;
  std::vector<Candidate> outliers, fill;
  std::size_t mandatory = 0;

  for (const auto& plan : plans) {
    if (plan.doc_index >= docs.size() || plan.doc_index >= analyses.size()) {
      throw InputError("plan references a missing document");
    }
    const auto& doc = docs[plan.doc_index];
    const auto& analysis = analyses[plan.doc_index];
    if (analysis.layers.size() != n_layers) throw InputError("analysis layer count mismatch");
    st.total_tokens += doc.num_tokens();

    for (auto b : plan.pinned_blocks) {
      const auto& info = doc.blocks.at(b);
      const auto source = info.role == BlockRole::kInitial ? ScheduleSource::kInitial
                                                           : ScheduleSource::kLocal;
      for (auto p = info.span.start; p < info.span.end; ++p) {
        for (std::uint32_t l = 0; l < n_layers; ++l) {
          schedule.layers[l].push_back({{plan.doc_index, p}, source});
        }
        ++mandatory;
        ++(source == ScheduleSource::kInitial ? st.initial_tokens : st.local_tokens);
      }
    }

    // Retained middle blocks and the layers keeping each of them.
    std::map<std::uint32_t, std::set<std::uint32_t>> kept;
    for (std::uint32_t l = 0; l < n_layers; ++l) {
      for (auto b : plan.retained_blocks(l)) {
        if (doc.blocks.at(b).role == BlockRole::kMiddle) kept[b].insert(l);
      }
    }
    const auto middle = doc.blocks_with_role(BlockRole::kMiddle);

    // alpha outliers among the middle blocks, per stable layer, unioned.
    std::map<std::uint32_t, Candidate> found;
    for (auto l : stable_layers) {
      std::vector<double> alphas;
      for (auto b : middle) alphas.push_back(analysis.layers[l].at(b).alpha);
      for (auto idx : pauta_outliers(alphas, OutlierSide::kLow)) {
        const auto b = middle[idx];
        auto it = kept.find(b);
        if (it == kept.end() || !it->second.count(l)) continue;
        const auto& attr = analysis.layers[l][b];
        auto [pos, inserted] = found.try_emplace(
            attr.representative_token,
            Candidate{{plan.doc_index, attr.representative_token}, attr.alpha, {}, true});
        pos->second.priority = std::min(pos->second.priority, attr.alpha);
        pos->second.layers.insert(l);
      }
    }
    for (auto& [_, c] : found) outliers.push_back(c);

    if (options.fill_budget) {
      for (const auto& [b, layers] : kept) {
        const auto& span = doc.blocks[b].span;
        for (auto p = span.start; p < span.end; ++p) {
          if (found.count(p)) continue;
          double sustained = 0.0;
          for (auto l : stable_layers) {
            const double v = analysis.column_means[l].at(p);
            sustained += std::isnan(v) ? 0.0 : v;
          }
          fill.push_back({{plan.doc_index, p}, -sustained, layers, false});
        }
      }
    }
  }

  auto order = [](const Candidate& a, const Candidate& b) {
    if (a.priority != b.priority) return a.priority < b.priority;
    return a.key < b.key;
  };
  std::sort(outliers.begin(), outliers.end(), order);
  std::sort(fill.begin(), fill.end(), order);

  const auto cap = static_cast<std::size_t>(
      std::floor(options.budget * static_cast<double>(st.total_tokens) + 1e-9));
  std::size_t room = cap > mandatory ? cap - mandatory : 0;
  auto admit = [&](const std::vector<Candidate>& list, std::size_t& counter) {
    for (const auto& c : list) {
      if (room == 0) {
        ++st.dropped_tokens;
        continue;
      }
      --room;
      ++counter;
      for (std::uint32_t l = 0; l < n_layers; ++l) {
        if (options.per_layer && !c.layers.count(l)) continue;
        schedule.layers[l].push_back({c.key, ScheduleSource::kHighAttention});
      }
    }
  };
  admit(outliers, st.outlier_tokens);
  admit(fill, st.fill_tokens);

  for (auto& layer : schedule.layers) {
    std::sort(layer.begin(), layer.end(),
              [](const ScheduledToken& a, const ScheduledToken& b) { return a.key < b.key; });
  }
  st.scheduled_tokens = schedule.unique_tokens();
  st.recomputation_ratio = st.total_tokens > 0 ? static_cast<double>(st.scheduled_tokens) /
                                                     static_cast<double>(st.total_tokens)
                                               : 0.0;
  if (stats) *stats = st;
  return schedule;
}

CompositeCache align_layers(std::span<const SelectionPlan> plans, std::span<const DocumentCache> docs) {
  if (plans.empty()) throw InputError("alignment needs at least one plan");
  const std::uint32_t n_layers = plans.front().num_layers;
  std::vector<const SelectionPlan*> ordered;
  for (const auto& p : plans) ordered.push_back(&p);
  std::stable_sort(ordered.begin(), ordered.end(),
                   [](const auto* a, const auto* b) { return a->doc_index < b->doc_index; });

  std::vector<std::vector<CompositeSlot>> layer_slots(n_layers);
  for (const auto* plan : ordered) {
    if (plan->doc_index >= docs.size()) throw InternalError("plan references a missing document");
    const auto& doc = docs[plan->doc_index];
    std::vector<std::set<std::uint32_t>> per_layer(n_layers);
    std::set<std::uint32_t> all;
    for (std::uint32_t l = 0; l < n_layers; ++l) {
      for (auto b : plan->retained_blocks(l)) {
        if (b >= doc.blocks.size()) throw InternalError("retained block missing from source cache");
        per_layer[l].insert(b);
        all.insert(b);
      }
    }
    for (std::uint32_t l = 0; l < n_layers; ++l) {
      for (auto b : all) layer_slots[l].push_back({plan->doc_index, b, !per_layer[l].count(b)});
    }
  }
  return assemble_composite(docs, layer_slots);
}

CompositeCache run_recompute(CompositeCache aligned, const RecomputeSchedule& schedule,
                             const ModelWeights& weights, RecomputeTrace* trace) {
  recompute_selective(weights, aligned, schedule, trace);
  return strip_padding(std::move(aligned));
}

AnswerResult final_answer_prefill(const ModelWeights& weights, std::span<const std::int32_t> query_tokens,
                                  const CompositeCache& cache) {
  const auto fwd = incremental_prefill(weights, query_tokens, cache);
  AnswerResult out;
  const auto last = fwd.hidden.row(fwd.hidden.rows() - 1);
  out.hidden.assign(last.begin(), last.end());
  out.logits = logits(weights, out.hidden);
  out.token = greedy_token(out.logits);
  return out;
}

TraceViolations check_trace(const RecomputeTrace& trace, const RecomputeSchedule& schedule) {
  TraceViolations v;
  std::map<TokenKey, std::size_t> row_of;
  for (std::size_t r = 0; r < trace.rows.size(); ++r) row_of[trace.rows[r]] = r;
  const auto n_layers = trace.cells.size();
  std::vector<std::vector<std::uint8_t>> flagged(n_layers, std::vector<std::uint8_t>(trace.rows.size(), 0));
  for (std::size_t l = 0; l < schedule.layers.size() && l < n_layers; ++l) {
    for (const auto& t : schedule.layers[l]) {
      const auto it = row_of.find(t.key);
      if (it == row_of.end()) continue;
      flagged[l][it->second] = 1;
      for (std::size_t below = 0; below < l; ++below) {
        if (!trace.cells[below][it->second].output_computed) ++v.rule1;
      }
    }
  }
  for (std::size_t l = 0; l < n_layers; ++l) {
    for (std::size_t r = 0; r < trace.rows.size(); ++r) {
      if (!flagged[l][r] && trace.cells[l][r].kv_recomputed) ++v.rule2;
    }
  }
  return v;
}

std::string trace_to_json(const RecomputeTrace& trace) {
  nlohmann::json j;
  j["rows"] = nlohmann::json::array();
  for (const auto& r : trace.rows) j["rows"].push_back({{"doc", r.doc}, {"offset", r.offset}});
  j["layers"] = nlohmann::json::array();
  for (const auto& layer : trace.cells) {
    nlohmann::json cells = nlohmann::json::array();
    for (const auto& c : layer) {
      std::string state = c.kv_recomputed ? "computed" : c.padding ? "padded" : "reused";
      cells.push_back({{"kv", state}, {"output", c.output_computed}});
    }
    j["layers"].push_back(std::move(cells));
  }
  j["key_thetas"] = trace.key_thetas;
  j["value_thetas"] = trace.value_thetas;
  return j.dump();
}

}  // namespace mckv
