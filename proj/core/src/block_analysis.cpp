// Copyright 2026 The mckv Authors
// SPDX-License-Identifier: Apache-2.0

#include "mckv/block_analysis.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "mckv/errors.hpp"

namespace mckv {

PowerLawFit fit_power_law(std::span<const double> series) {
  const std::size_t n = series.size();
  if (n < 3) throw AnalysisError("power-law fit needs at least 3 samples");
  PowerLawFit fit;
  std::vector<double> lx(n), ly(n);
  for (std::size_t k = 0; k < n; ++k) {
    double y = series[k];
    if (!(y > 0.0)) {
      y = kPowerLawFloor;
      ++fit.clamped;
    }
    lx[k] = std::log(static_cast<double>(k + 1));
    ly[k] = std::log(y);
  }
  // Centred sums, with y shifted by its first sample so a flat series has slope exactly 0.
  const double dn = static_cast<double>(n);
  const double mx = std::accumulate(lx.begin(), lx.end(), 0.0) / dn;
  double var = 0.0, cov = 0.0, sy = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    const double dx = lx[k] - mx;
    var += dx * dx;
    cov += dx * (ly[k] - ly[0]);
    sy += ly[k];
  }
  const double my = sy / dn;
  const double slope = cov / var;
  fit.alpha = -slope;
  fit.c = std::exp(my - slope * mx);
  return fit;
}

std::vector<double> column_means(const Matrix& attention) {
  const std::size_t n = attention.rows();
  std::vector<double> sums(attention.cols(), 0.0);
  for (std::size_t i = 1; i < n; ++i) {
    const auto row = attention.row(i);
    for (std::size_t j = 0; j < i && j < sums.size(); ++j) sums[j] += row[j];
  }
  std::vector<double> means(attention.cols(), std::numeric_limits<double>::quiet_NaN());
  for (std::size_t j = 0; j < means.size() && j + 1 < n; ++j) {
    means[j] = sums[j] / static_cast<double>(n - 1 - j);
  }
  return means;
}

namespace {

std::uint32_t representative_from_means(const Matrix& attention, std::span<const double> means,
                                        TokenSpan span) {
  std::uint32_t best = span.start;
  double best_mean = -1.0;
  for (auto j = span.start; j < span.end; ++j) {
    if (std::isnan(means[j])) continue;
    if (means[j] > best_mean) {
      best_mean = means[j];
      best = j;
    }
  }
  if (best_mean >= 0.0) return best;
  // No later rows: rank columns by the rows from the diagonal down.
  const auto n = static_cast<std::uint32_t>(attention.rows());
  for (auto j = span.start; j < span.end; ++j) {
    double acc = 0.0;
    for (auto i = j; i < n; ++i) acc += attention(i, j);
    const double m = acc / static_cast<double>(n - j);
    if (m > best_mean) {
      best_mean = m;
      best = j;
    }
  }
  return best;
}

}  // namespace

std::uint32_t representative_token(const Matrix& attention, TokenSpan span) {
  if (span.end > attention.cols() || span.size() == 0) {
    throw AnalysisError("span outside the attention matrix");
  }
  const auto means = column_means(attention);
  return representative_from_means(attention, means, span);
}

std::vector<BlockAttribute> block_attributes(const Matrix& attention,
                                             std::span<const BlockInfo> blocks) {
  if (attention.rows() != attention.cols()) throw AnalysisError("attention matrix must be square");
  const auto means = column_means(attention);
  const std::size_t n = attention.rows();
  std::vector<BlockAttribute> attrs;
  attrs.reserve(blocks.size());
  std::vector<double> series;
  for (const auto& b : blocks) {
    if (b.span.end > n) throw AnalysisError("block outside the attention matrix");
    BlockAttribute a;
    a.block = b.index;
    a.representative_token = representative_from_means(attention, means, b.span);
    const auto j = a.representative_token;
    series.clear();
    double acc = 0.0;
    for (std::size_t i = j + 1; i < n; ++i) {
      series.push_back(attention(i, j));
      acc += attention(i, j);
    }
    a.unimportance_score = series.empty() ? static_cast<double>(attention(j, j))
                                          : acc / static_cast<double>(series.size());
    try {
      const auto fit = fit_power_law(series);
      a.alpha = fit.alpha;
      a.fit_c = fit.c;
    } catch (const AnalysisError&) {
      a.alpha = std::numeric_limits<double>::infinity();
      a.fit_c = 0.0;
      a.fit_failed = true;
    }
    attrs.push_back(a);
  }
  std::vector<std::size_t> order(attrs.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return attrs[x].alpha < attrs[y].alpha; });
  for (std::size_t r = 0; r < order.size(); ++r) {
    attrs[order[r]].importance_rank = static_cast<std::uint32_t>(r);
  }
  return attrs;
}

std::vector<std::size_t> pauta_outliers(std::span<const double> values, OutlierSide side,
                                        double sigmas) {
  double sum = 0.0;
  std::size_t count = 0;
  for (double v : values) {
    if (std::isfinite(v)) {
      sum += v;
      ++count;
    }
  }
  std::vector<std::size_t> out;
  if (count < 2) return out;
  const double mean = sum / static_cast<double>(count);
  double ss = 0.0;
  for (double v : values) {
    if (std::isfinite(v)) ss += (v - mean) * (v - mean);
  }
  const double sd = std::sqrt(ss / static_cast<double>(count));
  if (!(sd > 0.0)) return out;
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double v = values[i];
    if (!std::isfinite(v)) continue;
    const double dev = v - mean;
    if (std::abs(dev) <= sigmas * sd) continue;
    if (side == OutlierSide::kLow && dev > 0) continue;
    if (side == OutlierSide::kHigh && dev < 0) continue;
    out.push_back(i);
  }
  return out;
}

std::vector<std::uint32_t> fallback_stable_layers(std::uint32_t num_layers) {
  const std::uint32_t k = std::max(1u, (num_layers + 7) / 8);
  std::vector<std::uint32_t> out;
  for (auto l = num_layers - std::min(k, num_layers); l < num_layers; ++l) out.push_back(l);
  return out;
}

namespace {

// Ranks of one layer's alphas: 0 for the smallest, ties by block index.
std::vector<std::uint32_t> ranks_of(const std::vector<double>& alphas) {
  std::vector<std::size_t> order(alphas.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return alphas[a] < alphas[b]; });
  std::vector<std::uint32_t> ranks(alphas.size());
  for (std::size_t r = 0; r < order.size(); ++r) ranks[order[r]] = static_cast<std::uint32_t>(r);
  return ranks;
}

}  // namespace

StableLayerReport detect_stable_layers(std::span<const LayerAlphas> corpus,
                                       const StableLayerOptions& options) {
  if (corpus.empty()) throw AnalysisError("stable-layer detection needs analysis documents");
  const auto n_layers = static_cast<std::uint32_t>(corpus.front().size());
  if (n_layers == 0) throw AnalysisError("no layers to analyse");
  StableLayerReport report;
  report.scores.assign(n_layers, 0);

  for (const auto& doc : corpus) {
    if (doc.size() != n_layers) throw AnalysisError("documents disagree on layer count");
    const std::size_t n_blocks = doc.front().size();
    for (const auto& layer : doc) {
      if (layer.size() != n_blocks) throw AnalysisError("layers disagree on block count");
    }
    if (n_blocks == 0) {
      report.beta_blocks.push_back(0);
      continue;
    }
    std::vector<double> mean_rank(n_blocks, 0.0);
    for (const auto& layer : doc) {
      const auto ranks = ranks_of(layer);
      for (std::size_t b = 0; b < n_blocks; ++b) mean_rank[b] += ranks[b];
    }
    const auto beta = static_cast<std::uint32_t>(
        std::min_element(mean_rank.begin(), mean_rank.end()) - mean_rank.begin());
    report.beta_blocks.push_back(beta);
    for (std::uint32_t l = 0; l < n_layers; ++l) {
      const auto outliers = pauta_outliers(doc[l], OutlierSide::kLow);
      if (std::find(outliers.begin(), outliers.end(), beta) != outliers.end()) ++report.scores[l];
    }
  }

  if (n_layers == 1) {
    report.stable_layers = {0};
    return report;
  }
  const auto max_score = *std::max_element(report.scores.begin(), report.scores.end());
  report.threshold = static_cast<double>(max_score) * options.threshold_ratio;
  const double trailing = std::clamp(options.trailing_fraction, 0.0, 1.0);
  const auto first_eligible = static_cast<std::uint32_t>(
      std::floor(static_cast<double>(n_layers) * (1.0 - trailing)));
  if (max_score > 0) {
    for (auto l = first_eligible; l < n_layers; ++l) {
      if (report.scores[l] > 0 && report.scores[l] >= report.threshold) {
        report.stable_layers.push_back(l);
      }
    }
  }
  if (report.stable_layers.empty()) {
    report.stable_layers = fallback_stable_layers(n_layers);
    report.fallback_used = true;
  }
  return report;
}

namespace {

struct NamedPreset {
  std::string_view name;
  std::uint32_t num_layers;
  std::uint32_t first;  // 1-based inclusive
  std::uint32_t last;
};

constexpr NamedPreset kPresets[] = {
    {"qwen2.5-3b-instruct", 36, 32, 36},
    {"mistral-7b-instruct", 32, 28, 32},
    {"llama-3.1-8b-instruct", 32, 29, 32},
};

std::uint32_t parse_index(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  if (s.empty() || !std::all_of(s.begin(), s.end(), [](char c) { return std::isdigit(static_cast<unsigned char>(c)); })) {
    throw ConfigError("bad layer index '" + std::string(s) + "'");
  }
  return static_cast<std::uint32_t>(std::stoul(std::string(s)));
}

}  // namespace

std::vector<std::uint32_t> parse_layer_preset(std::string_view text, std::uint32_t num_layers) {
  std::string lower(text);
  std::transform(lower.begin(), lower.end(), lower.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  for (const auto& p : kPresets) {
    if (lower == p.name) {
      if (p.num_layers != num_layers) {
        throw ConfigError("preset " + std::string(p.name) + " expects " +
                          std::to_string(p.num_layers) + " layers");
      }
      return parse_layer_preset(std::to_string(p.first) + "-" + std::to_string(p.last), num_layers);
    }
  }
  std::vector<std::uint32_t> layers;
  std::string_view rest = text;
  while (!rest.empty()) {
    const auto comma = rest.find(',');
    const auto item = rest.substr(0, comma);
    rest = comma == std::string_view::npos ? std::string_view{} : rest.substr(comma + 1);
    const auto dash = item.find('-');
    const auto lo = parse_index(item.substr(0, dash));
    const auto hi = dash == std::string_view::npos ? lo : parse_index(item.substr(dash + 1));
    if (lo == 0 || hi < lo || hi > num_layers) {
      throw ConfigError("layer range '" + std::string(item) + "' outside 1.." +
                        std::to_string(num_layers));
    }
    for (auto l = lo; l <= hi; ++l) layers.push_back(l - 1);
  }
  std::sort(layers.begin(), layers.end());
  layers.erase(std::unique(layers.begin(), layers.end()), layers.end());
  if (layers.empty()) throw ConfigError("empty layer preset");
  return layers;
}

}  // namespace mckv

namespace mckv {

DocumentAnalysis analyze_document(std::span<const Matrix> attention,
                                  std::span<const BlockInfo> blocks) {
  DocumentAnalysis out;
  for (const auto& attn : attention) {
    out.layers.push_back(block_attributes(attn, blocks));
    out.column_means.push_back(column_means(attn));
  }
  return out;
}

LayerAlphas layer_alphas(const DocumentAnalysis& analysis) {
  LayerAlphas out;
  for (const auto& layer : analysis.layers) {
    std::vector<double> alphas;
    for (const auto& a : layer) alphas.push_back(a.alpha);
    out.push_back(std::move(alphas));
  }
  return out;
}

}  // namespace mckv
