// Copyright 2026 The mckv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "mckv/kv_store.hpp"
#include "mckv/tensor.hpp"

namespace mckv {

/// y = c * x^-alpha fitted by least squares in log-log space.
struct PowerLawFit {
  double alpha = 0.0;
  double c = 0.0;
  std::size_t clamped = 0;  // samples raised to the floor before the log
};

/// Clamp applied to non-positive samples before taking logs.
inline constexpr double kPowerLawFloor = 1e-12;

/// `series[k]` is the value at distance x = k + 1. Needs at least 3 samples.
PowerLawFit fit_power_law(std::span<const double> series);

/// Mean attention each column receives from the rows strictly below the
/// diagonal. Columns without such rows get NaN.
std::vector<double> column_means(const Matrix& attention);

/// Column inside `span` with the highest sustained attention (mean over the
/// rows after it). Earliest position wins ties. A span with no later rows
/// falls back to rows from the diagonal down.
std::uint32_t representative_token(const Matrix& attention, TokenSpan span);

struct BlockAttribute {
  std::uint32_t block = 0;
  double alpha = 0.0;            // +inf when the fit failed
  double fit_c = 0.0;
  std::uint32_t importance_rank = 0;  // 0 = most important (smallest alpha)
  double unimportance_score = 0.0;    // mean attention of the representative column
  std::uint32_t representative_token = 0;
  bool fit_failed = false;
};

/// Importance and unimportance attributes for every block of one layer.
std::vector<BlockAttribute> block_attributes(const Matrix& attention,
                                             std::span<const BlockInfo> blocks);

enum class OutlierSide : std::uint8_t { kBoth, kLow, kHigh };

/// PauTa (3-sigma) rule with population stddev. Non-finite entries are
/// ignored. Zero spread gives no outliers.
std::vector<std::size_t> pauta_outliers(std::span<const double> values,
                                        OutlierSide side = OutlierSide::kBoth,
                                        double sigmas = 3.0);

/// alpha values of one analysed document, indexed [layer][block].
using LayerAlphas = std::vector<std::vector<double>>;

struct StableLayerOptions {
  double threshold_ratio = 0.5;
  /// Only the last `trailing_fraction` of layers may enter the stable set.
  double trailing_fraction = 0.5;
};

struct StableLayerReport {
  std::vector<std::uint32_t> scores;         // per layer
  std::vector<std::uint32_t> stable_layers;  // selected set, ascending
  double threshold = 0.0;
  bool fallback_used = false;
  bool preset = false;
  std::vector<std::uint32_t> beta_blocks;    // per analysed document
};

/// Scores each layer by how often the model-wide top block stands out as a
/// low-alpha outlier there, summed over the analysed documents.
StableLayerReport detect_stable_layers(std::span<const LayerAlphas> corpus,
                                       const StableLayerOptions& options = {});

/// Last max(1, ceil(N/8)) layers.
std::vector<std::uint32_t> fallback_stable_layers(std::uint32_t num_layers);

/// Parses "29-32", "29,30,31" (1-based, inclusive) or a known model name.
std::vector<std::uint32_t> parse_layer_preset(std::string_view text, std::uint32_t num_layers);

}  // namespace mckv

namespace mckv {

/// Everything the selection and scheduling stages need from one document's
/// attention maps.
struct DocumentAnalysis {
  std::vector<std::vector<BlockAttribute>> layers;  // [layer][block]
  std::vector<std::vector<double>> column_means;    // [layer][token]
};

/// `attention[layer]` is the head-mean causal attention of the document.
DocumentAnalysis analyze_document(std::span<const Matrix> attention,
                                  std::span<const BlockInfo> blocks);

/// alpha values in [layer][block] order, as consumed by detect_stable_layers.
LayerAlphas layer_alphas(const DocumentAnalysis& analysis);

}  // namespace mckv
