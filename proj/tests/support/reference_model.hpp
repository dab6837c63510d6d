// Copyright 2026 The mckv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "mckv/model.hpp"

namespace mckv::testing {

/// Straightforward double-precision forward pass used as an oracle. Shares no
/// code with the engine: explicit loops, explicit causal mask.
struct ReferenceForward {
  // [layer][token][channel]
  std::vector<std::vector<std::vector<double>>> keys;
  std::vector<std::vector<std::vector<double>>> values;
  std::vector<std::vector<std::vector<double>>> queries;
  // [layer][head][row][col], zero above the diagonal
  std::vector<std::vector<std::vector<std::vector<double>>>> attention;
  std::vector<std::vector<double>> hidden;  // final hidden per token
};

inline ReferenceForward reference_forward(const ModelWeights& w, const std::vector<std::int32_t>& tokens,
                                          std::uint32_t first_position = 0) {
  const auto& s = w.spec;
  const std::size_t n = tokens.size();
  const std::size_t hd = s.hidden_dim;
  ReferenceForward out;
  std::vector<std::vector<double>> x(n, std::vector<double>(hd));
  for (std::size_t t = 0; t < n; ++t) {
    for (std::size_t c = 0; c < hd; ++c) {
      x[t][c] = w.embedding(static_cast<std::size_t>(tokens[t]), c);
      if (s.positional_mode == PositionalMode::kAbsoluteLearned) x[t][c] += w.positions(first_position + t, c);
    }
  }
  auto matvec = [&](const std::vector<double>& v, const Matrix& m) {
    std::vector<double> r(m.cols(), 0.0);
    for (std::size_t i = 0; i < m.rows(); ++i) {
      for (std::size_t j = 0; j < m.cols(); ++j) r[j] += v[i] * m(i, j);
    }
    return r;
  };
  for (std::uint32_t l = 0; l < s.num_layers; ++l) {
    const auto& lw = w.layers[l];
    std::vector<std::vector<double>> q(n), k(n), v(n);
    for (std::size_t t = 0; t < n; ++t) {
      q[t] = matvec(x[t], lw.query);
      k[t] = matvec(x[t], lw.key);
      v[t] = matvec(x[t], lw.value);
    }
    std::vector<std::vector<std::vector<double>>> attn(
        s.num_heads, std::vector<std::vector<double>>(n, std::vector<double>(n, 0.0)));
    std::vector<std::vector<double>> mixed(n, std::vector<double>(hd, 0.0));
    for (std::uint32_t h = 0; h < s.num_heads; ++h) {
      const std::size_t off = static_cast<std::size_t>(h) * s.head_dim;
      for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> score(i + 1);
        double mx = -1e300;
        for (std::size_t j = 0; j <= i; ++j) {
          double d = 0.0;
          for (std::uint32_t c = 0; c < s.head_dim; ++c) d += q[i][off + c] * k[j][off + c];
          score[j] = d / std::sqrt(static_cast<double>(s.head_dim));
          mx = std::max(mx, score[j]);
        }
        double z = 0.0;
        for (auto& e : score) z += (e = std::exp(e - mx));
        for (std::size_t j = 0; j <= i; ++j) {
          attn[h][i][j] = score[j] / z;
          for (std::uint32_t c = 0; c < s.head_dim; ++c) mixed[i][off + c] += attn[h][i][j] * v[j][off + c];
        }
      }
    }
    for (std::size_t t = 0; t < n; ++t) {
      const auto o = matvec(mixed[t], lw.output);
      for (std::size_t c = 0; c < hd; ++c) x[t][c] += o[c];
    }
    out.queries.push_back(std::move(q));
    out.keys.push_back(std::move(k));
    out.values.push_back(std::move(v));
    out.attention.push_back(std::move(attn));
  }
  out.hidden = std::move(x);
  return out;
}

/// Largest |a - b| / max(|b|, floor) over paired entries.
// Entries far below the row magnitude are compared against 1% of that magnitude.
inline double max_rel_error(std::span<const float> a, const std::vector<double>& b, double floor = 1e-3) {
  double scale = 0.0;
  for (double v : b) scale = std::max(scale, std::abs(v));
  floor = std::max(floor, 1e-2 * scale);
  double worst = 0.0;
  for (std::size_t i = 0; i < b.size(); ++i) {
    worst = std::max(worst, std::abs(a[i] - b[i]) / std::max(std::abs(b[i]), floor));
  }
  return worst;
}

}  // namespace mckv::testing
