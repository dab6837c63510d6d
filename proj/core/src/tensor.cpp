// Copyright 2026 The mckv Authors
// SPDX-License-Identifier: Apache-2.0

#include "mckv/tensor.hpp"

#include <cmath>
#include <cstring>

#include "mckv/errors.hpp"

namespace mckv {

void Matrix::append_row(std::span<const float> values) {
  if (cols_ == 0 && rows_ == 0) {
    cols_ = values.size();
  }
  if (values.size() != cols_) {
    throw InternalError("Matrix::append_row: width mismatch");
  }
  data_.insert(data_.end(), values.begin(), values.end());
  ++rows_;
}

bool Matrix::bit_equal(const Matrix& other) const noexcept {
  return rows_ == other.rows_ && cols_ == other.cols_ &&
         (data_.empty() ||
          std::memcmp(data_.data(), other.data_.data(),
                      data_.size() * sizeof(float)) == 0);
}

double cosine(std::span<const float> a, std::span<const float> b,
              double eps) noexcept {
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += static_cast<double>(a[i]) * b[i];
    aa += static_cast<double>(a[i]) * a[i];
    bb += static_cast<double>(b[i]) * b[i];
  }
  const double na = std::sqrt(aa);
  const double nb = std::sqrt(bb);
  if (na < eps || nb < eps) return 0.0;
  return ab / (na * nb);
}

std::uint64_t checksum(std::span<const float> values,
                       std::uint64_t seed) noexcept {
  std::uint64_t h = seed;
  const auto* bytes = reinterpret_cast<const unsigned char*>(values.data());
  for (std::size_t i = 0; i < values.size_bytes(); ++i) {
    h ^= bytes[i];
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace mckv
