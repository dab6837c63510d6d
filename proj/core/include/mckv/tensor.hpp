// Copyright 2026 The mckv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace mckv {

/// Dense row-major float32 matrix. Rows are token positions throughout the
/// library; columns are the hidden dimension (heads laid out contiguously).
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, float fill = 0.0f)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  bool empty() const noexcept { return rows_ == 0; }

  std::span<float> row(std::size_t r) noexcept {
    return {data_.data() + r * cols_, cols_};
  }
  std::span<const float> row(std::size_t r) const noexcept {
    return {data_.data() + r * cols_, cols_};
  }
  float& operator()(std::size_t r, std::size_t c) noexcept {
    return data_[r * cols_ + c];
  }
  float operator()(std::size_t r, std::size_t c) const noexcept {
    return data_[r * cols_ + c];
  }

  std::span<float> data() noexcept { return data_; }
  std::span<const float> data() const noexcept { return data_; }

  /// Appends one row; `values.size()` must equal `cols()` (or set it when
  /// the matrix has no columns yet).
  void append_row(std::span<const float> values);
  void reserve_rows(std::size_t rows) { data_.reserve(rows * cols_); }

  /// Bitwise equality of shape and contents.
  bool bit_equal(const Matrix& other) const noexcept;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<float> data_;
};

inline float dot(std::span<const float> a, std::span<const float> b) noexcept {
  float acc = 0.0f;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

/// Cosine similarity in double precision. Returns 0 when either norm is
/// below `eps`.
double cosine(std::span<const float> a, std::span<const float> b,
              double eps = 1e-12) noexcept;

/// FNV-1a over the raw bytes of the floats.
std::uint64_t checksum(std::span<const float> values,
                       std::uint64_t seed = 14695981039346656037ull) noexcept;

}  // namespace mckv
