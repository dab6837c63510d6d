// Copyright 2026 The mckv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "mckv/tensor.hpp"

namespace mckv {

enum class PositionalMode : std::uint8_t {
  kNone = 0,
  kAbsoluteLearned = 1,
};

/// Hyperparameters of the toy attention-only transformer.
struct ModelSpec {
  std::uint32_t num_layers = 6;
  std::uint32_t num_heads = 2;
  std::uint32_t head_dim = 8;
  std::uint32_t hidden_dim = 16;
  std::uint32_t vocab_size = 512;
  PositionalMode positional_mode = PositionalMode::kNone;
  /// Rows of the learned position table; ignored when positional_mode is none.
  std::uint32_t max_positions = 8192;
  std::uint64_t seed = 0;

  /// Throws ConfigError when dimensions are inconsistent.
  void validate() const;

  bool operator==(const ModelSpec&) const = default;
};

struct LayerWeights {
  Matrix query;   // hidden x hidden
  Matrix key;
  Matrix value;
  Matrix output;
};

/// Immutable after construction; safe to share across concurrent forwards.
struct ModelWeights {
  ModelSpec spec;
  Matrix embedding;  // vocab x hidden
  Matrix positions;  // max_positions x hidden, empty when positional_mode is none
  std::vector<LayerWeights> layers;

  /// FNV-1a over every tensor in file order.
  std::uint64_t checksum() const noexcept;
};

ModelWeights build_model(const ModelSpec& spec);

void save_weights(const ModelWeights& weights, const std::filesystem::path& path);
ModelWeights load_weights(const std::filesystem::path& path);

}  // namespace mckv
