// Copyright 2026 The mckv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <compare>
#include <cstdint>
#include <span>
#include <vector>

namespace mckv {

enum class UpdatePolicy : std::uint8_t { kOverwrite = 0, kFusion = 1 };

/// Unit over which the fusion weight is measured.
enum class FusionGranularity : std::uint8_t { kToken = 0, kBlock = 1 };

enum class ScheduleSource : std::uint8_t { kInitial = 0, kLocal = 1, kHighAttention = 2 };

const char* to_string(UpdatePolicy p) noexcept;
const char* to_string(ScheduleSource s) noexcept;

/// A token identified by its document and document-local position.
struct TokenKey {
  std::uint32_t doc = 0;
  std::uint32_t offset = 0;
  auto operator<=>(const TokenKey&) const = default;
};

struct ScheduledToken {
  TokenKey key;
  ScheduleSource source = ScheduleSource::kInitial;
};

/// Tokens whose K,V are recomputed, per layer.
struct RecomputeSchedule {
  UpdatePolicy policy = UpdatePolicy::kOverwrite;
  FusionGranularity granularity = FusionGranularity::kToken;
  std::vector<std::vector<ScheduledToken>> layers;

  bool empty() const noexcept;
  /// Distinct tokens scheduled at any layer.
  std::size_t unique_tokens() const;
};

struct TraceCell {
  bool kv_recomputed = false;
  bool output_computed = false;
  bool padding = false;
};

/// What recompute_selective did to every (layer, row) of the aligned cache.
struct RecomputeTrace {
  std::vector<TokenKey> rows;
  std::vector<std::vector<TraceCell>> cells;  // [layer][row]
  std::vector<double> key_thetas;             // fusion weights applied to K
  std::vector<double> value_thetas;           // ... and to V
};

/// Fusion weight: cosine of the two vectors clamped to [0, 1].
float fusion_theta(std::span<const float> fresh, std::span<const float> old) noexcept;

/// Update in place: overwrite leaves `fresh` untouched, fusion
/// writes theta*fresh + (1-theta)*old into `fresh`. Returns theta (1 for
/// overwrite).
float apply_update(std::span<const float> old, std::span<float> fresh, UpdatePolicy policy) noexcept;

/// Same blend with a caller-provided weight.
void fuse(std::span<const float> old, std::span<float> fresh, float theta) noexcept;

}  // namespace mckv
