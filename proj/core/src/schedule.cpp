// Copyright 2026 The mckv Authors
// SPDX-License-Identifier: Apache-2.0

#include "mckv/schedule.hpp"

#include <algorithm>
#include <set>

#include "mckv/tensor.hpp"

namespace mckv {

const char* to_string(UpdatePolicy p) noexcept {
  return p == UpdatePolicy::kFusion ? "fusion" : "overwrite";
}

const char* to_string(ScheduleSource s) noexcept {
  switch (s) {
    case ScheduleSource::kInitial: return "initial";
    case ScheduleSource::kLocal: return "local";
    case ScheduleSource::kHighAttention: return "high_attention";
  }
  return "?";
}

bool RecomputeSchedule::empty() const noexcept {
  return std::all_of(layers.begin(), layers.end(), [](const auto& l) { return l.empty(); });
}

std::size_t RecomputeSchedule::unique_tokens() const {
  std::set<TokenKey> keys;
  for (const auto& l : layers) {
    for (const auto& t : l) keys.insert(t.key);
  }
  return keys.size();
}

float fusion_theta(std::span<const float> fresh, std::span<const float> old) noexcept {
  const double c = cosine(fresh, old);
  return static_cast<float>(std::clamp(c, 0.0, 1.0));
}

void fuse(std::span<const float> old, std::span<float> fresh, float theta) noexcept {
  const float keep = 1.0f - theta;
  for (std::size_t i = 0; i < fresh.size(); ++i) {
    fresh[i] = theta * fresh[i] + keep * old[i];
  }
}

float apply_update(std::span<const float> old, std::span<float> fresh, UpdatePolicy policy) noexcept {
  if (policy == UpdatePolicy::kOverwrite) return 1.0f;
  const float theta = fusion_theta(fresh, old);
  fuse(old, fresh, theta);
  return theta;
}

}  // namespace mckv
