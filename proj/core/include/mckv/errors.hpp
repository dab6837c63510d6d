// Copyright 2026 The mckv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace mckv {

/// Base class for every error raised by the library. `kind()` names the
/// failure category so CLI diagnostics can be tagged without RTTI games.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

#define MCKV_DEFINE_ERROR(Name, tag)                                \
  class Name : public Error {                                       \
   public:                                                          \
    explicit Name(const std::string& what) : Error(tag, what) {}    \
  };

MCKV_DEFINE_ERROR(ConfigError, "config")
MCKV_DEFINE_ERROR(InputError, "input")
MCKV_DEFINE_ERROR(CacheError, "cache")
MCKV_DEFINE_ERROR(ScheduleError, "schedule")
MCKV_DEFINE_ERROR(FormatError, "format")
MCKV_DEFINE_ERROR(StateError, "state")
MCKV_DEFINE_ERROR(AnalysisError, "analysis")
MCKV_DEFINE_ERROR(ComparisonError, "comparison")
MCKV_DEFINE_ERROR(InternalError, "internal")

#undef MCKV_DEFINE_ERROR

}  // namespace mckv
