// Copyright 2026 The mckv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>
#include <string>

#include "mckv/errors.hpp"

namespace mckv::io {

inline constexpr char kMagic[4] = {'M', 'C', 'K', 'V'};
inline constexpr std::uint16_t kFormatVersion = 1;

enum class RecordType : std::uint8_t {
  kModelWeights = 1,
  kDocumentCache = 2,
  kQueryVector = 3,
};

template <typename T>
struct WireType {
  using type = std::make_unsigned_t<T>;
};
template <typename T>
  requires std::is_enum_v<T>
struct WireType<T> {
  using type = std::make_unsigned_t<std::underlying_type_t<T>>;
};

class Writer {
 public:
  explicit Writer(std::ostream& out) : out_(out) {}

  template <typename T>
  void put(T value) {
    static_assert(std::is_integral_v<T> || std::is_enum_v<T>);
    using U = typename WireType<T>::type;
    auto u = static_cast<U>(value);
    unsigned char bytes[sizeof(U)];
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      bytes[i] = static_cast<unsigned char>(u >> (8 * i));
    }
    out_.write(reinterpret_cast<const char*>(bytes), sizeof(U));
  }

  void put_floats(std::span<const float> values) {
    for (float v : values) put(std::bit_cast<std::uint32_t>(v));
  }

  void put_string(const std::string& s) {
    put(static_cast<std::uint32_t>(s.size()));
    out_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }

  void header(RecordType type) {
    out_.write(kMagic, 4);
    put(kFormatVersion);
    put(type);
  }

 private:
  std::ostream& out_;
};

class Reader {
 public:
  explicit Reader(std::istream& in) : in_(in) {}

  template <typename T>
  T get() {
    static_assert(std::is_integral_v<T> || std::is_enum_v<T>);
    using U = typename WireType<T>::type;
    unsigned char bytes[sizeof(U)];
    read_raw(bytes, sizeof(U));
    U u = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      u |= static_cast<U>(static_cast<U>(bytes[i]) << (8 * i));
    }
    return static_cast<T>(u);
  }

  void get_floats(std::span<float> out) {
    for (float& v : out) v = std::bit_cast<float>(get<std::uint32_t>());
  }

  std::string get_string(std::uint32_t max_len = 1u << 20) {
    const auto n = get<std::uint32_t>();
    if (n > max_len) throw FormatError("string length out of range");
    std::string s(n, '\0');
    read_raw(s.data(), n);
    return s;
  }

  void header(RecordType expected) {
    char magic[4];
    read_raw(magic, 4);
    if (std::memcmp(magic, kMagic, 4) != 0) throw FormatError("bad magic");
    const auto version = get<std::uint16_t>();
    if (version != kFormatVersion) {
      throw FormatError("unsupported format version " +
                        std::to_string(version));
    }
    const auto type = get<RecordType>();
    if (type != expected) throw FormatError("unexpected record type");
  }

  void expect_end() {
    if (in_.peek() != std::char_traits<char>::eof()) {
      throw FormatError("trailing bytes after record");
    }
  }

 private:
  void read_raw(void* dst, std::size_t n) {
    in_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) {
      throw FormatError("truncated file");
    }
  }

  std::istream& in_;
};

}  // namespace mckv::io
