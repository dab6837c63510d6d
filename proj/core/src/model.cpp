// Copyright 2026 The mckv Authors
// SPDX-License-Identifier: Apache-2.0

#include "mckv/model.hpp"

#include <cmath>
#include <fstream>
#include <random>

#include "binary_io.hpp"
#include "mckv/errors.hpp"

namespace mckv {
namespace {

// Keys are drawn correlated with queries so that a token attends strongly to
// other occurrences of itself; without this the random model has no
// content-addressed attention and cross-document consensus is invisible.
constexpr float kKeyQueryCorrelation = 0.8f;
constexpr float kQueryGain = 3.0f;
// Small residual updates keep token identity readable in deep layers.
constexpr float kOutputGain = 0.25f;
constexpr float kPositionScale = 0.1f;
// A shared embedding direction, amplified on the first position, gives the
// model an attention sink at the start of a sequence.
constexpr float kSharedDirection = 1.0f;
constexpr float kSinkGain = 3.0f;

void fill_normal(Matrix& m, std::mt19937_64& rng, float stddev) {
  std::normal_distribution<float> dist(0.0f, stddev);
  for (float& v : m.data()) v = dist(rng);
}

void write_matrix(io::Writer& w, const Matrix& m) { w.put_floats(m.data()); }

void read_matrix(io::Reader& r, Matrix& m, std::size_t rows, std::size_t cols) {
  m = Matrix(rows, cols);
  r.get_floats(m.data());
}

}  // namespace

void ModelSpec::validate() const {
  if (num_layers == 0 || num_heads == 0 || head_dim == 0 || vocab_size == 0) {
    throw ConfigError("model dimensions must be positive");
  }
  if (hidden_dim != num_heads * head_dim) {
    throw ConfigError("hidden_dim must equal num_heads * head_dim (" +
                      std::to_string(hidden_dim) + " != " +
                      std::to_string(num_heads) + "*" +
                      std::to_string(head_dim) + ")");
  }
  if (positional_mode != PositionalMode::kNone &&
      positional_mode != PositionalMode::kAbsoluteLearned) {
    throw ConfigError("unknown positional mode");
  }
  if (positional_mode == PositionalMode::kAbsoluteLearned && max_positions == 0) {
    throw ConfigError("absolute positions need max_positions > 0");
  }
}

ModelWeights build_model(const ModelSpec& spec) {
  spec.validate();
  ModelWeights w;
  w.spec = spec;
  const std::size_t h = spec.hidden_dim;
  std::mt19937_64 rng(spec.seed);
  const float proj_std = 1.0f / std::sqrt(static_cast<float>(h));

  w.embedding = Matrix(spec.vocab_size, h);
  fill_normal(w.embedding, rng, 1.0f);
  if (spec.positional_mode == PositionalMode::kAbsoluteLearned) {
    w.positions = Matrix(spec.max_positions, h);
    fill_normal(w.positions, rng, kPositionScale);
  }
  std::vector<float> mu(h);
  std::normal_distribution<float> unit(0.0f, 1.0f);
  for (auto& x : mu) x = unit(rng);
  for (std::size_t t = 0; t < spec.vocab_size; ++t) {
    for (std::size_t c = 0; c < h; ++c) w.embedding(t, c) += kSharedDirection * mu[c];
  }
  if (!w.positions.empty()) {
    for (std::size_t c = 0; c < h; ++c) w.positions(0, c) += kSinkGain * mu[c];
  }

  const float rho = kKeyQueryCorrelation;
  const float rho_c = std::sqrt(1.0f - rho * rho);
  w.layers.resize(spec.num_layers);
  for (auto& layer : w.layers) {
    layer.query = Matrix(h, h);
    layer.key = Matrix(h, h);
    layer.value = Matrix(h, h);
    layer.output = Matrix(h, h);
    fill_normal(layer.query, rng, proj_std);
    fill_normal(layer.key, rng, proj_std);
    auto q = layer.query.data();
    auto k = layer.key.data();
    for (std::size_t i = 0; i < q.size(); ++i) {
      k[i] = rho * q[i] + rho_c * k[i];
      q[i] *= kQueryGain;
    }
    fill_normal(layer.value, rng, proj_std);
    fill_normal(layer.output, rng, proj_std * kOutputGain);
  }
  return w;
}

std::uint64_t ModelWeights::checksum() const noexcept {
  std::uint64_t c = mckv::checksum(embedding.data());
  c = mckv::checksum(positions.data(), c);
  for (const auto& l : layers) {
    c = mckv::checksum(l.query.data(), c);
    c = mckv::checksum(l.key.data(), c);
    c = mckv::checksum(l.value.data(), c);
    c = mckv::checksum(l.output.data(), c);
  }
  return c;
}

// Layout: header, spec fields (u32 layers, heads, head_dim, hidden, vocab,
// u8 positional mode, u32 max_positions, u64 seed), then embedding,
// optional position table, and per layer query/key/value/output.
void save_weights(const ModelWeights& weights, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot open " + path.string() + " for writing");
  io::Writer w(out);
  const auto& s = weights.spec;
  w.header(io::RecordType::kModelWeights);
  w.put(s.num_layers);
  w.put(s.num_heads);
  w.put(s.head_dim);
  w.put(s.hidden_dim);
  w.put(s.vocab_size);
  w.put(s.positional_mode);
  w.put(s.max_positions);
  w.put(s.seed);
  write_matrix(w, weights.embedding);
  if (s.positional_mode == PositionalMode::kAbsoluteLearned) {
    write_matrix(w, weights.positions);
  }
  for (const auto& l : weights.layers) {
    write_matrix(w, l.query);
    write_matrix(w, l.key);
    write_matrix(w, l.value);
    write_matrix(w, l.output);
  }
  if (!out) throw InputError("write failed for " + path.string());
}

ModelWeights load_weights(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path.string());
  io::Reader r(in);
  r.header(io::RecordType::kModelWeights);
  ModelWeights w;
  auto& s = w.spec;
  s.num_layers = r.get<std::uint32_t>();
  s.num_heads = r.get<std::uint32_t>();
  s.head_dim = r.get<std::uint32_t>();
  s.hidden_dim = r.get<std::uint32_t>();
  s.vocab_size = r.get<std::uint32_t>();
  s.positional_mode = r.get<PositionalMode>();
  s.max_positions = r.get<std::uint32_t>();
  s.seed = r.get<std::uint64_t>();
  try {
    s.validate();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("invalid model spec in file: ") + e.what());
  }
  const std::size_t h = s.hidden_dim;
  read_matrix(r, w.embedding, s.vocab_size, h);
  if (s.positional_mode == PositionalMode::kAbsoluteLearned) {
    read_matrix(r, w.positions, s.max_positions, h);
  }
  w.layers.resize(s.num_layers);
  for (auto& l : w.layers) {
    read_matrix(r, l.query, h, h);
    read_matrix(r, l.key, h, h);
    read_matrix(r, l.value, h, h);
    read_matrix(r, l.output, h, h);
  }
  r.expect_end();
  return w;
}

}  // namespace mckv
