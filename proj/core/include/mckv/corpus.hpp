// Copyright 2026 The mckv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace mckv {

struct CorpusParams {
  std::uint64_t seed = 0;
  std::uint32_t num_docs = 3;
  std::uint32_t doc_len = 512;
  double overlap = 0.3;
  std::uint32_t query_len = 16;
  std::uint32_t vocab_size = 512;
  bool operator==(const CorpusParams&) const = default;
};

/// Synthetic multi-document corpus. The vocabulary is split into
/// num_docs + 1 bands: band 0 feeds the shared consensus span and the query,
/// band i + 1 feeds the filler of document i.
struct Corpus {
  CorpusParams params;
  std::vector<std::vector<std::int32_t>> docs;
  std::vector<std::int32_t> query;
  std::vector<std::uint32_t> consensus_offsets;  // per document
  std::uint32_t consensus_len = 0;

  /// Stable hex digest of the parameters and every token.
  std::string fingerprint() const;
  std::vector<std::string> doc_ids() const;
};

Corpus generate_corpus(const CorpusParams& params);

/// Fraction of positions of `a` whose token also occurs somewhere in `b`.
double common_token_fraction(const std::vector<std::int32_t>& a, const std::vector<std::int32_t>& b);

std::string corpus_to_json(const Corpus& corpus);
Corpus corpus_from_json(const std::string& text);
void save_corpus(const Corpus& corpus, const std::filesystem::path& path);
Corpus load_corpus(const std::filesystem::path& path);

}  // namespace mckv
