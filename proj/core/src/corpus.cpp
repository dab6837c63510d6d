// Copyright 2026 The mckv Authors
// SPDX-License-Identifier: Apache-2.0

#include "mckv/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <sstream>
#include <unordered_set>

#include "json.hpp"
#include "mckv/errors.hpp"

namespace mckv {
namespace {

std::uint64_t fnv(std::uint64_t h, const void* data, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

template <class T>
std::uint64_t fnv_value(std::uint64_t h, T v) {
  return fnv(h, &v, sizeof v);
}

}  // namespace

Corpus generate_corpus(const CorpusParams& params) {
  if (params.num_docs == 0) throw ConfigError("corpus needs at least one document");
  if (params.doc_len == 0) throw ConfigError("document length must be positive");
  if (!(params.overlap >= 0.0 && params.overlap <= 1.0)) throw ConfigError("overlap must lie in [0, 1]");
  const std::uint32_t band = params.vocab_size / (params.num_docs + 1);
  if (band < 2) throw ConfigError("vocabulary too small for the requested document count");

  std::mt19937_64 rng(params.seed);
  auto draw = [&](std::uint32_t band_index) {
    std::uniform_int_distribution<std::uint32_t> pick(0, band - 1);
    return static_cast<std::int32_t>(band_index * band + pick(rng));
  };

  Corpus c;
  c.params = params;
  c.consensus_len = static_cast<std::uint32_t>(std::lround(params.overlap * params.doc_len));
  std::vector<std::int32_t> consensus(c.consensus_len);
  for (auto& t : consensus) t = draw(0);

  for (std::uint32_t i = 0; i < params.num_docs; ++i) {
    std::vector<std::int32_t> doc(params.doc_len);
    for (auto& t : doc) t = draw(i + 1);
    std::uniform_int_distribution<std::uint32_t> at(0, params.doc_len - c.consensus_len);
    const auto offset = at(rng);
    std::copy(consensus.begin(), consensus.end(), doc.begin() + offset);
    c.consensus_offsets.push_back(offset);
    c.docs.push_back(std::move(doc));
  }

  const auto from_consensus = std::min(params.query_len, c.consensus_len);
  std::uniform_int_distribution<std::uint32_t> qat(0, c.consensus_len - from_consensus);
  const auto qoff = qat(rng);
  c.query.assign(consensus.begin() + qoff, consensus.begin() + qoff + from_consensus);
  while (c.query.size() < params.query_len) c.query.push_back(draw(0));
  if (c.query.empty()) throw ConfigError("query length must be positive");
  return c;
}

std::string Corpus::fingerprint() const {
  std::uint64_t h = 14695981039346656037ull;
  h = fnv_value(h, params.seed);
  h = fnv_value(h, params.num_docs);
  h = fnv_value(h, params.doc_len);
  h = fnv_value(h, params.overlap);
  h = fnv_value(h, params.query_len);
  h = fnv_value(h, params.vocab_size);
  for (const auto& d : docs) {
    h = fnv_value(h, d.size());
    h = fnv(h, d.data(), d.size() * sizeof(std::int32_t));
  }
  h = fnv(h, query.data(), query.size() * sizeof(std::int32_t));
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::vector<std::string> Corpus::doc_ids() const {
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < docs.size(); ++i) ids.push_back("doc-" + std::to_string(i));
  return ids;
}

double common_token_fraction(const std::vector<std::int32_t>& a, const std::vector<std::int32_t>& b) {
  if (a.empty()) return 0.0;
  const std::unordered_set<std::int32_t> in_b(b.begin(), b.end());
  const auto shared = std::count_if(a.begin(), a.end(), [&](std::int32_t t) { return in_b.count(t) > 0; });
  return static_cast<double>(shared) / static_cast<double>(a.size());
}

std::string corpus_to_json(const Corpus& c) {
  nlohmann::json j;
  j["seed"] = c.params.seed;
  j["num_docs"] = c.params.num_docs;
  j["doc_len"] = c.params.doc_len;
  j["overlap"] = c.params.overlap;
  j["query_len"] = c.params.query_len;
  j["vocab_size"] = c.params.vocab_size;
  j["consensus_len"] = c.consensus_len;
  j["consensus_offsets"] = c.consensus_offsets;
  j["docs"] = c.docs;
  j["query"] = c.query;
  j["fingerprint"] = c.fingerprint();
  return j.dump(1);
}

Corpus corpus_from_json(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    Corpus c;
    c.params.seed = j.at("seed").get<std::uint64_t>();
    c.params.num_docs = j.at("num_docs").get<std::uint32_t>();
    c.params.doc_len = j.at("doc_len").get<std::uint32_t>();
    c.params.overlap = j.at("overlap").get<double>();
    c.params.query_len = j.at("query_len").get<std::uint32_t>();
    c.params.vocab_size = j.at("vocab_size").get<std::uint32_t>();
    c.consensus_len = j.value("consensus_len", 0u);
    c.consensus_offsets = j.value("consensus_offsets", std::vector<std::uint32_t>{});
    c.docs = j.at("docs").get<std::vector<std::vector<std::int32_t>>>();
    c.query = j.at("query").get<std::vector<std::int32_t>>();
    if (c.docs.empty() || c.query.empty()) throw FormatError("corpus has no documents or no query");
    if (j.contains("fingerprint") && j["fingerprint"].get<std::string>() != c.fingerprint()) {
      throw FormatError("corpus fingerprint mismatch");
    }
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed corpus: ") + e.what());
  }
}

void save_corpus(const Corpus& corpus, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write " + path.string());
  out << corpus_to_json(corpus) << '\n';
}

Corpus load_corpus(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return corpus_from_json(ss.str());
}

}  // namespace mckv
