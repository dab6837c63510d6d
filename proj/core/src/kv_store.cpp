// Copyright 2026 The mckv Authors
// SPDX-License-Identifier: Apache-2.0

#include "mckv/kv_store.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <utility>

#include "binary_io.hpp"
#include "mckv/errors.hpp"

namespace mckv {

const char* to_string(BlockRole role) noexcept {
  switch (role) {
    case BlockRole::kInitial: return "initial";
    case BlockRole::kMiddle: return "middle";
    case BlockRole::kLocal: return "local";
  }
  return "?";
}

KVBlock DocumentCache::block(std::uint32_t layer, std::uint32_t b) const {
  if (layer >= layers.size() || b >= blocks.size()) {
    throw CacheError("block(" + std::to_string(layer) + ", " +
                     std::to_string(b) + ") out of range");
  }
  const auto& kv = layers[layer];
  KVBlock view;
  view.info = &blocks[b];
  view.layer = layer;
  view.keys = &kv.keys;
  view.values = &kv.values;
  view.queries = block_has_queries(b) ? &kv.queries : nullptr;
  view.mean_key = kv.mean_keys.row(b);
  return view;
}

bool DocumentCache::block_has_queries(std::uint32_t b) const {
  const auto& span = blocks.at(b).span;
  if (query_retained.size() < span.end) return false;
  for (auto p = span.start; p < span.end; ++p) {
    if (!query_retained[p]) return false;
  }
  return span.size() > 0;
}

std::vector<std::uint32_t> DocumentCache::blocks_with_role(BlockRole role) const {
  std::vector<std::uint32_t> out;
  for (const auto& b : blocks) {
    if (b.role == role) out.push_back(b.index);
  }
  return out;
}

void DocumentCache::validate(double mean_key_tol) const {
  std::uint32_t cursor = 0;
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const auto& b = blocks[i];
    if (b.index != i) throw CacheError("block indices not sequential");
    if (b.span.start != cursor || b.span.end <= b.span.start) {
      throw CacheError("blocks do not tile the token range");
    }
    if (b.span.size() > layout.block_size) throw CacheError("block exceeds block_size");
    if (i + 1 < blocks.size() && b.span.size() != layout.block_size) {
      throw CacheError("only the final block may be short");
    }
    cursor = b.span.end;
  }
  if (cursor != num_tokens()) throw CacheError("blocks do not cover the document");
  const auto n_blocks = static_cast<std::uint32_t>(blocks.size());
  if (n_blocks >= layout.n_initial + layout.n_local) {
    if (blocks_with_role(BlockRole::kInitial).size() != layout.n_initial ||
        blocks_with_role(BlockRole::kLocal).size() != layout.n_local) {
      throw CacheError("role counts do not match the block layout");
    }
  }
  for (const auto& kv : layers) {
    if (kv.keys.rows() != num_tokens() || kv.values.rows() != num_tokens()) {
      throw CacheError("K/V row count does not match token count");
    }
    if (kv.mean_keys.rows() != blocks.size()) throw CacheError("mean key count mismatch");
    const Matrix fresh = block_mean_keys(kv.keys, blocks);
    for (std::size_t i = 0; i < fresh.data().size(); ++i) {
      if (std::abs(fresh.data()[i] - kv.mean_keys.data()[i]) > mean_key_tol) {
        throw CacheError("stored mean key deviates from recomputed mean");
      }
    }
  }
}

std::vector<BlockInfo> tile_blocks(std::uint32_t num_tokens, const BlockLayout& layout) {
  if (layout.block_size == 0) throw ConfigError("block_size must be >= 1");
  std::vector<BlockInfo> blocks;
  for (std::uint32_t start = 0; start < num_tokens; start += layout.block_size) {
    BlockInfo b;
    b.index = static_cast<std::uint32_t>(blocks.size());
    b.span = {start, std::min(num_tokens, start + layout.block_size)};
    blocks.push_back(b);
  }
  const auto n = static_cast<std::uint32_t>(blocks.size());
  const std::uint32_t n_init = std::min(layout.n_initial, n);
  const std::uint32_t local_begin = std::max(n_init, n > layout.n_local ? n - layout.n_local : 0u);
  for (std::uint32_t i = 0; i < n; ++i) {
    blocks[i].role = i < n_init ? BlockRole::kInitial
                   : i >= local_begin ? BlockRole::kLocal
                                      : BlockRole::kMiddle;
  }
  return blocks;
}

Matrix block_mean_keys(const Matrix& keys, std::span<const BlockInfo> blocks) {
  Matrix means(blocks.size(), keys.cols());
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    auto out = means.row(b);
    const auto& span = blocks[b].span;
    std::vector<double> acc(keys.cols(), 0.0);
    for (auto r = span.start; r < span.end; ++r) {
      const auto row = keys.row(r);
      for (std::size_t c = 0; c < acc.size(); ++c) acc[c] += row[c];
    }
    for (std::size_t c = 0; c < acc.size(); ++c) {
      out[c] = static_cast<float>(acc[c] / span.size());
    }
  }
  return means;
}

DocumentCache partition_blocks(DocumentCache cache, std::uint32_t block_size,
                               std::uint32_t n_initial, std::uint32_t n_local) {
  cache.layout = {block_size, n_initial, n_local};
  cache.blocks = tile_blocks(cache.num_tokens(), cache.layout);
  for (auto& kv : cache.layers) kv.mean_keys = block_mean_keys(kv.keys, cache.blocks);
  return cache;
}

// ---------------------------------------------------------------------------
// Persistence
//
// header(kDocumentCache), doc_id (u32 length + UTF-8), u8 generation,
// u32 heads, head_dim, layers, block_size, n_initial, n_local,
// u32 token count, i32 tokens, u8 query-retained flags,
// u32 block count, per block (u32 index, u32 start, u32 end, u8 role),
// per layer: K, V, u8 has_queries, [Q], mean keys.

void save_cache(const DocumentCache& cache, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot open " + path.string() + " for writing");
  io::Writer w(out);
  w.header(io::RecordType::kDocumentCache);
  w.put_string(cache.doc_id);
  w.put(cache.generation);
  w.put(cache.num_heads);
  w.put(cache.head_dim);
  w.put(cache.num_layers());
  w.put(cache.layout.block_size);
  w.put(cache.layout.n_initial);
  w.put(cache.layout.n_local);
  w.put(cache.num_tokens());
  for (auto t : cache.token_ids) w.put(t);
  for (std::uint32_t i = 0; i < cache.num_tokens(); ++i) {
    w.put(static_cast<std::uint8_t>(i < cache.query_retained.size() && cache.query_retained[i]));
  }
  w.put(static_cast<std::uint32_t>(cache.blocks.size()));
  for (const auto& b : cache.blocks) {
    w.put(b.index);
    w.put(b.span.start);
    w.put(b.span.end);
    w.put(b.role);
  }
  for (const auto& kv : cache.layers) {
    w.put_floats(kv.keys.data());
    w.put_floats(kv.values.data());
    const bool has_q = !kv.queries.empty();
    w.put(static_cast<std::uint8_t>(has_q));
    if (has_q) w.put_floats(kv.queries.data());
    w.put_floats(kv.mean_keys.data());
  }
  if (!out) throw InputError("write failed for " + path.string());
}

DocumentCache load_cache(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path.string());
  io::Reader r(in);
  r.header(io::RecordType::kDocumentCache);
  DocumentCache c;
  c.doc_id = r.get_string();
  c.generation = r.get<Generation>();
  if (c.generation != Generation::kOld && c.generation != Generation::kNew) {
    throw FormatError("bad generation tag");
  }
  c.num_heads = r.get<std::uint32_t>();
  c.head_dim = r.get<std::uint32_t>();
  const auto num_layers = r.get<std::uint32_t>();
  c.layout.block_size = r.get<std::uint32_t>();
  c.layout.n_initial = r.get<std::uint32_t>();
  c.layout.n_local = r.get<std::uint32_t>();
  const auto n_tokens = r.get<std::uint32_t>();
  constexpr std::uint64_t kMaxElements = 1ull << 30;
  const std::uint64_t hidden = static_cast<std::uint64_t>(c.num_heads) * c.head_dim;
  if (hidden == 0 || num_layers == 0 || c.layout.block_size == 0 ||
      hidden * n_tokens > kMaxElements || num_layers > 4096) {
    throw FormatError("cache header out of range");
  }
  c.token_ids.resize(n_tokens);
  for (auto& t : c.token_ids) t = r.get<std::int32_t>();
  c.query_retained.resize(n_tokens);
  for (auto& q : c.query_retained) q = r.get<std::uint8_t>();
  const auto n_blocks = r.get<std::uint32_t>();
  if (n_blocks > n_tokens) throw FormatError("block count exceeds token count");
  c.blocks.resize(n_blocks);
  for (auto& b : c.blocks) {
    b.index = r.get<std::uint32_t>();
    b.span.start = r.get<std::uint32_t>();
    b.span.end = r.get<std::uint32_t>();
    b.role = r.get<BlockRole>();
    if (static_cast<std::uint8_t>(b.role) > 2) throw FormatError("bad role tag");
  }
  c.layers.resize(num_layers);
  for (auto& kv : c.layers) {
    kv.keys = Matrix(n_tokens, hidden);
    kv.values = Matrix(n_tokens, hidden);
    r.get_floats(kv.keys.data());
    r.get_floats(kv.values.data());
    if (r.get<std::uint8_t>() != 0) {
      kv.queries = Matrix(n_tokens, hidden);
      r.get_floats(kv.queries.data());
    }
    kv.mean_keys = Matrix(n_blocks, hidden);
    r.get_floats(kv.mean_keys.data());
  }
  r.expect_end();
  try {
    c.validate(std::numeric_limits<double>::infinity());
  } catch (const CacheError& e) {
    throw FormatError(std::string("inconsistent cache file: ") + e.what());
  }
  return c;
}

// ---------------------------------------------------------------------------
// Composite caches

CompositeCache CompositeCache::empty(std::uint32_t num_layers, std::uint32_t hidden_dim) {
  CompositeCache c;
  c.layers.resize(num_layers);
  for (auto& l : c.layers) {
    l.keys = Matrix(0, hidden_dim);
    l.values = Matrix(0, hidden_dim);
  }
  return c;
}

bool CompositeCache::has_padding() const noexcept {
  for (const auto& l : layers) {
    for (const auto& s : l.slots) {
      if (s.padding) return true;
    }
  }
  return false;
}

bool CompositeCache::is_aligned() const noexcept {
  for (const auto& l : layers) {
    if (l.slots.size() != layers.front().slots.size()) return false;
    for (std::size_t i = 0; i < l.slots.size(); ++i) {
      const auto& a = l.slots[i];
      const auto& b = layers.front().slots[i];
      if (a.doc != b.doc || a.block != b.block) return false;
    }
  }
  return true;
}

std::size_t CompositeCache::retained_rows() const noexcept {
  std::size_t n = 0;
  for (const auto& l : layers) {
    for (const auto& r : l.rows) n += r.padding ? 0 : 1;
  }
  return n;
}

CompositeCache assemble_composite(std::span<const DocumentCache> docs,
                                  const std::vector<std::vector<CompositeSlot>>& layer_slots) {
  if (docs.empty()) throw InputError("composite needs at least one document");
  const auto num_layers = docs.front().num_layers();
  const auto hidden = docs.front().hidden_dim();
  for (const auto& d : docs) {
    if (d.num_layers() != num_layers || d.hidden_dim() != hidden) {
      throw CacheError("documents disagree on model shape");
    }
  }
  if (layer_slots.size() != num_layers) throw CacheError("slot list per layer required");

  std::set<std::pair<std::uint32_t, std::uint32_t>> used;
  for (const auto& slots : layer_slots) {
    for (const auto& s : slots) {
      if (s.doc >= docs.size() || s.block >= docs[s.doc].blocks.size()) {
        throw CacheError("composite slot references a missing block");
      }
      used.emplace(s.doc, s.block);
    }
  }
  std::map<std::pair<std::uint32_t, std::uint32_t>, std::uint32_t> base;
  std::uint32_t next = 0;
  for (const auto& key : used) {
    base[key] = next;
    next += docs[key.first].blocks[key.second].span.size();
  }

  CompositeCache c;
  for (const auto& d : docs) c.doc_ids.push_back(d.doc_id);
  c.next_position = next;
  c.layers.resize(num_layers);
  for (std::uint32_t l = 0; l < num_layers; ++l) {
    auto& out = c.layers[l];
    out.slots = layer_slots[l];
    out.keys = Matrix(0, hidden);
    out.values = Matrix(0, hidden);
    for (const auto& s : out.slots) {
      const auto& doc = docs[s.doc];
      const auto& span = doc.blocks[s.block].span;
      const auto pos0 = base.at({s.doc, s.block});
      for (auto p = span.start; p < span.end; ++p) {
        out.rows.push_back({s.doc, s.block, p, doc.token_ids[p], pos0 + (p - span.start), s.padding});
        out.keys.append_row(doc.layers[l].keys.row(p));
        out.values.append_row(doc.layers[l].values.row(p));
      }
    }
  }
  return c;
}

CompositeCache build_composite_initial_local(std::span<const DocumentCache> docs) {
  if (docs.empty()) throw InputError("composite needs at least one document");
  std::vector<CompositeSlot> slots;
  for (std::uint32_t d = 0; d < docs.size(); ++d) {
    for (auto b : docs[d].blocks_with_role(BlockRole::kInitial)) slots.push_back({d, b});
    for (auto b : docs[d].blocks_with_role(BlockRole::kLocal)) slots.push_back({d, b});
  }
  return assemble_composite(docs, std::vector(docs.front().num_layers(), slots));
}

CompositeCache concatenate_documents(std::span<const DocumentCache> docs) {
  if (docs.empty()) throw InputError("composite needs at least one document");
  std::vector<CompositeSlot> slots;
  for (std::uint32_t d = 0; d < docs.size(); ++d) {
    for (const auto& b : docs[d].blocks) slots.push_back({d, b.index});
  }
  return assemble_composite(docs, std::vector(docs.front().num_layers(), slots));
}

CompositeCache strip_padding(CompositeCache cache) {
  for (auto& l : cache.layers) {
    std::vector<CompositeSlot> slots;
    for (const auto& s : l.slots) {
      if (!s.padding) slots.push_back(s);
    }
    std::vector<TokenRef> rows;
    Matrix keys(0, l.keys.cols());
    Matrix values(0, l.values.cols());
    for (std::size_t r = 0; r < l.rows.size(); ++r) {
      if (l.rows[r].padding) continue;
      rows.push_back(l.rows[r]);
      keys.append_row(l.keys.row(r));
      values.append_row(l.values.row(r));
    }
    l.slots = std::move(slots);
    l.rows = std::move(rows);
    l.keys = std::move(keys);
    l.values = std::move(values);
  }
  return cache;
}

}  // namespace mckv
