// Copyright 2026 The mckv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "mckv/tensor.hpp"

namespace mckv {

enum class BlockRole : std::uint8_t { kInitial = 0, kMiddle = 1, kLocal = 2 };
enum class Generation : std::uint8_t { kOld = 0, kNew = 1 };

const char* to_string(BlockRole role) noexcept;

/// Half-open token range [start, end) in document-local positions.
struct TokenSpan {
  std::uint32_t start = 0;
  std::uint32_t end = 0;
  std::uint32_t size() const noexcept { return end - start; }
  bool contains(std::uint32_t p) const noexcept { return p >= start && p < end; }
  bool operator==(const TokenSpan&) const = default;
};

struct BlockLayout {
  std::uint32_t block_size = 64;
  std::uint32_t n_initial = 1;
  std::uint32_t n_local = 2;
  bool operator==(const BlockLayout&) const = default;
};

struct BlockInfo {
  std::uint32_t index = 0;
  TokenSpan span;
  BlockRole role = BlockRole::kMiddle;
  bool operator==(const BlockInfo&) const = default;
};

/// Per-layer tensors of one document. `queries` has the same shape as
/// `keys`; rows whose query was not retained are zero.
struct LayerKV {
  Matrix keys;
  Matrix values;
  Matrix queries;
  Matrix mean_keys;  // one row per block
};

/// Non-owning view of one block at one layer.
struct KVBlock {
  const BlockInfo* info = nullptr;
  std::uint32_t layer = 0;
  const Matrix* keys = nullptr;
  const Matrix* values = nullptr;
  const Matrix* queries = nullptr;  // null when the block has no retained Q
  std::span<const float> mean_key;

  std::span<const float> key(std::uint32_t i) const { return keys->row(info->span.start + i); }
  std::span<const float> value(std::uint32_t i) const { return values->row(info->span.start + i); }
};

/// One document's independently prefilled cache, tiled into blocks.
struct DocumentCache {
  std::string doc_id;
  std::vector<std::int32_t> token_ids;
  Generation generation = Generation::kOld;
  std::uint32_t num_heads = 0;
  std::uint32_t head_dim = 0;
  BlockLayout layout;
  std::vector<BlockInfo> blocks;
  std::vector<LayerKV> layers;
  std::vector<std::uint8_t> query_retained;  // per token

  std::uint32_t num_tokens() const noexcept { return static_cast<std::uint32_t>(token_ids.size()); }
  std::uint32_t num_layers() const noexcept { return static_cast<std::uint32_t>(layers.size()); }
  std::uint32_t hidden_dim() const noexcept { return num_heads * head_dim; }

  KVBlock block(std::uint32_t layer, std::uint32_t b) const;
  bool block_has_queries(std::uint32_t b) const;
  std::vector<std::uint32_t> blocks_with_role(BlockRole role) const;

  /// Checks tiling, role configuration and stored mean keys; throws CacheError.
  void validate(double mean_key_tol = 1e-6) const;
};

/// Tiles [0, num_tokens) into blocks and assigns roles. Short documents give
/// initial blocks precedence over local ones.
std::vector<BlockInfo> tile_blocks(std::uint32_t num_tokens, const BlockLayout& layout);

/// Per-block column means of `keys`, i.e. the per-head mean key of each block.
Matrix block_mean_keys(const Matrix& keys, std::span<const BlockInfo> blocks);

DocumentCache partition_blocks(DocumentCache cache, std::uint32_t block_size,
                               std::uint32_t n_initial, std::uint32_t n_local);

void save_cache(const DocumentCache& cache, const std::filesystem::path& path);
DocumentCache load_cache(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Composite caches

struct CompositeSlot {
  std::uint32_t doc = 0;    // index into the document list used to build it
  std::uint32_t block = 0;  // block index within that document
  bool padding = false;
  bool operator==(const CompositeSlot&) const = default;
};

struct TokenRef {
  std::uint32_t doc = 0;
  std::uint32_t block = 0;
  std::uint32_t offset = 0;    // position within the document
  std::int32_t token_id = 0;
  std::uint32_t position = 0;  // contiguous position within the composite
  bool padding = false;
};

struct CompositeLayer {
  std::vector<CompositeSlot> slots;
  std::vector<TokenRef> rows;
  Matrix keys;
  Matrix values;
};

/// Concatenated (possibly sparse) multi-document cache. Rows own copies of
/// the source K,V so recomputation can update them in place.
struct CompositeCache {
  std::vector<std::string> doc_ids;
  std::vector<CompositeLayer> layers;
  std::uint32_t next_position = 0;

  static CompositeCache empty(std::uint32_t num_layers, std::uint32_t hidden_dim);

  std::uint32_t num_layers() const noexcept { return static_cast<std::uint32_t>(layers.size()); }
  bool has_padding() const noexcept;
  /// True when every layer exposes the same (doc, block) slot sequence.
  bool is_aligned() const noexcept;
  /// Number of non-padding rows summed over layers.
  std::size_t retained_rows() const noexcept;
};

/// Copies the listed slots of each layer from `docs`. Positions are assigned
/// contiguously over the union of slots in (document, block) order.
CompositeCache assemble_composite(std::span<const DocumentCache> docs,
                                  const std::vector<std::vector<CompositeSlot>>& layer_slots);

/// Each document's initial blocks then local blocks, documents in order.
CompositeCache build_composite_initial_local(std::span<const DocumentCache> docs);

/// Every block of every document, documents in order.
CompositeCache concatenate_documents(std::span<const DocumentCache> docs);

/// Drops padding slots at every layer; positions of the remaining rows are kept.
CompositeCache strip_padding(CompositeCache cache);

}  // namespace mckv
