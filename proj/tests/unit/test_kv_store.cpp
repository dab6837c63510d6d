// Copyright 2026 The mckv Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "mckv/engine.hpp"
#include "mckv/errors.hpp"
#include "mckv/kv_store.hpp"
#include "mckv/model.hpp"

namespace mckv {
namespace {

std::vector<BlockRole> roles(std::uint32_t n, BlockLayout layout = {}) {
  std::vector<BlockRole> out;
  for (const auto& b : tile_blocks(n, layout)) out.push_back(b.role);
  return out;
}

constexpr auto I = BlockRole::kInitial;
constexpr auto M = BlockRole::kMiddle;
constexpr auto L = BlockRole::kLocal;

TEST(TileBlocks, RoleExamples) {
  EXPECT_EQ(roles(320), (std::vector{I, M, M, L, L}));
  EXPECT_EQ(roles(256), (std::vector{I, M, L, L}));
  EXPECT_EQ(roles(64), (std::vector{I}));
  EXPECT_EQ(roles(1), (std::vector{I}));
  EXPECT_EQ(roles(128), (std::vector{I, L}));
  EXPECT_EQ(roles(192), (std::vector{I, L, L}));
  EXPECT_TRUE(roles(0).empty());
}

TEST(TileBlocks, ShortFinalBlock) {
  const auto blocks = tile_blocks(130, {});
  ASSERT_EQ(blocks.size(), 3u);
  EXPECT_EQ(blocks[0].span, (TokenSpan{0, 64}));
  EXPECT_EQ(blocks[1].span, (TokenSpan{64, 128}));
  EXPECT_EQ(blocks[2].span, (TokenSpan{128, 130}));
  EXPECT_EQ(blocks[2].span.size(), 2u);
}

TEST(TileBlocks, TilingInvariantsOverManyShapes) {
  for (std::uint32_t n = 1; n < 700; n += 13) {
    for (std::uint32_t bs : {1u, 7u, 64u, 100u}) {
      for (std::uint32_t ni : {0u, 1u, 2u}) {
        for (std::uint32_t nl : {0u, 1u, 3u}) {
          const auto blocks = tile_blocks(n, {bs, ni, nl});
          std::uint32_t cursor = 0;
          std::uint32_t count[3] = {0, 0, 0};
          for (std::size_t i = 0; i < blocks.size(); ++i) {
            EXPECT_EQ(blocks[i].index, i);
            EXPECT_EQ(blocks[i].span.start, cursor);
            EXPECT_LE(blocks[i].span.size(), bs);
            if (i + 1 < blocks.size()) EXPECT_EQ(blocks[i].span.size(), bs);
            cursor = blocks[i].span.end;
            ++count[static_cast<int>(blocks[i].role)];
          }
          EXPECT_EQ(cursor, n);
          const auto nb = static_cast<std::uint32_t>(blocks.size());
          EXPECT_EQ(count[0], std::min(ni, nb));
          EXPECT_EQ(count[2], std::min(nl, nb - count[0]));
          EXPECT_EQ(count[0] + count[1] + count[2], nb);
        }
      }
    }
  }
}

TEST(TileBlocks, ZeroBlockSizeIsConfigError) {
  EXPECT_THROW(tile_blocks(10, {0, 1, 2}), ConfigError);
}

TEST(BlockMeanKeys, MatchesHandComputedMeans) {
  Matrix keys(5, 2);
  for (std::size_t r = 0; r < 5; ++r) {
    keys(r, 0) = static_cast<float>(r);
    keys(r, 1) = static_cast<float>(10 * r);
  }
  const auto blocks = tile_blocks(5, {2, 1, 1});
  const auto means = block_mean_keys(keys, blocks);
  ASSERT_EQ(means.rows(), 3u);
  EXPECT_FLOAT_EQ(means(0, 0), 0.5f);
  EXPECT_FLOAT_EQ(means(0, 1), 5.0f);
  EXPECT_FLOAT_EQ(means(1, 0), 2.5f);
  EXPECT_FLOAT_EQ(means(2, 0), 4.0f);
  EXPECT_FLOAT_EQ(means(2, 1), 40.0f);
}

class CacheFixture : public ::testing::Test {
 protected:
  static ModelSpec spec() {
    ModelSpec s;
    s.num_layers = 3;
    s.num_heads = 2;
    s.head_dim = 4;
    s.hidden_dim = 8;
    s.vocab_size = 50;
    s.seed = 5;
    return s;
  }
  static std::vector<std::int32_t> tokens(std::size_t n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::vector<std::int32_t> t(n);
    for (auto& x : t) x = static_cast<std::int32_t>(rng() % 50);
    return t;
  }
  ModelWeights weights = build_model(spec());
  std::filesystem::path path = std::filesystem::temp_directory_path() / "mckv_kv_store_test.mckv";
  void TearDown() override { std::filesystem::remove(path); }
};

TEST_F(CacheFixture, PrefilledCacheValidates) {
  const auto doc = prefill_document(weights, "a", tokens(300, 1));
  EXPECT_NO_THROW(doc.validate());
  for (std::uint32_t l = 0; l < 3; ++l) {
    for (const auto& b : doc.blocks) {
      const auto view = doc.block(l, b.index);
      for (std::size_t c = 0; c < 8; ++c) {
        double acc = 0.0;
        for (std::uint32_t i = 0; i < b.span.size(); ++i) acc += view.key(i)[c];
        EXPECT_NEAR(view.mean_key[c], acc / b.span.size(), 1e-6);
      }
    }
  }
  EXPECT_THROW(doc.block(3, 0), CacheError);
  EXPECT_THROW(doc.block(0, 99), CacheError);
}

TEST_F(CacheFixture, ValidateCatchesCorruption) {
  auto doc = prefill_document(weights, "a", tokens(300, 2));
  auto bad = doc;
  bad.layers[1].mean_keys(0, 0) += 1.0f;
  EXPECT_THROW(bad.validate(), CacheError);
  bad = doc;
  bad.blocks[1].span.end += 1;
  EXPECT_THROW(bad.validate(), CacheError);
  bad = doc;
  bad.blocks[1].role = BlockRole::kLocal;
  EXPECT_THROW(bad.validate(), CacheError);
}

TEST_F(CacheFixture, RepartitionKeepsTensors) {
  const auto doc = prefill_document(weights, "a", tokens(300, 3));
  const auto re = partition_blocks(doc, 32, 2, 1);
  EXPECT_NO_THROW(re.validate());
  EXPECT_EQ(re.blocks.size(), 10u);
  EXPECT_TRUE(re.layers[0].keys.bit_equal(doc.layers[0].keys));
  EXPECT_EQ(re.blocks_with_role(BlockRole::kInitial), (std::vector<std::uint32_t>{0, 1}));
  EXPECT_EQ(re.blocks_with_role(BlockRole::kLocal), (std::vector<std::uint32_t>{9}));
}

TEST_F(CacheFixture, SaveLoadRoundTripIsBitExact) {
  for (auto retention : {QRetention::kNone, QRetention::kPivotal, QRetention::kAll}) {
    auto doc = prefill_document(weights, "doc-\xc3\xa9", tokens(200, 4), {}, retention);
    doc.generation = Generation::kNew;
    save_cache(doc, path);
    const auto back = load_cache(path);
    EXPECT_EQ(back.doc_id, doc.doc_id);
    EXPECT_EQ(back.token_ids, doc.token_ids);
    EXPECT_EQ(back.generation, Generation::kNew);
    EXPECT_EQ(back.layout, doc.layout);
    EXPECT_EQ(back.blocks, doc.blocks);
    EXPECT_EQ(back.query_retained, doc.query_retained);
    for (std::uint32_t l = 0; l < 3; ++l) {
      EXPECT_TRUE(back.layers[l].keys.bit_equal(doc.layers[l].keys));
      EXPECT_TRUE(back.layers[l].values.bit_equal(doc.layers[l].values));
      EXPECT_TRUE(back.layers[l].queries.bit_equal(doc.layers[l].queries));
      EXPECT_TRUE(back.layers[l].mean_keys.bit_equal(doc.layers[l].mean_keys));
    }
  }
}

TEST_F(CacheFixture, TruncatedFilesAreFormatErrors) {
  const auto doc = prefill_document(weights, "a", tokens(130, 5));
  save_cache(doc, path);
  const auto size = std::filesystem::file_size(path);
  for (std::uintmax_t cut = 0; cut < size; cut += std::max<std::uintmax_t>(1, size / 37)) {
    save_cache(doc, path);
    std::filesystem::resize_file(path, cut);
    EXPECT_THROW(load_cache(path), FormatError) << "cut " << cut;
  }
  save_cache(doc, path);
  std::filesystem::resize_file(path, size - 1);
  EXPECT_THROW(load_cache(path), FormatError);
}

TEST_F(CacheFixture, TrailingBytesAndBadHeaderAreFormatErrors) {
  const auto doc = prefill_document(weights, "a", tokens(70, 6));
  save_cache(doc, path);
  {
    std::ofstream f(path, std::ios::app | std::ios::binary);
    f << "xx";
  }
  EXPECT_THROW(load_cache(path), FormatError);
  save_cache(doc, path);
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(4);
    f.put(9);  // version
  }
  EXPECT_THROW(load_cache(path), FormatError);
  save_weights(weights, path);
  EXPECT_THROW(load_cache(path), FormatError);
}

TEST_F(CacheFixture, MissingFileIsInputError) {
  EXPECT_THROW(load_cache("/nonexistent/dir/x.mckv"), InputError);
}

TEST_F(CacheFixture, ConcatenationOfThreeDocuments) {
  std::vector<DocumentCache> docs{prefill_document(weights, "a", tokens(192, 7)),
                                  prefill_document(weights, "b", tokens(192, 8)),
                                  prefill_document(weights, "c", tokens(192, 9))};
  const auto c = concatenate_documents(docs);
  ASSERT_EQ(c.num_layers(), 3u);
  EXPECT_EQ(c.next_position, 576u);
  EXPECT_TRUE(c.is_aligned());
  EXPECT_FALSE(c.has_padding());
  EXPECT_EQ(c.retained_rows(), 3u * 576u);
  for (const auto& layer : c.layers) {
    ASSERT_EQ(layer.slots.size(), 9u);
    for (std::uint32_t i = 0; i < 9; ++i) {
      EXPECT_EQ(layer.slots[i].doc, i / 3);
      EXPECT_EQ(layer.slots[i].block, i % 3);
    }
    for (std::size_t r = 0; r < layer.rows.size(); ++r) {
      EXPECT_EQ(layer.rows[r].position, r);
      EXPECT_EQ(layer.rows[r].token_id, docs[layer.rows[r].doc].token_ids[layer.rows[r].offset]);
    }
  }
}

TEST_F(CacheFixture, ConcatenationOrderPermutesRows) {
  std::vector<DocumentCache> ab{prefill_document(weights, "a", tokens(100, 10)),
                                prefill_document(weights, "b", tokens(150, 11))};
  std::vector<DocumentCache> ba{ab[1], ab[0]};
  const auto x = concatenate_documents(ab);
  const auto y = concatenate_documents(ba);
  for (std::uint32_t l = 0; l < 3; ++l) {
    ASSERT_EQ(x.layers[l].rows.size(), 250u);
    for (std::size_t r = 0; r < 100; ++r) {
      const auto a = x.layers[l].keys.row(r);
      const auto b = y.layers[l].keys.row(150 + r);
      EXPECT_TRUE(std::equal(a.begin(), a.end(), b.begin()));
    }
    for (std::size_t r = 0; r < 150; ++r) {
      const auto a = x.layers[l].values.row(100 + r);
      const auto b = y.layers[l].values.row(r);
      EXPECT_TRUE(std::equal(a.begin(), a.end(), b.begin()));
    }
  }
}

TEST_F(CacheFixture, InitialLocalCompositeAndPositions) {
  std::vector<DocumentCache> docs{prefill_document(weights, "a", tokens(320, 12)),
                                  prefill_document(weights, "b", tokens(64, 13))};
  const auto c = build_composite_initial_local(docs);
  const auto& slots = c.layers[0].slots;
  ASSERT_EQ(slots.size(), 4u);
  EXPECT_EQ(slots[0], (CompositeSlot{0, 0, false}));
  EXPECT_EQ(slots[1], (CompositeSlot{0, 3, false}));
  EXPECT_EQ(slots[2], (CompositeSlot{0, 4, false}));
  EXPECT_EQ(slots[3], (CompositeSlot{1, 0, false}));
  EXPECT_EQ(c.next_position, 256u);
  EXPECT_EQ(c.layers[0].rows[64].offset, 192u);
  EXPECT_EQ(c.layers[0].rows[64].position, 64u);
}

TEST_F(CacheFixture, AssembleRejectsMissingBlocksAndShapeMismatch) {
  std::vector<DocumentCache> docs{prefill_document(weights, "a", tokens(64, 14))};
  EXPECT_THROW(assemble_composite(docs, std::vector<std::vector<CompositeSlot>>(3, {{0, 5}})), CacheError);
  EXPECT_THROW(assemble_composite(docs, std::vector<std::vector<CompositeSlot>>(2, {{0, 0}})), CacheError);
  auto other = spec();
  other.num_layers = 2;
  docs.push_back(prefill_document(build_model(other), "b", tokens(64, 15)));
  EXPECT_THROW(concatenate_documents(docs), CacheError);
  EXPECT_THROW(concatenate_documents(std::span<const DocumentCache>{}), InputError);
}

TEST_F(CacheFixture, StripPaddingDropsOnlyPadding) {
  std::vector<DocumentCache> docs{prefill_document(weights, "a", tokens(256, 16))};
  std::vector<std::vector<CompositeSlot>> slots(3, {{0, 0}, {0, 1, true}, {0, 2}, {0, 3}});
  slots[1][1].padding = false;
  const auto c = assemble_composite(docs, slots);
  EXPECT_TRUE(c.has_padding());
  EXPECT_TRUE(c.is_aligned());
  const auto s = strip_padding(c);
  EXPECT_FALSE(s.has_padding());
  EXPECT_EQ(s.layers[0].rows.size(), 192u);
  EXPECT_EQ(s.layers[1].rows.size(), 256u);
  EXPECT_EQ(s.layers[0].rows[64].position, 128u);
  EXPECT_FALSE(s.is_aligned());
}

}  // namespace
}  // namespace mckv
