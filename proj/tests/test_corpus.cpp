// Copyright 2026 The knz Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//    http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "knz/corpus.hpp"

namespace knz {
namespace {

TEST(Tokenize, BytesRoundTrip) {
  std::string all;
  for (int c = 0; c < 256; ++c) all.push_back(static_cast<char>(c));
  const std::vector<int> ids = tokenize_bytes(all);
  ASSERT_EQ(ids.size(), 256u);
  for (int c = 0; c < 256; ++c) EXPECT_EQ(ids[static_cast<std::size_t>(c)], c);
  EXPECT_EQ(detokenize_bytes(ids), all);
}

TEST(Corpus, ContiguousSplit) {
  const Corpus c = Corpus::from_text("abcdefghij", 0.3);
  EXPECT_EQ(c.train().size(), 7u);
  EXPECT_EQ(c.validation().size(), 3u);
  EXPECT_EQ(c.validation().front(), 'h');
  EXPECT_THROW(Corpus::from_text("abc", 0.0), std::invalid_argument);
  EXPECT_THROW(Corpus::from_text("abc", 1.0), std::invalid_argument);
}

TEST(Corpus, LoadFromFile) {
  const auto path = std::filesystem::temp_directory_path() / "knz_corpus_test.txt";
  {
    std::ofstream out(path, std::ios::binary);
    out << "hello world\n";
  }
  const Corpus c = Corpus::load(path.string(), 0.5);
  EXPECT_EQ(c.tokens().size(), 12u);
  std::filesystem::remove(path);
  EXPECT_THROW(Corpus::load(path.string()), std::runtime_error);
}

TEST(Batches, SampledTargetsShiftInputsByOne) {
  std::vector<int> tokens(100);
  for (std::size_t i = 0; i < tokens.size(); ++i) tokens[i] = static_cast<int>(i);
  Rng rng(1);
  const LmBatch b = sample_batch(tokens, 5, 8, rng);
  ASSERT_EQ(b.inputs.size(), 5u);
  for (std::size_t r = 0; r < 5; ++r) {
    ASSERT_EQ(b.inputs[r].size(), 8u);
    for (std::size_t t = 0; t < 8; ++t) EXPECT_EQ(b.targets[r][t], b.inputs[r][t] + 1);
    EXPECT_LE(b.targets[r].back(), 99);
  }
  EXPECT_EQ(b.flat_targets().size(), 40u);
  EXPECT_THROW(sample_batch(std::vector<int>(8), 1, 8, rng), std::invalid_argument);
}

TEST(Batches, SamplingCoversEveryStart) {
  std::vector<int> tokens(12);
  for (std::size_t i = 0; i < tokens.size(); ++i) tokens[i] = static_cast<int>(i);
  Rng rng(2);
  std::set<int> starts;
  for (int k = 0; k < 200; ++k) starts.insert(sample_batch(tokens, 1, 4, rng).inputs[0][0]);
  EXPECT_EQ(starts.size(), 8u);
}

TEST(Batches, SequentialWindowsTileTheStream) {
  std::vector<int> tokens(26);
  for (std::size_t i = 0; i < tokens.size(); ++i) tokens[i] = static_cast<int>(i);
  const std::vector<LmBatch> bs = sequential_batches(tokens, 2, 5);
  // (26 - 1) / 5 = 5 windows, grouped 2 + 2 + 1.
  ASSERT_EQ(bs.size(), 3u);
  EXPECT_EQ(bs[2].inputs.size(), 1u);
  EXPECT_EQ(bs[1].inputs[1][0], 15);
  EXPECT_EQ(bs[2].targets[0].back(), 25);
  EXPECT_EQ(sequential_batches(tokens, 2, 5, 3).size(), 2u);
  EXPECT_TRUE(sequential_batches(std::vector<int>(5), 2, 5).empty());
}

TEST(Synthetic, DeterministicSizedText) {
  const std::string a = synthesize_text(5000, 7), b = synthesize_text(5000, 7), c = synthesize_text(5000, 8);
  EXPECT_EQ(a.size(), 5000u);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
  EXPECT_TRUE(std::isupper(static_cast<unsigned char>(a[0])));
  for (char ch : a) EXPECT_TRUE(ch == '\n' || (ch >= 32 && ch < 127));
  EXPECT_NE(a.find(". "), std::string::npos);
  EXPECT_NE(a.find("\n\n"), std::string::npos);
  EXPECT_TRUE(synthesize_text(0, 1).empty());
}

}  // namespace
}  // namespace knz
