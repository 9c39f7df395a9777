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

#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "knz/rng.hpp"

namespace knz {

inline constexpr std::size_t kByteVocab = 256;

inline std::vector<int> tokenize_bytes(std::string_view text) {
  std::vector<int> out;
  out.reserve(text.size());
  for (char ch : text) out.push_back(static_cast<int>(static_cast<unsigned char>(ch)));
  return out;
}

inline std::string detokenize_bytes(std::span<const int> ids) {
  std::string out;
  out.reserve(ids.size());
  for (int id : ids) out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
  return out;
}

/// Byte-tokenized text with a contiguous train / validation split: the last
/// `validation_fraction` of the stream is held out.
class Corpus {
 public:
  static Corpus from_text(std::string_view text, double validation_fraction = 0.1) {
    if (!(validation_fraction > 0.0 && validation_fraction < 1.0)) {
      throw std::invalid_argument("Corpus: validation fraction must lie in (0, 1)");
    }
    Corpus c;
    c.tokens_ = tokenize_bytes(text);
    c.split_ = static_cast<std::size_t>(static_cast<double>(c.tokens_.size()) * (1.0 - validation_fraction));
    return c;
  }

  static Corpus load(const std::string& path, double validation_fraction = 0.1) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("corpus: cannot open " + path);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return from_text(text, validation_fraction);
  }

  std::span<const int> tokens() const { return tokens_; }
  std::span<const int> train() const { return std::span<const int>(tokens_).first(split_); }
  std::span<const int> validation() const { return std::span<const int>(tokens_).subspan(split_); }

 private:
  std::vector<int> tokens_;
  std::size_t split_ = 0;
};

/// Inputs and next-token targets, one row per sequence.
struct LmBatch {
  std::vector<std::vector<int>> inputs;
  std::vector<std::vector<int>> targets;

  std::vector<int> flat_targets() const {
    std::vector<int> out;
    for (const auto& t : targets) out.insert(out.end(), t.begin(), t.end());
    return out;
  }
};

/// Random windows of seq_len + 1 tokens drawn from `tokens`.
inline LmBatch sample_batch(std::span<const int> tokens, std::size_t batch, std::size_t seq_len, Rng& rng) {
  if (tokens.size() < seq_len + 1) {
    throw std::invalid_argument("sample_batch: " + std::to_string(tokens.size()) +
                                " tokens cannot fill a window of " + std::to_string(seq_len + 1));
  }
  LmBatch out;
  const std::uint64_t starts = tokens.size() - seq_len;
  for (std::size_t b = 0; b < batch; ++b) {
    const auto s = static_cast<std::size_t>(rng.below(starts));
    out.inputs.emplace_back(tokens.begin() + static_cast<std::ptrdiff_t>(s),
                            tokens.begin() + static_cast<std::ptrdiff_t>(s + seq_len));
    out.targets.emplace_back(tokens.begin() + static_cast<std::ptrdiff_t>(s + 1),
                             tokens.begin() + static_cast<std::ptrdiff_t>(s + seq_len + 1));
  }
  return out;
}

/// Non-overlapping windows from the start of `tokens`, grouped into batches.
/// `max_windows` == 0 means use every full window.
inline std::vector<LmBatch> sequential_batches(std::span<const int> tokens, std::size_t batch,
                                               std::size_t seq_len, std::size_t max_windows = 0) {
  std::vector<LmBatch> out;
  std::size_t windows = tokens.size() > seq_len ? (tokens.size() - 1) / seq_len : 0;
  if (max_windows != 0) windows = std::min(windows, max_windows);
  for (std::size_t w = 0; w < windows; ++w) {
    if (w % batch == 0) out.emplace_back();
    const std::size_t s = w * seq_len;
    out.back().inputs.emplace_back(tokens.begin() + static_cast<std::ptrdiff_t>(s),
                                   tokens.begin() + static_cast<std::ptrdiff_t>(s + seq_len));
    out.back().targets.emplace_back(tokens.begin() + static_cast<std::ptrdiff_t>(s + 1),
                                    tokens.begin() + static_cast<std::ptrdiff_t>(s + seq_len + 1));
  }
  return out;
}

/// Seeded English-like text from a small phrase grammar, used as a local
/// stand-in corpus when no real text is at hand.
inline std::string synthesize_text(std::size_t bytes, std::uint64_t seed) {
  static constexpr std::array<std::string_view, 8> kDet = {"the", "a", "this", "that", "every", "one", "some", "no"};
  static constexpr std::array<std::string_view, 24> kAdj = {
      "small", "large", "quiet", "bright", "old", "new", "dense", "sparse", "careful", "rapid",
      "simple", "strange", "green", "cold", "warm", "early", "late", "broken", "narrow", "wide",
      "heavy", "gentle", "hidden", "clear"};
  static constexpr std::array<std::string_view, 32> kNoun = {
      "river", "matrix", "teacher", "student", "village", "engine", "garden", "window", "signal",
      "forest", "letter", "model", "bridge", "market", "harbor", "library", "farmer", "painter",
      "island", "kernel", "tower", "valley", "machine", "story", "winter", "lantern", "road",
      "factor", "mountain", "sailor", "clock", "field"};
  static constexpr std::array<std::string_view, 24> kVerb = {
      "finds", "follows", "builds", "watches", "compresses", "carries", "remembers", "opens",
      "crosses", "teaches", "learns", "paints", "measures", "repairs", "answers", "reads",
      "visits", "divides", "joins", "counts", "keeps", "moves", "lifts", "guards"};
  static constexpr std::array<std::string_view, 10> kPrep = {"near", "under", "behind", "across", "beside",
                                                            "inside", "beyond", "along", "over", "around"};
  static constexpr std::array<std::string_view, 10> kAdv = {"slowly", "quickly", "often", "never", "again",
                                                           "quietly", "early", "together", "alone", "still"};
  static constexpr std::array<std::string_view, 6> kConj = {"and", "but", "while", "because", "so", "until"};

  Rng rng(seed);
  // Skewed choice: squaring a uniform favors low indices.
  auto pick = [&](auto const& list) -> std::string_view {
    const double u = rng.uniform();
    return list[static_cast<std::size_t>(u * u * static_cast<double>(list.size()))];
  };
  auto noun_phrase = [&](std::string& s) {
    s += pick(kDet);
    s += ' ';
    if (rng.uniform() < 0.6) {
      s += pick(kAdj);
      s += ' ';
    }
    s += pick(kNoun);
  };
  auto clause = [&](std::string& s) {
    noun_phrase(s);
    s += ' ';
    if (rng.uniform() < 0.25) {
      s += pick(kAdv);
      s += ' ';
    }
    s += pick(kVerb);
    s += ' ';
    noun_phrase(s);
    if (rng.uniform() < 0.5) {
      s += ' ';
      s += pick(kPrep);
      s += ' ';
      noun_phrase(s);
    }
  };

  std::string out;
  out.reserve(bytes + 256);
  std::size_t sentences_in_paragraph = 0;
  while (out.size() < bytes) {
    std::string sentence;
    clause(sentence);
    if (rng.uniform() < 0.35) {
      sentence += ", ";
      sentence += pick(kConj);
      sentence += ' ';
      clause(sentence);
    }
    sentence[0] = static_cast<char>(sentence[0] - 'a' + 'A');
    sentence += rng.uniform() < 0.1 ? "?" : ".";
    out += sentence;
    if (++sentences_in_paragraph >= 4 + rng.below(4)) {
      out += "\n\n";
      sentences_in_paragraph = 0;
    } else {
      out += ' ';
    }
  }
  out.resize(bytes);
  return out;
}

}  // namespace knz
