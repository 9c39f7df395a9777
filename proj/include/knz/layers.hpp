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
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "knz/kronecker.hpp"
#include "knz/matrix.hpp"
#include "knz/rng.hpp"

namespace knz {

class PlanningError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class OutOfRangeError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

/// y = x W^T + bias with W stored out x in.
struct DenseLinear {
  Matrix weight;
  std::optional<Matrix> bias;  // 1 x out

  std::size_t in_features() const noexcept { return weight.cols(); }
  std::size_t out_features() const noexcept { return weight.rows(); }
};

/// Same map as DenseLinear with W = A kron B. The bias stays dense.
struct KroneckerLinear {
  KroneckerPair factors;
  std::optional<Matrix> bias;

  std::size_t in_features() const noexcept { return factors.cols(); }
  std::size_t out_features() const noexcept { return factors.rows(); }
};

using Linear = std::variant<DenseLinear, KroneckerLinear>;

struct DenseEmbedding {
  Matrix table;  // vocab x d
};

/// Token table W^E = a_e kron b_e with a_e (v x d/f) and b_e (1 x f). Row i of
/// a_e remains the (compressed) embedding of token i.
struct KroneckerEmbedding {
  Matrix a_e;
  Matrix b_e;

  std::size_t vocab() const noexcept { return a_e.rows(); }
  std::size_t dim() const noexcept { return a_e.cols() * b_e.cols(); }
  std::size_t factor() const noexcept { return b_e.cols(); }
};

using TokenEmbedding = std::variant<DenseEmbedding, KroneckerEmbedding>;

struct LayerNormParams {
  Matrix gain;  // 1 x d
  Matrix bias;  // 1 x d

  static LayerNormParams identity(std::size_t d) { return {Matrix(1, d, 1.0), Matrix(1, d, 0.0)}; }
};

namespace detail {

inline void check_bias(const std::optional<Matrix>& bias, std::size_t out, const char* op) {
  if (bias && (bias->rows() != 1 || bias->cols() != out)) {
    throw DimensionError(std::string(op) + ": bias " + bias->shape_string() +
                         " does not match output width " + std::to_string(out));
  }
}

}  // namespace detail

inline Matrix dense_forward(const DenseLinear& layer, const Matrix& x) {
  if (x.cols() != layer.in_features()) {
    throw DimensionError("dense_forward: input " + x.shape_string() + " against weight " +
                         layer.weight.shape_string());
  }
  detail::check_bias(layer.bias, layer.out_features(), "dense_forward");
  Matrix y = matmul_nt(x, layer.weight);
  return layer.bias ? add_row_broadcast(y, layer.bias->row(0)) : y;
}

inline Matrix kron_forward(const KroneckerLinear& layer, const Matrix& x) {
  detail::check_bias(layer.bias, layer.out_features(), "kron_forward");
  Matrix y = kron_matmul(layer.factors, x);
  return layer.bias ? add_row_broadcast(y, layer.bias->row(0)) : y;
}

inline Matrix linear_forward(const Linear& layer, const Matrix& x) {
  return std::visit(
      [&](const auto& l) -> Matrix {
        if constexpr (std::is_same_v<std::decay_t<decltype(l)>, DenseLinear>)
          return dense_forward(l, x);
        else
          return kron_forward(l, x);
      },
      layer);
}

inline std::size_t in_features(const Linear& l) {
  return std::visit([](const auto& x) { return x.in_features(); }, l);
}
inline std::size_t out_features(const Linear& l) {
  return std::visit([](const auto& x) { return x.out_features(); }, l);
}
inline bool is_factored(const Linear& l) { return std::holds_alternative<KroneckerLinear>(l); }

/// Dense weight of a layer (materialized for factored layers).
inline Matrix effective_weight(const Linear& l) {
  if (const auto* d = std::get_if<DenseLinear>(&l)) return d->weight;
  return materialize(std::get<KroneckerLinear>(l).factors);
}

/// Embedding rows kron(a_e[id], b_e), Theta(d) work per token. When `mults`
/// is given it is incremented by the number of multiplications performed.
inline Matrix embed_lookup(const KroneckerEmbedding& e, std::span<const int> ids,
                           std::uint64_t* mults = nullptr) {
  if (e.b_e.rows() != 1) throw DimensionError("embed_lookup: b_e must be 1 x f, got " + e.b_e.shape_string());
  const std::size_t f = e.b_e.cols(), cols = e.a_e.cols();
  Matrix out(ids.size(), e.dim());
  for (std::size_t t = 0; t < ids.size(); ++t) {
    const int id = ids[t];
    if (id < 0 || static_cast<std::size_t>(id) >= e.vocab()) {
      throw OutOfRangeError("embed_lookup: token id " + std::to_string(id) +
                            " out of range for vocabulary " + std::to_string(e.vocab()));
    }
    const double* a = e.a_e.row(static_cast<std::size_t>(id)).data();
    const double* b = e.b_e.row(0).data();
    double* o = out.row(t).data();
    for (std::size_t j = 0; j < cols; ++j)
      for (std::size_t k = 0; k < f; ++k) o[j * f + k] = a[j] * b[k];
    if (mults) *mults += cols * f;
  }
  return out;
}

inline Matrix embed_lookup(const DenseEmbedding& e, std::span<const int> ids) {
  Matrix out(ids.size(), e.table.cols());
  for (std::size_t t = 0; t < ids.size(); ++t) {
    const int id = ids[t];
    if (id < 0 || static_cast<std::size_t>(id) >= e.table.rows()) {
      throw OutOfRangeError("embed_lookup: token id " + std::to_string(id) +
                            " out of range for vocabulary " + std::to_string(e.table.rows()));
    }
    auto src = e.table.row(static_cast<std::size_t>(id));
    std::copy(src.begin(), src.end(), out.row(t).begin());
  }
  return out;
}

/// Factor shapes for an m x n weight at an integer target compression f.
///
/// B takes m2 * n2 == f entries and A carries the rest. Among the splits where
/// m2 | m and n2 | n the most balanced B wins; ties go to the taller B when
/// m >= n and the wider B otherwise, so (768, 768, 2) gives B 2x1 and the
/// transposed FFN projection (768, 3072, 2) gives B 1x2.
inline FactorShape plan_shapes(std::size_t m, std::size_t n, double target_factor) {
  if (!(target_factor >= 1.0) || std::floor(target_factor) != target_factor) {
    throw PlanningError("plan_shapes: target factor must be an integer >= 1, got " +
                        std::to_string(target_factor));
  }
  const auto f = static_cast<std::size_t>(target_factor);
  std::optional<FactorShape> best;
  auto better = [&](const FactorShape& c, const FactorShape& b) {
    const std::size_t cmax = std::max(c.m2, c.n2), bmax = std::max(b.m2, b.n2);
    if (cmax != bmax) return cmax < bmax;
    return m >= n ? c.m2 > b.m2 : c.n2 > b.n2;
  };
  for (std::size_t m2 = 1; m2 <= f; ++m2) {
    if (f % m2 != 0) continue;
    const std::size_t n2 = f / m2;
    if (m % m2 != 0 || n % n2 != 0) continue;
    FactorShape c{m / m2, n / n2, m2, n2};
    if (!best || better(c, *best)) best = c;
  }
  if (!best) {
    throw PlanningError("plan_shapes: no factor split of " + std::to_string(m) + "x" +
                        std::to_string(n) + " achieves factor " + std::to_string(f));
  }
  return *best;
}

enum class MatrixRole { kQuery, kKey, kValue, kAttnOut, kFcIn, kFcOut };

inline const char* role_name(MatrixRole r) {
  switch (r) {
    case MatrixRole::kQuery: return "q";
    case MatrixRole::kKey: return "k";
    case MatrixRole::kValue: return "v";
    case MatrixRole::kAttnOut: return "o";
    case MatrixRole::kFcIn: return "fc";
    case MatrixRole::kFcOut: return "proj";
  }
  return "?";
}

/// Which transformer blocks a schedule touches. Indices are 0-based; kOdd
/// selects 1, 3, 5, ... (the second, fourth, ... blocks).
struct LayerSelector {
  enum class Kind { kNone, kOdd, kEven, kAll, kList };
  Kind kind = Kind::kOdd;
  std::vector<std::size_t> list;

  bool selects(std::size_t layer) const {
    switch (kind) {
      case Kind::kNone: return false;
      case Kind::kOdd: return layer % 2 == 1;
      case Kind::kEven: return layer % 2 == 0;
      case Kind::kAll: return true;
      case Kind::kList: return std::find(list.begin(), list.end(), layer) != list.end();
    }
    return false;
  }

  /// Parses "odd", "even", "all", "none" or a comma-separated index list.
  static LayerSelector parse(const std::string& text) {
    if (text == "odd") return {Kind::kOdd, {}};
    if (text == "even") return {Kind::kEven, {}};
    if (text == "all") return {Kind::kAll, {}};
    if (text == "none") return {Kind::kNone, {}};
    LayerSelector sel{Kind::kList, {}};
    std::size_t pos = 0;
    while (pos <= text.size()) {
      const std::size_t comma = std::min(text.find(',', pos), text.size());
      const std::string tok = text.substr(pos, comma - pos);
      if (tok.empty() || tok.find_first_not_of("0123456789") != std::string::npos) {
        throw PlanningError("layer selector: expected odd|even|all|none or an index list, got '" +
                            text + "'");
      }
      sel.list.push_back(static_cast<std::size_t>(std::stoul(tok)));
      pos = comma + 1;
    }
    return sel;
  }
};

struct CompressionSchedule {
  bool compress_embedding = true;
  std::size_t embedding_factor = 2;
  LayerSelector layers;
  double factor = 2.0;
  /// Whether the attention output projection is factored alongside Q, K, V.
  bool factor_attention_output = true;
  std::map<MatrixRole, FactorShape> overrides;

  /// Odd blocks plus the embedding, all at factor 2.
  static CompressionSchedule odd_layers() { return {}; }

  static CompressionSchedule none() {
    CompressionSchedule s;
    s.compress_embedding = false;
    s.layers = {LayerSelector::Kind::kNone, {}};
    return s;
  }

  bool factors_role(MatrixRole r) const {
    return r != MatrixRole::kAttnOut || factor_attention_output;
  }

  FactorShape shape_for(MatrixRole role, std::size_t m, std::size_t n) const {
    if (auto it = overrides.find(role); it != overrides.end()) {
      if (it->second.rows() != m || it->second.cols() != n) {
        throw PlanningError(std::string("schedule override for ") + role_name(role) + " " +
                            it->second.to_string() + " does not tile " + std::to_string(m) +
                            "x" + std::to_string(n));
      }
      return it->second;
    }
    return plan_shapes(m, n, factor);
  }

  /// Shapes for the v x d token table: A v x d/f, B 1 x f.
  FactorShape embedding_shape(std::size_t vocab, std::size_t dim) const {
    if (embedding_factor == 0 || dim % embedding_factor != 0) {
      throw PlanningError("embedding factor " + std::to_string(embedding_factor) +
                          " does not divide embedding dimension " + std::to_string(dim));
    }
    return {vocab, dim / embedding_factor, 1, embedding_factor};
  }
};

struct FactoredLinear {
  KroneckerLinear layer;
  DecompositionReport report;
};

/// Nearest-Kronecker replacement for a dense layer; the bias is copied.
inline FactoredLinear decompose_linear(const DenseLinear& layer, const FactorShape& shape,
                                       Rng& rng, PowerIterationOptions opts = {}) {
  NearestKronecker nk = nearest_kron(layer.weight, shape, rng, opts);
  return {KroneckerLinear{std::move(nk.pair), layer.bias}, nk.report};
}

inline std::size_t param_count(const DenseLinear& l) {
  return l.weight.size() + (l.bias ? l.bias->size() : 0);
}
inline std::size_t param_count(const KroneckerLinear& l) {
  return l.factors.param_count() + (l.bias ? l.bias->size() : 0);
}
inline std::size_t param_count(const Linear& l) {
  return std::visit([](const auto& x) { return param_count(x); }, l);
}
inline std::size_t param_count(const DenseEmbedding& e) { return e.table.size(); }
inline std::size_t param_count(const KroneckerEmbedding& e) { return e.a_e.size() + e.b_e.size(); }
inline std::size_t param_count(const TokenEmbedding& e) {
  return std::visit([](const auto& x) { return param_count(x); }, e);
}
inline std::size_t param_count(const LayerNormParams& ln) { return ln.gain.size() + ln.bias.size(); }

}  // namespace knz
