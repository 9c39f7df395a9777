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

// Model <-> TensorArchive conversion. Tensor names follow for_each_parameter;
// whether a linear or the token table is factored is read back from the
// presence of ".A"/".B" versus ".weight".

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <variant>
#include <vector>

#include "knz/archive.hpp"
#include "knz/model.hpp"

namespace knz {

inline constexpr const char* kConfigTensor = "meta.config";

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline Tensor to_tensor(const std::string& name, const Matrix& m, DType dtype) {
  Tensor t;
  t.name = name;
  t.dims = {m.rows(), m.cols()};
  if (dtype == DType::kF64) {
    t.data = std::vector<double>(m.data().begin(), m.data().end());
  } else {
    std::vector<float> v(m.size());
    for (std::size_t i = 0; i < m.size(); ++i) v[i] = static_cast<float>(m.data()[i]);
    t.data = std::move(v);
  }
  return t;
}

inline Matrix to_matrix(const Tensor& t) {
  if (t.dims.size() != 2)
    throw CheckpointError("checkpoint: tensor '" + t.name + "' has rank " + std::to_string(t.dims.size()) +
                          ", expected 2");
  Matrix m(t.dims[0], t.dims[1]);
  std::visit(
      [&](const auto& v) {
        for (std::size_t i = 0; i < v.size(); ++i) m.data()[i] = static_cast<double>(v[i]);
      },
      t.data);
  return m;
}

/// Sizes as f64, plus the seed split into two 32-bit halves so it survives
/// the round trip exactly.
inline Tensor config_tensor(const GPTConfig& c) {
  std::vector<double> v = {static_cast<double>(c.n_layers),    static_cast<double>(c.n_heads),
                           static_cast<double>(c.d_model),     static_cast<double>(c.d_ff),
                           static_cast<double>(c.vocab),       static_cast<double>(c.max_seq_len),
                           c.init_std,                         c.ln_eps,
                           static_cast<double>(c.seed >> 32),  static_cast<double>(c.seed & 0xffffffffULL)};
  Tensor t;
  t.name = kConfigTensor;
  t.dims = {v.size()};
  t.data = std::move(v);
  return t;
}

inline GPTConfig config_from_tensor(const Tensor& t) {
  const auto* v = std::get_if<std::vector<double>>(&t.data);
  if (!v || v->size() != 10) throw CheckpointError("checkpoint: malformed meta.config");
  auto sz = [&](std::size_t i) {
    const double x = (*v)[i];
    if (!(x >= 0) || x != std::floor(x)) throw CheckpointError("checkpoint: meta.config entry is not a size");
    return static_cast<std::size_t>(x);
  };
  GPTConfig c;
  c.n_layers = sz(0);
  c.n_heads = sz(1);
  c.d_model = sz(2);
  c.d_ff = sz(3);
  c.vocab = sz(4);
  c.max_seq_len = sz(5);
  c.init_std = (*v)[6];
  c.ln_eps = (*v)[7];
  c.seed = (static_cast<std::uint64_t>(sz(8)) << 32) | static_cast<std::uint64_t>(sz(9));
  c.validate();
  return c;
}

inline std::vector<Tensor> model_to_tensors(const TinyGPTModel& m, DType dtype = DType::kF64) {
  std::vector<Tensor> out;
  out.push_back(config_tensor(m.config));
  for_each_parameter(m, [&](const std::string& name, const Matrix& t) { out.push_back(to_tensor(name, t, dtype)); });
  return out;
}

namespace detail {

class TensorTable {
 public:
  explicit TensorTable(const std::vector<Tensor>& ts) {
    for (const Tensor& t : ts) index_.emplace(t.name, &t);
  }
  bool has(const std::string& name) const { return index_.count(name) != 0; }
  Matrix take(const std::string& name, std::size_t rows, std::size_t cols) {
    auto it = index_.find(name);
    if (it == index_.end()) throw CheckpointError("checkpoint: missing tensor '" + name + "'");
    Matrix m = to_matrix(*it->second);
    if (rows != 0 && (m.rows() != rows || m.cols() != cols))
      throw CheckpointError("checkpoint: tensor '" + name + "' is " + m.shape_string() + ", expected " +
                            std::to_string(rows) + "x" + std::to_string(cols));
    used_.insert(name);
    return m;
  }
  std::optional<Matrix> take_optional(const std::string& name, std::size_t rows, std::size_t cols) {
    if (!has(name)) return std::nullopt;
    return take(name, rows, cols);
  }
  void expect_all_used() const {
    for (const auto& [name, _] : index_)
      if (name != kConfigTensor && !used_.count(name))
        throw CheckpointError("checkpoint: unexpected tensor '" + name + "'");
  }

 private:
  std::map<std::string, const Tensor*> index_;
  std::set<std::string> used_;
};

}  // namespace detail

inline TinyGPTModel model_from_tensors(const std::vector<Tensor>& tensors) {
  detail::TensorTable table(tensors);
  const Tensor* meta = nullptr;
  for (const Tensor& t : tensors)
    if (t.name == kConfigTensor) meta = &t;
  if (!meta) throw CheckpointError("checkpoint: no meta.config tensor; not a model archive");

  TinyGPTModel m;
  m.config = config_from_tensor(*meta);
  const GPTConfig& c = m.config;
  const std::size_t d = c.d_model;

  if (table.has("wte.weight")) {
    m.wte = DenseEmbedding{table.take("wte.weight", c.vocab, d)};
  } else {
    Matrix a = table.take("wte.A", 0, 0);
    Matrix b = table.take("wte.B", 0, 0);
    if (a.rows() != c.vocab || b.rows() != 1 || a.cols() * b.cols() != d)
      throw CheckpointError("checkpoint: factored embedding shapes " + a.shape_string() + ", " + b.shape_string() +
                            " do not give a " + std::to_string(c.vocab) + "x" + std::to_string(d) + " table");
    m.wte = KroneckerEmbedding{std::move(a), std::move(b)};
  }
  m.wpe = table.take("wpe.weight", c.max_seq_len, d);
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const std::string p = "blocks." + std::to_string(l);
    Block b;
    b.ln1 = {table.take(p + ".ln1.gain", 1, d), table.take(p + ".ln1.bias", 1, d)};
    b.ln2 = {table.take(p + ".ln2.gain", 1, d), table.take(p + ".ln2.bias", 1, d)};
    for (MatrixRole r : kAllRoles) {
      const auto [out, in] = linear_shape(c, r);
      const std::string lp = linear_prefix(l, r);
      auto bias = table.take_optional(lp + ".bias", 1, out);
      if (table.has(lp + ".weight")) {
        b.linear(r) = DenseLinear{table.take(lp + ".weight", out, in), std::move(bias)};
      } else {
        KroneckerPair pair{table.take(lp + ".A", 0, 0), table.take(lp + ".B", 0, 0)};
        if (pair.rows() != out || pair.cols() != in)
          throw CheckpointError("checkpoint: factors of '" + lp + "' give " + std::to_string(pair.rows()) + "x" +
                                std::to_string(pair.cols()) + ", expected " + std::to_string(out) + "x" +
                                std::to_string(in));
        b.linear(r) = KroneckerLinear{std::move(pair), std::move(bias)};
      }
    }
    m.blocks.push_back(std::move(b));
  }
  m.ln_f = {table.take("ln_f.gain", 1, d), table.take("ln_f.bias", 1, d)};
  m.lm_head = table.take("lm_head.weight", c.vocab, d);
  table.expect_all_used();
  return m;
}

inline void save_model(const std::filesystem::path& path, const TinyGPTModel& m, DType dtype = DType::kF64) {
  archive_write(path, model_to_tensors(m, dtype));
}

inline TinyGPTModel load_model(const std::filesystem::path& path) { return model_from_tensors(archive_read(path)); }

}  // namespace knz
