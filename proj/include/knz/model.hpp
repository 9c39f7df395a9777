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
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "knz/autodiff.hpp"
#include "knz/kronecker.hpp"
#include "knz/layers.hpp"
#include "knz/matrix.hpp"
#include "knz/rng.hpp"

namespace knz {

struct GPTConfig {
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  std::size_t d_model = 64;
  std::size_t d_ff = 256;
  std::size_t vocab = 256;
  std::size_t max_seq_len = 128;
  std::uint64_t seed = 0;
  double init_std = 0.02;
  double ln_eps = 1e-5;

  std::size_t head_dim() const { return d_model / n_heads; }

  void validate() const {
    if (n_layers == 0 || n_heads == 0 || d_model == 0 || d_ff == 0 || vocab == 0 ||
        max_seq_len == 0) {
      throw std::invalid_argument("GPTConfig: all sizes must be positive");
    }
    if (d_model % n_heads != 0) {
      throw std::invalid_argument("GPTConfig: d_model " + std::to_string(d_model) +
                                  " not divisible by n_heads " + std::to_string(n_heads));
    }
  }

  /// Twelve 768-wide layers, d_ff 3072, 1024 positions and the 50527-token
  /// vocabulary as printed in the GPT-2 Small configuration table.
  static GPTConfig gpt2_small() {
    GPTConfig c;
    c.n_layers = 12;
    c.n_heads = 12;
    c.d_model = 768;
    c.d_ff = 3072;
    c.vocab = 50527;
    c.max_seq_len = 1024;
    return c;
  }
};

struct Block {
  LayerNormParams ln1;
  Linear q, k, v, o;
  LayerNormParams ln2;
  Linear fc, proj;

  Linear& linear(MatrixRole r) {
    switch (r) {
      case MatrixRole::kQuery: return q;
      case MatrixRole::kKey: return k;
      case MatrixRole::kValue: return v;
      case MatrixRole::kAttnOut: return o;
      case MatrixRole::kFcIn: return fc;
      case MatrixRole::kFcOut: return proj;
    }
    throw std::logic_error("Block::linear: bad role");
  }
  const Linear& linear(MatrixRole r) const { return const_cast<Block*>(this)->linear(r); }
};

inline constexpr MatrixRole kAllRoles[] = {MatrixRole::kQuery,   MatrixRole::kKey,
                                           MatrixRole::kValue,   MatrixRole::kAttnOut,
                                           MatrixRole::kFcIn,    MatrixRole::kFcOut};

/// Pre-norm decoder-only transformer. Token embedding and any block linear
/// may be dense or Kronecker-factored; positions and the LM head stay dense.
struct TinyGPTModel {
  GPTConfig config;
  TokenEmbedding wte;
  Matrix wpe;  // max_seq_len x d
  std::vector<Block> blocks;
  LayerNormParams ln_f;
  Matrix lm_head;  // vocab x d, untied from wte

  bool layer_is_factored(std::size_t l) const {
    for (MatrixRole r : kAllRoles)
      if (is_factored(blocks.at(l).linear(r))) return true;
    return false;
  }
};

inline std::string linear_prefix(std::size_t layer, MatrixRole r) {
  const bool attn = r == MatrixRole::kQuery || r == MatrixRole::kKey || r == MatrixRole::kValue ||
                    r == MatrixRole::kAttnOut;
  return "blocks." + std::to_string(layer) + (attn ? ".attn." : ".mlp.") + role_name(r);
}

/// Shape (out, in) of each block linear under a config.
inline std::pair<std::size_t, std::size_t> linear_shape(const GPTConfig& c, MatrixRole r) {
  switch (r) {
    case MatrixRole::kFcIn: return {c.d_ff, c.d_model};
    case MatrixRole::kFcOut: return {c.d_model, c.d_ff};
    default: return {c.d_model, c.d_model};
  }
}

/// Dense model with N(0, init_std) weights, zero biases and unit norms,
/// drawn from config.seed.
inline TinyGPTModel init_model(const GPTConfig& config) {
  config.validate();
  Rng rng(config.seed);
  const double sd = config.init_std;
  TinyGPTModel m;
  m.config = config;
  m.wte = DenseEmbedding{random_normal(config.vocab, config.d_model, rng, sd)};
  m.wpe = random_normal(config.max_seq_len, config.d_model, rng, sd);
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    Block b;
    b.ln1 = LayerNormParams::identity(config.d_model);
    b.ln2 = LayerNormParams::identity(config.d_model);
    for (MatrixRole r : kAllRoles) {
      const auto [out, in] = linear_shape(config, r);
      b.linear(r) = DenseLinear{random_normal(out, in, rng, sd), Matrix(1, out)};
    }
    m.blocks.push_back(std::move(b));
  }
  m.ln_f = LayerNormParams::identity(config.d_model);
  m.lm_head = random_normal(config.vocab, config.d_model, rng, sd);
  return m;
}

namespace detail {

template <class Model, class Fn>
void visit_linear(Model& layer, const std::string& prefix, Fn&& fn) {
  using LinearT = std::conditional_t<std::is_const_v<Model>, const Linear, Linear>;
  LinearT& l = layer;
  if (auto* d = std::get_if<DenseLinear>(&l)) {
    fn(prefix + ".weight", d->weight);
    if (d->bias) fn(prefix + ".bias", *d->bias);
  } else {
    auto& k = std::get<KroneckerLinear>(l);
    fn(prefix + ".A", k.factors.a);
    fn(prefix + ".B", k.factors.b);
    if (k.bias) fn(prefix + ".bias", *k.bias);
  }
}

template <class M, class Fn>
void for_each_parameter_impl(M& m, Fn&& fn) {
  if (auto* d = std::get_if<DenseEmbedding>(&m.wte)) {
    fn(std::string("wte.weight"), d->table);
  } else {
    auto& k = std::get<KroneckerEmbedding>(m.wte);
    fn(std::string("wte.A"), k.a_e);
    fn(std::string("wte.B"), k.b_e);
  }
  fn(std::string("wpe.weight"), m.wpe);
  for (std::size_t l = 0; l < m.blocks.size(); ++l) {
    auto& b = m.blocks[l];
    const std::string p = "blocks." + std::to_string(l);
    fn(p + ".ln1.gain", b.ln1.gain);
    fn(p + ".ln1.bias", b.ln1.bias);
    for (MatrixRole r : {MatrixRole::kQuery, MatrixRole::kKey, MatrixRole::kValue, MatrixRole::kAttnOut})
      visit_linear(b.linear(r), linear_prefix(l, r), fn);
    fn(p + ".ln2.gain", b.ln2.gain);
    fn(p + ".ln2.bias", b.ln2.bias);
    for (MatrixRole r : {MatrixRole::kFcIn, MatrixRole::kFcOut})
      visit_linear(b.linear(r), linear_prefix(l, r), fn);
  }
  fn(std::string("ln_f.gain"), m.ln_f.gain);
  fn(std::string("ln_f.bias"), m.ln_f.bias);
  fn(std::string("lm_head.weight"), m.lm_head);
}

}  // namespace detail

/// Visits every stored tensor with its canonical name, in a fixed order.
template <class Fn>
void for_each_parameter(TinyGPTModel& m, Fn&& fn) {
  detail::for_each_parameter_impl(m, fn);
}
template <class Fn>
void for_each_parameter(const TinyGPTModel& m, Fn&& fn) {
  detail::for_each_parameter_impl(m, fn);
}

/// Stored real parameters. The LM head is left out when exclude_lm_head is set.
inline std::size_t param_count(const TinyGPTModel& m, bool exclude_lm_head) {
  std::size_t total = 0;
  for_each_parameter(m, [&](const std::string& name, const Matrix& t) {
    if (exclude_lm_head && name == "lm_head.weight") return;
    total += t.size();
  });
  return total;
}

/// Parameter count of `config` after `schedule`, from shapes alone. Every
/// block linear carries a bias; layer norms carry gain and bias.
inline std::size_t param_count(const GPTConfig& config, const CompressionSchedule& schedule,
                               bool exclude_lm_head) {
  config.validate();
  const std::size_t d = config.d_model;
  std::size_t total = 0;
  total += schedule.compress_embedding ? schedule.embedding_shape(config.vocab, d).param_count()
                                       : config.vocab * d;
  total += config.max_seq_len * d;
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    total += 4 * d;  // two layer norms
    const bool selected = schedule.layers.selects(l);
    for (MatrixRole r : kAllRoles) {
      const auto [out, in] = linear_shape(config, r);
      if (selected && schedule.factors_role(r))
        total += schedule.shape_for(r, out, in).param_count();
      else
        total += out * in;
      total += out;
    }
  }
  total += 2 * d;
  if (!exclude_lm_head) total += config.vocab * d;
  return total;
}

/// Where the per-layer hidden state used for distillation is taken from.
enum class HiddenSource {
  kBlockOutput,  // after the FFN residual add (default)
  kFfnOutput,    // second FFN projection, before the residual add
};

/// Tape-bound record of one forward pass over a batch of equal-length
/// sequences. Rows of the 2-D activations are sequence-major: row b*T + t.
struct TapeTrace {
  ad::Var embedding;                             // (B*T) x d
  std::vector<std::vector<ad::Var>> scores;      // [layer][b*H + h], T x T, pre-softmax
  std::vector<std::vector<ad::Var>> attention;   // [layer][b*H + h], T x T, causal softmax
  std::vector<ad::Var> hidden;                   // [layer] block output, (B*T) x d
  std::vector<ad::Var> ffn_output;               // [layer] FFN output before residual
  ad::Var final_hidden;                          // after ln_f
  ad::Var logits;                                // (B*T) x vocab
  std::size_t batch = 0, seq_len = 0, heads = 0;

  ad::Var hidden_state(std::size_t l, HiddenSource src) const {
    return src == HiddenSource::kBlockOutput ? hidden.at(l) : ffn_output.at(l);
  }
};

/// Detached values of a TapeTrace.
struct ForwardTrace {
  Matrix embedding;
  std::vector<std::vector<Matrix>> attention;
  std::vector<Matrix> hidden;
  std::vector<Matrix> ffn_output;
  Matrix final_hidden;
  Matrix logits;
  std::size_t batch = 0, seq_len = 0, heads = 0;

  const Matrix& hidden_state(std::size_t l, HiddenSource src) const {
    return src == HiddenSource::kBlockOutput ? hidden.at(l) : ffn_output.at(l);
  }
};

inline ForwardTrace detach(const TapeTrace& t) {
  ForwardTrace out;
  out.embedding = t.embedding.value();
  for (const auto& layer : t.attention) {
    std::vector<Matrix> heads;
    heads.reserve(layer.size());
    for (const auto& v : layer) heads.push_back(v.value());
    out.attention.push_back(std::move(heads));
  }
  for (const auto& v : t.hidden) out.hidden.push_back(v.value());
  for (const auto& v : t.ffn_output) out.ffn_output.push_back(v.value());
  out.final_hidden = t.final_hidden.value();
  out.logits = t.logits.value();
  out.batch = t.batch;
  out.seq_len = t.seq_len;
  out.heads = t.heads;
  return out;
}

namespace detail {

inline ad::Var bind_linear(ad::Tape& tape, const Linear& layer, const std::string& prefix, ad::Var x) {
  if (const auto* d = std::get_if<DenseLinear>(&layer)) {
    std::optional<ad::Var> bias;
    if (d->bias) bias = tape.parameter(prefix + ".bias", *d->bias);
    return ad::linear(x, tape.parameter(prefix + ".weight", d->weight), bias);
  }
  const auto& k = std::get<KroneckerLinear>(layer);
  std::optional<ad::Var> bias;
  if (k.bias) bias = tape.parameter(prefix + ".bias", *k.bias);
  return ad::kron_linear(x, tape.parameter(prefix + ".A", k.factors.a),
                         tape.parameter(prefix + ".B", k.factors.b), bias);
}

inline ad::Var bind_layernorm(ad::Tape& tape, const LayerNormParams& ln, const std::string& prefix,
                              ad::Var x, double eps) {
  return ad::layernorm(x, tape.parameter(prefix + ".gain", ln.gain),
                       tape.parameter(prefix + ".bias", ln.bias), eps);
}

inline std::size_t check_batch(const GPTConfig& c, std::span<const std::vector<int>> batch) {
  if (batch.empty()) throw std::invalid_argument("forward: empty batch");
  const std::size_t T = batch.front().size();
  if (T == 0) throw std::invalid_argument("forward: empty sequence");
  if (T > c.max_seq_len) {
    throw std::invalid_argument("forward: sequence length " + std::to_string(T) +
                                " exceeds max_seq_len " + std::to_string(c.max_seq_len));
  }
  for (const auto& seq : batch) {
    if (seq.size() != T) throw std::invalid_argument("forward: ragged batch");
    for (int id : seq)
      if (id < 0 || static_cast<std::size_t>(id) >= c.vocab)
        throw OutOfRangeError("forward: token id " + std::to_string(id) +
                              " out of range for vocabulary " + std::to_string(c.vocab));
  }
  return T;
}

}  // namespace detail

/// Causal forward pass recorded on `tape`, with every quantity the
/// distillation losses need. Attention is softmax(Q K^T / sqrt(d/h)) under a
/// causal mask.
inline TapeTrace forward(const TinyGPTModel& m, ad::Tape& tape,
                         std::span<const std::vector<int>> batch) {
  const GPTConfig& c = m.config;
  const std::size_t T = detail::check_batch(c, batch);
  const std::size_t B = batch.size(), H = c.n_heads, dh = c.head_dim(), d = c.d_model;

  std::vector<int> ids, pos;
  ids.reserve(B * T);
  pos.reserve(B * T);
  for (const auto& seq : batch)
    for (std::size_t t = 0; t < T; ++t) {
      ids.push_back(seq[t]);
      pos.push_back(static_cast<int>(t));
    }

  TapeTrace tr;
  tr.batch = B;
  tr.seq_len = T;
  tr.heads = H;

  ad::Var tok;
  if (const auto* de = std::get_if<DenseEmbedding>(&m.wte)) {
    tok = ad::gather(tape.parameter("wte.weight", de->table), ids);
  } else {
    const auto& ke = std::get<KroneckerEmbedding>(m.wte);
    tok = ad::kron_gather(tape.parameter("wte.A", ke.a_e), tape.parameter("wte.B", ke.b_e), ids);
  }
  tr.embedding = ad::add(tok, ad::gather(tape.parameter("wpe.weight", m.wpe), pos));

  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  ad::Var x = tr.embedding;
  for (std::size_t l = 0; l < m.blocks.size(); ++l) {
    const Block& blk = m.blocks[l];
    const std::string p = "blocks." + std::to_string(l);
    ad::Var h = detail::bind_layernorm(tape, blk.ln1, p + ".ln1", x, c.ln_eps);
    ad::Var q = detail::bind_linear(tape, blk.q, linear_prefix(l, MatrixRole::kQuery), h);
    ad::Var k = detail::bind_linear(tape, blk.k, linear_prefix(l, MatrixRole::kKey), h);
    ad::Var v = detail::bind_linear(tape, blk.v, linear_prefix(l, MatrixRole::kValue), h);

    std::vector<ad::Var> layer_scores, layer_attn;
    std::vector<ad::Placement> heads_out;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t hd = 0; hd < H; ++hd) {
        ad::Var qs = ad::slice(q, b * T, T, hd * dh, dh);
        ad::Var ks = ad::slice(k, b * T, T, hd * dh, dh);
        ad::Var vs = ad::slice(v, b * T, T, hd * dh, dh);
        ad::Var sc = ad::scale(ad::matmul_nt(qs, ks), inv_sqrt);
        ad::Var att = ad::causal_softmax(sc);
        layer_scores.push_back(sc);
        layer_attn.push_back(att);
        heads_out.push_back({ad::matmul(att, vs), b * T, hd * dh});
      }
    ad::Var merged = ad::assemble(B * T, d, std::move(heads_out));
    x = ad::add(x, detail::bind_linear(tape, blk.o, linear_prefix(l, MatrixRole::kAttnOut), merged));

    ad::Var h2 = detail::bind_layernorm(tape, blk.ln2, p + ".ln2", x, c.ln_eps);
    ad::Var f = ad::gelu(detail::bind_linear(tape, blk.fc, linear_prefix(l, MatrixRole::kFcIn), h2));
    ad::Var f2 = detail::bind_linear(tape, blk.proj, linear_prefix(l, MatrixRole::kFcOut), f);
    x = ad::add(x, f2);

    tr.scores.push_back(std::move(layer_scores));
    tr.attention.push_back(std::move(layer_attn));
    tr.ffn_output.push_back(f2);
    tr.hidden.push_back(x);
  }
  tr.final_hidden = detail::bind_layernorm(tape, m.ln_f, "ln_f", x, c.ln_eps);
  tr.logits = ad::linear(tr.final_hidden, tape.parameter("lm_head.weight", m.lm_head));
  return tr;
}

/// Detached forward over a batch.
inline ForwardTrace forward(const TinyGPTModel& m, std::span<const std::vector<int>> batch) {
  ad::Tape tape;
  return detach(forward(m, tape, batch));
}

/// Detached forward over one sequence.
inline ForwardTrace forward(const TinyGPTModel& m, const std::vector<int>& tokens) {
  return forward(m, std::span<const std::vector<int>>(&tokens, 1));
}

/// Next-token greedy continuation; a smoke test, not a sampler.
inline std::vector<int> generate_greedy(const TinyGPTModel& m, std::vector<int> prompt,
                                        std::size_t n_new) {
  for (std::size_t i = 0; i < n_new; ++i) {
    std::vector<int> ctx = prompt;
    if (ctx.size() > m.config.max_seq_len)
      ctx.erase(ctx.begin(), ctx.end() - static_cast<std::ptrdiff_t>(m.config.max_seq_len));
    const ForwardTrace tr = forward(m, ctx);
    auto last = tr.logits.row(tr.logits.rows() - 1);
    prompt.push_back(static_cast<int>(std::max_element(last.begin(), last.end()) - last.begin()));
  }
  return prompt;
}

/// Outcome of factoring one tensor during compress_model.
struct TensorDecomposition {
  std::string name;  // canonical name of the dense tensor that was replaced
  std::size_t rows = 0, cols = 0;
  FactorShape shape;
  DecompositionReport report;
};

struct CompressedModel {
  TinyGPTModel student;
  std::vector<TensorDecomposition> reports;
};

/// Replaces the tensors chosen by `schedule` with nearest-Kronecker factors.
/// Selected blocks get Q, K, V, (optionally) the attention output, and both
/// FFN projections factored; the token table becomes a KroneckerEmbedding with
/// shapes (v x d/f, 1 x f). Everything else, including the LM head, is copied.
inline CompressedModel compress_model(const TinyGPTModel& teacher, const CompressionSchedule& schedule,
                                      Rng& rng, PowerIterationOptions opts = {}) {
  CompressedModel out{teacher, {}};
  auto factor = [&](const std::string& name, const Matrix& w, const FactorShape& shape) {
    try {
      NearestKronecker nk = nearest_kron(w, shape, rng, opts);
      out.reports.push_back({name, w.rows(), w.cols(), shape, nk.report});
      return nk.pair;
    } catch (const ConvergenceError& e) {
      throw ConvergenceError(name + ": " + e.what(), e.report());
    } catch (const DimensionError& e) {
      throw DimensionError(name + ": " + e.what());
    }
  };

  const GPTConfig& c = teacher.config;
  if (schedule.layers.kind == LayerSelector::Kind::kList) {
    for (std::size_t l : schedule.layers.list)
      if (l >= c.n_layers)
        throw PlanningError("layer index " + std::to_string(l) + " out of range for " +
                            std::to_string(c.n_layers) + " layers");
  }
  if (schedule.compress_embedding) {
    if (const auto* de = std::get_if<DenseEmbedding>(&teacher.wte)) {
      const FactorShape s = schedule.embedding_shape(c.vocab, c.d_model);
      KroneckerPair p = factor("wte.weight", de->table, s);
      out.student.wte = KroneckerEmbedding{std::move(p.a), std::move(p.b)};
    }
  }
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    if (!schedule.layers.selects(l)) continue;
    for (MatrixRole r : kAllRoles) {
      if (!schedule.factors_role(r)) continue;
      Linear& lin = out.student.blocks[l].linear(r);
      const auto* dense = std::get_if<DenseLinear>(&lin);
      if (!dense) continue;
      const FactorShape s = schedule.shape_for(r, dense->out_features(), dense->in_features());
      KroneckerPair p = factor(linear_prefix(l, r) + ".weight", dense->weight, s);
      lin = KroneckerLinear{std::move(p), dense->bias};
    }
  }
  return out;
}

struct ClassifierHead {
  DenseLinear projection;  // n_classes x d
};

/// Trunk plus a last-token classification head.
struct ClassifierModel {
  TinyGPTModel trunk;
  ClassifierHead head;

  std::size_t n_classes() const { return head.projection.out_features(); }
};

inline ClassifierModel attach_classifier(TinyGPTModel model, std::size_t n_classes, Rng& rng) {
  if (n_classes < 2) throw std::invalid_argument("attach_classifier: need at least 2 classes");
  const std::size_t d = model.config.d_model;
  const double sd = model.config.init_std;
  ClassifierHead head{DenseLinear{random_normal(n_classes, d, rng, sd), Matrix(1, n_classes)}};
  return {std::move(model), std::move(head)};
}

template <class Fn>
void for_each_parameter(ClassifierModel& m, Fn&& fn) {
  for_each_parameter(m.trunk, fn);
  fn(std::string("head.weight"), m.head.projection.weight);
  if (m.head.projection.bias) fn(std::string("head.bias"), *m.head.projection.bias);
}
template <class Fn>
void for_each_parameter(const ClassifierModel& m, Fn&& fn) {
  for_each_parameter(m.trunk, fn);
  fn(std::string("head.weight"), m.head.projection.weight);
  if (m.head.projection.bias) fn(std::string("head.bias"), *m.head.projection.bias);
}

struct ClassifierTrace {
  TapeTrace trunk;
  ad::Var class_logits;  // B x n_classes
};

inline ClassifierTrace forward(const ClassifierModel& m, ad::Tape& tape,
                               std::span<const std::vector<int>> batch) {
  ClassifierTrace out{forward(m.trunk, tape, batch), {}};
  const std::size_t T = out.trunk.seq_len, d = m.trunk.config.d_model;
  std::vector<ad::Placement> last;
  for (std::size_t b = 0; b < out.trunk.batch; ++b)
    last.push_back({ad::slice(out.trunk.final_hidden, b * T + T - 1, 1, 0, d), b, 0});
  ad::Var pooled = ad::assemble(out.trunk.batch, d, std::move(last));
  std::optional<ad::Var> bias;
  if (m.head.projection.bias) bias = tape.parameter("head.bias", *m.head.projection.bias);
  out.class_logits = ad::linear(pooled, tape.parameter("head.weight", m.head.projection.weight), bias);
  return out;
}

/// Class logits, one row per sequence.
inline Matrix classify(const ClassifierModel& m, std::span<const std::vector<int>> batch) {
  ad::Tape tape;
  return forward(m, tape, batch).class_logits.value();
}

}  // namespace knz
