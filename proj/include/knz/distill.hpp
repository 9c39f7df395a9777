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
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "knz/autodiff.hpp"
#include "knz/corpus.hpp"
#include "knz/loss_kernels.hpp"
#include "knz/model.hpp"

namespace knz {

/// Coefficients of the combined objective
///   alpha1 L_emb + alpha2 L_att + alpha3 L_hid + alpha4 L_ce.
struct DistillWeights {
  double alpha1 = 0.5;
  double alpha2 = 0.5;
  double alpha3 = 0.5;
  double alpha4 = 0.1;

  static DistillWeights pretrain() { return {0.5, 0.5, 0.5, 0.1}; }
  static DistillWeights finetune() { return {0.5, 0.5, 0.5, 0.02}; }

  bool uses_teacher() const { return alpha1 > 0.0 || alpha2 > 0.0 || alpha3 > 0.0; }

  void validate() const {
    for (double a : {alpha1, alpha2, alpha3, alpha4})
      if (!(a >= 0.0) || !std::isfinite(a)) throw std::invalid_argument("DistillWeights: alphas must be finite and >= 0");
    if (alpha1 + alpha2 + alpha3 + alpha4 <= 0.0)
      throw std::invalid_argument("DistillWeights: at least one alpha must be positive");
  }
};

enum class Phase { kPretrain, kFinetune };

struct TrainConfig {
  Phase phase = Phase::kPretrain;
  std::size_t batch_size = 8;
  double learning_rate = 2.5e-4;
  std::size_t epochs = 1;
  std::size_t max_steps = 0;  // 0: no cap beyond epochs
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t seq_len = 64;
  double clip_norm = 1.0;  // <= 0 disables clipping
  bool record_wall_time = true;

  /// Pre-training defaults; batch 8 rather than 1 at desk scale.
  static TrainConfig pretrain() { return {}; }

  static TrainConfig finetune() {
    TrainConfig c;
    c.phase = Phase::kFinetune;
    c.batch_size = 16;
    c.learning_rate = 2e-5;
    return c;
  }

  void validate() const {
    if (batch_size == 0 || seq_len == 0 || epochs == 0)
      throw std::invalid_argument("TrainConfig: batch size, sequence length and epochs must be positive");
    if (!(learning_rate >= 0.0) || !(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0) ||
        !(adam_eps > 0.0))
      throw std::invalid_argument("TrainConfig: invalid optimizer hyperparameters");
  }
};

/// Which layers enter the attention and hidden-state sums.
enum class LayerSet { kAll, kCompressedOnly };

struct DistillOptions {
  ad::KlDirection kl_direction = ad::KlDirection::kTeacherStudent;
  HiddenSource hidden_source = HiddenSource::kBlockOutput;
  LayerSet layers = LayerSet::kAll;
};

struct StepMetrics {
  std::size_t step = 0;
  double l_emb = 0.0;
  double l_att = 0.0;
  double l_hid = 0.0;
  double l_ce = 0.0;
  double l_total = 0.0;
  double wall_ms = 0.0;
};

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Layers included in the intermediate losses for `student`.
inline std::vector<bool> distill_layer_mask(const TinyGPTModel& student, LayerSet set) {
  std::vector<bool> mask(student.blocks.size(), true);
  if (set == LayerSet::kCompressedOnly)
    for (std::size_t l = 0; l < mask.size(); ++l) mask[l] = student.layer_is_factored(l);
  return mask;
}

namespace detail {

inline void require_same_traces(const ForwardTrace& s, const ForwardTrace& t) {
  bool ok = s.embedding.same_shape(t.embedding) && s.attention.size() == t.attention.size() &&
            s.hidden.size() == t.hidden.size() && s.logits.same_shape(t.logits);
  for (std::size_t l = 0; ok && l < s.attention.size(); ++l) {
    ok = s.attention[l].size() == t.attention[l].size() && s.hidden[l].same_shape(t.hidden[l]);
    for (std::size_t h = 0; ok && h < s.attention[l].size(); ++h)
      ok = s.attention[l][h].same_shape(t.attention[l][h]);
  }
  if (!ok) throw DimensionError("distill: shape mismatch between teacher and student traces");
}

inline bool included(const std::vector<bool>& mask, std::size_t l) { return mask.empty() || mask.at(l); }

}  // namespace detail

/// MSE between the embedding-layer outputs.
inline double loss_embedding(const ForwardTrace& s, const ForwardTrace& t) {
  return mse(s.embedding, t.embedding);
}

/// Sum over layers of the KL divergence between attention distributions,
/// averaged over heads and query positions within each layer. Only causal
/// positions (j <= i) contribute. An empty mask includes every layer.
inline double loss_attention(const ForwardTrace& s, const ForwardTrace& t,
                             ad::KlDirection dir = ad::KlDirection::kTeacherStudent,
                             const std::vector<bool>& layers = {}) {
  detail::require_same_traces(s, t);
  double total = 0.0;
  for (std::size_t l = 0; l < s.attention.size(); ++l) {
    if (!detail::included(layers, l)) continue;
    double layer = 0.0;
    for (std::size_t h = 0; h < s.attention[l].size(); ++h) {
      layer += dir == ad::KlDirection::kTeacherStudent ? kl_rows(t.attention[l][h], s.attention[l][h], true)
                                                       : kl_rows(s.attention[l][h], t.attention[l][h], true);
    }
    total += layer / static_cast<double>(s.attention[l].size());
  }
  return total;
}

/// Sum over layers of the MSE between hidden states.
inline double loss_hidden(const ForwardTrace& s, const ForwardTrace& t,
                          HiddenSource src = HiddenSource::kBlockOutput,
                          const std::vector<bool>& layers = {}) {
  detail::require_same_traces(s, t);
  double total = 0.0;
  for (std::size_t l = 0; l < s.hidden.size(); ++l)
    if (detail::included(layers, l)) total += mse(s.hidden_state(l, src), t.hidden_state(l, src));
  return total;
}

inline double loss_cross_entropy(const Matrix& logits, std::span<const int> targets) {
  return cross_entropy(logits, targets);
}

/// Weighted objective with every component recorded.
inline StepMetrics loss_total(const ForwardTrace& s, const ForwardTrace& t, std::span<const int> targets,
                              const DistillWeights& w, const DistillOptions& opts = {},
                              const std::vector<bool>& layers = {}) {
  w.validate();
  StepMetrics m;
  m.l_emb = loss_embedding(s, t);
  m.l_att = loss_attention(s, t, opts.kl_direction, layers);
  m.l_hid = loss_hidden(s, t, opts.hidden_source, layers);
  m.l_ce = loss_cross_entropy(s.logits, targets);
  m.l_total = w.alpha1 * m.l_emb + w.alpha2 * m.l_att + w.alpha3 * m.l_hid + w.alpha4 * m.l_ce;
  return m;
}

/// Differentiable objective plus its component values.
struct DistillLoss {
  ad::Var total;
  StepMetrics metrics;
};

/// Builds the combined objective on the student's tape. `logits` is the node
/// the cross-entropy reads (LM logits or class logits). Components with a zero
/// weight are evaluated for the metrics but kept off the graph. Without a
/// teacher only the cross-entropy term is available.
inline DistillLoss distill_loss(const TapeTrace& s, const ForwardTrace* teacher, ad::Var logits,
                                std::span<const int> targets, const DistillWeights& w,
                                const DistillOptions& opts, const std::vector<bool>& layers) {
  w.validate();
  if (!teacher && w.uses_teacher())
    throw std::invalid_argument("distill_loss: distillation weights set but no teacher given");
  ad::Tape& tape = *s.embedding.tape;
  DistillLoss out;
  std::vector<ad::Var> terms;

  out.metrics.l_ce = knz::cross_entropy(logits.value(), targets);
  if (w.alpha4 > 0.0) terms.push_back(ad::scale(ad::cross_entropy(logits, targets), w.alpha4));

  if (teacher) {
    const ForwardTrace& t = *teacher;
    if (!s.embedding.value().same_shape(t.embedding) || s.attention.size() != t.attention.size())
      throw DimensionError("distill: shape mismatch between teacher and student traces");

    if (w.alpha1 > 0.0) {
      ad::Var e = ad::mse(s.embedding, tape.constant(t.embedding));
      out.metrics.l_emb = e.value()(0, 0);
      terms.push_back(ad::scale(e, w.alpha1));
    } else {
      out.metrics.l_emb = mse(s.embedding.value(), t.embedding);
    }

    for (std::size_t l = 0; l < s.attention.size(); ++l) {
      if (!detail::included(layers, l)) continue;
      const double inv_heads = 1.0 / static_cast<double>(s.attention[l].size());
      for (std::size_t h = 0; h < s.attention[l].size(); ++h) {
        if (!s.attention[l][h].value().same_shape(t.attention[l][h]))
          throw DimensionError("distill: shape mismatch between teacher and student traces");
        if (w.alpha2 > 0.0) {
          ad::Var kl = ad::kl_attention(s.scores[l][h], t.attention[l][h], opts.kl_direction);
          out.metrics.l_att += kl.value()(0, 0) * inv_heads;
          terms.push_back(ad::scale(kl, w.alpha2 * inv_heads));
        } else {
          const Matrix& q = s.attention[l][h].value();
          out.metrics.l_att += inv_heads * (opts.kl_direction == ad::KlDirection::kTeacherStudent
                                                ? kl_rows(t.attention[l][h], q, true)
                                                : kl_rows(q, t.attention[l][h], true));
        }
      }
      const ad::Var hs = s.hidden_state(l, opts.hidden_source);
      const Matrix& ht = t.hidden_state(l, opts.hidden_source);
      if (w.alpha3 > 0.0) {
        ad::Var hl = ad::mse(hs, tape.constant(ht));
        out.metrics.l_hid += hl.value()(0, 0);
        terms.push_back(ad::scale(hl, w.alpha3));
      } else {
        out.metrics.l_hid += mse(hs.value(), ht);
      }
    }
  }

  ad::Var total = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) total = ad::add(total, terms[i]);
  out.total = total;
  out.metrics.l_total = total.value()(0, 0);
  return out;
}

/// Scales the whole gradient set so its global L2 norm is at most max_norm.
/// Returns the norm before clipping.
inline double clip_global_norm(ad::GradStore& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& [name, g] : grads)
    for (double v : g.data()) sq += v * v;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double c = max_norm / norm;
    for (auto& [name, g] : grads)
      for (double& v : g.data()) v *= c;
  }
  return norm;
}

/// Adam with bias correction; state is keyed by parameter name.
class Adam {
 public:
  Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : beta1_(beta1), beta2_(beta2), eps_(eps) {}

  explicit Adam(const TrainConfig& c) : Adam(c.beta1, c.beta2, c.adam_eps) {}

  template <class Model>
  void step(Model& model, const ad::GradStore& grads, double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for_each_parameter(model, [&](const std::string& name, Matrix& p) {
      auto it = grads.find(name);
      if (it == grads.end()) return;
      const Matrix& g = it->second;
      Matrix& m = moment(m1_, name, p);
      Matrix& v = moment(m2_, name, p);
      auto pd = p.data();
      auto gd = g.data();
      auto md = m.data();
      auto vd = v.data();
      for (std::size_t i = 0; i < pd.size(); ++i) {
        md[i] = beta1_ * md[i] + (1.0 - beta1_) * gd[i];
        vd[i] = beta2_ * vd[i] + (1.0 - beta2_) * gd[i] * gd[i];
        pd[i] -= lr * (md[i] / c1) / (std::sqrt(vd[i] / c2) + eps_);
      }
    });
  }

  std::size_t steps() const { return t_; }

 private:
  static Matrix& moment(std::map<std::string, Matrix>& store, const std::string& name, const Matrix& like) {
    auto it = store.find(name);
    if (it == store.end()) it = store.emplace(name, Matrix(like.rows(), like.cols())).first;
    return it->second;
  }

  double beta1_, beta2_, eps_;
  std::size_t t_ = 0;
  std::map<std::string, Matrix> m1_, m2_;
};

/// FNV-1a over every parameter name and raw value, for immutability checks.
template <class Model>
std::uint64_t parameter_hash(const Model& m) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&](const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 0x100000001b3ULL;
    }
  };
  for_each_parameter(m, [&](const std::string& name, const Matrix& t) {
    mix(name.data(), name.size());
    mix(t.data().data(), t.size() * sizeof(double));
  });
  return h;
}

namespace detail {

inline void check_finite(const StepMetrics& m) {
  const std::pair<const char*, double> parts[] = {{"L_emb", m.l_emb}, {"L_att", m.l_att}, {"L_hid", m.l_hid},
                                                  {"L_ce", m.l_ce},   {"L_total", m.l_total}};
  for (const auto& [name, v] : parts)
    if (!std::isfinite(v))
      throw TrainingError(std::string("non-finite ") + name + " at step " + std::to_string(m.step));
}

template <class Model>
StepMetrics finish_step(Model& student, ad::Tape& tape, DistillLoss& loss, Adam& opt, const TrainConfig& cfg,
                        std::size_t step, std::chrono::steady_clock::time_point start) {
  loss.metrics.step = step;
  check_finite(loss.metrics);
  ad::GradStore grads = tape.backward(loss.total);
  clip_global_norm(grads, cfg.clip_norm);
  opt.step(student, grads, cfg.learning_rate);
  if (cfg.record_wall_time)
    loss.metrics.wall_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  return loss.metrics;
}

}  // namespace detail

/// One optimizer step on `student`. The teacher, when given, is only read.
inline StepMetrics train_step(TinyGPTModel& student, const TinyGPTModel* teacher, const LmBatch& batch,
                              const DistillWeights& w, Adam& opt, const TrainConfig& cfg,
                              const DistillOptions& opts = {}, std::size_t step = 0) {
  const auto start = std::chrono::steady_clock::now();
  ad::Tape tape;
  TapeTrace s = forward(student, tape, batch.inputs);
  std::optional<ForwardTrace> t;
  if (teacher) t = forward(*teacher, batch.inputs);
  const std::vector<int> targets = batch.flat_targets();
  DistillLoss loss = distill_loss(s, t ? &*t : nullptr, s.logits, targets, w, opts,
                                  distill_layer_mask(student, opts.layers));
  return detail::finish_step(student, tape, loss, opt, cfg, step, start);
}

/// Classification step: intermediate losses on the trunk plus cross-entropy
/// on the class logits.
inline StepMetrics train_classifier_step(ClassifierModel& student, const ClassifierModel* teacher,
                                         const std::vector<std::vector<int>>& inputs,
                                         std::span<const int> labels, const DistillWeights& w, Adam& opt,
                                         const TrainConfig& cfg, const DistillOptions& opts = {},
                                         std::size_t step = 0) {
  const auto start = std::chrono::steady_clock::now();
  ad::Tape tape;
  ClassifierTrace s = forward(student, tape, inputs);
  std::optional<ForwardTrace> t;
  if (teacher) t = forward(teacher->trunk, inputs);
  DistillLoss loss = distill_loss(s.trunk, t ? &*t : nullptr, s.class_logits, labels, w, opts,
                                  distill_layer_mask(student.trunk, opts.layers));
  return detail::finish_step(student, tape, loss, opt, cfg, step, start);
}

/// Pre-training ablation conditions.
enum class AblationMode { kNone, kLm, kKd, kLmKd };

inline const char* mode_name(AblationMode m) {
  switch (m) {
    case AblationMode::kNone: return "none";
    case AblationMode::kLm: return "lm";
    case AblationMode::kKd: return "kd";
    case AblationMode::kLmKd: return "lm+kd";
  }
  return "?";
}

inline AblationMode parse_mode(const std::string& s) {
  if (s == "none") return AblationMode::kNone;
  if (s == "lm") return AblationMode::kLm;
  if (s == "kd") return AblationMode::kKd;
  if (s == "lm+kd") return AblationMode::kLmKd;
  throw std::invalid_argument("unknown mode '" + s + "' (expected none|lm|kd|lm+kd)");
}

/// LM: cross-entropy only (alpha4 = 1). KD: the three intermediate terms of
/// `base` with no cross-entropy. LM+KD: `base` unchanged.
inline DistillWeights weights_for(AblationMode mode, const DistillWeights& base) {
  switch (mode) {
    case AblationMode::kLm: return {0.0, 0.0, 0.0, 1.0};
    case AblationMode::kKd: return {base.alpha1, base.alpha2, base.alpha3, 0.0};
    default: return base;
  }
}

/// Optimizer steps for `epochs` passes over n_tokens, capped by max_steps.
inline std::size_t steps_for(const TrainConfig& cfg, std::size_t n_tokens) {
  const std::size_t per_epoch = std::max<std::size_t>(1, n_tokens / (cfg.batch_size * cfg.seq_len));
  std::size_t steps = per_epoch * cfg.epochs;
  if (cfg.max_steps > 0) steps = std::min(steps, cfg.max_steps);
  return steps;
}

struct PhaseResult {
  std::vector<StepMetrics> history;
};

/// Trains `student` under one ablation condition. kNone performs no steps.
/// `teacher` may be null only for kLm.
inline PhaseResult run_phase(AblationMode mode, TinyGPTModel& student, const TinyGPTModel* teacher,
                             std::span<const int> train_tokens, const TrainConfig& cfg,
                             const DistillWeights& base = DistillWeights::pretrain(),
                             const DistillOptions& opts = {},
                             const std::function<void(const StepMetrics&)>& on_step = {}) {
  cfg.validate();
  PhaseResult out;
  if (mode == AblationMode::kNone) return out;
  const DistillWeights w = weights_for(mode, base);
  if (w.uses_teacher() && !teacher) throw std::invalid_argument("run_phase: mode needs a teacher");
  Rng rng = Rng(cfg.seed).fork(0x6261746368ULL);
  Adam opt(cfg);
  const std::size_t steps = steps_for(cfg, train_tokens.size());
  for (std::size_t s = 0; s < steps; ++s) {
    const LmBatch batch = sample_batch(train_tokens, cfg.batch_size, cfg.seq_len, rng);
    out.history.push_back(train_step(student, teacher, batch, w, opt, cfg, opts, s));
    if (on_step) on_step(out.history.back());
  }
  return out;
}

struct EvalResult {
  double mean_ce = 0.0;
  double perplexity = 0.0;
  std::size_t tokens = 0;
};

/// Token-averaged held-out cross-entropy over sequential windows;
/// perplexity = exp(mean CE).
inline EvalResult evaluate_lm(const TinyGPTModel& model, std::span<const int> tokens, std::size_t seq_len,
                              std::size_t batch = 8, std::size_t max_windows = 0) {
  EvalResult r;
  double total = 0.0;
  for (const LmBatch& b : sequential_batches(tokens, batch, seq_len, max_windows)) {
    const ForwardTrace tr = forward(model, b.inputs);
    const std::vector<int> targets = b.flat_targets();
    total += cross_entropy(tr.logits, targets) * static_cast<double>(targets.size());
    r.tokens += targets.size();
  }
  if (r.tokens == 0) throw std::invalid_argument("evaluate_lm: not enough tokens for one window");
  r.mean_ce = total / static_cast<double>(r.tokens);
  r.perplexity = std::exp(r.mean_ce);
  return r;
}

}  // namespace knz
