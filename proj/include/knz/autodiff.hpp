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

#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "knz/kronecker.hpp"
#include "knz/loss_kernels.hpp"
#include "knz/matrix.hpp"

namespace knz::ad {

class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class Tape;

/// Handle to a node on a tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  bool valid() const noexcept { return tape != nullptr; }
  const Matrix& value() const;
};

/// Parameter name -> gradient of the same shape as the parameter.
using GradStore = std::map<std::string, Matrix>;

/// Append-only record of primitive ops. Nodes are topologically ordered by
/// construction, so backward walks them in reverse append order.
class Tape {
 public:
  using BackwardFn = std::function<void(const Matrix& upstream, Tape& tape)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value) { return push(std::move(value), nullptr, {}); }

  /// Leaf bound to a named parameter. Binding the same name twice returns
  /// the same node.
  Var parameter(const std::string& name, const Matrix& value) {
    if (auto it = params_.find(name); it != params_.end()) return {this, it->second};
    Var v = push(value, nullptr, name);
    params_.emplace(name, v.id);
    return v;
  }

  Var record(Matrix value, BackwardFn fn) { return push(std::move(value), std::move(fn), {}); }

  const Matrix& value(Var v) const { return nodes_.at(v.id).value; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Adds g into the gradient slot of v. Only meaningful inside backward().
  void accumulate(Var v, Matrix g) {
    Matrix& slot = grads_.at(v.id);
    if (slot.empty()) {
      if (!g.same_shape(nodes_[v.id].value)) {
        throw ContractError("tape: gradient " + g.shape_string() + " for node of shape " +
                            nodes_[v.id].value.shape_string());
      }
      slot = std::move(g);
    } else {
      axpy(1.0, g, slot);
    }
  }

  /// Adds g into the block of v's gradient whose top-left corner is (r0, c0).
  void accumulate_block(Var v, const Matrix& g, std::size_t r0, std::size_t c0) {
    Matrix& slot = grads_.at(v.id);
    const Matrix& val = nodes_[v.id].value;
    if (r0 + g.rows() > val.rows() || c0 + g.cols() > val.cols()) {
      throw ContractError("tape: gradient block " + g.shape_string() + " outside node of shape " +
                          val.shape_string());
    }
    if (slot.empty()) slot = Matrix(val.rows(), val.cols());
    for (std::size_t i = 0; i < g.rows(); ++i) {
      auto src = g.row(i);
      double* dst = slot.row(r0 + i).data() + c0;
      for (std::size_t j = 0; j < src.size(); ++j) dst[j] += src[j];
    }
  }

  /// Reverse sweep from a 1 x 1 loss node.
  GradStore backward(Var loss) {
    const Matrix& lv = value(loss);
    if (lv.rows() != 1 || lv.cols() != 1) {
      throw ContractError("backward: loss must be 1x1, got " + lv.shape_string());
    }
    grads_.assign(nodes_.size(), Matrix());
    grads_[loss.id] = Matrix(1, 1, 1.0);
    for (std::size_t id = loss.id + 1; id-- > 0;) {
      if (grads_[id].empty() || !nodes_[id].backward) continue;
      nodes_[id].backward(grads_[id], *this);
    }
    GradStore out;
    for (const auto& [name, id] : params_) {
      if (!grads_[id].empty()) out.emplace(name, grads_[id]);
    }
    return out;
  }

  /// Gradient of the last backward() with respect to any node (zero if the
  /// node was not reached).
  Matrix grad(Var v) const {
    if (v.id < grads_.size() && !grads_[v.id].empty()) return grads_[v.id];
    const Matrix& val = nodes_.at(v.id).value;
    return Matrix(val.rows(), val.cols());
  }

 private:
  struct Node {
    Matrix value;
    BackwardFn backward;
    std::string param;
  };

  Var push(Matrix value, BackwardFn fn, std::string param) {
    nodes_.push_back(Node{std::move(value), std::move(fn), std::move(param)});
    return {this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
  std::vector<Matrix> grads_;
  std::map<std::string, std::size_t> params_;
};

inline const Matrix& Var::value() const { return tape->value(*this); }

namespace detail {

inline Tape& tape_of(Var a) {
  if (!a.valid()) throw ContractError("ad: op on an unbound Var");
  return *a.tape;
}

inline Tape& tape_of(Var a, Var b) {
  if (a.tape != b.tape) throw ContractError("ad: operands live on different tapes");
  return tape_of(a);
}

}  // namespace detail

inline Var matmul(Var a, Var b) {
  Tape& t = detail::tape_of(a, b);
  return t.record(knz::matmul(a.value(), b.value()), [a, b](const Matrix& g, Tape& tp) {
    tp.accumulate(a, matmul_nt(g, b.value()));
    tp.accumulate(b, matmul_tn(a.value(), g));
  });
}

/// a * b^T.
inline Var matmul_nt(Var a, Var b) {
  Tape& t = detail::tape_of(a, b);
  return t.record(knz::matmul_nt(a.value(), b.value()), [a, b](const Matrix& g, Tape& tp) {
    tp.accumulate(a, knz::matmul(g, b.value()));
    tp.accumulate(b, matmul_tn(g, a.value()));
  });
}

/// x W^T (+ bias), W stored out x in.
inline Var linear(Var x, Var w, std::optional<Var> bias = std::nullopt) {
  Tape& t = detail::tape_of(x, w);
  Matrix y = knz::matmul_nt(x.value(), w.value());
  if (bias) y = add_row_broadcast(y, bias->value().row(0));
  return t.record(std::move(y), [x, w, bias](const Matrix& g, Tape& tp) {
    tp.accumulate(x, knz::matmul(g, w.value()));
    tp.accumulate(w, matmul_tn(g, x.value()));
    if (bias) tp.accumulate(*bias, column_sums(g));
  });
}

/// x (A kron B)^T (+ bias) in factored form; never builds A kron B.
inline Var kron_linear(Var x, Var a, Var b, std::optional<Var> bias = std::nullopt) {
  Tape& t = detail::tape_of(x, a);
  detail::tape_of(a, b);
  Matrix y = kron_matmul(a.value(), b.value(), x.value());
  if (bias) y = add_row_broadcast(y, bias->value().row(0));
  return t.record(std::move(y), [x, a, b, bias](const Matrix& g, Tape& tp) {
    KronGradients kg = kron_backward(a.value(), b.value(), x.value(), g);
    tp.accumulate(a, std::move(kg.a));
    tp.accumulate(b, std::move(kg.b));
    tp.accumulate(x, std::move(kg.x));
    if (bias) tp.accumulate(*bias, column_sums(g));
  });
}

inline Var add(Var a, Var b) {
  Tape& t = detail::tape_of(a, b);
  return t.record(knz::add(a.value(), b.value()), [a, b](const Matrix& g, Tape& tp) {
    tp.accumulate(a, g);
    tp.accumulate(b, g);
  });
}

inline Var scale(Var a, double s) {
  Tape& t = detail::tape_of(a);
  return t.record(knz::scale(a.value(), s),
                  [a, s](const Matrix& g, Tape& tp) { tp.accumulate(a, knz::scale(g, s)); });
}

/// Sum of all entries as a 1 x 1 node.
inline Var sum(Var a) {
  Tape& t = detail::tape_of(a);
  return t.record(Matrix(1, 1, knz::sum(a.value())), [a](const Matrix& g, Tape& tp) {
    const Matrix& v = a.value();
    tp.accumulate(a, Matrix(v.rows(), v.cols(), g(0, 0)));
  });
}

inline Var reshape(Var a, std::size_t rows, std::size_t cols) {
  Tape& t = detail::tape_of(a);
  return t.record(a.value().reshaped(rows, cols), [a](const Matrix& g, Tape& tp) {
    tp.accumulate(a, g.reshaped(a.value().rows(), a.value().cols()));
  });
}

inline Var layernorm(Var x, Var gain, Var bias, double eps) {
  Tape& t = detail::tape_of(x, gain);
  const Matrix& xv = x.value();
  const std::size_t n = xv.cols();
  if (gain.value().size() != n || bias.value().size() != n) {
    throw DimensionError("ad::layernorm: gain/bias against input " + xv.shape_string());
  }
  Matrix xhat(xv.rows(), n);
  std::vector<double> inv(xv.rows());
  for (std::size_t i = 0; i < xv.rows(); ++i) {
    auto in = xv.row(i);
    double mean = 0.0;
    for (double v : in) mean += v;
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (double v : in) var += (v - mean) * (v - mean);
    var /= static_cast<double>(n);
    inv[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) xhat(i, j) = (in[j] - mean) * inv[i];
  }
  Matrix y(xv.rows(), n);
  const auto gv = gain.value().data();
  const auto bv = bias.value().data();
  for (std::size_t i = 0; i < xv.rows(); ++i)
    for (std::size_t j = 0; j < n; ++j) y(i, j) = xhat(i, j) * gv[j] + bv[j];

  return t.record(std::move(y), [x, gain, bias, xhat = std::move(xhat), inv = std::move(inv)](
                                    const Matrix& g, Tape& tp) {
    const std::size_t rows = g.rows(), cols = g.cols();
    const auto gv = gain.value().data();
    Matrix dx(rows, cols), dgain(1, cols), dbias(1, cols);
    std::vector<double> gx(cols);
    for (std::size_t i = 0; i < rows; ++i) {
      double s1 = 0.0, s2 = 0.0;
      for (std::size_t j = 0; j < cols; ++j) {
        dgain(0, j) += g(i, j) * xhat(i, j);
        dbias(0, j) += g(i, j);
        gx[j] = g(i, j) * gv[j];
        s1 += gx[j];
        s2 += gx[j] * xhat(i, j);
      }
      const double c = inv[i] / static_cast<double>(cols);
      for (std::size_t j = 0; j < cols; ++j)
        dx(i, j) = c * (static_cast<double>(cols) * gx[j] - s1 - xhat(i, j) * s2);
    }
    tp.accumulate(x, std::move(dx));
    tp.accumulate(gain, std::move(dgain));
    tp.accumulate(bias, std::move(dbias));
  });
}

inline Var gelu(Var x) {
  Tape& t = detail::tape_of(x);
  return t.record(knz::gelu(x.value()), [x](const Matrix& g, Tape& tp) {
    Matrix d = x.value();
    for (double& v : d.data()) v = gelu_derivative(v);
    tp.accumulate(x, hadamard(d, g));
  });
}

/// Rows of a dense table selected by ids.
inline Var gather(Var table, std::span<const int> ids) {
  Tape& t = detail::tape_of(table);
  const Matrix& tv = table.value();
  std::vector<int> idx(ids.begin(), ids.end());
  Matrix out(idx.size(), tv.cols());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] < 0 || static_cast<std::size_t>(idx[r]) >= tv.rows()) {
      throw std::out_of_range("ad::gather: id " + std::to_string(idx[r]) + " out of range for " +
                              std::to_string(tv.rows()) + " rows");
    }
    auto src = tv.row(static_cast<std::size_t>(idx[r]));
    std::copy(src.begin(), src.end(), out.row(r).begin());
  }
  return t.record(std::move(out), [table, idx = std::move(idx)](const Matrix& g, Tape& tp) {
    const Matrix& tv = table.value();
    Matrix d(tv.rows(), tv.cols());
    for (std::size_t r = 0; r < idx.size(); ++r) {
      auto dst = d.row(static_cast<std::size_t>(idx[r]));
      auto src = g.row(r);
      for (std::size_t j = 0; j < src.size(); ++j) dst[j] += src[j];
    }
    tp.accumulate(table, std::move(d));
  });
}

/// Row r is kron(a_e[ids[r]], b_e) with b_e of shape 1 x f.
inline Var kron_gather(Var a_e, Var b_e, std::span<const int> ids) {
  Tape& t = detail::tape_of(a_e, b_e);
  const Matrix& av = a_e.value();
  const Matrix& bv = b_e.value();
  if (bv.rows() != 1) throw DimensionError("ad::kron_gather: b_e must be 1 x f, got " + bv.shape_string());
  const std::size_t cols = av.cols(), f = bv.cols();
  std::vector<int> idx(ids.begin(), ids.end());
  Matrix out(idx.size(), cols * f);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] < 0 || static_cast<std::size_t>(idx[r]) >= av.rows()) {
      throw std::out_of_range("ad::kron_gather: id " + std::to_string(idx[r]) +
                              " out of range for " + std::to_string(av.rows()) + " rows");
    }
    const double* a = av.row(static_cast<std::size_t>(idx[r])).data();
    double* o = out.row(r).data();
    for (std::size_t j = 0; j < cols; ++j)
      for (std::size_t k = 0; k < f; ++k) o[j * f + k] = a[j] * bv(0, k);
  }
  return t.record(std::move(out), [a_e, b_e, idx = std::move(idx)](const Matrix& g, Tape& tp) {
    const Matrix& av = a_e.value();
    const Matrix& bv = b_e.value();
    const std::size_t cols = av.cols(), f = bv.cols();
    Matrix da(av.rows(), cols), db(1, f);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      const std::size_t id = static_cast<std::size_t>(idx[r]);
      const double* a = av.row(id).data();
      double* dar = da.row(id).data();
      const double* gr = g.row(r).data();
      for (std::size_t j = 0; j < cols; ++j)
        for (std::size_t k = 0; k < f; ++k) {
          dar[j] += gr[j * f + k] * bv(0, k);
          db(0, k) += gr[j * f + k] * a[j];
        }
    }
    tp.accumulate(a_e, std::move(da));
    tp.accumulate(b_e, std::move(db));
  });
}

/// Sub-block [r0, r0 + rows) x [c0, c0 + cols).
inline Var slice(Var x, std::size_t r0, std::size_t rows, std::size_t c0, std::size_t cols) {
  Tape& t = detail::tape_of(x);
  const Matrix& xv = x.value();
  if (r0 + rows > xv.rows() || c0 + cols > xv.cols()) {
    throw DimensionError("ad::slice: block out of bounds of " + xv.shape_string());
  }
  Matrix out(rows, cols);
  for (std::size_t i = 0; i < rows; ++i) {
    auto src = xv.row(r0 + i).subspan(c0, cols);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return t.record(std::move(out),
                  [x, r0, c0](const Matrix& g, Tape& tp) { tp.accumulate_block(x, g, r0, c0); });
}

struct Placement {
  Var part;
  std::size_t row = 0;
  std::size_t col = 0;
};

/// Places non-overlapping blocks into a zero rows x cols matrix.
inline Var assemble(std::size_t rows, std::size_t cols, std::vector<Placement> parts) {
  if (parts.empty()) throw ContractError("ad::assemble: no parts");
  Tape& t = detail::tape_of(parts.front().part);
  Matrix out(rows, cols);
  for (const Placement& p : parts) {
    const Matrix& v = p.part.value();
    if (p.row + v.rows() > rows || p.col + v.cols() > cols) {
      throw DimensionError("ad::assemble: block " + v.shape_string() + " does not fit");
    }
    for (std::size_t i = 0; i < v.rows(); ++i) {
      auto src = v.row(i);
      std::copy(src.begin(), src.end(), out.row(p.row + i).begin() + static_cast<std::ptrdiff_t>(p.col));
    }
  }
  return t.record(std::move(out), [parts = std::move(parts)](const Matrix& g, Tape& tp) {
    for (const Placement& p : parts) {
      const Matrix& v = p.part.value();
      Matrix d(v.rows(), v.cols());
      for (std::size_t i = 0; i < v.rows(); ++i) {
        auto src = g.row(p.row + i).subspan(p.col, v.cols());
        std::copy(src.begin(), src.end(), d.row(i).begin());
      }
      tp.accumulate(p.part, std::move(d));
    }
  });
}

namespace detail {

inline Matrix softmax_backward(const Matrix& y, const Matrix& g) {
  Matrix d(y.rows(), y.cols());
  for (std::size_t i = 0; i < y.rows(); ++i) {
    const double s = dot(g.row(i), y.row(i));
    for (std::size_t j = 0; j < y.cols(); ++j) d(i, j) = y(i, j) * (g(i, j) - s);
  }
  return d;
}

}  // namespace detail

inline Var softmax_rows(Var x) {
  Tape& t = detail::tape_of(x);
  Matrix y = knz::softmax_rows(x.value());
  Matrix saved = y;
  return t.record(std::move(y), [x, saved = std::move(saved)](const Matrix& g, Tape& tp) {
    tp.accumulate(x, detail::softmax_backward(saved, g));
  });
}

/// Row i is softmax over columns j <= i; masked entries are exactly zero.
inline Var causal_softmax(Var x) {
  Tape& t = detail::tape_of(x);
  Matrix y = causal_softmax_rows(x.value());
  Matrix saved = y;
  return t.record(std::move(y), [x, saved = std::move(saved)](const Matrix& g, Tape& tp) {
    tp.accumulate(x, detail::softmax_backward(saved, g));
  });
}

/// Mean of (a - b)^2.
inline Var mse(Var a, Var b) {
  Tape& t = detail::tape_of(a, b);
  return t.record(Matrix(1, 1, knz::mse(a.value(), b.value())), [a, b](const Matrix& g, Tape& tp) {
    Matrix d = knz::sub(a.value(), b.value());
    const double c = 2.0 * g(0, 0) / static_cast<double>(d.size());
    for (double& v : d.data()) v *= c;
    tp.accumulate(b, knz::scale(d, -1.0));
    tp.accumulate(a, std::move(d));
  });
}

enum class KlDirection {
  kTeacherStudent,  // KL(teacher || student)
  kStudentTeacher,  // KL(student || teacher)
};

/// Mean over rows of the KL divergence between a fixed teacher distribution
/// and softmax(student_scores), restricted to causal positions j <= i. The
/// softmax is fused in so the gradient flows to the raw scores. The teacher
/// side is a constant.
inline Var kl_attention(Var student_scores, const Matrix& teacher, KlDirection dir) {
  Tape& t = detail::tape_of(student_scores);
  const Matrix& s = student_scores.value();
  knz::detail::require(s.same_shape(teacher), "ad::kl_attention", s, teacher);
  const std::size_t rows = s.rows(), cols = s.cols();
  Matrix logq(rows, cols);
  double total = 0.0;
  for (std::size_t i = 0; i < rows; ++i) {
    const std::size_t width = std::min(i + 1, cols);
    log_softmax_prefix(s.row(i), width, logq.row(i));
    for (std::size_t j = 0; j < width; ++j) {
      const double p = teacher(i, j);
      if (dir == KlDirection::kTeacherStudent) {
        if (p > 0.0) total += p * (std::log(p) - logq(i, j));
      } else {
        const double q = std::exp(logq(i, j));
        total += q * (logq(i, j) - std::log(p));
      }
    }
  }
  total /= static_cast<double>(rows);
  return t.record(Matrix(1, 1, total), [student_scores, teacher, dir, logq = std::move(logq)](
                                          const Matrix& g, Tape& tp) {
    const std::size_t rows = logq.rows(), cols = logq.cols();
    const double c = g(0, 0) / static_cast<double>(rows);
    Matrix d(rows, cols);
    for (std::size_t i = 0; i < rows; ++i) {
      const std::size_t width = std::min(i + 1, cols);
      if (dir == KlDirection::kTeacherStudent) {
        for (std::size_t j = 0; j < width; ++j) d(i, j) = c * (std::exp(logq(i, j)) - teacher(i, j));
      } else {
        double row_kl = 0.0;
        for (std::size_t j = 0; j < width; ++j)
          row_kl += std::exp(logq(i, j)) * (logq(i, j) - std::log(teacher(i, j)));
        for (std::size_t j = 0; j < width; ++j) {
          const double q = std::exp(logq(i, j));
          d(i, j) = c * q * ((logq(i, j) - std::log(teacher(i, j))) - row_kl);
        }
      }
    }
    tp.accumulate(student_scores, std::move(d));
  });
}

/// Mean token negative log-likelihood with a fused log-softmax.
inline Var cross_entropy(Var logits, std::span<const int> targets) {
  Tape& t = detail::tape_of(logits);
  const double value = knz::cross_entropy(logits.value(), targets);
  std::vector<int> tg(targets.begin(), targets.end());
  return t.record(Matrix(1, 1, value), [logits, tg = std::move(tg)](const Matrix& g, Tape& tp) {
    Matrix d = knz::softmax_rows(logits.value());
    const double c = g(0, 0) / static_cast<double>(d.rows());
    for (std::size_t i = 0; i < d.rows(); ++i) {
      d(i, static_cast<std::size_t>(tg[i])) -= 1.0;
      for (double& v : d.row(i)) v *= c;
    }
    tp.accumulate(logits, std::move(d));
  });
}

}  // namespace knz::ad
