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
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "knz/matrix.hpp"
#include "knz/rng.hpp"

namespace knz {

/// Shape of a factorization W (m x n) = A (m1 x n1) kron B (m2 x n2).
struct FactorShape {
  std::size_t m1 = 1, n1 = 1, m2 = 1, n2 = 1;

  std::size_t rows() const noexcept { return m1 * m2; }
  std::size_t cols() const noexcept { return n1 * n2; }
  std::size_t param_count() const noexcept { return m1 * n1 + m2 * n2; }
  std::string to_string() const {
    return "A:" + std::to_string(m1) + "x" + std::to_string(n1) + ",B:" + std::to_string(m2) +
           "x" + std::to_string(n2);
  }
  friend bool operator==(const FactorShape&, const FactorShape&) = default;
};

/// Stands in for W = a kron b without storing W.
struct KroneckerPair {
  Matrix a;
  Matrix b;

  FactorShape shape() const noexcept { return {a.rows(), a.cols(), b.rows(), b.cols()}; }
  std::size_t rows() const noexcept { return a.rows() * b.rows(); }
  std::size_t cols() const noexcept { return a.cols() * b.cols(); }
  std::size_t param_count() const noexcept { return a.size() + b.size(); }
};

struct DecompositionReport {
  double residual_fro = 0.0;
  double relative_residual = 0.0;
  double singular_value = 0.0;
  int power_iterations_used = 0;
};

class ConvergenceError : public std::runtime_error {
 public:
  ConvergenceError(const std::string& what, DecompositionReport report)
      : std::runtime_error(what), report_(report) {}
  const DecompositionReport& report() const noexcept { return report_; }

 private:
  DecompositionReport report_;
};

/// Block (i, j) of the result is a(i, j) * b.
inline Matrix kron(const Matrix& a, const Matrix& b) {
  const std::size_t m2 = b.rows(), n2 = b.cols();
  Matrix out(a.rows() * m2, a.cols() * n2);
  for (std::size_t i1 = 0; i1 < a.rows(); ++i1)
    for (std::size_t j1 = 0; j1 < a.cols(); ++j1) {
      const double s = a(i1, j1);
      for (std::size_t i2 = 0; i2 < m2; ++i2) {
        double* orow = out.row(i1 * m2 + i2).data() + j1 * n2;
        const double* brow = b.row(i2).data();
        for (std::size_t j2 = 0; j2 < n2; ++j2) orow[j2] = s * brow[j2];
      }
    }
  return out;
}

inline Matrix materialize(const KroneckerPair& pair) { return kron(pair.a, pair.b); }

namespace detail {

inline void require_divides(const Matrix& w, const FactorShape& s, const char* op) {
  if (s.m1 == 0 || s.n1 == 0 || s.m2 == 0 || s.n2 == 0 || w.rows() != s.rows() ||
      w.cols() != s.cols()) {
    throw DimensionError(std::string(op) + ": factor shapes " + s.to_string() +
                         " do not tile " + w.shape_string());
  }
}

}  // namespace detail

/// Van Loan-Pitsianis rearrangement under the row-major vec convention.
///
/// Row (i1 * n1 + j1) of the result is the row-major flattening of the
/// m2 x n2 block of `w` at block coordinates (i1, j1). With this layout
///   ||W - A kron B||_F == ||R - vec(A) vec(B)^T||_F
/// so the nearest Kronecker pair is a rank-1 approximation of R.
inline Matrix rearrange(const Matrix& w, const FactorShape& s) {
  detail::require_divides(w, s, "rearrange");
  Matrix r(s.m1 * s.n1, s.m2 * s.n2);
  for (std::size_t i1 = 0; i1 < s.m1; ++i1)
    for (std::size_t j1 = 0; j1 < s.n1; ++j1) {
      double* out = r.row(i1 * s.n1 + j1).data();
      for (std::size_t i2 = 0; i2 < s.m2; ++i2) {
        const double* src = w.row(i1 * s.m2 + i2).data() + j1 * s.n2;
        for (std::size_t j2 = 0; j2 < s.n2; ++j2) out[i2 * s.n2 + j2] = src[j2];
      }
    }
  return r;
}

struct Rank1Result {
  std::vector<double> u;
  double sigma = 0.0;
  std::vector<double> v;
  int iterations = 0;
  bool converged = false;
};

struct PowerIterationOptions {
  int max_iters = 1000;
  double tol = 1e-10;
};

/// Dominant singular triplet by power iteration on m^T m (or m m^T when m is
/// wide). The Gram matrix is formed explicitly when its side is small, and
/// then its powers are squared between steps.
///
/// Stops once successive sigma estimates differ by less than tol * sigma.
/// The sign is fixed so the largest-magnitude entry of u is positive. A run
/// that exhausts max_iters returns converged == false with the last iterate.
inline Rank1Result rank1_svd(const Matrix& m, Rng& rng, PowerIterationOptions opts = {}) {
  if (opts.max_iters < 1) throw std::invalid_argument("rank1_svd: max_iters must be >= 1");
  if (!(opts.tol > 0.0)) throw std::invalid_argument("rank1_svd: tol must be positive");
  if (m.empty()) throw DimensionError("rank1_svd: empty matrix");

  Rank1Result out;
  out.u.assign(m.rows(), 0.0);
  out.v.assign(m.cols(), 0.0);
  if (frobenius_norm(m) == 0.0) {
    out.u[0] = 1.0;
    out.v[0] = 1.0;
    out.converged = true;
    return out;
  }

  // Iterate on the narrow side so the Gram matrix stays small.
  const bool wide = m.cols() > m.rows();
  const Matrix& mm = m;
  const std::size_t side = wide ? m.rows() : m.cols();
  const std::size_t other = wide ? m.cols() : m.rows();

  auto apply_m = [&](std::span<const double> x, std::span<double> y) {
    // y = M x with M the matrix whose columns we iterate over.
    std::fill(y.begin(), y.end(), 0.0);
    if (!wide) {
      for (std::size_t i = 0; i < mm.rows(); ++i) y[i] = dot(mm.row(i), x);
    } else {
      for (std::size_t i = 0; i < mm.rows(); ++i) {
        const double xi = x[i];
        auto row = mm.row(i);
        for (std::size_t j = 0; j < row.size(); ++j) y[j] += xi * row[j];
      }
    }
  };
  auto apply_mt = [&](std::span<const double> y, std::span<double> x) {
    std::fill(x.begin(), x.end(), 0.0);
    if (!wide) {
      for (std::size_t i = 0; i < mm.rows(); ++i) {
        const double yi = y[i];
        auto row = mm.row(i);
        for (std::size_t j = 0; j < row.size(); ++j) x[j] += yi * row[j];
      }
    } else {
      for (std::size_t i = 0; i < mm.rows(); ++i) x[i] = dot(mm.row(i), y);
    }
  };

  constexpr std::size_t kGramLimit = 64;
  Matrix gram;
  if (side <= kGramLimit) gram = wide ? matmul_nt(m, m) : matmul_tn(m, m);

  std::vector<double> x(side), tmp(other), next(side);
  auto normalize = [](std::vector<double>& vec) {
    const double n = std::sqrt(dot(vec, vec));
    if (n > 0.0)
      for (double& e : vec) e /= n;
    return n;
  };
  for (double& e : x) e = rng.normal();
  normalize(x);

  // With a small Gram matrix the iterate is multiplied by G, G^2, G^4, ...
  // (the power matrix is squared after every step), so the subdominant
  // component decays doubly exponentially even when sigma_1 and sigma_2 are
  // close, as they are for rearranged random weights.
  Matrix power = gram;
  double sigma_prev = -1.0;
  for (int it = 1; it <= opts.max_iters; ++it) {
    if (!gram.empty()) {
      for (std::size_t i = 0; i < side; ++i) next[i] = dot(power.row(i), x);
    } else {
      apply_m(x, tmp);
      apply_mt(tmp, next);
    }
    const double n = normalize(next);
    out.iterations = it;
    if (n == 0.0) break;
    x.swap(next);
    // Rayleigh quotient x^T G x with ||x|| = 1 estimates sigma^2.
    double lambda = 0.0;
    if (!gram.empty()) {
      for (std::size_t i = 0; i < side; ++i) lambda += x[i] * dot(gram.row(i), x);
    } else {
      apply_m(x, tmp);
      lambda = dot(tmp, tmp);
    }
    const double sigma = std::sqrt(std::max(0.0, lambda));
    if (sigma_prev >= 0.0 && std::abs(sigma - sigma_prev) <= opts.tol * std::max(sigma, 1e-300)) {
      out.converged = true;
      break;
    }
    sigma_prev = sigma;
    if (!gram.empty()) {
      power = matmul(power, power);
      double peak = 0.0;
      for (double e : power.data()) peak = std::max(peak, std::abs(e));
      if (peak > 0.0)
        for (double& e : power.data()) e /= peak;
    }
  }

  // Recover the long-side vector and sigma from M directly (better accuracy
  // than the Gram estimate).
  apply_m(x, tmp);
  std::vector<double> y(tmp);
  const double s = normalize(y);
  out.sigma = s;
  if (wide) {
    out.u = std::move(x);
    out.v = std::move(y);
  } else {
    out.v = std::move(x);
    out.u = std::move(y);
  }
  if (s == 0.0) out.converged = true;

  std::size_t arg = 0;
  for (std::size_t i = 1; i < out.u.size(); ++i)
    if (std::abs(out.u[i]) > std::abs(out.u[arg])) arg = i;
  if (out.u[arg] < 0.0) {
    for (double& e : out.u) e = -e;
    for (double& e : out.v) e = -e;
  }
  return out;
}

/// ||W - a kron b||_F computed entrywise without materializing the product.
inline double kron_residual(const Matrix& w, const KroneckerPair& pair) {
  const FactorShape s = pair.shape();
  detail::require_divides(w, s, "kron_residual");
  double acc = 0.0;
  for (std::size_t i1 = 0; i1 < s.m1; ++i1)
    for (std::size_t i2 = 0; i2 < s.m2; ++i2) {
      const double* wrow = w.row(i1 * s.m2 + i2).data();
      for (std::size_t j1 = 0; j1 < s.n1; ++j1) {
        const double a = pair.a(i1, j1);
        for (std::size_t j2 = 0; j2 < s.n2; ++j2) {
          const double d = wrow[j1 * s.n2 + j2] - a * pair.b(i2, j2);
          acc += d * d;
        }
      }
    }
  return std::sqrt(acc);
}

struct NearestKronecker {
  KroneckerPair pair;
  DecompositionReport report;
};

/// Nearest Kronecker pair in Frobenius norm: rank-1 SVD of rearrange(w), with
/// sqrt(sigma) folded into each factor. Throws ConvergenceError if the power
/// iteration does not settle within opts.max_iters.
inline NearestKronecker nearest_kron(const Matrix& w, const FactorShape& s, Rng& rng,
                                     PowerIterationOptions opts = {}) {
  const Matrix r = rearrange(w, s);
  const Rank1Result svd = rank1_svd(r, rng, opts);
  const double root = std::sqrt(svd.sigma);

  NearestKronecker out;
  out.pair.a = Matrix(s.m1, s.n1);
  out.pair.b = Matrix(s.m2, s.n2);
  for (std::size_t i = 0; i < svd.u.size(); ++i) out.pair.a.data()[i] = root * svd.u[i];
  for (std::size_t i = 0; i < svd.v.size(); ++i) out.pair.b.data()[i] = root * svd.v[i];

  DecompositionReport& rep = out.report;
  rep.singular_value = svd.sigma;
  rep.power_iterations_used = svd.iterations;
  rep.residual_fro = kron_residual(w, out.pair);
  const double wn = frobenius_norm(w);
  rep.relative_residual = wn > 0.0 ? rep.residual_fro / wn : 0.0;
  if (!svd.converged) {
    throw ConvergenceError("nearest_kron: power iteration did not converge in " +
                               std::to_string(svd.iterations) + " iterations for " +
                               s.to_string(),
                           rep);
  }
  return out;
}

namespace detail {

inline Eigen::Map<const EigenRowMajor> view(const Matrix& m, std::size_t rows, std::size_t cols) {
  return {m.data().data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols)};
}
inline Eigen::Map<EigenRowMajor> view(Matrix& m, std::size_t rows, std::size_t cols) {
  return {m.data().data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols)};
}

// Reads src as a contiguous (p, q, w) array and returns it as (q, p, w),
// stored as a q x (p w) matrix.
inline Matrix swap_outer(const Matrix& src, std::size_t p, std::size_t q, std::size_t w) {
  Matrix out(q, p * w);
  const double* in = src.data().data();
  double* o = out.data().data();
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t j = 0; j < q; ++j) std::copy_n(in + (i * q + j) * w, w, o + (j * p + i) * w);
  return out;
}

// Row-wise A X_r B^T for all rows of x at once (stacked X_r B^T, or A X_r).
inline Matrix xbt_stacked(const Matrix& fb, const Matrix& x, std::size_t n1, std::size_t n2) {
  const std::size_t stacked = x.rows() * n1;
  Matrix t(stacked, fb.rows());
  view(t, stacked, fb.rows()).noalias() = view(x, stacked, n2) * view(fb).transpose();
  return t;
}

inline Matrix ax_stacked(const Matrix& fa, const Matrix& x, std::size_t n1, std::size_t n2) {
  const std::size_t r = x.rows(), m1 = fa.rows();
  const Matrix xs = swap_outer(x, r, n1, n2);  // n1 x (r n2)
  Matrix p = matmul(fa, xs);                    // m1 x (r n2)
  return swap_outer(p, m1, r, n2);              // r x (m1 n2)
}

}  // namespace detail

/// Batched (A kron B) x_r for every row x_r of x, via Y_r = A X_r B^T with
/// X_r = reshape(x_r, n1 x n2), using the cheaper association order.
inline Matrix kron_matmul(const Matrix& a, const Matrix& b, const Matrix& x) {
  if (x.cols() != a.cols() * b.cols()) {
    throw DimensionError("kron_matmul: input " + x.shape_string() + " against factors " +
                         a.shape_string() + " (x) " + b.shape_string());
  }
  const FactorShape s{a.rows(), a.cols(), b.rows(), b.cols()};
  const std::size_t r = x.rows();
  Matrix y(r, s.rows());
  if (r == 0 || y.cols() == 0) return y;
  const std::size_t cost_ax = s.m1 * s.n1 * s.n2 + s.m1 * s.n2 * s.m2;
  const std::size_t cost_xb = s.n1 * s.n2 * s.m2 + s.m1 * s.n1 * s.m2;
  if (cost_ax <= cost_xb) {
    const Matrix p = detail::ax_stacked(a, x, s.n1, s.n2);
    detail::view(y, r * s.m1, s.m2).noalias() = detail::view(p, r * s.m1, s.n2) * detail::view(b).transpose();
  } else {
    const Matrix t = detail::swap_outer(detail::xbt_stacked(b, x, s.n1, s.n2), r, s.n1, s.m2);
    const Matrix z = matmul(a, t);  // m1 x (r m2)
    y = detail::swap_outer(z, s.m1, r, s.m2);
  }
  return y;
}

inline Matrix kron_matmul(const KroneckerPair& pair, const Matrix& x) {
  return kron_matmul(pair.a, pair.b, x);
}

/// (A kron B) x without materializing the product.
inline std::vector<double> kron_matvec(const KroneckerPair& pair, std::span<const double> x) {
  if (x.size() != pair.cols()) {
    throw DimensionError("kron_matvec: vector of length " + std::to_string(x.size()) +
                         " against factors " + pair.shape().to_string());
  }
  const Matrix y = kron_matmul(pair, Matrix::row_vector(x));
  return {y.data().begin(), y.data().end()};
}

/// Gradients of sum(upstream .* kron_matmul(pair, x)) with respect to the
/// factors and the input, evaluated in factored form. With
/// G_r = reshape(upstream row r, m1 x m2):
///   dA = sum_r G_r (X_r B^T)^T,  dB = sum_r G_r^T (A X_r),  dX_r = A^T G_r B.
struct KronGradients {
  Matrix a;
  Matrix b;
  Matrix x;
};

inline KronGradients kron_backward(const Matrix& fa, const Matrix& fb, const Matrix& x,
                                   const Matrix& upstream) {
  const FactorShape s{fa.rows(), fa.cols(), fb.rows(), fb.cols()};
  if (x.cols() != s.cols() || upstream.cols() != s.rows() || upstream.rows() != x.rows()) {
    throw DimensionError("kron_backward: input " + x.shape_string() + ", upstream " +
                         upstream.shape_string() + " against factors " + s.to_string());
  }
  const std::size_t r = x.rows();
  KronGradients g{Matrix(s.m1, s.n1), Matrix(s.m2, s.n2), Matrix(r, s.cols())};
  if (r == 0) return g;
  g.x = kron_matmul(transpose(fa), transpose(fb), upstream);

  const Matrix t = detail::swap_outer(detail::xbt_stacked(fb, x, s.n1, s.n2), r, s.n1, s.m2);  // n1 x (r m2)
  const Matrix gs = detail::swap_outer(upstream, r, s.m1, s.m2);                                // m1 x (r m2)
  g.a = matmul_nt(gs, t);

  const Matrix p = detail::ax_stacked(fa, x, s.n1, s.n2);  // (r m1) x n2 when viewed
  detail::view(g.b).noalias() =
      detail::view(upstream, r * s.m1, s.m2).transpose() * detail::view(p, r * s.m1, s.n2);
  return g;
}

inline KronGradients kron_backward(const KroneckerPair& pair, const Matrix& x,
                                   const Matrix& upstream) {
  return kron_backward(pair.a, pair.b, x, upstream);
}

/// m n / (m1 n1 + m2 n2).
inline double compression_factor(std::size_t m, std::size_t n, const FactorShape& s) {
  if (m != s.rows() || n != s.cols() || s.param_count() == 0) {
    throw DimensionError("compression_factor: " + s.to_string() + " does not tile " +
                         std::to_string(m) + "x" + std::to_string(n));
  }
  return static_cast<double>(m) * static_cast<double>(n) / static_cast<double>(s.param_count());
}

/// Multiply-add flops (counted as 2 each) for one dense matvec of shape m x n.
inline std::uint64_t dense_matvec_flops(std::size_t m, std::size_t n) {
  return 2ULL * m * n;
}

/// Flops for one factored matvec under the cheaper association order used by
/// kron_matvec: 2 * min(m1 n1 n2 + m1 n2 m2, n1 n2 m2 + m1 n1 m2).
inline std::uint64_t kron_matvec_flops(const FactorShape& s) {
  const std::uint64_t ax = 1ULL * s.m1 * s.n1 * s.n2 + 1ULL * s.m1 * s.n2 * s.m2;
  const std::uint64_t xb = 1ULL * s.n1 * s.n2 * s.m2 + 1ULL * s.m1 * s.n1 * s.m2;
  return 2ULL * std::min(ax, xb);
}

}  // namespace knz
