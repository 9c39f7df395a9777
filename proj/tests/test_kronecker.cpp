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

#include <cmath>

#include "knz/kronecker.hpp"
#include "test_util.hpp"

namespace knz {
namespace {

using testing::max_abs;
using testing::naive_kron;
using testing::rel_diff;

Matrix rand_mat(std::size_t r, std::size_t c, Rng& rng) { return random_normal(r, c, rng); }

TEST(Kron, ScalarOneIsIdentity) {
  Rng rng(1);
  const Matrix b = rand_mat(3, 2, rng);
  EXPECT_EQ(kron(Matrix(1, 1, 1.0), b), b);
}

TEST(Kron, IdentityTimesIdentity) { EXPECT_EQ(kron(Matrix::identity(2), Matrix::identity(2)), Matrix::identity(4)); }

TEST(Kron, HandExpandedBlocks) {
  const Matrix a = Matrix::from_rows({{1, 2}, {3, 4}});
  const Matrix b = Matrix::from_rows({{0, 1}, {1, 0}});
  const Matrix expected = Matrix::from_rows({{0, 1, 0, 2}, {1, 0, 2, 0}, {0, 3, 0, 4}, {3, 0, 4, 0}});
  EXPECT_EQ(kron(a, b), expected);
}

TEST(Kron, MatchesDefinitionOnRandomShapes) {
  Rng rng(2);
  for (int t = 0; t < 30; ++t) {
    const Matrix a = rand_mat(1 + rng.below(4), 1 + rng.below(4), rng);
    const Matrix b = rand_mat(1 + rng.below(4), 1 + rng.below(4), rng);
    EXPECT_EQ(kron(a, b), naive_kron(a, b));
    const KroneckerPair p{a, b};
    EXPECT_EQ(p.param_count(), a.size() + b.size());
    EXPECT_EQ(materialize(p).rows(), a.rows() * b.rows());
    EXPECT_EQ(materialize(p).cols(), a.cols() * b.cols());
  }
}

TEST(KronIdentities, TransposeDistributivityMixedProduct) {
  Rng rng(3);
  for (int t = 0; t < 200; ++t) {
    const std::size_t m1 = 1 + rng.below(3), n1 = 1 + rng.below(3), m2 = 1 + rng.below(3), n2 = 1 + rng.below(3);
    const Matrix a = rand_mat(m1, n1, rng), b = rand_mat(m2, n2, rng), c = rand_mat(m2, n2, rng);
    EXPECT_EQ(transpose(kron(a, b)), kron(transpose(a), transpose(b)));
    EXPECT_LT(max_abs(kron(a, add(b, c)), add(kron(a, b), kron(a, c))), 1e-12);
    const std::size_t p1 = 1 + rng.below(3), p2 = 1 + rng.below(3);
    const Matrix cc = rand_mat(n1, p1, rng), dd = rand_mat(n2, p2, rng);
    EXPECT_LT(rel_diff(matmul(kron(a, b), kron(cc, dd)), kron(matmul(a, cc), matmul(b, dd))), 1e-9);
  }
}

TEST(KronIdentities, InverseOfProductIsProductOfInverses) {
  Rng rng(4);
  for (int t = 0; t < 200; ++t) {
    const std::size_t n = 1 + rng.below(3), m = 1 + rng.below(3);
    const Matrix a = testing::well_conditioned(n, rng), b = testing::well_conditioned(m, rng);
    const Matrix prod = matmul(kron(a, b), kron(testing::gauss_jordan_inverse(a), testing::gauss_jordan_inverse(b)));
    EXPECT_LT(max_abs(prod, Matrix::identity(n * m)), 1e-6);
  }
}

TEST(KronIdentities, DeterminantAgainstBruteForce) {
  // det(A kron B) = det(A)^m det(B)^n for A n x n and B m x m.
  Rng rng(5);
  for (int t = 0; t < 200; ++t) {
    const std::size_t n = 1 + rng.below(3), m = 1 + rng.below(2);
    const Matrix a = rand_mat(n, n, rng), b = rand_mat(m, m, rng);
    const double lhs = testing::brute_force_det(kron(a, b));
    const double rhs = std::pow(testing::brute_force_det(a), static_cast<double>(m)) *
                       std::pow(testing::brute_force_det(b), static_cast<double>(n));
    EXPECT_LE(std::abs(lhs - rhs), 1e-6 * std::max(1.0, std::abs(rhs))) << "n=" << n << " m=" << m;
  }
}

TEST(Rearrange, KronMapsToOuterProductExactly) {
  Rng rng(6);
  const Matrix a = rand_mat(2, 3, rng), b = rand_mat(2, 2, rng);
  const Matrix r = rearrange(kron(a, b), {2, 3, 2, 2});
  EXPECT_EQ(r, outer(a.data(), b.data()));
}

TEST(Rearrange, ZeroMapsToZero) { EXPECT_EQ(rearrange(Matrix(4, 6), {2, 3, 2, 2}), Matrix(6, 4)); }

TEST(Rearrange, PreservesFrobeniusResidual) {
  Rng rng(7);
  for (int t = 0; t < 10; ++t) {
    const FactorShape s{1 + rng.below(3), 1 + rng.below(3), 1 + rng.below(3), 1 + rng.below(3)};
    const Matrix w = rand_mat(s.rows(), s.cols(), rng);
    const Matrix a = rand_mat(s.m1, s.n1, rng), b = rand_mat(s.m2, s.n2, rng);
    const double lhs = testing::fro(sub(w, kron(a, b)));
    const double rhs = testing::fro(sub(rearrange(w, s), outer(a.data(), b.data())));
    EXPECT_NEAR(lhs, rhs, 1e-10 * std::max(1.0, lhs));
  }
}

TEST(Rearrange, ShapeMismatchThrows) { EXPECT_THROW(rearrange(Matrix(4, 5), {2, 2, 2, 2}), DimensionError); }

TEST(Rank1Svd, RecoversExactRankOne) {
  Rng rng(8);
  std::vector<double> u0 = {3, -1, 2, 0.5}, v0 = {1, 2, -2};
  auto unit = [](std::vector<double>& x) {
    double n = 0;
    for (double e : x) n += e * e;
    for (double& e : x) e /= std::sqrt(n);
  };
  unit(u0);
  unit(v0);
  const Matrix m = scale(outer(u0, v0), 5.0);
  const Rank1Result r = rank1_svd(m, rng);
  ASSERT_TRUE(r.converged);
  EXPECT_NEAR(r.sigma, 5.0, 1e-8);
  const double sign = r.u[0] * u0[0] > 0 ? 1.0 : -1.0;
  for (std::size_t i = 0; i < u0.size(); ++i) EXPECT_NEAR(r.u[i], sign * u0[i], 1e-8);
  for (std::size_t i = 0; i < v0.size(); ++i) EXPECT_NEAR(r.v[i], sign * v0[i], 1e-8);
}

TEST(Rank1Svd, ZeroMatrixGivesZeroSigma) {
  Rng rng(9);
  const Rank1Result r = rank1_svd(Matrix(3, 4), rng);
  EXPECT_EQ(r.sigma, 0.0);
  EXPECT_TRUE(r.converged);
}

TEST(Rank1Svd, ResidualMatchesJacobiTail) {
  Rng rng(10);
  for (int t = 0; t < 20; ++t) {
    const std::size_t rows = 2 + rng.below(6), cols = 2 + rng.below(6);
    const Matrix m = rand_mat(rows, cols, rng);
    const Rank1Result r = rank1_svd(m, rng);
    ASSERT_TRUE(r.converged);
    const testing::SvdResult ref = testing::jacobi_svd(rows >= cols ? m : transpose(m));
    double tail = 0.0;
    for (std::size_t k = 1; k < ref.sigma.size(); ++k) tail += ref.sigma[k] * ref.sigma[k];
    const Matrix approx = scale(outer(r.u, r.v), r.sigma);
    EXPECT_NEAR(testing::fro(sub(m, approx)), std::sqrt(tail), 1e-6);
    EXPECT_NEAR(r.sigma, ref.sigma[0], 1e-8 * ref.sigma[0]);
  }
  const Matrix m6 = rand_mat(6, 6, rng);
  const Rank1Result r6 = rank1_svd(m6, rng);
  const testing::SvdResult ref6 = testing::jacobi_svd(m6);
  double tail = 0.0;
  for (std::size_t k = 1; k < 6; ++k) tail += ref6.sigma[k] * ref6.sigma[k];
  EXPECT_NEAR(testing::fro(sub(m6, scale(outer(r6.u, r6.v), r6.sigma))), std::sqrt(tail), 1e-6);
}

TEST(Rank1Svd, OutputsUnitVectorsWithPinnedSign) {
  Rng rng(11);
  for (int t = 0; t < 20; ++t) {
    const Matrix m = rand_mat(5, 3, rng);
    const Rank1Result r = rank1_svd(m, rng);
    EXPECT_NEAR(dot(r.u, r.u), 1.0, 1e-12);
    EXPECT_NEAR(dot(r.v, r.v), 1.0, 1e-12);
    std::size_t arg = 0;
    for (std::size_t i = 1; i < r.u.size(); ++i)
      if (std::abs(r.u[i]) > std::abs(r.u[arg])) arg = i;
    EXPECT_GT(r.u[arg], 0.0);
  }
}

TEST(Rank1Svd, DeterministicForSeed) {
  Rng data(12);
  const Matrix m = rand_mat(7, 4, data);
  Rng r1(99), r2(99);
  const Rank1Result a = rank1_svd(m, r1), b = rank1_svd(m, r2);
  EXPECT_EQ(a.u, b.u);
  EXPECT_EQ(a.v, b.v);
  EXPECT_EQ(a.sigma, b.sigma);
}

TEST(Rank1Svd, ReportsNonConvergence) {
  // Wide Gram path disabled by size: plain iteration on a matrix with two
  // nearly equal singular values cannot settle in two steps.
  Rng rng(13);
  Matrix m(80, 80);
  for (std::size_t i = 0; i < 80; ++i) m(i, i) = 1.0 + 1e-3 * static_cast<double>(i % 2);
  const Rank1Result r = rank1_svd(m, rng, {2, 1e-14});
  EXPECT_FALSE(r.converged);
  EXPECT_EQ(r.iterations, 2);
  EXPECT_THROW(rank1_svd(m, rng, {0, 1e-10}), std::invalid_argument);
  EXPECT_THROW(rank1_svd(m, rng, {10, 0.0}), std::invalid_argument);
}

TEST(NearestKron, ExactFactorizationRecovered) {
  Rng rng(14);
  for (int t = 0; t < 30; ++t) {
    const FactorShape s{1 + rng.below(4), 1 + rng.below(4), 1 + rng.below(3), 1 + rng.below(3)};
    const Matrix w = kron(rand_mat(s.m1, s.n1, rng), rand_mat(s.m2, s.n2, rng));
    const NearestKronecker nk = nearest_kron(w, s, rng);
    EXPECT_LE(nk.report.relative_residual, 1e-6);
    EXPECT_LT(rel_diff(materialize(nk.pair), w), 1e-6);
  }
}

TEST(NearestKron, ZeroInputGivesZeroFactors) {
  Rng rng(15);
  const NearestKronecker nk = nearest_kron(Matrix(4, 4), {2, 2, 2, 2}, rng);
  EXPECT_EQ(nk.report.residual_fro, 0.0);
  EXPECT_EQ(nk.report.relative_residual, 0.0);
  EXPECT_EQ(materialize(nk.pair), Matrix(4, 4));
}

TEST(NearestKron, SigmaSplitEvenlyAndReportConsistent) {
  Rng rng(16);
  const Matrix w = rand_mat(6, 4, rng);
  const NearestKronecker nk = nearest_kron(w, {3, 2, 2, 2}, rng);
  EXPECT_NEAR(testing::fro(nk.pair.a), std::sqrt(nk.report.singular_value), 1e-10);
  EXPECT_NEAR(testing::fro(nk.pair.b), std::sqrt(nk.report.singular_value), 1e-10);
  EXPECT_NEAR(nk.report.residual_fro, testing::fro(sub(w, materialize(nk.pair))), 1e-10);
  EXPECT_NEAR(nk.report.relative_residual, nk.report.residual_fro / testing::fro(w), 1e-14);
}

// Best residual among random pairs, each scaled optimally; an upper bound on
// the true minimum.
double best_random_candidate(const Matrix& w, const FactorShape& s, Rng& rng, int candidates) {
  double best = std::numeric_limits<double>::infinity();
  for (int c = 0; c < candidates; ++c) {
    const Matrix p = kron(rand_mat(s.m1, s.n1, rng), rand_mat(s.m2, s.n2, rng));
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      num += p.data()[i] * w.data()[i];
      den += p.data()[i] * p.data()[i];
    }
    best = std::min(best, testing::fro(sub(w, scale(p, num / den))));
  }
  return best;
}

TEST(NearestKron, BeatsRandomCandidates) {
  Rng rng(17);
  for (int t = 0; t < 10; ++t) {
    for (const FactorShape& s : {FactorShape{2, 2, 2, 2}, FactorShape{3, 2, 2, 3}}) {
      const Matrix w = rand_mat(s.rows(), s.cols(), rng);
      const NearestKronecker nk = nearest_kron(w, s, rng);
      EXPECT_LE(nk.report.residual_fro, best_random_candidate(w, s, rng, 1000) + 1e-12);
    }
  }
}

TEST(NearestKron, LocalPerturbationsDoNotImprove) {
  Rng rng(18);
  const FactorShape s{3, 2, 2, 3};
  const Matrix w = rand_mat(6, 6, rng);
  const NearestKronecker nk = nearest_kron(w, s, rng);
  for (int t = 0; t < 200; ++t) {
    KroneckerPair p = nk.pair;
    for (double& v : p.a.data()) v += 1e-3 * rng.normal();
    for (double& v : p.b.data()) v += 1e-3 * rng.normal();
    EXPECT_GE(kron_residual(w, p), nk.report.residual_fro - 1e-12);
  }
}

TEST(NearestKron, ShapeMismatchThrows) {
  Rng rng(19);
  EXPECT_THROW(nearest_kron(Matrix(5, 4), {2, 2, 2, 2}, rng), DimensionError);
}

TEST(KronMatvec, IdentityPairLeavesVectorUnchanged) {
  const KroneckerPair p{Matrix::identity(3), Matrix::identity(2)};
  const std::vector<double> x = {1, 2, 3, 4, 5, 6};
  EXPECT_EQ(kron_matvec(p, x), x);
}

TEST(KronMatvec, ScalarBReducesToAMatvec) {
  Rng rng(20);
  const Matrix a = rand_mat(3, 4, rng);
  const KroneckerPair p{a, Matrix(1, 1, 1.0)};
  const Matrix x = rand_mat(1, 4, rng);
  const std::vector<double> y = kron_matvec(p, x.row(0));
  const Matrix ref = matmul_nt(x, a);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(y[i], ref(0, i), 1e-14);
}

TEST(KronMatvec, MatchesMaterializedProduct) {
  Rng rng(21);
  for (int t = 0; t < 50; ++t) {
    const FactorShape s{1 + rng.below(5), 1 + rng.below(5), 1 + rng.below(4), 1 + rng.below(4)};
    const KroneckerPair p{rand_mat(s.m1, s.n1, rng), rand_mat(s.m2, s.n2, rng)};
    const Matrix x = rand_mat(1, s.cols(), rng);
    const Matrix y = Matrix::row_vector(kron_matvec(p, x.row(0)));
    EXPECT_LT(rel_diff(y, transpose(testing::naive_matmul(naive_kron(p.a, p.b), transpose(x)))), 1e-10);
  }
  EXPECT_THROW(kron_matvec(KroneckerPair{Matrix(2, 2), Matrix(2, 2)}, std::vector<double>(3)), DimensionError);
}

TEST(KronMatmul, RowsMatchMatvecAndIdentity) {
  Rng rng(22);
  const KroneckerPair p{rand_mat(3, 2, rng), rand_mat(2, 2, rng)};
  const Matrix x = rand_mat(4, 4, rng);
  const Matrix y = kron_matmul(p, x);
  for (std::size_t r = 0; r < 4; ++r) {
    const std::vector<double> yr = kron_matvec(p, x.row(r));
    for (std::size_t j = 0; j < yr.size(); ++j) EXPECT_NEAR(y(r, j), yr[j], 1e-14);
  }
  const Matrix one = rand_mat(1, 4, rng);
  EXPECT_EQ(kron_matmul(p, one).row(0).size(), 6u);
  const KroneckerPair id{Matrix::identity(2), Matrix::identity(2)};
  EXPECT_EQ(kron_matmul(id, x), x);
  EXPECT_THROW(kron_matmul(p, Matrix(2, 5)), DimensionError);
}

TEST(KronMatmul, ScaledRoleShapesMatchDense) {
  Rng rng(23);
  for (const FactorShape& s : {FactorShape{6, 12, 2, 1}, FactorShape{24, 12, 2, 1}, FactorShape{12, 24, 1, 2}}) {
    const KroneckerPair p{rand_mat(s.m1, s.n1, rng), rand_mat(s.m2, s.n2, rng)};
    const Matrix x = rand_mat(9, s.cols(), rng);
    EXPECT_LT(rel_diff(kron_matmul(p, x), testing::naive_matmul(x, transpose(naive_kron(p.a, p.b)))), 1e-10);
  }
}

// Gradients through the materialized path: dW = G^T X, then dA, dB by the
// chain rule through W = A kron B.
KronGradients materialized_gradients(const KroneckerPair& p, const Matrix& x, const Matrix& g) {
  const FactorShape s = p.shape();
  const Matrix w = naive_kron(p.a, p.b);
  const Matrix dw = testing::naive_matmul(transpose(g), x);
  KronGradients out{Matrix(s.m1, s.n1), Matrix(s.m2, s.n2), testing::naive_matmul(g, w)};
  for (std::size_t i = 0; i < dw.rows(); ++i)
    for (std::size_t j = 0; j < dw.cols(); ++j) {
      const std::size_t i1 = i / s.m2, i2 = i % s.m2, j1 = j / s.n2, j2 = j % s.n2;
      out.a(i1, j1) += dw(i, j) * p.b(i2, j2);
      out.b(i2, j2) += dw(i, j) * p.a(i1, j1);
    }
  return out;
}

TEST(KronBackward, MatchesMaterializedPath) {
  Rng rng(24);
  for (int t = 0; t < 40; ++t) {
    const FactorShape s{1 + rng.below(4), 1 + rng.below(4), 1 + rng.below(3), 1 + rng.below(3)};
    const KroneckerPair p{rand_mat(s.m1, s.n1, rng), rand_mat(s.m2, s.n2, rng)};
    const Matrix x = rand_mat(1 + rng.below(5), s.cols(), rng);
    const Matrix g = rand_mat(x.rows(), s.rows(), rng);
    const KronGradients got = kron_backward(p, x, g);
    const KronGradients ref = materialized_gradients(p, x, g);
    EXPECT_LT(max_abs(got.a, ref.a), 1e-9);
    EXPECT_LT(max_abs(got.b, ref.b), 1e-9);
    EXPECT_LT(max_abs(got.x, ref.x), 1e-9);
  }
}

TEST(KronBackward, IdentityAAndZeroUpstream) {
  Rng rng(25);
  const KroneckerPair p{Matrix::identity(3), rand_mat(2, 2, rng)};
  const Matrix x = rand_mat(4, 6, rng), g = rand_mat(4, 6, rng);
  EXPECT_LT(max_abs(kron_backward(p, x, g).b, materialized_gradients(p, x, g).b), 1e-9);
  const KronGradients z = kron_backward(p, x, Matrix(4, 6));
  EXPECT_EQ(z.a, Matrix(3, 3));
  EXPECT_EQ(z.b, Matrix(2, 2));
  EXPECT_EQ(z.x, Matrix(4, 6));
  EXPECT_THROW(kron_backward(p, x, Matrix(3, 6)), DimensionError);
}

TEST(CompressionFactor, PrintedExamples) {
  EXPECT_NEAR(compression_factor(1024, 1024, {512, 512, 2, 2}), 1048576.0 / 262148.0, 1e-12);
  EXPECT_GE(compression_factor(1024, 1024, {512, 512, 2, 2}), 3.9);
  EXPECT_LE(compression_factor(1024, 1024, {512, 512, 2, 2}), 4.1);
  EXPECT_NEAR(compression_factor(768, 768, {384, 768, 2, 1}), 589824.0 / 294914.0, 1e-12);
  EXPECT_NEAR(compression_factor(6, 4, {6, 4, 1, 1}), 24.0 / 25.0, 1e-15);
  EXPECT_THROW(compression_factor(10, 10, {2, 2, 2, 2}), DimensionError);
}

TEST(Flops, ClosedFormCounts) {
  EXPECT_EQ(dense_matvec_flops(768, 768), 1179648u);
  // min(384*768*1 + 384*1*2, 768*1*2 + 384*768*2) = 295680 multiply-adds.
  EXPECT_EQ(kron_matvec_flops({384, 768, 2, 1}), 591360u);
  EXPECT_EQ(kron_matvec_flops({512, 512, 2, 2}), 2u * (512 * 512 * 2 + 512 * 2 * 2));
}

}  // namespace
}  // namespace knz
