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

// Scalar loss kernels shared by the tape ops and the detached loss functions.

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "knz/matrix.hpp"

namespace knz {

/// Mean of (a - b)^2 over all entries.
inline double mse(const Matrix& a, const Matrix& b) {
  detail::require(a.same_shape(b), "mse", a, b);
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a.data()[i] - b.data()[i];
    acc += d * d;
  }
  return acc / static_cast<double>(a.size());
}

/// log-softmax of one row over its first `width` entries.
inline void log_softmax_prefix(std::span<const double> in, std::size_t width, std::span<double> out) {
  const double mx = *std::max_element(in.begin(), in.begin() + static_cast<std::ptrdiff_t>(width));
  double total = 0.0;
  for (std::size_t j = 0; j < width; ++j) total += std::exp(in[j] - mx);
  const double lse = mx + std::log(total);
  for (std::size_t j = 0; j < width; ++j) out[j] = in[j] - lse;
}

/// Mean over rows of KL(p_row || q_row) for row-stochastic p, q. With
/// `causal` set, row i only spans columns j <= i. Terms with p == 0 are 0.
inline double kl_rows(const Matrix& p, const Matrix& q, bool causal) {
  detail::require(p.same_shape(q), "kl_rows", p, q);
  double acc = 0.0;
  for (std::size_t i = 0; i < p.rows(); ++i) {
    const std::size_t width = causal ? std::min(i + 1, p.cols()) : p.cols();
    for (std::size_t j = 0; j < width; ++j) {
      const double pv = p(i, j);
      if (pv > 0.0) acc += pv * (std::log(pv) - std::log(q(i, j)));
    }
  }
  return acc / static_cast<double>(p.rows());
}

/// Mean negative log-likelihood of `targets` under row-wise softmax(logits).
inline double cross_entropy(const Matrix& logits, std::span<const int> targets) {
  if (targets.size() != logits.rows()) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         logits.shape_string() + " logits");
  }
  std::vector<double> lp(logits.cols());
  double acc = 0.0;
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    const int t = targets[i];
    if (t < 0 || static_cast<std::size_t>(t) >= logits.cols()) {
      throw std::out_of_range("cross_entropy: target id " + std::to_string(t) +
                              " out of range for " + std::to_string(logits.cols()) + " classes");
    }
    log_softmax_prefix(logits.row(i), logits.cols(), lp);
    acc -= lp[static_cast<std::size_t>(t)];
  }
  return acc / static_cast<double>(logits.rows());
}

}  // namespace knz
