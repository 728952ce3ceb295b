// Copyright (c) 2026 the mixspeech authors
// SPDX-License-Identifier: Apache-2.0
//
// Training objectives: summed cross-entropy over non-PAD steps, summed
// per-step Jensen-Shannon divergence between the mixed-branch and uni-branch
// distributions (gradients flow into both), and their weighted combination.
#pragma once

#include <vector>

#include "mixspeech/corpus.hpp"
#include "mixspeech/tensor.hpp"

namespace mixspeech {

struct LossWeights {
  double lambda1 = 1.0;  // weight of the mixed-branch cross-entropy
  double lambda2 = 1.0;  // weight of the JSD regularizer

  void validate() const {
    expect(lambda1 >= 0.0 && lambda2 >= 0.0 && std::isfinite(lambda1) && std::isfinite(lambda2),
           Errc::Validation, "loss weights must be finite and non-negative");
  }
};

namespace detail {
inline std::vector<double> pad_keep_mask(const std::vector<int>& targets) {
  std::vector<double> keep(targets.size());
  for (size_t t = 0; t < targets.size(); ++t) keep[t] = targets[t] == kPad ? 0.0 : 1.0;
  return keep;
}
}  // namespace detail

// -sum_t log p(w_t), summed over non-PAD steps. `targets` excludes BOS.
inline Tensor cross_entropy(Tape& tape, const Tensor& probs, const std::vector<int>& targets) {
  expect(probs.shape.size() == 2, Errc::ShapeMismatch,
         "cross_entropy: expected an S x V matrix, got " + shape_str(probs.shape));
  expect(targets.size() == probs.rows(), Errc::ShapeMismatch,
         "cross_entropy: need one target per row of " + shape_str(probs.shape));
  for (int w : targets)
    expect(w >= 0 && static_cast<size_t>(w) < probs.cols(), Errc::InvalidArgument,
           "cross_entropy: target id " + std::to_string(w) + " out of range [0," +
               std::to_string(probs.cols()) + ")");
  Tensor picked = gather_cols(tape, probs, targets);
  Tensor logp = log(tape, picked);
  Tensor mask = Tensor::from({targets.size()}, detail::pad_keep_mask(targets));
  return scale(tape, sum_all(tape, mul(tape, logp, mask)), -1.0);
}

namespace detail {
// KL(P || M) summed over kept rows, with M supplied explicitly.
inline Tensor kl_rows(Tape& tape, const Tensor& p, const Tensor& m, const Tensor& row_mask) {
  Tensor terms = mul(tape, p, sub(tape, log(tape, p), log(tape, m)));
  return sum_all(tape, mul(tape, terms, row_mask));
}

inline void check_stochastic(const char* op, const Tensor& p) {
  for (size_t t = 0; t < p.rows(); ++t) {
    double sum = 0.0;
    for (size_t j = 0; j < p.cols(); ++j) {
      expect(p.at(t, j) >= 0.0, Errc::InvalidArgument,
             std::string(op) + ": negative probability in row " + std::to_string(t));
      sum += p.at(t, j);
    }
    expect(std::fabs(sum - 1.0) <= 1e-6, Errc::InvalidArgument,
           std::string(op) + ": row " + std::to_string(t) + " is not stochastic");
  }
}
}  // namespace detail

// sum_t JSD(P_t^m || P_t^u) in nats, where JSD(P||Q) = KL(P||M)/2 + KL(Q||M)/2
// with M = (P+Q)/2. Symmetric, bounded by ln 2 per step. No stop-gradient on
// either argument. Rows with keep[t] == 0 (PAD) are excluded.
inline Tensor jsd_loss(Tape& tape, const Tensor& p_mix, const Tensor& p_uni,
                       const std::vector<uint8_t>& keep = {}) {
  expect(p_mix.shape.size() == 2 && p_mix.shape == p_uni.shape, Errc::ShapeMismatch,
         "jsd_loss: shapes disagree: " + shape_str(p_mix.shape) + " vs " +
             shape_str(p_uni.shape));
  expect(keep.empty() || keep.size() == p_mix.rows(), Errc::ShapeMismatch,
         "jsd_loss: keep mask length must equal the row count");
  detail::check_stochastic("jsd_loss", p_mix);
  detail::check_stochastic("jsd_loss", p_uni);
  const size_t s = p_mix.rows(), v = p_mix.cols();
  Tensor row_mask = Tensor::zeros({s, v});
  for (size_t t = 0; t < s; ++t) {
    const double on = (keep.empty() || keep[t]) ? 1.0 : 0.0;
    for (size_t j = 0; j < v; ++j) row_mask.at(t, j) = on;
  }
  Tensor mid = scale(tape, add(tape, p_mix, p_uni), 0.5);
  Tensor kl_pm = detail::kl_rows(tape, p_mix, mid, row_mask);
  Tensor kl_qm = detail::kl_rows(tape, p_uni, mid, row_mask);
  return scale(tape, add(tape, kl_pm, kl_qm), 0.5);
}

// L = L_uni + lambda1 * L_mix + lambda2 * L_jsd. Zero-weight terms are not
// recorded at all, so the lambda1 = lambda2 = 0 baseline is exactly the plain
// uni-modal objective.
inline Tensor total_loss(Tape& tape, const Tensor& ce_uni, const Tensor& ce_mix,
                         const Tensor& jsd, const LossWeights& weights) {
  weights.validate();
  Tensor total = ce_uni;
  if (weights.lambda1 != 0.0) total = add(tape, total, scale(tape, ce_mix, weights.lambda1));
  if (weights.lambda2 != 0.0) total = add(tape, total, scale(tape, jsd, weights.lambda2));
  return total;
}

}  // namespace mixspeech
