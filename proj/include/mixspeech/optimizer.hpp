// Copyright (c) 2026 the mixspeech authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "mixspeech/tensor.hpp"

namespace mixspeech {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// Bias-corrected adaptive-moment optimizer. Moment accumulators are
// shape-congruent with their parameters; the step counter increases by one per
// step() call. Gradients are read, never modified.
class Adam {
 public:
  Adam() = default;
  Adam(AdamConfig cfg, const std::vector<Tensor*>& params) : cfg_(cfg) {
    m_.reserve(params.size());
    v_.reserve(params.size());
    for (const Tensor* p : params) {
      m_.emplace_back(p->size(), 0.0);
      v_.emplace_back(p->size(), 0.0);
    }
  }

  const AdamConfig& config() const { return cfg_; }
  long step_count() const { return step_; }

  // lr_scale multiplies the configured learning rate (used for warmup ramps).
  void step(const std::vector<Tensor*>& params, double lr_scale = 1.0) {
    expect(params.size() == m_.size(), Errc::InvalidArgument,
           "adam_step: parameter list changed size");
    for (size_t k = 0; k < params.size(); ++k) {
      expect(params[k]->has_grad(), Errc::InvalidArgument,
             "adam_step: parameter #" + std::to_string(k) + " has no gradient");
      expect(params[k]->grad->size() == m_[k].size(), Errc::ShapeMismatch,
             "adam_step: parameter #" + std::to_string(k) + " changed shape");
    }
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    const double lr = cfg_.lr * lr_scale;
    // each parameter is updated by exactly one worker
    parallel_for(params.size(), [&](size_t k) {
      Tensor& p = *params[k];
      const double* g = p.grad->data();
      double* m = m_[k].data();
      double* v = v_[k].data();
      double* w = p.data->data();
      for (size_t i = 0; i < m_[k].size(); ++i) {
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        w[i] -= lr * mhat / (std::sqrt(vhat) + cfg_.epsilon);
      }
    });
  }

  // Moment accumulators, exposed for exact checkpoint round trips.
  std::vector<std::vector<double>>& first_moments() { return m_; }
  std::vector<std::vector<double>>& second_moments() { return v_; }
  const std::vector<std::vector<double>>& first_moments() const { return m_; }
  const std::vector<std::vector<double>>& second_moments() const { return v_; }
  void set_step_count(long steps) { step_ = steps; }

 private:
  AdamConfig cfg_;
  long step_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

}  // namespace mixspeech
