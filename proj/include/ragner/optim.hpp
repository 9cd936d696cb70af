#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "ragner/error.hpp"
#include "ragner/tensor.hpp"

namespace ragner {

struct OptimizerConfig {
  double epsilon = 1e-6;
  double encoder_lr = 1e-5;
  double head_lr = 1e-3;
  double encoder_wd = 1e-2;
  double head_wd = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  std::size_t warmup_steps = 200;
  std::size_t batch_size = 8;
  double dropout = 0.3;
  std::size_t max_input_len = 2048;
  double clip_norm = 1.0;  // global gradient norm; 0 disables clipping

  static OptimizerConfig fine_tuning() { return {}; }

  static OptimizerConfig pretraining() {
    OptimizerConfig c;
    c.warmup_steps = 500;
    c.batch_size = 32;
    c.dropout = 0.2;
    return c;
  }

  void validate() const {
    require(epsilon > 0 && encoder_lr > 0 && head_lr > 0, "optimizer rates must be positive");
    require(encoder_wd >= 0 && head_wd >= 0, "weight decay must be non-negative");
    require(beta1 > 0 && beta1 < 1 && beta2 > 0 && beta2 < 1, "adaptive moment decay rates must lie in (0, 1)");
    require(warmup_steps >= 1, "warmup_steps must be >= 1");
    require(batch_size >= 1, "batch_size must be >= 1");
    require(dropout >= 0 && dropout < 1, "dropout must lie in [0, 1)");
    require(max_input_len >= 1, "max_input_len must be >= 1");
  }
};

// Linear warmup to base_lr, constant afterwards.
inline double lr_at(std::size_t step, double base_lr, std::size_t warmup_steps) {
  require(step >= 1, "optimizer steps are 1-based");
  if (step >= warmup_steps) return base_lr;
  return base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
}

struct ParamGroup {
  double lr = 1e-3;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-6;
};

struct AdamMoments {
  std::vector<Matrix> m;
  std::vector<Matrix> v;

  static AdamMoments like(std::span<Matrix* const> params) {
    AdamMoments s;
    for (const Matrix* p : params) {
      s.m.push_back(Matrix::Zero(p->rows(), p->cols()));
      s.v.push_back(Matrix::Zero(p->rows(), p->cols()));
    }
    return s;
  }
};

// One AdamW update with bias-corrected moments. Decay is decoupled from
// the adaptive step: theta <- theta - lr*wd*theta - lr*m_hat/(sqrt(v_hat)+eps).
inline void adamw_step(std::span<Matrix* const> params, std::span<const Matrix* const> grads,
                       std::span<const std::string> names, AdamMoments& moments, std::size_t step,
                       const ParamGroup& group) {
  require(step >= 1, "optimizer steps are 1-based");
  require(params.size() == grads.size() && params.size() == moments.m.size(), "optimizer state size mismatch");
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (!grads[i]->allFinite()) {
      fail(ErrorCode::non_finite, "non-finite gradient in tensor '" + (i < names.size() ? names[i] : std::to_string(i)) + "'");
    }
  }
  const double bc1 = 1.0 - std::pow(group.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(group.beta2, static_cast<double>(step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Matrix& p = *params[i];
    const Matrix& g = *grads[i];
    require(p.rows() == g.rows() && p.cols() == g.cols(), "gradient shape mismatch");
    Matrix& m = moments.m[i];
    Matrix& v = moments.v[i];
    m = group.beta1 * m + (1.0 - group.beta1) * g;
    v = group.beta2 * v + (1.0 - group.beta2) * g.cwiseProduct(g);
    p *= 1.0 - group.lr * group.weight_decay;
    p.array() -= group.lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + group.epsilon);
  }
}

inline double global_norm(std::span<const Matrix* const> grads) {
  double ss = 0.0;
  for (const Matrix* g : grads) ss += g->squaredNorm();
  return std::sqrt(ss);
}

// Rescales gradients so their joint norm is at most max_norm; returns the
// norm before clipping.
inline double clip_global_norm(std::span<Matrix* const> grads, double max_norm) {
  std::vector<const Matrix*> view(grads.begin(), grads.end());
  const double norm = global_norm(view);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (Matrix* g : grads) *g *= s;
  }
  return norm;
}

}  // namespace ragner
