#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

namespace duet::nn {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  Adam(size_t n, AdamConfig cfg) : cfg_(cfg), m_(n, 0.0f), v_(n, 0.0f) {}

  // In-place update with the given learning rate for this step.
  void step(std::vector<float>& params, const std::vector<float>& grad, double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
    const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
    const float b1 = static_cast<float>(cfg_.beta1);
    const float b2 = static_cast<float>(cfg_.beta2);
    for (size_t i = 0; i < params.size(); ++i) {
      m_[i] = b1 * m_[i] + (1.0f - b1) * grad[i];
      v_[i] = b2 * v_[i] + (1.0f - b2) * grad[i] * grad[i];
      double mhat = m_[i] / bc1;
      double vhat = v_[i] / bc2;
      params[i] -= static_cast<float>(lr * mhat / (std::sqrt(vhat) + cfg_.eps));
    }
  }

 private:
  AdamConfig cfg_;
  int t_ = 0;
  std::vector<float> m_, v_;
};

// Linear warmup then cosine decay to floor_frac * peak.
inline double lr_schedule(double peak, int step, int total_steps, int warmup,
                          double floor_frac = 0.1) {
  if (warmup > 0 && step < warmup) return peak * (step + 1) / warmup;
  if (total_steps <= warmup) return peak;
  double progress = static_cast<double>(step - warmup) / (total_steps - warmup);
  double floor = peak * floor_frac;
  return floor + 0.5 * (peak - floor) * (1.0 + std::cos(3.141592653589793 * progress));
}

// Global-norm gradient clipping; returns the pre-clip norm.
inline double clip_grad_norm(std::vector<float>& grad, double max_norm) {
  double sq = 0;
  for (float g : grad) sq += static_cast<double>(g) * g;
  double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    float scale = static_cast<float>(max_norm / norm);
    for (float& g : grad) g *= scale;
  }
  return norm;
}

}  // namespace duet::nn
