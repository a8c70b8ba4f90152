#include "ranlab/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "ranlab/errors.hpp"

namespace ranlab {

double scheduled_learning_rate(const OptimizerConfig& cfg, std::size_t step,
                               std::size_t total_steps) {
  const double base = cfg.learning_rate;
  if (cfg.warmup_steps > 0 && step < cfg.warmup_steps)
    return base * static_cast<double>(step + 1) / static_cast<double>(cfg.warmup_steps);
  if (!cfg.cosine_decay) return base;
  const std::size_t decay_steps = std::max<std::size_t>(1, total_steps - std::min(total_steps, cfg.warmup_steps));
  const double progress =
      std::min(1.0, static_cast<double>(step - cfg.warmup_steps) / static_cast<double>(decay_steps));
  return 0.5 * base * (1.0 + std::cos(std::numbers::pi * progress));
}

void Adam::step(std::span<Array* const> params, std::span<const Array> grads) {
  RANLAB_REQUIRE(params.size() == grads.size(), "Adam: one gradient per parameter required");
  if (m_.empty()) {
    for (const Array* p : params) {
      m_.emplace_back(p->shape(), 0.0);
      v_.emplace_back(p->shape(), 0.0);
    }
  }
  RANLAB_REQUIRE(m_.size() == params.size(), "Adam: parameter set changed between steps");

  const double lr = scheduled_learning_rate(cfg_, step_, total_steps_);
  ++step_;
  const double t = static_cast<double>(step_);
  const double c1 = 1.0 - std::pow(cfg_.beta1, t);
  const double c2 = 1.0 - std::pow(cfg_.beta2, t);

  for (std::size_t k = 0; k < params.size(); ++k) {
    Array& p = *params[k];
    const Array& g = grads[k];
    RANLAB_REQUIRE(p.shape() == g.shape(), "Adam: gradient shape mismatch");
    Array& m = m_[k];
    Array& v = v_[k];
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
      const double update = (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg_.epsilon);
      p[i] -= lr * (update + cfg_.weight_decay * p[i]);
    }
  }
}

}  // namespace ranlab
