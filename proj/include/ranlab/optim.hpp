#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "ranlab/array.hpp"

namespace ranlab {

/// Adam with linear warm-up followed by cosine decay to zero.
/// Betas default to (0.9, 0.98).
struct OptimizerConfig {
  double learning_rate = 5e-3;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double epsilon = 1e-8;
  double weight_decay = 0.0;
  std::size_t warmup_steps = 10;
  bool cosine_decay = true;
};

/// Learning rate at optimizer step `step` (0-based) out of `total_steps`.
double scheduled_learning_rate(const OptimizerConfig& cfg, std::size_t step,
                               std::size_t total_steps);

class Adam {
 public:
  Adam(OptimizerConfig cfg, std::size_t total_steps) : cfg_(cfg), total_steps_(total_steps) {}

  /// One update of every parameter from its gradient (same order, same shapes).
  void step(std::span<Array* const> params, std::span<const Array> grads);
  std::size_t steps_taken() const { return step_; }

 private:
  OptimizerConfig cfg_;
  std::size_t total_steps_;
  std::size_t step_ = 0;
  std::vector<Array> m_;
  std::vector<Array> v_;
};

}  // namespace ranlab
