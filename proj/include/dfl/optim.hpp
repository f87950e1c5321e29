#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "dfl/tensor.hpp"

namespace dfl {

// Warmup + milestone schedule: a linear per-step ramp up to base_lr during
// the warmup epochs, then base_lr * gamma^(milestones passed).
struct LrSchedule {
  double base_lr = 0.1;
  int warmup_epochs = 1;
  std::vector<int> milestones = {60, 120, 160};
  double gamma = 0.2;
  int64_t steps_per_epoch = 1;
};

double lr_at(int64_t global_step, const LrSchedule& sched);

// SGD with momentum and weight decay folded into the gradient:
//   g' = g + wd * w;  buf = mu * buf + g';  w -= lr * buf
class Sgd {
 public:
  Sgd(std::vector<Tensor> params, double momentum, double weight_decay);

  void step(double lr);
  void zero_grad();
  // Zeroes the momentum buffers backing these tensors (matched by identity);
  // used on head reset/load where stale momentum is meaningless.
  void reset_momentum(std::span<const Tensor> params);

  const std::vector<Tensor>& params() const { return params_; }
  std::span<const double> buffer(size_t i) const { return buffers_[i]; }
  double momentum() const { return momentum_; }
  double weight_decay() const { return weight_decay_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> buffers_;
  double momentum_;
  double weight_decay_;
};

}  // namespace dfl
