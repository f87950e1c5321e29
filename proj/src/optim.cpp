#include "dfl/optim.hpp"

#include "dfl/error.hpp"

namespace dfl {

double lr_at(int64_t global_step, const LrSchedule& sched) {
  if (global_step < 0) throw UsageError("lr_at: negative step");
  if (sched.steps_per_epoch < 1) throw ConfigError("lr_at: steps_per_epoch < 1");
  const int64_t epoch = global_step / sched.steps_per_epoch;
  if (epoch < sched.warmup_epochs) {
    const auto span =
        static_cast<double>(sched.warmup_epochs * sched.steps_per_epoch);
    return sched.base_lr * static_cast<double>(global_step + 1) / span;
  }
  double lr = sched.base_lr;
  for (int ms : sched.milestones) {
    if (epoch >= ms) lr *= sched.gamma;
  }
  return lr;
}

Sgd::Sgd(std::vector<Tensor> params, double momentum, double weight_decay)
    : params_(std::move(params)),
      momentum_(momentum),
      weight_decay_(weight_decay) {
  if (momentum_ < 0.0 || momentum_ >= 1.0) {
    throw ConfigError("momentum must be in [0,1)");
  }
  if (weight_decay_ < 0.0) throw ConfigError("weight decay must be >= 0");
  buffers_.reserve(params_.size());
  for (const auto& p : params_) {
    buffers_.emplace_back(static_cast<size_t>(p.size()), 0.0);
  }
}

void Sgd::step(double lr) {
  for (size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i];
    auto w = p.mutable_data();
    auto& buf = buffers_[i];
    const auto g = p.grad();  // empty means zero gradient
    for (size_t j = 0; j < w.size(); ++j) {
      const double gj = (j < g.size() ? g[j] : 0.0) + weight_decay_ * w[j];
      buf[j] = momentum_ * buf[j] + gj;
      w[j] -= lr * buf[j];
    }
  }
}

void Sgd::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

void Sgd::reset_momentum(std::span<const Tensor> params) {
  for (const auto& target : params) {
    for (size_t i = 0; i < params_.size(); ++i) {
      if (params_[i].impl() == target.impl()) {
        std::fill(buffers_[i].begin(), buffers_[i].end(), 0.0);
      }
    }
  }
}

}  // namespace dfl
