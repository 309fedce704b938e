#pragma once

#include <cmath>
#include <cstddef>
#include <numbers>
#include <string>
#include <vector>

#include "cdb/error.hpp"
#include "cdb/layers.hpp"
#include "cdb/tensor.hpp"

namespace cdb {

struct OptimConfig {
  double lr0 = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::size_t epochs = 20;
  std::size_t batch_size = 128;
};

/// lr = lr0/2 * (1 + cos(pi * step / total)); reaches 0 at step == total.
inline double cosine_lr(std::size_t step, std::size_t total, double lr0) {
  if (step > total)
    throw ScheduleExhausted("step " + std::to_string(step) + " beyond schedule of " + std::to_string(total));
  if (total == 0) return lr0;
  return 0.5 * lr0 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total)));
}

/// SGD with heavy-ball momentum and L2 weight decay folded into the gradient:
///   g = grad + wd * p;  v = mu * v + g;  p -= lr * v
/// Parameters flagged decay=false (batch-norm scale/shift) skip the wd term.
template <Real T>
class Sgd {
 public:
  Sgd(double momentum, double weight_decay) : momentum_(momentum), weight_decay_(weight_decay) {}

  double momentum() const { return momentum_; }
  double weight_decay() const { return weight_decay_; }
  std::size_t steps() const { return steps_; }
  const std::vector<Tensor<T>>& velocity() const { return velocity_; }

  void step(std::vector<Param<T>>& params, double lr) {
    if (velocity_.empty()) {
      for (const auto& p : params) velocity_.emplace_back(p.value->shape());
    }
    if (velocity_.size() != params.size())
      throw InvalidState("optimizer tracks " + std::to_string(velocity_.size()) + " parameters, got " +
                         std::to_string(params.size()));
    for (std::size_t i = 0; i < params.size(); ++i) {
      Param<T>& p = params[i];
      Tensor<T>& v = velocity_[i];
      if (p.value->shape() != v.shape() || p.grad->shape() != v.shape())
        throw InvalidState("shape mismatch for parameter " + p.name);
      const T wd = p.decay ? static_cast<T>(weight_decay_) : T(0);
      const T mu = static_cast<T>(momentum_);
      const T eta = static_cast<T>(lr);
      T* w = p.value->raw();
      const T* g = p.grad->raw();
      T* vel = v.raw();
      for (std::size_t j = 0; j < v.size(); ++j) {
        const T grad = g[j] + wd * w[j];
        vel[j] = mu * vel[j] + grad;
        w[j] -= eta * vel[j];
      }
    }
    ++steps_;
  }

 private:
  double momentum_;
  double weight_decay_;
  std::vector<Tensor<T>> velocity_;
  std::size_t steps_ = 0;
};

}  // namespace cdb
