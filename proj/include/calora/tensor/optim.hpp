#pragma once

#include <cstddef>
#include <vector>

#include "calora/tensor/autograd.hpp"

namespace calora {

struct AdamWOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-2;
};

// Per-parameter moment estimates.
template <typename T>
struct AdamWState {
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;
  long step = 0;
};

// One decoupled-weight-decay Adam update over aligned params/grads/state:
//   w ← w − lr·(m̂ / (√v̂ + eps) + weight_decay·w)
// Parameters without a gradient are treated as having a zero gradient.
// Throws TrainingError (carrying the step index) on a non-finite gradient.
template <typename T>
void adamw_step(const std::vector<ParamPtr<T>>& params, AdamWState<T>& state,
                const AdamWOptions& opt);

// Convenience owner of the parameter list and its state.
template <typename T>
class AdamW {
 public:
  AdamW(std::vector<ParamPtr<T>> params, AdamWOptions opt)
      : params_(std::move(params)), opt_(opt) {}

  void step() { adamw_step(params_, state_, opt_); }
  void zero_grad() {
    for (auto& p : params_) p->zero_grad();
  }
  const AdamWState<T>& state() const { return state_; }
  const std::vector<ParamPtr<T>>& params() const { return params_; }

 private:
  std::vector<ParamPtr<T>> params_;
  AdamWOptions opt_;
  AdamWState<T> state_;
};

}  // namespace calora
