#include "calora/tensor/optim.hpp"

#include <cmath>

namespace calora {

template <typename T>
void adamw_step(const std::vector<ParamPtr<T>>& params, AdamWState<T>& state,
                const AdamWOptions& opt) {
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p->value.shape());
      state.v.emplace_back(p->value.shape());
    }
  }
  if (state.m.size() != params.size()) {
    throw ContractError("adamw_step: optimizer state does not match parameter list");
  }
  const long step = state.step + 1;
  for (const auto& p : params) {
    if (p->has_grad() && !all_finite(p->grad)) {
      throw TrainingError(step, "non-finite gradient in parameter '" + p->name + "'");
    }
  }
  state.step = step;
  const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(step));
  const T b1 = static_cast<T>(opt.beta1), b2 = static_cast<T>(opt.beta2);
  const T lr = static_cast<T>(opt.lr), wd = static_cast<T>(opt.weight_decay);
  const T eps = static_cast<T>(opt.eps);
  const T inv_bc1 = static_cast<T>(1.0 / bc1), inv_bc2 = static_cast<T>(1.0 / bc2);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter<T>& p = *params[i];
    if (p.grad.numel() != 0 && p.grad.shape() != p.value.shape()) {
      throw ContractError("adamw_step: gradient shape mismatch for '" + p.name + "'");
    }
    Tensor<T>& m = state.m[i];
    Tensor<T>& v = state.v[i];
    const bool has_grad = p.has_grad();
    for (std::size_t j = 0; j < p.value.numel(); ++j) {
      const T g = has_grad ? p.grad[j] : T{0};
      m[j] = b1 * m[j] + (T{1} - b1) * g;
      v[j] = b2 * v[j] + (T{1} - b2) * g * g;
      const T mhat = m[j] * inv_bc1;
      const T vhat = v[j] * inv_bc2;
      const T w = p.value[j];
      p.value[j] = w - lr * (mhat / (std::sqrt(vhat) + eps) + wd * w);
    }
  }
}

template void adamw_step(const std::vector<ParamPtr<float>>&, AdamWState<float>&, const AdamWOptions&);
template void adamw_step(const std::vector<ParamPtr<double>>&, AdamWState<double>&, const AdamWOptions&);

}  // namespace calora
