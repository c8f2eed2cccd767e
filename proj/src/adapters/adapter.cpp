#include "calora/adapters/adapter.hpp"

namespace calora {

namespace {

template <typename T>
Tensor<T> normal_tensor(Shape shape, Rng& rng, double stddev) {
  Tensor<T> t(std::move(shape));
  for (T& x : t.data()) x = static_cast<T>(rng.normal(0.0, stddev));
  return t;
}

}  // namespace

template <typename T>
LoRAAdapter<T>::LoRAAdapter(ParamPtr<T> a, ParamPtr<T> b, T scaling)
    : a_(std::move(a)), b_(std::move(b)), scaling_(scaling) {
  if (a_->value.rank() != 2 || b_->value.rank() != 2 || b_->value.dim(1) != a_->value.dim(0)) {
    throw DimensionError("LoRA: A must be r×d_in and B d_out×r, got A" +
                         shape_to_string(a_->value.shape()) + " B" + shape_to_string(b_->value.shape()));
  }
}

template <typename T>
std::shared_ptr<LoRAAdapter<T>> LoRAAdapter<T>::init(std::size_t d_in, std::size_t d_out,
                                                     std::size_t rank, Rng& rng,
                                                     const std::string& name, double init_std) {
  if (rank == 0) throw ConfigError("LoRA rank must be positive");
  auto a = make_param<T>(name + "/A", normal_tensor<T>(Shape{rank, d_in}, rng, init_std));
  auto b = make_param<T>(name + "/B", Tensor<T>(Shape{d_out, rank}));
  return std::make_shared<LoRAAdapter>(std::move(a), std::move(b));
}

template <typename T>
Var<T> LoRAAdapter<T>::contribution(Tape<T>& tape, const Var<T>& x) const {
  if (x.value().cols() != d_in()) {
    throw DimensionError("LoRA: input width " + std::to_string(x.value().cols()) +
                         " does not match d_in " + std::to_string(d_in()));
  }
  Var<T> h = ag::linear(x, tape.parameter(a_));
  Var<T> y = ag::linear(h, tape.parameter(b_));
  return scaling_ == T{1} ? y : ag::scale(y, scaling_);
}

template <typename T>
RecoveryAdapter<T>::RecoveryAdapter(ParamPtr<T> down, ParamPtr<T> up, ag::Activation sigma)
    : down_(std::move(down)), up_(std::move(up)), sigma_(sigma) {
  if (down_->value.rank() != 2 || up_->value.rank() != 2 || down_->value.dim(1) != up_->value.dim(0)) {
    throw DimensionError("recovery: D must be d_in×r and U r×d_out, got D" +
                         shape_to_string(down_->value.shape()) + " U" + shape_to_string(up_->value.shape()));
  }
}

template <typename T>
std::shared_ptr<RecoveryAdapter<T>> RecoveryAdapter<T>::init(std::size_t d_in, std::size_t d_out,
                                                             std::size_t rank, Rng& rng,
                                                             const std::string& name,
                                                             ag::Activation sigma, double init_std) {
  if (rank == 0) throw ConfigError("recovery rank must be positive");
  auto d = make_param<T>(name + "/D", normal_tensor<T>(Shape{d_in, rank}, rng, init_std));
  auto u = make_param<T>(name + "/U", Tensor<T>(Shape{rank, d_out}));
  return std::make_shared<RecoveryAdapter>(std::move(d), std::move(u), sigma);
}

template <typename T>
Var<T> RecoveryAdapter<T>::contribution(Tape<T>& tape, const Var<T>& x) const {
  if (x.value().cols() != d_in()) {
    throw DimensionError("recovery: input width " + std::to_string(x.value().cols()) +
                         " does not match d_in " + std::to_string(d_in()));
  }
  Var<T> h = ag::matmul(x, tape.parameter(down_));
  if (sigma_ != ag::Activation::kIdentity) h = ag::activation(h, sigma_);
  return ag::matmul(h, tape.parameter(up_));
}

template class LoRAAdapter<float>;
template class LoRAAdapter<double>;
template class RecoveryAdapter<float>;
template class RecoveryAdapter<double>;

}  // namespace calora
