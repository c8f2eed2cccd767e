#pragma once

#include <cstddef>
#include <memory>
#include <string>
#include <vector>

#include "calora/rng.hpp"
#include "calora/tensor/ops.hpp"

namespace calora {

enum class AdapterKind { kLoRA, kRecovery };

// A trainable bypass added to the output of a linear slot.
template <typename T>
class Adapter {
 public:
  virtual ~Adapter() = default;

  virtual AdapterKind kind() const = 0;
  virtual std::size_t d_in() const = 0;
  virtual std::size_t d_out() const = 0;
  virtual std::size_t rank() const = 0;
  // Output added to the host slot for input rows x[· × d_in].
  virtual Var<T> contribution(Tape<T>& tape, const Var<T>& x) const = 0;
  virtual std::vector<ParamPtr<T>> params() const = 0;

  std::size_t param_count() const {
    std::size_t n = 0;
    for (const auto& p : params()) n += p->value.numel();
    return n;
  }
};

template <typename T>
using AdapterPtr = std::shared_ptr<Adapter<T>>;

// Low-rank pair: contribution(x) = s · (x Aᵀ) Bᵀ, A is r×d_in, B is d_out×r.
template <typename T>
class LoRAAdapter final : public Adapter<T> {
 public:
  LoRAAdapter(ParamPtr<T> a, ParamPtr<T> b, T scaling = T{1});

  // A ~ N(0, init_std²), B = 0, so a fresh adapter contributes exactly zero.
  static std::shared_ptr<LoRAAdapter> init(std::size_t d_in, std::size_t d_out, std::size_t rank,
                                           Rng& rng, const std::string& name,
                                           double init_std = 0.02);

  AdapterKind kind() const override { return AdapterKind::kLoRA; }
  std::size_t d_in() const override { return a_->value.dim(1); }
  std::size_t d_out() const override { return b_->value.dim(0); }
  std::size_t rank() const override { return a_->value.dim(0); }
  Var<T> contribution(Tape<T>& tape, const Var<T>& x) const override;
  std::vector<ParamPtr<T>> params() const override { return {a_, b_}; }

  const ParamPtr<T>& a() const { return a_; }
  const ParamPtr<T>& b() const { return b_; }
  T scaling() const { return scaling_; }

 private:
  ParamPtr<T> a_;
  ParamPtr<T> b_;
  T scaling_;
};

// Non-linear low-rank bypass R(x) = σ(x D) U, D is d_in×r, U is r×d_out.
template <typename T>
class RecoveryAdapter final : public Adapter<T> {
 public:
  RecoveryAdapter(ParamPtr<T> down, ParamPtr<T> up, ag::Activation sigma = ag::Activation::kRelu);

  // D ~ N(0, init_std²), U = 0, so a fresh adapter contributes exactly zero.
  static std::shared_ptr<RecoveryAdapter> init(std::size_t d_in, std::size_t d_out,
                                               std::size_t rank, Rng& rng,
                                               const std::string& name,
                                               ag::Activation sigma = ag::Activation::kRelu,
                                               double init_std = 0.02);

  AdapterKind kind() const override { return AdapterKind::kRecovery; }
  std::size_t d_in() const override { return down_->value.dim(0); }
  std::size_t d_out() const override { return up_->value.dim(1); }
  std::size_t rank() const override { return down_->value.dim(1); }
  Var<T> contribution(Tape<T>& tape, const Var<T>& x) const override;
  std::vector<ParamPtr<T>> params() const override { return {down_, up_}; }

  const ParamPtr<T>& down() const { return down_; }
  const ParamPtr<T>& up() const { return up_; }
  ag::Activation sigma() const { return sigma_; }

 private:
  ParamPtr<T> down_;
  ParamPtr<T> up_;
  ag::Activation sigma_;
};

}  // namespace calora
