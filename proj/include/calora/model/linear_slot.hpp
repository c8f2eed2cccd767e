#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "calora/adapters/adapter.hpp"

namespace calora {

// Per-output-channel symmetric integer codes: value = code · scale[row].
struct QuantizedWeight {
  int bits = 8;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::int8_t> codes;
  std::vector<float> scale;

  double dequant(std::size_t r, std::size_t c) const {
    return static_cast<double>(codes[r * cols + c]) * static_cast<double>(scale[r]);
  }
};

// A linear projection y = x Wᵀ + b plus the adapters attached to it.
//
// Compression changes how W is stored (integer codes, a persistent 0/1 mask)
// but never the forward contract: the weight used is always the stored weight
// value, which compression keeps equal to dequant(codes) ⊙ mask.
template <typename T>
class LinearSlot {
 public:
  LinearSlot() = default;
  LinearSlot(std::string path, ParamPtr<T> weight, ParamPtr<T> bias);

  const std::string& path() const { return path_; }
  std::size_t d_in() const { return weight_->value.dim(1); }
  std::size_t d_out() const { return weight_->value.dim(0); }

  const ParamPtr<T>& weight() const { return weight_; }
  const ParamPtr<T>& bias() const { return bias_; }

  bool quantized() const { return quant_.has_value(); }
  const QuantizedWeight& quant() const { return *quant_; }
  // Installs integer storage; the weight value becomes its dequantization
  // (under the current mask) and is frozen.
  void set_quantized(QuantizedWeight q);

  bool masked() const { return mask_.has_value(); }
  const Tensor<T>& mask() const { return *mask_; }
  // Installs a persistent 0/1 mask and zeroes the masked weights (and codes).
  void set_mask(Tensor<T> mask);
  std::size_t masked_count() const;

  // Replaces the weight/bias storage with a row/column subset (structured
  // pruning). Mask and codes follow the selection.
  void select(const std::vector<std::size_t>& keep_rows, const std::vector<std::size_t>& keep_cols);

  // Forward: base projection plus every attached adapter's contribution.
  Var<T> forward(Tape<T>& tape, const Var<T>& x) const;
  // Base projection only.
  Var<T> base_forward(Tape<T>& tape, const Var<T>& x) const;

  void attach(AdapterPtr<T> adapter);
  void detach_all() { adapters_.clear(); }
  const std::vector<AdapterPtr<T>>& adapters() const { return adapters_; }

  // Elementwise effective weight (dequantized and masked).
  const Tensor<T>& effective_weight() const { return weight_->value; }

  // Deep copy of the backbone storage; adapters are not carried over.
  LinearSlot clone() const;

 private:
  std::string path_;
  ParamPtr<T> weight_;
  ParamPtr<T> bias_;
  std::optional<QuantizedWeight> quant_;
  std::optional<Tensor<T>> mask_;
  std::vector<AdapterPtr<T>> adapters_;
};

}  // namespace calora
