#include "calora/model/linear_slot.hpp"

namespace calora {

template <typename T>
LinearSlot<T>::LinearSlot(std::string path, ParamPtr<T> weight, ParamPtr<T> bias)
    : path_(std::move(path)), weight_(std::move(weight)), bias_(std::move(bias)) {
  if (weight_->value.rank() != 2) throw DimensionError(path_ + ": weight must be a matrix");
  if (bias_ && bias_->value.numel() != weight_->value.dim(0)) {
    throw DimensionError(path_ + ": bias length does not match d_out");
  }
}

template <typename T>
void LinearSlot<T>::set_quantized(QuantizedWeight q) {
  if (q.rows != d_out() || q.cols != d_in() || q.codes.size() != q.rows * q.cols ||
      q.scale.size() != q.rows) {
    throw DimensionError(path_ + ": quantized storage does not match weight shape");
  }
  if (mask_) {
    for (std::size_t i = 0; i < q.codes.size(); ++i) {
      if ((*mask_)[i] == T{0}) q.codes[i] = 0;
    }
  }
  for (std::size_t r = 0; r < q.rows; ++r) {
    for (std::size_t c = 0; c < q.cols; ++c) {
      weight_->value[r * q.cols + c] = static_cast<T>(q.dequant(r, c));
    }
  }
  weight_->requires_grad = false;
  quant_ = std::move(q);
}

template <typename T>
void LinearSlot<T>::set_mask(Tensor<T> mask) {
  if (mask.shape() != weight_->value.shape()) {
    throw DimensionError(path_ + ": mask shape " + shape_to_string(mask.shape()) +
                         " does not match weight " + shape_to_string(weight_->value.shape()));
  }
  for (std::size_t i = 0; i < mask.numel(); ++i) {
    if (mask[i] == T{0}) {
      weight_->value[i] = T{0};
      if (quant_) quant_->codes[i] = 0;
    } else {
      mask[i] = T{1};
    }
  }
  mask_ = std::move(mask);
}

template <typename T>
std::size_t LinearSlot<T>::masked_count() const {
  if (!mask_) return 0;
  std::size_t n = 0;
  for (T m : mask_->data()) n += (m == T{0});
  return n;
}

template <typename T>
void LinearSlot<T>::select(const std::vector<std::size_t>& keep_rows,
                           const std::vector<std::size_t>& keep_cols) {
  if (!adapters_.empty()) throw ConfigError(path_ + ": cannot resize a slot with attached adapters");
  const std::size_t cols = d_in();
  auto take = [&](const auto& src, auto& dst) {
    std::size_t i = 0;
    for (std::size_t r : keep_rows)
      for (std::size_t c : keep_cols) dst[i++] = src[r * cols + c];
  };
  const Shape shape{keep_rows.size(), keep_cols.size()};
  Tensor<T> w(shape);
  take(weight_->value, w);
  weight_->value = std::move(w);
  weight_->zero_grad();
  if (bias_) {
    Tensor<T> b(Shape{keep_rows.size()});
    for (std::size_t i = 0; i < keep_rows.size(); ++i) b[i] = bias_->value[keep_rows[i]];
    bias_->value = std::move(b);
    bias_->zero_grad();
  }
  if (mask_) {
    Tensor<T> m(shape);
    take(*mask_, m);
    mask_ = std::move(m);
  }
  if (quant_) {
    QuantizedWeight q;
    q.bits = quant_->bits;
    q.rows = keep_rows.size();
    q.cols = keep_cols.size();
    q.codes.resize(q.rows * q.cols);
    take(quant_->codes, q.codes);
    for (std::size_t r : keep_rows) q.scale.push_back(quant_->scale[r]);
    quant_ = std::move(q);
  }
}

template <typename T>
Var<T> LinearSlot<T>::base_forward(Tape<T>& tape, const Var<T>& x) const {
  Var<T> w = tape.parameter(weight_);
  if (mask_ && w.requires_grad()) w = ag::mul(w, tape.constant(*mask_));
  if (bias_) return ag::linear(x, w, tape.parameter(bias_));
  return ag::linear(x, w);
}

template <typename T>
Var<T> LinearSlot<T>::forward(Tape<T>& tape, const Var<T>& x) const {
  Var<T> y = base_forward(tape, x);
  for (const auto& a : adapters_) y = ag::add(y, a->contribution(tape, x));
  return y;
}

template <typename T>
void LinearSlot<T>::attach(AdapterPtr<T> adapter) {
  if (adapter->d_in() != d_in() || adapter->d_out() != d_out()) {
    throw ConfigError(path_ + ": adapter dims " + std::to_string(adapter->d_in()) + "->" +
                      std::to_string(adapter->d_out()) + " do not match slot " +
                      std::to_string(d_in()) + "->" + std::to_string(d_out()));
  }
  adapters_.push_back(std::move(adapter));
}

template <typename T>
LinearSlot<T> LinearSlot<T>::clone() const {
  LinearSlot out;
  out.path_ = path_;
  out.weight_ = std::make_shared<Parameter<T>>(*weight_);
  out.weight_->zero_grad();
  if (bias_) {
    out.bias_ = std::make_shared<Parameter<T>>(*bias_);
    out.bias_->zero_grad();
  }
  out.quant_ = quant_;
  out.mask_ = mask_;
  return out;
}

template class LinearSlot<float>;
template class LinearSlot<double>;

}  // namespace calora
