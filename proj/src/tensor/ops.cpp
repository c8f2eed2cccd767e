#include "calora/tensor/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <numbers>
#include <sstream>

#include "calora/tensor/kernels.hpp"

namespace calora {

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

template <typename T>
bool bitwise_equal(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) return false;
  return std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(T)) == 0;
}

template <typename T>
Tensor<T> transpose2d(const Tensor<T>& t) {
  if (t.rank() != 2) throw DimensionError("transpose2d expects rank 2, got " + shape_to_string(t.shape()));
  const std::size_t r = t.dim(0), c = t.dim(1);
  Tensor<T> out(Shape{c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = t[i * c + j];
  return out;
}

template <typename T>
bool all_finite(const Tensor<T>& t) {
  return std::all_of(t.data().begin(), t.data().end(), [](T x) { return std::isfinite(x); });
}

template bool bitwise_equal(const Tensor<float>&, const Tensor<float>&);
template bool bitwise_equal(const Tensor<double>&, const Tensor<double>&);
template Tensor<float> transpose2d(const Tensor<float>&);
template Tensor<double> transpose2d(const Tensor<double>&);
template bool all_finite(const Tensor<float>&);
template bool all_finite(const Tensor<double>&);

}  // namespace calora

namespace calora::ag {

const char* to_string(Activation a) {
  switch (a) {
    case Activation::kRelu: return "relu";
    case Activation::kGelu: return "gelu";
    case Activation::kTanh: return "tanh";
    case Activation::kIdentity: return "identity";
  }
  return "?";
}

Activation activation_from_string(const std::string& name) {
  if (name == "relu") return Activation::kRelu;
  if (name == "gelu") return Activation::kGelu;
  if (name == "tanh") return Activation::kTanh;
  if (name == "identity") return Activation::kIdentity;
  throw ConfigError("unknown activation '" + name + "'");
}

template <typename T>
T activate(Activation a, T x) {
  switch (a) {
    case Activation::kRelu:
      return x > T{0} ? x : T{0};
    case Activation::kGelu:
      return T(0.5) * x * (T{1} + std::erf(x / std::numbers::sqrt2_v<T>));
    case Activation::kTanh:
      return std::tanh(x);
    case Activation::kIdentity:
      return x;
  }
  return x;
}

template <typename T>
T activate_grad(Activation a, T x) {
  switch (a) {
    case Activation::kRelu:
      return x > T{0} ? T{1} : T{0};
    case Activation::kGelu: {
      const T cdf = T(0.5) * (T{1} + std::erf(x / std::numbers::sqrt2_v<T>));
      const T pdf = std::exp(T(-0.5) * x * x) / std::sqrt(T{2} * std::numbers::pi_v<T>);
      return cdf + x * pdf;
    }
    case Activation::kTanh: {
      const T t = std::tanh(x);
      return T{1} - t * t;
    }
    case Activation::kIdentity:
      return T{1};
  }
  return T{1};
}

namespace {

void require_rank2(const Shape& s, const char* op) {
  if (s.size() != 2) throw DimensionError(std::string(op) + ": expected matrix, got " + shape_to_string(s));
}

enum class Broadcast { kNone, kScalar, kRow };

template <typename T>
Broadcast broadcast_kind(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() == b.shape()) return Broadcast::kNone;
  if (b.numel() == 1) return Broadcast::kScalar;
  const bool row_like = b.rank() == 1 || (b.rank() >= 2 && b.rows() == 1);
  if (row_like && b.numel() == a.cols()) return Broadcast::kRow;
  throw DimensionError(std::string(op) + ": cannot broadcast " + shape_to_string(b.shape()) +
                       " onto " + shape_to_string(a.shape()));
}

// Reduces a gradient shaped like `a` onto the (possibly broadcast) shape of `b`.
template <typename T>
void reduce_broadcast(Broadcast kind, std::span<const T> g, std::size_t cols, Tensor<T>& sink,
                      T factor) {
  switch (kind) {
    case Broadcast::kNone:
      for (std::size_t i = 0; i < g.size(); ++i) sink[i] += factor * g[i];
      break;
    case Broadcast::kScalar: {
      T s{0};
      for (T x : g) s += x;
      sink[0] += factor * s;
      break;
    }
    case Broadcast::kRow:
      for (std::size_t i = 0; i < g.size(); ++i) sink[i % cols] += factor * g[i];
      break;
  }
}

template <typename T>
T broadcast_at(Broadcast kind, const Tensor<T>& b, std::size_t i, std::size_t cols) {
  switch (kind) {
    case Broadcast::kNone: return b[i];
    case Broadcast::kScalar: return b[0];
    case Broadcast::kRow: return b[i % cols];
  }
  return b[i];
}

}  // namespace

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  require_rank2(av.shape(), "matmul");
  require_rank2(bv.shape(), "matmul");
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  if (bv.dim(0) != k) {
    throw DimensionError("matmul: inner extents differ, " + shape_to_string(av.shape()) + " x " +
                         shape_to_string(bv.shape()));
  }
  Tensor<T> out(Shape{m, n});
  kernels::gemm_nn(m, k, n, av.data(), bv.data(), out.data(), false);
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib, m, k, n](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad(self);
    if (Tensor<T>* ga = t.grad_sink(ia)) {
      kernels::gemm_nt(m, n, k, g.data(), t.node(ib).value.data(), ga->data(), true);
    }
    if (Tensor<T>* gb = t.grad_sink(ib)) {
      kernels::gemm_tn(k, m, n, t.node(ia).value.data(), g.data(), gb->data(), true);
    }
  });
}

namespace {

template <typename T>
Var<T> linear_impl(const Var<T>& x, const Var<T>& w, const Var<T>* bias) {
  const Tensor<T>& xv = x.value();
  const Tensor<T>& wv = w.value();
  require_rank2(wv.shape(), "linear");
  const std::size_t d_out = wv.dim(0), d_in = wv.dim(1);
  if (xv.cols() != d_in) {
    throw DimensionError("linear: input " + shape_to_string(xv.shape()) + " does not match weight " +
                         shape_to_string(wv.shape()));
  }
  const std::size_t rows = xv.rows();
  Shape out_shape = xv.shape();
  out_shape.back() = d_out;
  Tensor<T> out(out_shape);
  kernels::gemm_nt(rows, d_in, d_out, xv.data(), wv.data(), out.data(), false);
  if (bias != nullptr) {
    const Tensor<T>& bv = bias->value();
    if (bv.numel() != d_out) throw DimensionError("linear: bias length mismatch");
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < d_out; ++j) out[r * d_out + j] += bv[j];
  }
  const std::size_t ix = x.id(), iw = w.id();
  const std::size_t ib = bias != nullptr ? bias->id() : SIZE_MAX;
  auto backward = [ix, iw, ib, rows, d_in, d_out](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad(self);
    if (Tensor<T>* gx = t.grad_sink(ix)) {
      kernels::gemm_nn(rows, d_out, d_in, g.data(), t.node(iw).value.data(), gx->data(), true);
    }
    if (Tensor<T>* gw = t.grad_sink(iw)) {
      kernels::gemm_tn(d_out, rows, d_in, g.data(), t.node(ix).value.data(), gw->data(), true);
    }
    if (ib != SIZE_MAX) {
      if (Tensor<T>* gb = t.grad_sink(ib)) {
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < d_out; ++j) (*gb)[j] += g[r * d_out + j];
      }
    }
  };
  if (bias != nullptr) return x.tape().record(std::move(out), {x, w, *bias}, backward);
  return x.tape().record(std::move(out), {x, w}, backward);
}

}  // namespace

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& weight) {
  return linear_impl<T>(x, weight, nullptr);
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
  return linear_impl<T>(x, weight, &bias);
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  const Broadcast kind = broadcast_kind(av, bv, "add");
  const std::size_t cols = av.cols();
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = av[i] + broadcast_at(kind, bv, i, cols);
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib, kind, cols](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad(self);
    if (Tensor<T>* ga = t.grad_sink(ia)) kernels::axpy(T{1}, g.data(), ga->data());
    if (Tensor<T>* gb = t.grad_sink(ib)) reduce_broadcast<T>(kind, g.data(), cols, *gb, T{1});
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  const Broadcast kind = broadcast_kind(av, bv, "sub");
  const std::size_t cols = av.cols();
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = av[i] - broadcast_at(kind, bv, i, cols);
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib, kind, cols](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad(self);
    if (Tensor<T>* ga = t.grad_sink(ia)) kernels::axpy(T{1}, g.data(), ga->data());
    if (Tensor<T>* gb = t.grad_sink(ib)) reduce_broadcast<T>(kind, g.data(), cols, *gb, T{-1});
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  const Broadcast kind = broadcast_kind(av, bv, "mul");
  const std::size_t cols = av.cols();
  Tensor<T> out(av.shape());
  if (kind == Broadcast::kNone) {
    kernels::hadamard(av.data(), bv.data(), out.data());
  } else {
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = av[i] * broadcast_at(kind, bv, i, cols);
  }
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib, kind, cols](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad(self);
    const Tensor<T>& av = t.node(ia).value;
    const Tensor<T>& bv = t.node(ib).value;
    if (Tensor<T>* ga = t.grad_sink(ia)) {
      for (std::size_t i = 0; i < g.numel(); ++i) (*ga)[i] += g[i] * broadcast_at(kind, bv, i, cols);
    }
    if (Tensor<T>* gb = t.grad_sink(ib)) {
      std::vector<T> prod(g.numel());
      for (std::size_t i = 0; i < g.numel(); ++i) prod[i] = g[i] * av[i];
      reduce_broadcast<T>(kind, prod, cols, *gb, T{1});
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  const Tensor<T>& av = a.value();
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = s * av[i];
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia, s](Tape<T>& t, std::size_t self) {
    if (Tensor<T>* ga = t.grad_sink(ia)) kernels::axpy(s, t.grad(self).data(), ga->data());
  });
}

template <typename T>
Var<T> activation(const Var<T>& a, Activation act) {
  const Tensor<T>& av = a.value();
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = activate(act, av[i]);
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia, act](Tape<T>& t, std::size_t self) {
    if (Tensor<T>* ga = t.grad_sink(ia)) {
      const Tensor<T>& g = t.grad(self);
      const Tensor<T>& x = t.node(ia).value;
      for (std::size_t i = 0; i < g.numel(); ++i) (*ga)[i] += g[i] * activate_grad(act, x[i]);
    }
  });
}

template <typename T>
Var<T> sum(const Var<T>& a) {
  T s{0};
  for (T x : a.value().data()) s += x;
  const std::size_t ia = a.id();
  return a.tape().record(Tensor<T>::scalar(s), {a}, [ia](Tape<T>& t, std::size_t self) {
    if (Tensor<T>* ga = t.grad_sink(ia)) {
      const T g = t.grad(self)[0];
      for (T& x : ga->data()) x += g;
    }
  });
}

template <typename T>
Var<T> mean(const Var<T>& a) {
  return scale(sum(a), T{1} / static_cast<T>(a.value().numel()));
}

template <typename T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  if (numel_of(shape) != a.value().numel()) {
    throw DimensionError("reshape: " + shape_to_string(a.shape()) + " to " + shape_to_string(shape));
  }
  const std::size_t ia = a.id();
  return a.tape().record(a.value().reshaped(std::move(shape)), {a}, [ia](Tape<T>& t, std::size_t self) {
    if (Tensor<T>* ga = t.grad_sink(ia)) kernels::axpy(T{1}, t.grad(self).data(), ga->data());
  });
}

namespace {

template <typename T>
void softmax_rows(const Tensor<T>& x, Tensor<T>& out) {
  const std::size_t cols = x.cols(), rows = x.rows();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.data().data() + r * cols;
    T* o = out.data().data() + r * cols;
    T mx = *std::max_element(in, in + cols);
    T z{0};
    for (std::size_t j = 0; j < cols; ++j) {
      o[j] = std::exp(in[j] - mx);
      z += o[j];
    }
    for (std::size_t j = 0; j < cols; ++j) o[j] /= z;
  }
}

}  // namespace

template <typename T>
Var<T> softmax(const Var<T>& a) {
  Tensor<T> out(a.shape());
  softmax_rows(a.value(), out);
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia](Tape<T>& t, std::size_t self) {
    if (Tensor<T>* ga = t.grad_sink(ia)) {
      const Tensor<T>& g = t.grad(self);
      const Tensor<T>& p = t.node(self).value;
      const std::size_t cols = p.cols();
      for (std::size_t r = 0; r < p.rows(); ++r) {
        T dot{0};
        for (std::size_t j = 0; j < cols; ++j) dot += g[r * cols + j] * p[r * cols + j];
        for (std::size_t j = 0; j < cols; ++j)
          (*ga)[r * cols + j] += p[r * cols + j] * (g[r * cols + j] - dot);
      }
    }
  });
}

template <typename T>
Var<T> softmax_cross_entropy(const Var<T>& logits, std::span<const std::size_t> targets) {
  const Tensor<T>& x = logits.value();
  require_rank2(x.shape(), "softmax_cross_entropy");
  const std::size_t n = x.dim(0), v = x.dim(1);
  if (targets.size() != n) {
    throw DimensionError("softmax_cross_entropy: " + std::to_string(targets.size()) +
                         " targets for " + std::to_string(n) + " rows");
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (targets[i] >= v) {
      throw IndexError("softmax_cross_entropy: target " + std::to_string(targets[i]) +
                       " out of range for vocabulary " + std::to_string(v));
    }
  }
  auto probs = std::make_shared<Tensor<T>>(x.shape());
  T total{0};
  for (std::size_t r = 0; r < n; ++r) {
    const T* in = x.data().data() + r * v;
    T* p = probs->data().data() + r * v;
    const T mx = *std::max_element(in, in + v);
    T z{0};
    for (std::size_t j = 0; j < v; ++j) {
      p[j] = std::exp(in[j] - mx);
      z += p[j];
    }
    for (std::size_t j = 0; j < v; ++j) p[j] /= z;
    total += std::log(z) + mx - in[targets[r]];
  }
  const T loss = total / static_cast<T>(n);
  std::vector<std::size_t> tgt(targets.begin(), targets.end());
  const std::size_t il = logits.id();
  return logits.tape().record(
      Tensor<T>::scalar(loss), {logits},
      [il, probs, tgt = std::move(tgt), n, v](Tape<T>& t, std::size_t self) {
        if (Tensor<T>* gl = t.grad_sink(il)) {
          const T g = t.grad(self)[0] / static_cast<T>(n);
          for (std::size_t r = 0; r < n; ++r) {
            for (std::size_t j = 0; j < v; ++j) (*gl)[r * v + j] += g * (*probs)[r * v + j];
            (*gl)[r * v + tgt[r]] -= g;
          }
        }
      });
}

template <typename T>
Var<T> mse(const Var<T>& a, const Var<T>& b) {
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  if (av.shape() != bv.shape()) {
    throw DimensionError("mse: shapes differ, " + shape_to_string(av.shape()) + " vs " +
                         shape_to_string(bv.shape()));
  }
  const std::size_t n = av.numel();
  T acc{0};
  for (std::size_t i = 0; i < n; ++i) {
    const T d = av[i] - bv[i];
    acc += d * d;
  }
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(Tensor<T>::scalar(acc / static_cast<T>(n)), {a, b},
                         [ia, ib, n](Tape<T>& t, std::size_t self) {
                           const T g = T{2} * t.grad(self)[0] / static_cast<T>(n);
                           const Tensor<T>& av = t.node(ia).value;
                           const Tensor<T>& bv = t.node(ib).value;
                           if (Tensor<T>* ga = t.grad_sink(ia)) {
                             for (std::size_t i = 0; i < n; ++i) (*ga)[i] += g * (av[i] - bv[i]);
                           }
                           if (Tensor<T>* gb = t.grad_sink(ib)) {
                             for (std::size_t i = 0; i < n; ++i) (*gb)[i] -= g * (av[i] - bv[i]);
                           }
                         });
}

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps) {
  const Tensor<T>& xv = x.value();
  const std::size_t d = xv.cols(), rows = xv.rows();
  if (gamma.value().numel() != d || beta.value().numel() != d) {
    throw DimensionError("layer_norm: affine parameters do not match width " + std::to_string(d));
  }
  const Tensor<T>& gv = gamma.value();
  const Tensor<T>& bv = beta.value();
  Tensor<T> out(xv.shape());
  auto xhat = std::make_shared<std::vector<T>>(xv.numel());
  auto rstd = std::make_shared<std::vector<T>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = xv.data().data() + r * d;
    T mu{0};
    for (std::size_t j = 0; j < d; ++j) mu += in[j];
    mu /= static_cast<T>(d);
    T var{0};
    for (std::size_t j = 0; j < d; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= static_cast<T>(d);
    const T rs = T{1} / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t j = 0; j < d; ++j) {
      const T h = (in[j] - mu) * rs;
      (*xhat)[r * d + j] = h;
      out[r * d + j] = h * gv[j] + bv[j];
    }
  }
  const std::size_t ix = x.id(), ig = gamma.id(), ibeta = beta.id();
  return x.tape().record(
      std::move(out), {x, gamma, beta},
      [ix, ig, ibeta, xhat, rstd, d, rows](Tape<T>& t, std::size_t self) {
        const Tensor<T>& g = t.grad(self);
        const Tensor<T>& gv = t.node(ig).value;
        if (Tensor<T>* gg = t.grad_sink(ig)) {
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j) (*gg)[j] += g[r * d + j] * (*xhat)[r * d + j];
        }
        if (Tensor<T>* gb = t.grad_sink(ibeta)) {
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j) (*gb)[j] += g[r * d + j];
        }
        if (Tensor<T>* gx = t.grad_sink(ix)) {
          for (std::size_t r = 0; r < rows; ++r) {
            T m1{0}, m2{0};
            for (std::size_t j = 0; j < d; ++j) {
              const T dh = g[r * d + j] * gv[j];
              m1 += dh;
              m2 += dh * (*xhat)[r * d + j];
            }
            m1 /= static_cast<T>(d);
            m2 /= static_cast<T>(d);
            for (std::size_t j = 0; j < d; ++j) {
              const T dh = g[r * d + j] * gv[j];
              (*gx)[r * d + j] += (*rstd)[r] * (dh - m1 - (*xhat)[r * d + j] * m2);
            }
          }
        }
      });
}

template <typename T>
Var<T> embedding(const Var<T>& table, std::span<const std::size_t> ids) {
  const Tensor<T>& tv = table.value();
  require_rank2(tv.shape(), "embedding");
  const std::size_t vocab = tv.dim(0), d = tv.dim(1);
  if (ids.empty()) throw DimensionError("embedding: no ids");
  Tensor<T> out(Shape{ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= vocab) {
      throw IndexError("embedding: id " + std::to_string(ids[i]) + " out of range for " +
                       std::to_string(vocab) + " rows");
    }
    std::copy_n(tv.data().begin() + ids[i] * d, d, out.data().begin() + i * d);
  }
  std::vector<std::size_t> idv(ids.begin(), ids.end());
  const std::size_t it = table.id();
  return table.tape().record(std::move(out), {table},
                             [it, idv = std::move(idv), d](Tape<T>& t, std::size_t self) {
                               if (Tensor<T>* gt = t.grad_sink(it)) {
                                 const Tensor<T>& g = t.grad(self);
                                 for (std::size_t i = 0; i < idv.size(); ++i)
                                   for (std::size_t j = 0; j < d; ++j)
                                     (*gt)[idv[i] * d + j] += g[i * d + j];
                               }
                             });
}

template <typename T>
Var<T> select_rows(const Var<T>& x, std::span<const std::size_t> rows) {
  const Tensor<T>& xv = x.value();
  const std::size_t d = xv.cols(), n = xv.rows();
  Tensor<T> out(Shape{rows.size(), d});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= n) throw IndexError("select_rows: row " + std::to_string(rows[i]) + " of " + std::to_string(n));
    std::copy_n(xv.data().begin() + rows[i] * d, d, out.data().begin() + i * d);
  }
  std::vector<std::size_t> rv(rows.begin(), rows.end());
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix, rv = std::move(rv), d](Tape<T>& t, std::size_t self) {
    if (Tensor<T>* gx = t.grad_sink(ix)) {
      const Tensor<T>& g = t.grad(self);
      for (std::size_t i = 0; i < rv.size(); ++i)
        for (std::size_t j = 0; j < d; ++j) (*gx)[rv[i] * d + j] += g[i * d + j];
    }
  });
}

template <typename T>
Var<T> causal_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, std::size_t batch,
                        std::size_t seq, std::size_t heads, const std::vector<bool>& head_keep) {
  const Tensor<T>& qv = q.value();
  const Tensor<T>& kv = k.value();
  const Tensor<T>& vv = v.value();
  const std::size_t d = qv.cols();
  if (qv.shape() != kv.shape() || qv.shape() != vv.shape() || qv.rows() != batch * seq) {
    throw DimensionError("causal_attention: q/k/v must all be [batch*seq x d]");
  }
  if (heads == 0 || d % heads != 0) throw DimensionError("causal_attention: width not divisible by heads");
  if (head_keep.size() != heads) throw DimensionError("causal_attention: head mask length");
  const std::size_t dh = d / heads;
  const T inv_sqrt = T{1} / std::sqrt(static_cast<T>(dh));
  // probs[(b*heads + h)*seq*seq + t*seq + s], zero above the diagonal
  auto probs = std::make_shared<std::vector<T>>(batch * heads * seq * seq, T{0});
  Tensor<T> out(qv.shape());
  const auto units = static_cast<std::int64_t>(batch * heads);
#pragma omp parallel for schedule(static) if (batch * heads * seq * seq * dh >= (1 << 15))
  for (std::int64_t u = 0; u < units; ++u) {
    const std::size_t b = static_cast<std::size_t>(u) / heads, h = static_cast<std::size_t>(u) % heads;
    if (!head_keep[h]) continue;
    T* p = probs->data() + static_cast<std::size_t>(u) * seq * seq;
    for (std::size_t t = 0; t < seq; ++t) {
      const T* qt = qv.data().data() + (b * seq + t) * d + h * dh;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t s = 0; s <= t; ++s) {
        const T* ks = kv.data().data() + (b * seq + s) * d + h * dh;
        T dot{0};
        for (std::size_t j = 0; j < dh; ++j) dot += qt[j] * ks[j];
        p[t * seq + s] = dot * inv_sqrt;
        mx = std::max(mx, p[t * seq + s]);
      }
      T z{0};
      for (std::size_t s = 0; s <= t; ++s) {
        p[t * seq + s] = std::exp(p[t * seq + s] - mx);
        z += p[t * seq + s];
      }
      T* ot = out.data().data() + (b * seq + t) * d + h * dh;
      for (std::size_t s = 0; s <= t; ++s) {
        p[t * seq + s] /= z;
        const T* vs = vv.data().data() + (b * seq + s) * d + h * dh;
        for (std::size_t j = 0; j < dh; ++j) ot[j] += p[t * seq + s] * vs[j];
      }
    }
  }
  const std::size_t iq = q.id(), ik = k.id(), iv = v.id();
  return q.tape().record(
      std::move(out), {q, k, v},
      [iq, ik, iv, probs, batch, seq, heads, head_keep, d, dh, inv_sqrt](Tape<T>& t, std::size_t self) {
        const Tensor<T>& g = t.grad(self);
        const Tensor<T>& qv = t.node(iq).value;
        const Tensor<T>& kv = t.node(ik).value;
        const Tensor<T>& vv = t.node(iv).value;
        Tensor<T>* gq = t.grad_sink(iq);
        Tensor<T>* gk = t.grad_sink(ik);
        Tensor<T>* gv = t.grad_sink(iv);
        const auto units = static_cast<std::int64_t>(batch * heads);
#pragma omp parallel for schedule(static) if (batch * heads * seq * seq * dh >= (1 << 15))
        for (std::int64_t u = 0; u < units; ++u) {
          const std::size_t b = static_cast<std::size_t>(u) / heads, h = static_cast<std::size_t>(u) % heads;
          if (!head_keep[h]) continue;
          const T* p = probs->data() + static_cast<std::size_t>(u) * seq * seq;
          std::vector<T> dp(seq);
          for (std::size_t tt = 0; tt < seq; ++tt) {
            const T* got = g.data().data() + (b * seq + tt) * d + h * dh;
            T dot{0};
            for (std::size_t s = 0; s <= tt; ++s) {
              const T* vs = vv.data().data() + (b * seq + s) * d + h * dh;
              T acc{0};
              for (std::size_t j = 0; j < dh; ++j) acc += got[j] * vs[j];
              dp[s] = acc;
              dot += acc * p[tt * seq + s];
              if (gv != nullptr) {
                T* gvs = gv->data().data() + (b * seq + s) * d + h * dh;
                for (std::size_t j = 0; j < dh; ++j) gvs[j] += p[tt * seq + s] * got[j];
              }
            }
            const T* qt = qv.data().data() + (b * seq + tt) * d + h * dh;
            for (std::size_t s = 0; s <= tt; ++s) {
              const T ds = p[tt * seq + s] * (dp[s] - dot) * inv_sqrt;
              const T* ks = kv.data().data() + (b * seq + s) * d + h * dh;
              if (gq != nullptr) {
                T* gqt = gq->data().data() + (b * seq + tt) * d + h * dh;
                for (std::size_t j = 0; j < dh; ++j) gqt[j] += ds * ks[j];
              }
              if (gk != nullptr) {
                T* gks = gk->data().data() + (b * seq + s) * d + h * dh;
                for (std::size_t j = 0; j < dh; ++j) gks[j] += ds * qt[j];
              }
            }
          }
        }
      });
}

#define CALORA_INSTANTIATE_OPS(T)                                                            \
  template T activate<T>(Activation, T);                                                     \
  template T activate_grad<T>(Activation, T);                                                \
  template Var<T> matmul<T>(const Var<T>&, const Var<T>&);                                   \
  template Var<T> linear<T>(const Var<T>&, const Var<T>&);                                   \
  template Var<T> linear<T>(const Var<T>&, const Var<T>&, const Var<T>&);                    \
  template Var<T> add<T>(const Var<T>&, const Var<T>&);                                      \
  template Var<T> sub<T>(const Var<T>&, const Var<T>&);                                      \
  template Var<T> mul<T>(const Var<T>&, const Var<T>&);                                      \
  template Var<T> scale<T>(const Var<T>&, T);                                                \
  template Var<T> activation<T>(const Var<T>&, Activation);                                  \
  template Var<T> sum<T>(const Var<T>&);                                                     \
  template Var<T> mean<T>(const Var<T>&);                                                    \
  template Var<T> reshape<T>(const Var<T>&, Shape);                                          \
  template Var<T> softmax<T>(const Var<T>&);                                                 \
  template Var<T> softmax_cross_entropy<T>(const Var<T>&, std::span<const std::size_t>);     \
  template Var<T> mse<T>(const Var<T>&, const Var<T>&);                                      \
  template Var<T> layer_norm<T>(const Var<T>&, const Var<T>&, const Var<T>&, T);             \
  template Var<T> embedding<T>(const Var<T>&, std::span<const std::size_t>);                 \
  template Var<T> select_rows<T>(const Var<T>&, std::span<const std::size_t>);               \
  template Var<T> causal_attention<T>(const Var<T>&, const Var<T>&, const Var<T>&,           \
                                      std::size_t, std::size_t, std::size_t,                 \
                                      const std::vector<bool>&);

CALORA_INSTANTIATE_OPS(float)
CALORA_INSTANTIATE_OPS(double)

#undef CALORA_INSTANTIATE_OPS

}  // namespace calora::ag
