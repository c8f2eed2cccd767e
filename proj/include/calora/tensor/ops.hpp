#pragma once

// Differentiable operations on tape variables. All matrices are rank-2
// row-major; "rows" of a higher-rank tensor are its leading extents.

#include <cstddef>
#include <span>
#include <vector>

#include "calora/tensor/autograd.hpp"

namespace calora::ag {

enum class Activation { kRelu, kGelu, kTanh, kIdentity };

const char* to_string(Activation a);
Activation activation_from_string(const std::string& name);

// Pointwise derivative convention: relu'(0) = 0.
template <typename T>
T activate(Activation a, T x);
template <typename T>
T activate_grad(Activation a, T x);

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b);

// x[rows×d_in] · Wᵀ (+ bias), W is d_out×d_in.
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& weight);
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias);

// Binary ops broadcast `b` when it is a scalar or a single trailing row.
template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> scale(const Var<T>& a, T s);

template <typename T>
Var<T> activation(const Var<T>& a, Activation act);
template <typename T>
Var<T> relu(const Var<T>& a) { return activation(a, Activation::kRelu); }
template <typename T>
Var<T> gelu(const Var<T>& a) { return activation(a, Activation::kGelu); }
template <typename T>
Var<T> tanh(const Var<T>& a) { return activation(a, Activation::kTanh); }

template <typename T>
Var<T> sum(const Var<T>& a);
template <typename T>
Var<T> mean(const Var<T>& a);

// Same values, new shape of equal element count.
template <typename T>
Var<T> reshape(const Var<T>& a, Shape shape);

// Row-wise softmax over the trailing extent.
template <typename T>
Var<T> softmax(const Var<T>& a);

// Mean over rows of -log softmax(logits)[row][target[row]], max-stabilized.
template <typename T>
Var<T> softmax_cross_entropy(const Var<T>& logits, std::span<const std::size_t> targets);

// Mean of squared elementwise differences.
template <typename T>
Var<T> mse(const Var<T>& a, const Var<T>& b);

// Normalizes each row over its trailing extent, then applies gamma/beta.
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5));

// Gathers rows of `table` for each id; output is ids.size() × d.
template <typename T>
Var<T> embedding(const Var<T>& table, std::span<const std::size_t> ids);

// Selects the given rows of a matrix.
template <typename T>
Var<T> select_rows(const Var<T>& x, std::span<const std::size_t> rows);

// Multi-head causal self-attention on packed [batch·seq × d] projections.
// Heads whose `head_keep` entry is false contribute zeros.
template <typename T>
Var<T> causal_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, std::size_t batch,
                        std::size_t seq, std::size_t heads, const std::vector<bool>& head_keep);

}  // namespace calora::ag
