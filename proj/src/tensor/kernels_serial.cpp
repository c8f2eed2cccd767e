#include "calora/tensor/kernels.hpp"
#include "kernel_rows.hpp"

namespace calora::kernels::serial {

namespace {

template <typename T>
void gemm_nn_impl(std::size_t m, std::size_t k, std::size_t n, std::span<const T> a,
                  std::span<const T> b, std::span<T> c, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    detail::row_gemm_nn(k, n, a.data() + i * k, b.data(), c.data() + i * n, accumulate);
  }
}

template <typename T>
void gemm_nt_impl(std::size_t m, std::size_t k, std::size_t n, std::span<const T> a,
                  std::span<const T> b, std::span<T> c, bool accumulate) {
  const std::vector<T> bt = detail::transposed(n, k, b.data());
  gemm_nn_impl<T>(m, k, n, a, bt, c, accumulate);
}

template <typename T>
void gemm_tn_impl(std::size_t m, std::size_t k, std::size_t n, std::span<const T> a,
                  std::span<const T> b, std::span<T> c, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    detail::row_gemm_tn(i, m, k, n, a.data(), b.data(), c.data() + i * n, accumulate);
  }
}

}  // namespace

#define CALORA_SERIAL_KERNELS(T)                                                            \
  void gemm_nn(std::size_t m, std::size_t k, std::size_t n, std::span<const T> a,          \
               std::span<const T> b, std::span<T> c, bool accumulate) {                    \
    gemm_nn_impl<T>(m, k, n, a, b, c, accumulate);                                         \
  }                                                                                        \
  void gemm_nt(std::size_t m, std::size_t k, std::size_t n, std::span<const T> a,          \
               std::span<const T> b, std::span<T> c, bool accumulate) {                    \
    gemm_nt_impl<T>(m, k, n, a, b, c, accumulate);                                         \
  }                                                                                        \
  void gemm_tn(std::size_t m, std::size_t k, std::size_t n, std::span<const T> a,          \
               std::span<const T> b, std::span<T> c, bool accumulate) {                    \
    gemm_tn_impl<T>(m, k, n, a, b, c, accumulate);                                         \
  }                                                                                        \
  void axpy(T alpha, std::span<const T> x, std::span<T> y) {                               \
    detail::row_axpy(x.size(), alpha, x.data(), y.data());                                 \
  }                                                                                        \
  void hadamard(std::span<const T> a, std::span<const T> b, std::span<T> out) {            \
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];                       \
  }

CALORA_SERIAL_KERNELS(float)
CALORA_SERIAL_KERNELS(double)

#undef CALORA_SERIAL_KERNELS

}  // namespace calora::kernels::serial
