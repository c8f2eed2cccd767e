#include "calora/tensor/kernels.hpp"
#include "kernel_rows.hpp"

#include <omp.h>

#include <cstdint>

namespace calora::kernels::parallel {

namespace {

// Below this many multiply-adds a team fork costs more than it saves.
constexpr std::size_t kMinParallelWork = 1 << 15;
constexpr std::size_t kMinParallelElems = 1 << 14;

template <typename T>
void gemm_nn_impl(std::size_t m, std::size_t k, std::size_t n, std::span<const T> a,
                  std::span<const T> b, std::span<T> c, bool accumulate) {
  const auto rows = static_cast<std::int64_t>(m);
#pragma omp parallel for schedule(static) if (m * k * n >= kMinParallelWork)
  for (std::int64_t i = 0; i < rows; ++i) {
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
  const auto rows = static_cast<std::int64_t>(m);
#pragma omp parallel for schedule(static) if (m * k * n >= kMinParallelWork)
  for (std::int64_t i = 0; i < rows; ++i) {
    detail::row_gemm_tn(static_cast<std::size_t>(i), m, k, n, a.data(), b.data(),
                        c.data() + i * n, accumulate);
  }
}

template <typename T>
void axpy_impl(T alpha, std::span<const T> x, std::span<T> y) {
  const auto n = static_cast<std::int64_t>(x.size());
#pragma omp parallel for simd schedule(static) if (x.size() >= kMinParallelElems)
  for (std::int64_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

template <typename T>
void hadamard_impl(std::span<const T> a, std::span<const T> b, std::span<T> out) {
  const auto n = static_cast<std::int64_t>(a.size());
#pragma omp parallel for simd schedule(static) if (a.size() >= kMinParallelElems)
  for (std::int64_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
}

}  // namespace

#define CALORA_PARALLEL_KERNELS(T)                                                          \
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
  void axpy(T alpha, std::span<const T> x, std::span<T> y) { axpy_impl<T>(alpha, x, y); }  \
  void hadamard(std::span<const T> a, std::span<const T> b, std::span<T> out) {            \
    hadamard_impl<T>(a, b, out);                                                           \
  }

CALORA_PARALLEL_KERNELS(float)
CALORA_PARALLEL_KERNELS(double)

#undef CALORA_PARALLEL_KERNELS

int max_threads() { return omp_get_max_threads(); }
void set_threads(int n) { omp_set_num_threads(n < 1 ? 1 : n); }

}  // namespace calora::kernels::parallel
