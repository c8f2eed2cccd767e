#pragma once

// Dense row-major compute kernels.
//
// Two implementations share one set of signatures: `serial` is the plain
// reference used by tests, `parallel` distributes output rows across OpenMP
// threads. Each output element is accumulated in the same order by both, so
// results are bitwise identical regardless of thread count.

#include <cstddef>
#include <span>

namespace calora::kernels {

#define CALORA_KERNEL_DECLS(T)                                                              \
  /* C[m×n] (+)= A[m×k] · B[k×n] */                                                        \
  void gemm_nn(std::size_t m, std::size_t k, std::size_t n, std::span<const T> a,          \
               std::span<const T> b, std::span<T> c, bool accumulate);                     \
  /* C[m×n] (+)= A[m×k] · B[n×k]ᵀ */                                                       \
  void gemm_nt(std::size_t m, std::size_t k, std::size_t n, std::span<const T> a,          \
               std::span<const T> b, std::span<T> c, bool accumulate);                     \
  /* C[m×n] (+)= A[k×m]ᵀ · B[k×n] */                                                       \
  void gemm_tn(std::size_t m, std::size_t k, std::size_t n, std::span<const T> a,          \
               std::span<const T> b, std::span<T> c, bool accumulate);                     \
  /* y += alpha · x */                                                                     \
  void axpy(T alpha, std::span<const T> x, std::span<T> y);                                \
  /* out[i] = a[i] * b[i] */                                                               \
  void hadamard(std::span<const T> a, std::span<const T> b, std::span<T> out);

namespace serial {
CALORA_KERNEL_DECLS(float)
CALORA_KERNEL_DECLS(double)
}  // namespace serial

namespace parallel {
CALORA_KERNEL_DECLS(float)
CALORA_KERNEL_DECLS(double)

// Number of OpenMP threads the parallel kernels will use in this thread.
int max_threads();
// Sets the per-thread OpenMP team size; workers of an experiment pool call
// this with 1 so that parallelism stays across runs, never inside one.
void set_threads(int n);
}  // namespace parallel

#undef CALORA_KERNEL_DECLS

// Kernels used by the autograd ops.
using namespace parallel;

}  // namespace calora::kernels
