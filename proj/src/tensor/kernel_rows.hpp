#pragma once

// Row-level building blocks shared by the serial and parallel kernels.

#include <cstddef>
#include <vector>

namespace calora::kernels::detail {

template <typename T>
inline void row_axpy(std::size_t n, T alpha, const T* __restrict x, T* __restrict y) {
  for (std::size_t j = 0; j < n; ++j) y[j] += alpha * x[j];
}

// c_row (+)= a_row[0..k) · B[k×n]
template <typename T>
inline void row_gemm_nn(std::size_t k, std::size_t n, const T* a_row, const T* b, T* c_row,
                        bool accumulate) {
  if (!accumulate) {
    for (std::size_t j = 0; j < n; ++j) c_row[j] = T{0};
  }
  for (std::size_t p = 0; p < k; ++p) row_axpy(n, a_row[p], b + p * n, c_row);
}

// c_row (+)= Σ_p A[p][col] · B[p][:], A is k×m
template <typename T>
inline void row_gemm_tn(std::size_t col, std::size_t m, std::size_t k, std::size_t n,
                        const T* a, const T* b, T* c_row, bool accumulate) {
  if (!accumulate) {
    for (std::size_t j = 0; j < n; ++j) c_row[j] = T{0};
  }
  for (std::size_t p = 0; p < k; ++p) row_axpy(n, a[p * m + col], b + p * n, c_row);
}

template <typename T>
inline std::vector<T> transposed(std::size_t rows, std::size_t cols, const T* src) {
  std::vector<T> out(rows * cols);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = src[r * cols + c];
  }
  return out;
}

}  // namespace calora::kernels::detail
