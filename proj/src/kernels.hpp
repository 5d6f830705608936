#pragma once

// Row-major dense kernels shared by the ops and the attention module. All of
// them are written in axpy form (contiguous inner loop, no reductions) so the
// compiler vectorizes them without reassociating sums.

#include <cstddef>
#include <vector>

namespace dsta::kernels {

// c[m x n] += a[m x k] . b[k x n]
inline void gemm_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* __restrict crow = c + i * n;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double s = arow[p];
      const double* __restrict brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += s * brow[j];
    }
  }
}

// c[k x n] += a[m x k]^T . b[m x n]
inline void gemm_at_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    const double* __restrict brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double s = arow[p];
      double* __restrict crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += s * brow[j];
    }
  }
}

inline std::vector<double> transposed(const double* x, std::size_t rows, std::size_t cols) {
  std::vector<double> t(rows * cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) t[j * rows + i] = x[i * cols + j];
  return t;
}

// c[m x n] += a[m x k] . b[n x k]^T
inline void gemm_bt_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  const auto bt = transposed(b, n, k);
  gemm_acc(a, bt.data(), c, m, k, n);
}

}  // namespace dsta::kernels
