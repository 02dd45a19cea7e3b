// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cblas.h>

#include <algorithm>
#include <cstddef>
#include <vector>

namespace bilingunet::detail {

// Row-major C = alpha * op(A) * op(B) + beta * C with op(A): [m,k], op(B): [k,n].
inline void gemm(bool trans_a, bool trans_b, int m, int n, int k, float alpha, const float* a,
                 const float* b, float beta, float* c) {
  cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, trans_a ? m : k, b,
              trans_b ? k : n, beta, c, n);
}

// Double precision only serves gradient checks. OpenBLAS 0.3.20 returns wrong
// dgemm results with its Cooperlake kernels, so this path stays in plain loops.
inline void gemm(bool trans_a, bool trans_b, int m, int n, int k, double alpha, const double* a,
                 const double* b, double beta, double* c) {
  const std::size_t un = static_cast<std::size_t>(n);
  std::vector<double> bt;
  if (trans_b) {
    bt.resize(static_cast<std::size_t>(k) * un);
    for (int j = 0; j < n; ++j)
      for (int l = 0; l < k; ++l) bt[static_cast<std::size_t>(l) * un + j] = b[static_cast<std::size_t>(j) * k + l];
    b = bt.data();
  }
  std::vector<double> row(un);
  for (int i = 0; i < m; ++i) {
    std::fill(row.begin(), row.end(), 0.0);
    for (int l = 0; l < k; ++l) {
      const double av = trans_a ? a[static_cast<std::size_t>(l) * m + i] : a[static_cast<std::size_t>(i) * k + l];
      const double* br = b + static_cast<std::size_t>(l) * un;
      for (int j = 0; j < n; ++j) row[j] += av * br[j];
    }
    double* cr = c + static_cast<std::size_t>(i) * un;
    for (int j = 0; j < n; ++j) cr[j] = alpha * row[j] + (beta == 0.0 ? 0.0 : beta * cr[j]);
  }
}

}  // namespace bilingunet::detail
