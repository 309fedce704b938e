#pragma once

// Row-major GEMM on raw buffers, C = alpha * op(A) * op(B) + beta * C.
// Thin wrapper over Eigen so the layers never touch Eigen types directly.

#include <cstddef>

#include <Eigen/Core>

namespace cdb::detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
          T alpha, const T* a, const T* b, T beta, T* c) {
  using Map = Eigen::Map<const RowMat<T>>;
  const auto mi = static_cast<Eigen::Index>(m);
  const auto ni = static_cast<Eigen::Index>(n);
  const auto ki = static_cast<Eigen::Index>(k);
  Eigen::Map<RowMat<T>> out(c, mi, ni);
  // op(A) is m x k, so A itself is k x m when transposed.
  const Map am(a, trans_a ? ki : mi, trans_a ? mi : ki);
  const Map bm(b, trans_b ? ni : ki, trans_b ? ki : ni);
  if (beta == T(0)) {
    out.setZero();
  } else if (beta != T(1)) {
    out *= beta;
  }
  if (!trans_a && !trans_b) {
    out.noalias() += alpha * am * bm;
  } else if (trans_a && !trans_b) {
    out.noalias() += alpha * am.transpose() * bm;
  } else if (!trans_a && trans_b) {
    out.noalias() += alpha * am * bm.transpose();
  } else {
    out.noalias() += alpha * am.transpose() * bm.transpose();
  }
}

}  // namespace cdb::detail
