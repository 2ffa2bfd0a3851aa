#pragma once

#include <cstddef>

#include <Eigen/Core>

namespace widecaps::linalg {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// C(m×n) = op(A)·op(B) (+ C when accumulate). A is m×k (k×m when trans_a), B is k×n
/// (n×k when trans_b); all buffers row-major and densely packed.
template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const T* a,
          const T* b, T* c, bool accumulate) {
  using ConstMap = Eigen::Map<const RowMatrix<T>>;
  using Map = Eigen::Map<RowMatrix<T>>;
  const auto em = static_cast<Eigen::Index>(m);
  const auto en = static_cast<Eigen::Index>(n);
  const auto ek = static_cast<Eigen::Index>(k);
  Map cm(c, em, en);
  if (!accumulate) cm.setZero();
  if (!trans_a && !trans_b) {
    cm.noalias() += ConstMap(a, em, ek) * ConstMap(b, ek, en);
  } else if (trans_a && !trans_b) {
    cm.noalias() += ConstMap(a, ek, em).transpose() * ConstMap(b, ek, en);
  } else if (!trans_a && trans_b) {
    cm.noalias() += ConstMap(a, em, ek) * ConstMap(b, en, ek).transpose();
  } else {
    cm.noalias() += ConstMap(a, ek, em).transpose() * ConstMap(b, en, ek).transpose();
  }
}

}  // namespace widecaps::linalg
