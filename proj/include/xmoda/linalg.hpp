#pragma once

// Matrix products with a run-to-run reproducible summation order.
//
// Eigen sends products whose result is a single row or column to its GEMV
// kernels, and those peel leading elements according to the buffer's
// address. Heap addresses change between runs, so the rounding would too.
// Such shapes are evaluated here by plain loops; everything else goes to
// the blocked GEMM, whose order depends only on the sizes.

#include <Eigen/Core>

namespace xmoda::linalg {

template <class Dst, class Lhs, class Rhs>
void product(Dst&& dst, const Lhs& a, const Rhs& b, bool accumulate) {
  using Scalar = typename std::decay_t<Dst>::Scalar;
  if (dst.rows() == 1 || dst.cols() == 1) {
    for (Eigen::Index i = 0; i < dst.rows(); ++i)
      for (Eigen::Index j = 0; j < dst.cols(); ++j) {
        Scalar acc = 0;
        for (Eigen::Index k = 0; k < a.cols(); ++k) acc += a(i, k) * b(k, j);
        dst(i, j) = accumulate ? dst(i, j) + acc : acc;
      }
    return;
  }
  if (accumulate)
    dst.noalias() += a * b;
  else
    dst.noalias() = a * b;
}

}  // namespace xmoda::linalg
