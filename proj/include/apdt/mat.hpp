#pragma once

#include <Eigen/Core>
#include <cassert>
#include <cmath>
#include <vector>

#include "apdt/common.hpp"

namespace apdt {

// Dense row-major matrix. All model math goes through the handful of kernels
// below; Eigen maps give them decent throughput without owning our storage.
template <class Real>
struct Mat {
  int rows = 0, cols = 0;
  std::vector<Real> a;

  Mat() = default;
  Mat(int r, int c) : rows(r), cols(c), a(size_t(r) * size_t(c), Real(0)) {}

  Real& operator()(int i, int j) { return a[size_t(i) * cols + j]; }
  Real operator()(int i, int j) const { return a[size_t(i) * cols + j]; }

  size_t size() const { return a.size(); }
  bool empty() const { return rows == 0 || cols == 0; }
  bool same_shape(const Mat& o) const { return rows == o.rows && cols == o.cols; }
  void fill(Real v) { std::fill(a.begin(), a.end(), v); }
  void zero() { fill(Real(0)); }

  static Mat zeros(int r, int c) { return Mat(r, c); }
  static Mat full(int r, int c, Real v) {
    Mat m(r, c);
    m.fill(v);
    return m;
  }

  Real* row(int i) { return a.data() + size_t(i) * cols; }
  const Real* row(int i) const { return a.data() + size_t(i) * cols; }

  bool all_finite() const {
    for (Real v : a)
      if (!std::isfinite(double(v))) return false;
    return true;
  }
};

namespace detail {
template <class Real>
using EMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class Real>
using EMap = Eigen::Map<EMat<Real>>;
template <class Real>
using ECMap = Eigen::Map<const EMat<Real>>;
}  // namespace detail

// c += a * b
template <class Real>
void gemm_nn_acc(const Mat<Real>& a, const Mat<Real>& b, Mat<Real>& c) {
  assert(a.cols == b.rows && a.rows == c.rows && b.cols == c.cols);
  detail::ECMap<Real> A(a.a.data(), a.rows, a.cols), B(b.a.data(), b.rows, b.cols);
  detail::EMap<Real> C(c.a.data(), c.rows, c.cols);
  C.noalias() += A * B;
}

// c += a * b^T
template <class Real>
void gemm_nt_acc(const Mat<Real>& a, const Mat<Real>& b, Mat<Real>& c) {
  assert(a.cols == b.cols && a.rows == c.rows && b.rows == c.cols);
  detail::ECMap<Real> A(a.a.data(), a.rows, a.cols), B(b.a.data(), b.rows, b.cols);
  detail::EMap<Real> C(c.a.data(), c.rows, c.cols);
  C.noalias() += A * B.transpose();
}

// c += a^T * b
template <class Real>
void gemm_tn_acc(const Mat<Real>& a, const Mat<Real>& b, Mat<Real>& c) {
  assert(a.rows == b.rows && a.cols == c.rows && b.cols == c.cols);
  detail::ECMap<Real> A(a.a.data(), a.rows, a.cols), B(b.a.data(), b.rows, b.cols);
  detail::EMap<Real> C(c.a.data(), c.rows, c.cols);
  C.noalias() += A.transpose() * B;
}

template <class Real>
Mat<Real> matmul_nn(const Mat<Real>& a, const Mat<Real>& b) {
  Mat<Real> c(a.rows, b.cols);
  gemm_nn_acc(a, b, c);
  return c;
}

template <class Real>
void axpy(Real alpha, const Mat<Real>& x, Mat<Real>& y) {
  assert(x.same_shape(y));
  for (size_t i = 0; i < x.a.size(); ++i) y.a[i] += alpha * x.a[i];
}

template <class Real>
Real frob_norm_sq(const Mat<Real>& m) {
  Real s = 0;
  for (Real v : m.a) s += v * v;
  return s;
}

}  // namespace apdt
