#pragma once

// Deliberately slow scalar-loop reference implementations plus a central
// finite-difference helper. These back the verification suites and must stay
// independent of the optimized paths they check.

#include <cmath>
#include <functional>

#include "linattn/tensor.hpp"

namespace linattn::oracle {

// Plain triple loop, no blocking, accumulation in index order.
template <typename T>
Tensor<T> matmul_naive(const Tensor<T>& a, const Tensor<T>& b) {
  a.require_rank(2);
  b.require_rank(2);
  if (a.cols() != b.rows()) shape_fail("matmul_naive", a.shape(), b.shape());
  Tensor<T> c({a.rows(), b.cols()});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      T acc = 0;
      for (std::size_t k = 0; k < a.cols(); ++k) acc += a(i, k) * b(k, j);
      c(i, j) = acc;
    }
  return c;
}

// o[s] = sum_t mask[s][t] * (q_s . k_t) * v_t, one scalar at a time.
template <typename T>
Tensor<T> masked_attention_scalar(const Tensor<T>& q, const Tensor<T>& k,
                                  const Tensor<T>& v, const Tensor<T>& mask) {
  const std::size_t n = q.rows();
  const std::size_t d = q.cols();
  Tensor<T> o({n, d});
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t t = 0; t < n; ++t) {
      const T m = mask(s, t);
      if (m == T(0)) continue;
      T dot = 0;
      for (std::size_t c = 0; c < d; ++c) dot += q(s, c) * k(t, c);
      const T w = dot * m;
      for (std::size_t c = 0; c < d; ++c) o(s, c) += w * v(t, c);
    }
  return o;
}

// Central finite difference of a scalar function with respect to one entry
// of `x`.
template <typename T>
double central_diff(Tensor<T>& x, std::size_t index,
                    const std::function<double()>& f, double step) {
  const T saved = x[index];
  x[index] = saved + static_cast<T>(step);
  const double up = f();
  x[index] = saved - static_cast<T>(step);
  const double down = f();
  x[index] = saved;
  return (up - down) / (2.0 * step);
}

inline double rel_err(double got, double want, double floor = 1e-8) {
  const double denom = std::max({std::abs(got), std::abs(want), floor});
  return std::abs(got - want) / denom;
}

// torch-style gradcheck comparison; the absolute term absorbs central-diff
// roundoff on near-zero entries
inline bool grad_close(double got, double want, double rtol = 1e-5,
                       double atol = 1e-7) {
  return std::abs(got - want) <=
         atol + rtol * std::max(std::abs(got), std::abs(want));
}

// Max |a-b| scaled by the largest magnitude of the reference.
template <typename T>
double max_rel_err(const Tensor<T>& got, const Tensor<T>& want) {
  if (!got.same_shape(want)) shape_fail("max_rel_err", got.shape(), want.shape());
  double max_abs = 0.0, max_diff = 0.0;
  for (std::size_t i = 0; i < want.size(); ++i) {
    max_abs = std::max(max_abs, std::abs(static_cast<double>(want[i])));
    max_diff = std::max(
        max_diff, std::abs(static_cast<double>(got[i]) -
                           static_cast<double>(want[i])));
  }
  if (max_abs == 0.0) return max_diff == 0.0 ? 0.0 : INFINITY;
  return max_diff / max_abs;
}

template <typename T>
bool all_finite(const Tensor<T>& t) {
  for (std::size_t i = 0; i < t.size(); ++i)
    if (!std::isfinite(t[i])) return false;
  return true;
}

}  // namespace linattn::oracle
