#pragma once

// Per-head/per-layer decay rates, decay-causal masks, and the rotation-based
// relative positional encoding applied to queries and keys.

#include <cmath>
#include <cstddef>
#include <stdexcept>

#include "linattn/tensor.hpp"

namespace linattn {

// Decay rate lambda(h, l) = exp(-(8h/H) * (1 - l/L)), with the layer factor
// dropped when the temperature toggle is off. Indices are 1-based so that the
// last layer comes out at exactly 1.
struct DecaySchedule {
  int heads = 1;
  int layers = 1;
  bool use_temperature = true;

  double rate(int head, int layer) const {
    if (head < 1 || head > heads || layer < 1 || layer > layers)
      throw std::invalid_argument(
          "DecaySchedule::rate: head " + std::to_string(head) + "/" +
          std::to_string(heads) + ", layer " + std::to_string(layer) + "/" +
          std::to_string(layers) + " out of range");
    const double head_rate = 8.0 * head / heads;
    const double layer_temp =
        use_temperature ? (1.0 - static_cast<double>(layer) / layers) : 1.0;
    return std::exp(-head_rate * layer_temp);
  }

  std::vector<double> layer_rates(int layer) const {
    std::vector<double> out(static_cast<std::size_t>(heads));
    for (int h = 1; h <= heads; ++h) out[h - 1] = rate(h, layer);
    return out;
  }
};

namespace detail {

// lambda^dist evaluated in log space; dist == 0 is exactly 1.
template <typename T>
T decay_weight(std::ptrdiff_t dist, double log_lambda) {
  if (dist == 0 || log_lambda == 0.0) return T(1);
  return static_cast<T>(std::exp(static_cast<double>(dist) * log_lambda));
}

inline double checked_log_lambda(double lambda) {
  if (!(lambda > 0.0) || lambda > 1.0)
    throw std::invalid_argument("decay rate must be in (0, 1], got " +
                                std::to_string(lambda));
  return std::log(lambda);
}

}  // namespace detail

// M[s][t] = lambda^(s-t) for s >= t, 0 above the diagonal.
template <typename T>
Tensor<T> build_decay_mask(std::size_t n, double lambda) {
  if (n == 0) throw std::invalid_argument("build_decay_mask: n must be >= 1");
  const double log_lambda = detail::checked_log_lambda(lambda);
  Tensor<T> m({n, n});
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t t = 0; t <= s; ++t)
      m(s, t) = detail::decay_weight<T>(
          static_cast<std::ptrdiff_t>(s - t), log_lambda);
  return m;
}

// ---------------------------------------------------------------------------
// LRPE: each adjacent dimension pair of the row at absolute position p is
// rotated by -theta_j * p, so that for q at position s and k at position t
// the rotated inner product equals q^T R(theta (s-t)) k: it depends only on
// the position difference.
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
void check_lrpe_shapes(const Tensor<T>& x, const Tensor<T>& theta) {
  x.require_rank(2);
  const std::size_t d = x.cols();
  if (d % 2 != 0)
    throw std::invalid_argument("apply_lrpe: head_dim must be even, got " +
                                std::to_string(d));
  if (theta.size() != d / 2)
    throw std::invalid_argument("apply_lrpe: theta has " +
                                std::to_string(theta.size()) +
                                " angles, expected " + std::to_string(d / 2));
}

}  // namespace detail

template <typename T>
void apply_lrpe_inplace(Tensor<T>& x, const Tensor<T>& theta,
                        std::size_t position_offset) {
  detail::check_lrpe_shapes(x, theta);
  const std::size_t n = x.rows();
  const std::size_t d = x.cols();
  for (std::size_t r = 0; r < n; ++r) {
    const double p = static_cast<double>(position_offset + r);
    T* row = x.data() + r * d;
    for (std::size_t j = 0; j < d / 2; ++j) {
      const double a = -static_cast<double>(theta[j]) * p;
      const T c = static_cast<T>(std::cos(a));
      const T s = static_cast<T>(std::sin(a));
      const T x0 = row[2 * j];
      const T x1 = row[2 * j + 1];
      row[2 * j] = x0 * c - x1 * s;
      row[2 * j + 1] = x0 * s + x1 * c;
    }
  }
}

template <typename T>
Tensor<T> apply_lrpe(const Tensor<T>& x, const Tensor<T>& theta,
                     std::size_t position_offset) {
  Tensor<T> out = x;
  apply_lrpe_inplace(out, theta, position_offset);
  return out;
}

// Backward through the rotation. `y` is the rotated output (the forward
// result), `dy` its cotangent; returns dx and accumulates the angle gradient
// into dtheta. Uses dR/da = R(a + pi/2), i.e. d(y)/da = (-y1, y0) per pair.
template <typename T>
Tensor<T> lrpe_backward(const Tensor<T>& y, const Tensor<T>& theta,
                        std::size_t position_offset, const Tensor<T>& dy,
                        Tensor<T>& dtheta) {
  detail::check_lrpe_shapes(y, theta);
  detail::require_same_shape("lrpe_backward", y, dy);
  if (dtheta.size() != theta.size())
    shape_fail("lrpe_backward(dtheta)", dtheta.shape(), theta.shape());
  const std::size_t n = y.rows();
  const std::size_t d = y.cols();
  Tensor<T> dx({n, d});
  for (std::size_t r = 0; r < n; ++r) {
    const double p = static_cast<double>(position_offset + r);
    const T* yrow = y.data() + r * d;
    const T* grow = dy.data() + r * d;
    T* drow = dx.data() + r * d;
    for (std::size_t j = 0; j < d / 2; ++j) {
      const double a = -static_cast<double>(theta[j]) * p;
      const T c = static_cast<T>(std::cos(a));
      const T s = static_cast<T>(std::sin(a));
      const T g0 = grow[2 * j];
      const T g1 = grow[2 * j + 1];
      // inverse rotation of the cotangent
      drow[2 * j] = g0 * c + g1 * s;
      drow[2 * j + 1] = -g0 * s + g1 * c;
      // d(angle)/d(theta_j) = -p
      dtheta[j] += static_cast<T>(p) *
                   (grow[2 * j] * yrow[2 * j + 1] -
                    grow[2 * j + 1] * yrow[2 * j]);
    }
  }
  return dx;
}

}  // namespace linattn
