#pragma once

// Mixer blocks: SRMSNorm (plus RMSNorm/LayerNorm variants for the ablation
// surface), the gated linear-attention token mixer, the gateless-activation
// GLU channel mixer, and the pre-norm residual block that combines them.
// Every forward has a matching hand-derived backward.

#include <optional>
#include <string>
#include <vector>

#include "linattn/attention.hpp"
#include "linattn/positional.hpp"
#include "linattn/tensor.hpp"

namespace linattn {

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

enum class Activation { None, OnePlusElu, Swish };

inline const char* activation_name(Activation a) {
  switch (a) {
    case Activation::None: return "none";
    case Activation::OnePlusElu: return "one_plus_elu";
    case Activation::Swish: return "swish";
  }
  return "?";
}

inline Activation parse_activation(const std::string& s) {
  if (s == "none") return Activation::None;
  if (s == "one_plus_elu" || s == "1+elu") return Activation::OnePlusElu;
  if (s == "swish") return Activation::Swish;
  throw std::invalid_argument("unknown activation: " + s);
}

template <typename T>
T activation_scalar(Activation a, T x) {
  switch (a) {
    case Activation::None: return x;
    case Activation::OnePlusElu: return one_plus_elu_scalar(x);
    case Activation::Swish: return swish_scalar(x);
  }
  return x;
}

// Derivative with respect to the pre-activation.
template <typename T>
T activation_grad_scalar(Activation a, T x) {
  switch (a) {
    case Activation::None: return T(1);
    case Activation::OnePlusElu: return x >= T(0) ? T(1) : std::exp(x);
    case Activation::Swish: {
      const T s = sigmoid_scalar(x);
      return s * (T(1) + x * (T(1) - s));
    }
  }
  return T(1);
}

template <typename T>
Tensor<T> apply_activation(const Tensor<T>& x, Activation a) {
  if (a == Activation::None) return x;
  return map(x, [a](T v) { return activation_scalar(a, v); });
}

// dz = dy . act'(z), where z is the pre-activation
template <typename T>
Tensor<T> activation_backward(const Tensor<T>& z, const Tensor<T>& dy,
                              Activation a) {
  detail::require_same_shape("activation_backward", z, dy);
  Tensor<T> dz = dy;
  if (a == Activation::None) return dz;
  for (std::size_t i = 0; i < dz.size(); ++i)
    dz[i] *= activation_grad_scalar(a, z[i]);
  return dz;
}

// ---------------------------------------------------------------------------
// Normalization. srmsnorm is parameter free: x * sqrt(d) / max(|x|, eps),
// applied per `group`-sized subvector of each row (group 0 = whole row).
// ---------------------------------------------------------------------------

enum class NormKind { SRMS, RMS, LayerNorm };

inline const char* norm_name(NormKind k) {
  switch (k) {
    case NormKind::SRMS: return "srmsnorm";
    case NormKind::RMS: return "rmsnorm";
    case NormKind::LayerNorm: return "layernorm";
  }
  return "?";
}

inline NormKind parse_norm(const std::string& s) {
  if (s == "srmsnorm") return NormKind::SRMS;
  if (s == "rmsnorm") return NormKind::RMS;
  if (s == "layernorm") return NormKind::LayerNorm;
  throw std::invalid_argument("unknown norm: " + s);
}

template <typename T>
Tensor<T> srmsnorm(const Tensor<T>& x, T eps = T(1e-6), std::size_t group = 0) {
  const std::size_t width = x.dim(x.rank() - 1);
  const std::size_t g = group == 0 ? width : group;
  if (g == 0 || width % g != 0)
    throw std::invalid_argument("srmsnorm: group " + std::to_string(g) +
                                " does not divide width " +
                                std::to_string(width));
  const T root_d = std::sqrt(static_cast<T>(g));
  Tensor<T> out = x;
  const std::size_t vectors = x.size() / g;
  for (std::size_t r = 0; r < vectors; ++r) {
    T* p = out.data() + r * g;
    T sq = T(0);
    for (std::size_t i = 0; i < g; ++i) sq += p[i] * p[i];
    const T c = root_d / std::max(std::sqrt(sq), eps);
    for (std::size_t i = 0; i < g; ++i) p[i] *= c;
  }
  return out;
}

template <typename T>
Tensor<T> srmsnorm_backward(const Tensor<T>& x, const Tensor<T>& dy,
                            T eps = T(1e-6), std::size_t group = 0) {
  detail::require_same_shape("srmsnorm_backward", x, dy);
  const std::size_t width = x.dim(x.rank() - 1);
  const std::size_t g = group == 0 ? width : group;
  const T root_d = std::sqrt(static_cast<T>(g));
  Tensor<T> dx(x.shape());
  const std::size_t vectors = x.size() / g;
  for (std::size_t r = 0; r < vectors; ++r) {
    const T* xp = x.data() + r * g;
    const T* gp = dy.data() + r * g;
    T* dp = dx.data() + r * g;
    T sq = T(0), dot = T(0);
    for (std::size_t i = 0; i < g; ++i) {
      sq += xp[i] * xp[i];
      dot += gp[i] * xp[i];
    }
    const T norm = std::sqrt(sq);
    if (norm > eps) {
      const T c = root_d / norm;
      const T k = root_d * dot / (norm * norm * norm);
      for (std::size_t i = 0; i < g; ++i) dp[i] = c * gp[i] - k * xp[i];
    } else {
      const T c = root_d / eps;
      for (std::size_t i = 0; i < g; ++i) dp[i] = c * gp[i];
    }
  }
  return dx;
}

template <typename T>
struct NormParams {
  NormKind kind = NormKind::SRMS;
  T eps = T(1e-6);
  Tensor<T> gain;  // RMS + LayerNorm
  Tensor<T> bias;  // LayerNorm only

  static NormParams make(NormKind kind, std::size_t d, T eps = T(1e-6)) {
    NormParams p;
    p.kind = kind;
    p.eps = eps;
    if (kind != NormKind::SRMS) p.gain = Tensor<T>::full({d}, T(1));
    if (kind == NormKind::LayerNorm) p.bias = Tensor<T>({d});
    return p;
  }
};

template <typename T>
struct NormGrads {
  Tensor<T> gain, bias;
};

template <typename T>
Tensor<T> norm_forward(const Tensor<T>& x, const NormParams<T>& p) {
  const std::size_t d = x.dim(x.rank() - 1);
  const std::size_t rows = x.size() / d;
  switch (p.kind) {
    case NormKind::SRMS:
      return srmsnorm(x, p.eps);
    case NormKind::RMS: {
      Tensor<T> out = x;
      for (std::size_t r = 0; r < rows; ++r) {
        T* v = out.data() + r * d;
        T sq = T(0);
        for (std::size_t i = 0; i < d; ++i) sq += v[i] * v[i];
        const T inv = T(1) / std::sqrt(sq / d + p.eps);
        for (std::size_t i = 0; i < d; ++i) v[i] *= inv * p.gain[i];
      }
      return out;
    }
    case NormKind::LayerNorm: {
      Tensor<T> out = x;
      for (std::size_t r = 0; r < rows; ++r) {
        T* v = out.data() + r * d;
        T mean = T(0);
        for (std::size_t i = 0; i < d; ++i) mean += v[i];
        mean /= d;
        T var = T(0);
        for (std::size_t i = 0; i < d; ++i) var += (v[i] - mean) * (v[i] - mean);
        var /= d;
        const T inv = T(1) / std::sqrt(var + p.eps);
        for (std::size_t i = 0; i < d; ++i)
          v[i] = (v[i] - mean) * inv * p.gain[i] + p.bias[i];
      }
      return out;
    }
  }
  return x;
}

template <typename T>
Tensor<T> norm_backward(const Tensor<T>& x, const Tensor<T>& dy,
                        const NormParams<T>& p, NormGrads<T>* grads) {
  detail::require_same_shape("norm_backward", x, dy);
  const std::size_t d = x.dim(x.rank() - 1);
  const std::size_t rows = x.size() / d;
  switch (p.kind) {
    case NormKind::SRMS:
      return srmsnorm_backward(x, dy, p.eps);
    case NormKind::RMS: {
      Tensor<T> dx(x.shape());
      for (std::size_t r = 0; r < rows; ++r) {
        const T* xv = x.data() + r * d;
        const T* gv = dy.data() + r * d;
        T* dv = dx.data() + r * d;
        T sq = T(0);
        for (std::size_t i = 0; i < d; ++i) sq += xv[i] * xv[i];
        const T rms = std::sqrt(sq / d + p.eps);
        T dot = T(0);
        for (std::size_t i = 0; i < d; ++i) dot += gv[i] * p.gain[i] * xv[i];
        const T k = dot / (d * rms * rms * rms);
        for (std::size_t i = 0; i < d; ++i) {
          dv[i] = gv[i] * p.gain[i] / rms - xv[i] * k;
          if (grads) grads->gain[i] += gv[i] * xv[i] / rms;
        }
      }
      return dx;
    }
    case NormKind::LayerNorm: {
      Tensor<T> dx(x.shape());
      for (std::size_t r = 0; r < rows; ++r) {
        const T* xv = x.data() + r * d;
        const T* gv = dy.data() + r * d;
        T* dv = dx.data() + r * d;
        T mean = T(0);
        for (std::size_t i = 0; i < d; ++i) mean += xv[i];
        mean /= d;
        T var = T(0);
        for (std::size_t i = 0; i < d; ++i)
          var += (xv[i] - mean) * (xv[i] - mean);
        var /= d;
        const T inv = T(1) / std::sqrt(var + p.eps);
        T sum_g = T(0), sum_gx = T(0);
        for (std::size_t i = 0; i < d; ++i) {
          const T xhat = (xv[i] - mean) * inv;
          const T gg = gv[i] * p.gain[i];
          sum_g += gg;
          sum_gx += gg * xhat;
          if (grads) {
            grads->gain[i] += gv[i] * xhat;
            grads->bias[i] += gv[i];
          }
        }
        for (std::size_t i = 0; i < d; ++i) {
          const T xhat = (xv[i] - mean) * inv;
          const T gg = gv[i] * p.gain[i];
          dv[i] = inv * (gg - sum_g / d - xhat * sum_gx / d);
        }
      }
      return dx;
    }
  }
  return dy;
}

// ---------------------------------------------------------------------------
// Column slicing helpers for per-head views (contiguous copies).
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& x, std::size_t col0, std::size_t width) {
  x.require_rank(2);
  Tensor<T> out({x.rows(), width});
  for (std::size_t r = 0; r < x.rows(); ++r)
    std::memcpy(out.data() + r * width, x.data() + r * x.cols() + col0,
                width * sizeof(T));
  return out;
}

template <typename T>
void paste_cols(Tensor<T>& x, const Tensor<T>& sub, std::size_t col0) {
  for (std::size_t r = 0; r < x.rows(); ++r)
    std::memcpy(x.data() + r * x.cols() + col0, sub.data() + r * sub.cols(),
                sub.cols() * sizeof(T));
}

// ---------------------------------------------------------------------------
// SGLU channel mixer: O = [V . act(U)] Wo with V = X Wv, U = X Wu. The
// default has no activation; the gate branch activation is an ablation knob.
// ---------------------------------------------------------------------------

template <typename T>
struct SgluParams {
  Tensor<T> wv, wu;  // d_in x hidden
  Tensor<T> wo;      // hidden x d_out
  Activation gate_act = Activation::None;
};

template <typename T>
struct SgluCache {
  Tensor<T> v, u, u_act, gated;
};

template <typename T>
struct SgluGrads {
  Tensor<T> wv, wu, wo;
};

template <typename T>
Tensor<T> sglu_forward_cached(const Tensor<T>& x, const SgluParams<T>& p,
                              SgluCache<T>* cache) {
  Tensor<T> v = matmul(x, p.wv);
  Tensor<T> u = matmul(x, p.wu);
  Tensor<T> u_act = apply_activation(u, p.gate_act);
  Tensor<T> gated = mul(v, u_act);
  Tensor<T> y = matmul(gated, p.wo);
  if (cache) {
    cache->v = std::move(v);
    cache->u = std::move(u);
    cache->u_act = std::move(u_act);
    cache->gated = std::move(gated);
  }
  return y;
}

template <typename T>
Tensor<T> sglu_forward(const Tensor<T>& x, const SgluParams<T>& p) {
  return sglu_forward_cached(x, p, static_cast<SgluCache<T>*>(nullptr));
}

// Accumulates weight gradients into `grads`; returns dX.
template <typename T>
Tensor<T> sglu_backward(const Tensor<T>& x, const SgluParams<T>& p,
                        const SgluCache<T>& cache, const Tensor<T>& dy,
                        SgluGrads<T>& grads) {
  matmul_tn_into(grads.wo, cache.gated, dy, /*accumulate=*/true);
  Tensor<T> dgated = matmul_nt(dy, p.wo);
  Tensor<T> dv = mul(dgated, cache.u_act);
  Tensor<T> du_act = mul(dgated, cache.v);
  Tensor<T> du = activation_backward(cache.u, du_act, p.gate_act);
  matmul_tn_into(grads.wv, x, dv, true);
  matmul_tn_into(grads.wu, x, du, true);
  Tensor<T> dx(x.shape());
  matmul_nt_into(dx, dv, p.wv, true);
  matmul_nt_into(dx, du, p.wu, true);
  return dx;
}

// ---------------------------------------------------------------------------
// GLA token mixer: per head, queries/keys get activation then the rotation
// encoding; attention runs against the head's decay rate; heads are merged,
// SRMS-normalized, gated with U = X Wu, and projected by Wo.
// ---------------------------------------------------------------------------

enum class AttnMode { Lightning, Reference };

template <typename T>
struct GlaParams {
  Tensor<T> wq, wk, wv, wu;  // d_in x dh; wu empty when use_gate is false
  Tensor<T> wo;              // dh x d_out
  Tensor<T> theta;           // [heads or 1, head_dim/2]; learnable
  int heads = 1;
  std::vector<double> lambdas;  // per-head decay, fixed
  Activation act = Activation::OnePlusElu;
  bool use_gate = true;
  bool per_head_norm = false;
  T eps = T(1e-6);

  std::size_t inner_dim() const { return wq.cols(); }
  std::size_t head_dim() const {
    return inner_dim() / static_cast<std::size_t>(heads);
  }

  void validate() const {
    if (heads < 1) throw std::invalid_argument("gla: heads must be >= 1");
    if (inner_dim() % heads != 0)
      throw std::invalid_argument("gla: inner dim not divisible by heads");
    if (head_dim() % 2 != 0)
      throw std::invalid_argument("gla: head_dim must be even for the"
                                  " rotation encoding");
    if (lambdas.size() != static_cast<std::size_t>(heads))
      throw std::invalid_argument("gla: need one decay rate per head");
  }

  // theta row for head h (row 0 when shared across heads)
  Tensor<T> theta_for_head(int h) const {
    const std::size_t row = theta.rows() == 1 ? 0 : static_cast<std::size_t>(h);
    Tensor<T> out({theta.cols()});
    std::memcpy(out.data(), theta.data() + row * theta.cols(),
                theta.cols() * sizeof(T));
    return out;
  }
};

template <typename T>
struct GlaCache {
  Tensor<T> zq, zk, zv, zu;  // pre-activation projections
  Tensor<T> qr, kr;          // post-activation, post-rotation
  Tensor<T> attn_out;        // merged head outputs, pre-norm
  Tensor<T> normed;
  Tensor<T> gated;
};

template <typename T>
struct GlaGrads {
  Tensor<T> wq, wk, wv, wu, wo, theta;
};

template <typename T>
Tensor<T> gla_forward_cached(const Tensor<T>& x, const GlaParams<T>& p,
                             AttnMode mode, const BlockConfig& cfg,
                             GlaCache<T>* cache, std::size_t pos_offset = 0,
                             KernelStats* stats = nullptr, int threads = 1) {
  p.validate();
  const std::size_t n = x.rows();
  const std::size_t hd = p.head_dim();
  Tensor<T> zq = matmul(x, p.wq);
  Tensor<T> zk = matmul(x, p.wk);
  Tensor<T> zv = matmul(x, p.wv);
  Tensor<T> zu = p.use_gate ? matmul(x, p.wu) : Tensor<T>();
  Tensor<T> qr = apply_activation(zq, p.act);
  Tensor<T> kr = apply_activation(zk, p.act);

  Tensor<T> attn_out({n, p.inner_dim()});
  for (int h = 0; h < p.heads; ++h) {
    const std::size_t c0 = static_cast<std::size_t>(h) * hd;
    Tensor<T> th = p.theta_for_head(h);
    Tensor<T> qh = slice_cols(qr, c0, hd);
    Tensor<T> kh = slice_cols(kr, c0, hd);
    apply_lrpe_inplace(qh, th, pos_offset);
    apply_lrpe_inplace(kh, th, pos_offset);
    paste_cols(qr, qh, c0);
    paste_cols(kr, kh, c0);
    Tensor<T> vh = slice_cols(zv, c0, hd);
    Tensor<T> oh;
    if (mode == AttnMode::Lightning) {
      oh = lightning_forward(qh, kh, vh, p.lambdas[static_cast<std::size_t>(h)],
                             cfg, stats, threads);
    } else {
      Tensor<T> mask =
          build_decay_mask<T>(n, p.lambdas[static_cast<std::size_t>(h)]);
      oh = reference_forward(qh, kh, vh, mask);
    }
    paste_cols(attn_out, oh, c0);
  }

  Tensor<T> normed =
      srmsnorm(attn_out, p.eps, p.per_head_norm ? hd : std::size_t(0));
  Tensor<T> gated = p.use_gate ? mul(normed, zu) : normed;
  Tensor<T> y = matmul(gated, p.wo);
  if (cache) {
    cache->zq = std::move(zq);
    cache->zk = std::move(zk);
    cache->zv = std::move(zv);
    cache->zu = std::move(zu);
    cache->qr = std::move(qr);
    cache->kr = std::move(kr);
    cache->attn_out = std::move(attn_out);
    cache->normed = std::move(normed);
    cache->gated = std::move(gated);
  }
  return y;
}

template <typename T>
Tensor<T> gla_forward(const Tensor<T>& x, const GlaParams<T>& p, AttnMode mode,
                      const BlockConfig& cfg = {}, std::size_t pos_offset = 0,
                      KernelStats* stats = nullptr, int threads = 1) {
  return gla_forward_cached(x, p, mode, cfg, static_cast<GlaCache<T>*>(nullptr),
                            pos_offset, stats, threads);
}

// Accumulates parameter gradients into `grads`; returns dX.
template <typename T>
Tensor<T> gla_backward(const Tensor<T>& x, const GlaParams<T>& p,
                       const GlaCache<T>& cache, const Tensor<T>& dy,
                       AttnMode mode, const BlockConfig& cfg,
                       GlaGrads<T>& grads, std::size_t pos_offset = 0,
                       int threads = 1) {
  const std::size_t n = x.rows();
  const std::size_t hd = p.head_dim();

  matmul_tn_into(grads.wo, cache.gated, dy, true);
  Tensor<T> dgated = matmul_nt(dy, p.wo);

  Tensor<T> dnormed, dzu;
  if (p.use_gate) {
    dnormed = mul(dgated, cache.zu);
    dzu = mul(dgated, cache.normed);
  } else {
    dnormed = std::move(dgated);
  }

  Tensor<T> dattn = srmsnorm_backward(cache.attn_out, dnormed, p.eps,
                                      p.per_head_norm ? hd : std::size_t(0));

  Tensor<T> dqr({n, p.inner_dim()});
  Tensor<T> dkr({n, p.inner_dim()});
  Tensor<T> dzv({n, p.inner_dim()});
  for (int h = 0; h < p.heads; ++h) {
    const std::size_t c0 = static_cast<std::size_t>(h) * hd;
    const double lambda = p.lambdas[static_cast<std::size_t>(h)];
    Tensor<T> qh = slice_cols(cache.qr, c0, hd);
    Tensor<T> kh = slice_cols(cache.kr, c0, hd);
    Tensor<T> vh = slice_cols(cache.zv, c0, hd);
    Tensor<T> doh = slice_cols(dattn, c0, hd);
    AttentionGrads<T> ag;
    if (mode == AttnMode::Lightning) {
      ag = lightning_backward(qh, kh, vh, doh, lambda, cfg, nullptr, threads);
    } else {
      Tensor<T> mask = build_decay_mask<T>(n, lambda);
      ag = reference_backward(qh, kh, vh, mask, doh);
    }
    // rotation backward; theta gradient lands in the head's row (row 0 when
    // shared)
    Tensor<T> th = p.theta_for_head(h);
    const std::size_t trow = p.theta.rows() == 1 ? 0 : static_cast<std::size_t>(h);
    Tensor<T> dth({p.theta.cols()});
    Tensor<T> dqh = lrpe_backward(qh, th, pos_offset, ag.dq, dth);
    Tensor<T> dkh = lrpe_backward(kh, th, pos_offset, ag.dk, dth);
    for (std::size_t i = 0; i < dth.size(); ++i)
      grads.theta(trow, i) += dth[i];
    paste_cols(dqr, dqh, c0);
    paste_cols(dkr, dkh, c0);
    paste_cols(dzv, ag.dv, c0);
  }

  Tensor<T> dzq = activation_backward(cache.zq, dqr, p.act);
  Tensor<T> dzk = activation_backward(cache.zk, dkr, p.act);

  matmul_tn_into(grads.wq, x, dzq, true);
  matmul_tn_into(grads.wk, x, dzk, true);
  matmul_tn_into(grads.wv, x, dzv, true);
  Tensor<T> dx(x.shape());
  matmul_nt_into(dx, dzq, p.wq, true);
  matmul_nt_into(dx, dzk, p.wk, true);
  matmul_nt_into(dx, dzv, p.wv, true);
  if (p.use_gate) {
    matmul_tn_into(grads.wu, x, dzu, true);
    matmul_nt_into(dx, dzu, p.wu, true);
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Pre-norm residual block:
//   X <- X + GLA(Norm(X));  X <- X + SGLU(Norm(X))
// ---------------------------------------------------------------------------

template <typename T>
struct BlockParams {
  NormParams<T> norm_gla, norm_sglu;
  GlaParams<T> gla;
  SgluParams<T> sglu;
};

template <typename T>
struct BlockCache {
  Tensor<T> x_in;  // filled by callers that need the block input later
  Tensor<T> xn1;
  GlaCache<T> gla;
  Tensor<T> x_mid;
  Tensor<T> xn2;
  SgluCache<T> sglu;
};

template <typename T>
struct BlockGrads {
  NormGrads<T> norm_gla, norm_sglu;
  GlaGrads<T> gla;
  SgluGrads<T> sglu;
};

template <typename T>
Tensor<T> block_forward_cached(const Tensor<T>& x, const BlockParams<T>& p,
                               AttnMode mode, const BlockConfig& cfg,
                               BlockCache<T>* cache, std::size_t pos_offset = 0,
                               KernelStats* stats = nullptr, int threads = 1) {
  Tensor<T> xn1 = norm_forward(x, p.norm_gla);
  Tensor<T> y1 = gla_forward_cached(xn1, p.gla, mode, cfg,
                                    cache ? &cache->gla : nullptr, pos_offset,
                                    stats, threads);
  Tensor<T> x_mid = add(x, y1);
  Tensor<T> xn2 = norm_forward(x_mid, p.norm_sglu);
  Tensor<T> y2 = sglu_forward_cached(xn2, p.sglu,
                                     cache ? &cache->sglu : nullptr);
  Tensor<T> out = add(x_mid, y2);
  if (cache) {
    cache->xn1 = std::move(xn1);
    cache->x_mid = std::move(x_mid);
    cache->xn2 = std::move(xn2);
  }
  return out;
}

template <typename T>
Tensor<T> block_forward(const Tensor<T>& x, const BlockParams<T>& p,
                        AttnMode mode, const BlockConfig& cfg = {},
                        std::size_t pos_offset = 0) {
  return block_forward_cached(x, p, mode, cfg,
                              static_cast<BlockCache<T>*>(nullptr), pos_offset);
}

// Returns dX given the cotangent of the block output; x is the block input.
template <typename T>
Tensor<T> block_backward(const Tensor<T>& x, const BlockParams<T>& p,
                         const BlockCache<T>& cache, const Tensor<T>& dy,
                         AttnMode mode, const BlockConfig& cfg,
                         BlockGrads<T>& grads, std::size_t pos_offset = 0,
                         int threads = 1) {
  // second residual: out = x_mid + sglu(xn2)
  Tensor<T> dxn2 = sglu_backward(cache.xn2, p.sglu, cache.sglu, dy, grads.sglu);
  Tensor<T> dx_mid =
      norm_backward(cache.x_mid, dxn2, p.norm_sglu, &grads.norm_sglu);
  add_inplace(dx_mid, dy);
  // first residual: x_mid = x + gla(xn1)
  Tensor<T> dxn1 = gla_backward(cache.xn1, p.gla, cache.gla, dx_mid, mode, cfg,
                                grads.gla, pos_offset, threads);
  Tensor<T> dx = norm_backward(x, dxn1, p.norm_gla, &grads.norm_gla);
  add_inplace(dx, dx_mid);
  return dx;
}

}  // namespace linattn
