#pragma once

// Masked linear attention O = (Q K^T . M) V in three forms: the quadratic
// reference (keeps the full n x n intermediate; serves as the oracle), the
// non-causal right-product form Q (K^T V), and the blocked IO-aware kernel
// with analytic gradients. The blocked paths never materialize the mask;
// tiles of it are generated on the fly from the decay rate.

#include <atomic>
#include <cstring>

#include "linattn/positional.hpp"
#include "linattn/tensor.hpp"

namespace linattn {

struct BlockConfig {
  std::size_t rows = 64;  // row tile size
  std::size_t cols = 64;  // column tile size
  // Skip tiles strictly above the diagonal (their mask is all zero). Off only
  // for instrumentation comparisons.
  bool skip_upper_tiles = true;
};

struct KernelStats {
  std::uint64_t tiles_computed = 0;
  std::uint64_t bytes_staged = 0;
  std::uint64_t peak_scratch_bytes = 0;

  void reset() { *this = KernelStats{}; }
  void merge(const KernelStats& o) {
    tiles_computed += o.tiles_computed;
    bytes_staged += o.bytes_staged;
    peak_scratch_bytes += o.peak_scratch_bytes;
  }
};

template <typename T>
struct AttentionGrads {
  Tensor<T> dq, dk, dv;
};

namespace detail {

// Fault injection used by the verify CLI to prove the gradient checker can
// catch a broken kernel. Never set in library code.
inline std::atomic<bool> g_fault_dk_sign{false};

template <typename T>
void check_qkv(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v) {
  q.require_rank(2);
  if (!q.same_shape(k)) shape_fail("attention(q,k)", q.shape(), k.shape());
  if (!q.same_shape(v)) shape_fail("attention(q,v)", q.shape(), v.shape());
}

template <typename T>
std::size_t stage_rows(Tensor<T>& tile, const Tensor<T>& src, std::size_t row0,
                       std::size_t nrows) {
  const std::size_t d = src.cols();
  std::memcpy(tile.data(), src.data() + row0 * d, nrows * d * sizeof(T));
  return nrows * d * sizeof(T);
}

template <typename T>
std::size_t store_rows(Tensor<T>& dst, const Tensor<T>& tile, std::size_t row0,
                       std::size_t nrows) {
  const std::size_t d = dst.cols();
  std::memcpy(dst.data() + row0 * d, tile.data(), nrows * d * sizeof(T));
  return nrows * d * sizeof(T);
}

// Multiplies the packed br x bc score tile by the decay-causal mask block
// whose top-left corner sits at (row0, col0) of the full matrix.
template <typename T>
void mask_tile(T* a, std::size_t br, std::size_t bc, std::size_t row0,
               std::size_t col0, double log_lambda) {
  for (std::size_t r = 0; r < br; ++r) {
    const std::size_t s = row0 + r;
    T* arow = a + r * bc;
    for (std::size_t c = 0; c < bc; ++c) {
      const std::size_t t = col0 + c;
      if (s < t)
        arow[c] = T(0);
      else
        arow[c] *= decay_weight<T>(static_cast<std::ptrdiff_t>(s - t),
                                   log_lambda);
    }
  }
}

inline void check_block_config(const BlockConfig& cfg) {
  if (cfg.rows == 0 || cfg.cols == 0)
    throw std::invalid_argument("BlockConfig: tile sizes must be >= 1");
}

// True when every mask entry of the tile underflows to exactly zero in T, in
// which case the tile contributes nothing and can be skipped bit-exactly.
template <typename T>
bool tile_decayed_to_zero(std::size_t row0, std::size_t col0, std::size_t bc,
                          double log_lambda) {
  if (log_lambda == 0.0) return false;
  const std::ptrdiff_t min_dist = static_cast<std::ptrdiff_t>(row0) -
                                  static_cast<std::ptrdiff_t>(col0 + bc - 1);
  return min_dist > 0 && decay_weight<T>(min_dist, log_lambda) == T(0);
}

}  // namespace detail

inline void set_fault_dk_sign(bool on) { detail::g_fault_dk_sign.store(on); }

// ---------------------------------------------------------------------------
// Reference paths
// ---------------------------------------------------------------------------

// O = (Q K^T . M) V with the full n x n intermediate. Oracle for the blocked
// kernel.
template <typename T>
Tensor<T> reference_forward(const Tensor<T>& q, const Tensor<T>& k,
                            const Tensor<T>& v, const Tensor<T>& mask) {
  detail::check_qkv(q, k, v);
  mask.require_rank(2);
  if (mask.rows() != q.rows() || mask.cols() != q.rows())
    shape_fail("attention(mask)", mask.shape(), {q.rows(), q.rows()});
  Tensor<T> scores = matmul_nt(q, k);
  mul_inplace(scores, mask);
  return matmul(scores, v);
}

// Unblocked analytic gradients of the reference form.
template <typename T>
AttentionGrads<T> reference_backward(const Tensor<T>& q, const Tensor<T>& k,
                                     const Tensor<T>& v, const Tensor<T>& mask,
                                     const Tensor<T>& grad_out) {
  detail::check_qkv(q, k, v);
  detail::require_same_shape("attention(dO)", q, grad_out);
  Tensor<T> a = matmul_nt(q, k);
  mul_inplace(a, mask);
  Tensor<T> da = matmul_nt(grad_out, v);
  mul_inplace(da, mask);
  AttentionGrads<T> g;
  g.dv = matmul_tn(a, grad_out);
  g.dq = matmul(da, k);
  g.dk = matmul_tn(da, q);
  return g;
}

// Non-causal linear form Q (K^T V); O(n d^2).
template <typename T>
Tensor<T> right_product_forward(const Tensor<T>& q, const Tensor<T>& k,
                                const Tensor<T>& v) {
  detail::check_qkv(q, k, v);
  Tensor<T> kv = matmul_tn(k, v);
  return matmul(q, kv);
}

// ---------------------------------------------------------------------------
// Blocked kernel, forward
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> lightning_forward(const Tensor<T>& q, const Tensor<T>& k,
                            const Tensor<T>& v, double lambda,
                            const BlockConfig& cfg,
                            KernelStats* stats = nullptr, int threads = 1) {
  detail::check_qkv(q, k, v);
  detail::check_block_config(cfg);
  const double log_lambda = detail::checked_log_lambda(lambda);
  const std::size_t n = q.rows();
  const std::size_t d = q.cols();
  if (n == 0) return Tensor<T>({0, d});
  const std::size_t br_max = std::min(cfg.rows, n);
  const std::size_t bc_max = std::min(cfg.cols, n);
  const std::size_t num_row_tiles = (n + br_max - 1) / br_max;
  const std::size_t num_col_tiles = (n + bc_max - 1) / bc_max;

  Tensor<T> out({n, d});
  std::vector<KernelStats> local(std::max(1, threads));

  parallel_chunks(threads, num_row_tiles, [&](std::size_t tile_begin,
                                              std::size_t tile_end, int tid) {
    KernelStats& st = local[static_cast<std::size_t>(tid)];
    Tensor<T> qs({br_max, d});
    Tensor<T> ks({bc_max, d});
    Tensor<T> vs({bc_max, d});
    Tensor<T> as({br_max, bc_max});
    Tensor<T> os({br_max, d});
    st.peak_scratch_bytes =
        qs.bytes() + ks.bytes() + vs.bytes() + as.bytes() + os.bytes();

    for (std::size_t i = tile_begin; i < tile_end; ++i) {
      const std::size_t i0 = i * br_max;
      const std::size_t br = std::min(br_max, n - i0);
      st.bytes_staged += detail::stage_rows(qs, q, i0, br);
      std::fill_n(os.data(), br * d, T(0));
      for (std::size_t j = 0; j < num_col_tiles; ++j) {
        const std::size_t j0 = j * bc_max;
        const std::size_t bc = std::min(bc_max, n - j0);
        if (cfg.skip_upper_tiles && j0 > i0 + br - 1) break;
        if (detail::tile_decayed_to_zero<T>(i0, j0, bc, log_lambda)) continue;
        st.bytes_staged += detail::stage_rows(ks, k, j0, bc);
        st.bytes_staged += detail::stage_rows(vs, v, j0, bc);
        detail::gemm_nt(as.data(), qs.data(), ks.data(), br, d, bc, false);
        detail::mask_tile(as.data(), br, bc, i0, j0, log_lambda);
        detail::gemm_nn(os.data(), as.data(), vs.data(), br, bc, d, true);
        ++st.tiles_computed;
      }
      st.bytes_staged += detail::store_rows(out, os, i0, br);
    }
  });

  if (stats)
    for (const auto& st : local) stats->merge(st);
  return out;
}

// ---------------------------------------------------------------------------
// Blocked kernel, backward. Analytic gradients of O = (Q K^T . M) V:
//   A  = (Q K^T) . M        dV = A^T dO
//   dA = (dO V^T) . M       dQ = dA K     dK = dA^T Q
// computed with the same tiling discipline as the forward pass (outer loop
// over column tiles, dK/dV accumulated on scratch, dQ read-modify-write).
// ---------------------------------------------------------------------------

template <typename T>
AttentionGrads<T> lightning_backward(const Tensor<T>& q, const Tensor<T>& k,
                                     const Tensor<T>& v,
                                     const Tensor<T>& grad_out, double lambda,
                                     const BlockConfig& cfg,
                                     KernelStats* stats = nullptr,
                                     int threads = 1) {
  detail::check_qkv(q, k, v);
  detail::require_same_shape("attention(dO)", q, grad_out);
  detail::check_block_config(cfg);
  const double log_lambda = detail::checked_log_lambda(lambda);
  const std::size_t n = q.rows();
  const std::size_t d = q.cols();
  if (n == 0)
    return {Tensor<T>({0, d}), Tensor<T>({0, d}), Tensor<T>({0, d})};
  const std::size_t br_max = std::min(cfg.rows, n);
  const std::size_t bc_max = std::min(cfg.cols, n);
  const std::size_t num_row_tiles = (n + br_max - 1) / br_max;
  const std::size_t num_col_tiles = (n + bc_max - 1) / bc_max;

  AttentionGrads<T> g{Tensor<T>({n, d}), Tensor<T>({n, d}), Tensor<T>({n, d})};
  const int max_threads =
      std::max(1, std::min<int>(threads, static_cast<int>(num_col_tiles)));
  std::vector<KernelStats> local(static_cast<std::size_t>(max_threads));
  // Column tiles are independent except for the dQ accumulation; each worker
  // accumulates into its own buffer and the partials are reduced in fixed
  // order afterwards.
  std::vector<Tensor<T>> dq_partial;
  for (int t = 0; t < max_threads; ++t)
    dq_partial.emplace_back(Shape{n, d});

  parallel_chunks(max_threads, num_col_tiles, [&](std::size_t tile_begin,
                                                  std::size_t tile_end,
                                                  int tid) {
    KernelStats& st = local[static_cast<std::size_t>(tid)];
    Tensor<T>& dq = dq_partial[static_cast<std::size_t>(tid)];
    Tensor<T> ks({bc_max, d});
    Tensor<T> vs({bc_max, d});
    Tensor<T> dks({bc_max, d});
    Tensor<T> dvs({bc_max, d});
    Tensor<T> qs({br_max, d});
    Tensor<T> dos({br_max, d});
    Tensor<T> as({br_max, bc_max});
    Tensor<T> das({br_max, bc_max});
    st.peak_scratch_bytes = ks.bytes() + vs.bytes() + dks.bytes() +
                            dvs.bytes() + qs.bytes() + dos.bytes() +
                            as.bytes() + das.bytes();

    for (std::size_t j = tile_begin; j < tile_end; ++j) {
      const std::size_t j0 = j * bc_max;
      const std::size_t bc = std::min(bc_max, n - j0);
      st.bytes_staged += detail::stage_rows(ks, k, j0, bc);
      st.bytes_staged += detail::stage_rows(vs, v, j0, bc);
      std::fill_n(dks.data(), bc * d, T(0));
      std::fill_n(dvs.data(), bc * d, T(0));
      for (std::size_t i = 0; i < num_row_tiles; ++i) {
        const std::size_t i0 = i * br_max;
        const std::size_t br = std::min(br_max, n - i0);
        if (cfg.skip_upper_tiles && i0 + br - 1 < j0) continue;
        // Distances only grow with i; once the decay underflows it stays zero.
        if (detail::tile_decayed_to_zero<T>(i0, j0, bc, log_lambda)) break;
        st.bytes_staged += detail::stage_rows(qs, q, i0, br);
        st.bytes_staged += detail::stage_rows(dos, grad_out, i0, br);
        detail::gemm_nt(as.data(), qs.data(), ks.data(), br, d, bc, false);
        detail::mask_tile(as.data(), br, bc, i0, j0, log_lambda);
        detail::gemm_tn(dvs.data(), as.data(), dos.data(), bc, br, d, true);
        detail::gemm_nt(das.data(), dos.data(), vs.data(), br, d, bc, false);
        detail::mask_tile(das.data(), br, bc, i0, j0, log_lambda);
        detail::gemm_tn(dks.data(), das.data(), qs.data(), bc, br, d, true);
        // dQ_i += dA_ij K_j, read-modify-write on the accumulation buffer
        detail::gemm_nn(dq.data() + i0 * d, das.data(), ks.data(), br, bc, d,
                        true);
        st.bytes_staged += 2 * br * d * sizeof(T);
        ++st.tiles_computed;
      }
      st.bytes_staged += detail::store_rows(g.dk, dks, j0, bc);
      st.bytes_staged += detail::store_rows(g.dv, dvs, j0, bc);
    }
  });

  g.dq = std::move(dq_partial[0]);
  for (int t = 1; t < max_threads; ++t)
    add_inplace(g.dq, dq_partial[static_cast<std::size_t>(t)]);
  if (stats)
    for (const auto& st : local) stats->merge(st);

  if (detail::g_fault_dk_sign.load()) scale_inplace(g.dk, T(-1));
  return g;
}

}  // namespace linattn
