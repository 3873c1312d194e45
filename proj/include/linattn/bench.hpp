#pragma once

// Benchmark workloads behind the CLI: blocked-vs-naive attention sweeps, a
// masked-softmax competitor, constant-memory decode timing against a growing
// KV cache, and norm micro-benchmarks. Memory is reported from the internal
// allocation counters, not OS statistics, so runs are deterministic apart
// from wall time.

#include <algorithm>
#include <chrono>
#include <sstream>
#include <string>
#include <vector>

#include "linattn/attention.hpp"
#include "linattn/inference.hpp"
#include "linattn/model.hpp"

namespace linattn {

struct BenchSpec {
  std::string workload = "attn_fwd_bwd";
  std::vector<std::size_t> seq_lens = {256, 512, 1024};
  std::size_t dim = 64;
  std::size_t tile_rows = 64;
  std::size_t tile_cols = 64;
  int reps = 5;  // at least 3; the median is reported
  int warmup = 1;
  Dtype dtype = Dtype::F32;
  double lambda = 0.9;
  int threads = 1;
  std::uint64_t seed = 42;
  std::vector<std::string> impls;  // empty selects every impl of the workload

  void validate() const {
    if (reps < 3) throw std::invalid_argument("bench: repetitions must be >= 3");
    if (seq_lens.empty())
      throw std::invalid_argument("bench: need at least one sequence length");
    if (workload != "attn_fwd_bwd" && workload != "inference_decode" &&
        workload != "srmsnorm")
      throw std::invalid_argument("bench: unknown workload " + workload);
  }
};

struct BenchRow {
  std::string workload;
  std::size_t n = 0, d = 0, tile_r = 0, tile_c = 0;
  std::string impl;
  double median_ms = 0;
  std::uint64_t peak_bytes = 0;
  std::uint64_t tiles_computed = 0;
  bool oom = false;
};

inline const char* bench_csv_header() {
  return "workload,n,d,tile_r,tile_c,impl,median_ms,peak_bytes,tiles_computed";
}

inline std::string to_csv(const BenchRow& r) {
  std::ostringstream os;
  os << r.workload << "," << r.n << "," << r.d << "," << r.tile_r << ","
     << r.tile_c << "," << r.impl << ",";
  if (r.oom)
    os << "oom,oom,oom";
  else
    os << r.median_ms << "," << r.peak_bytes << "," << r.tiles_computed;
  return os.str();
}

namespace bench_detail {

using Clock = std::chrono::steady_clock;

inline double ms_since(Clock::time_point start) {
  return std::chrono::duration<double, std::milli>(Clock::now() - start)
      .count();
}

inline double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

// Masked softmax attention, forward + analytic backward. Benchmark
// competitor only.
template <typename T>
void softmax_attention_fwd_bwd(const Tensor<T>& q, const Tensor<T>& k,
                               const Tensor<T>& v, const Tensor<T>& grad_out) {
  const std::size_t n = q.rows();
  const std::size_t d = q.cols();
  const T scale = T(1) / std::sqrt(static_cast<T>(d));
  Tensor<T> a = matmul_nt(q, k);
  for (std::size_t s = 0; s < n; ++s) {
    T* row = a.data() + s * n;
    T maxv = -std::numeric_limits<T>::infinity();
    for (std::size_t t = 0; t <= s; ++t) maxv = std::max(maxv, row[t] * scale);
    T sum = 0;
    for (std::size_t t = 0; t <= s; ++t) {
      row[t] = std::exp(row[t] * scale - maxv);
      sum += row[t];
    }
    for (std::size_t t = 0; t <= s; ++t) row[t] /= sum;
    for (std::size_t t = s + 1; t < n; ++t) row[t] = 0;
  }
  Tensor<T> out = matmul(a, v);
  // backward
  Tensor<T> dv = matmul_tn(a, grad_out);
  Tensor<T> da = matmul_nt(grad_out, v);
  for (std::size_t s = 0; s < n; ++s) {
    const T* arow = a.data() + s * n;
    T* drow = da.data() + s * n;
    T dot = 0;
    for (std::size_t t = 0; t < n; ++t) dot += arow[t] * drow[t];
    for (std::size_t t = 0; t < n; ++t)
      drow[t] = arow[t] * (drow[t] - dot) * scale;
  }
  Tensor<T> dq = matmul(da, k);
  Tensor<T> dk = matmul_tn(da, q);
  (void)out;
  (void)dv;
  (void)dq;
  (void)dk;
}

template <typename T>
BenchRow run_attn_impl(const BenchSpec& spec, std::size_t n,
                       const std::string& impl) {
  BenchRow row;
  row.workload = spec.workload;
  row.n = n;
  row.d = spec.dim;
  row.impl = impl;
  if (impl == "lightning") {
    row.tile_r = spec.tile_rows;
    row.tile_c = spec.tile_cols;
  }
  try {
    Rng rng(spec.seed + n);
    Tensor<T> q({n, spec.dim}), k({n, spec.dim}), v({n, spec.dim}),
        grad_out({n, spec.dim});
    rng.fill_normal(q, 0, 0.5);
    rng.fill_normal(k, 0, 0.5);
    rng.fill_normal(v, 0, 0.5);
    rng.fill_normal(grad_out, 0, 0.5);
    const BlockConfig cfg{spec.tile_rows, spec.tile_cols, true};

    std::vector<double> times;
    std::uint64_t peak = 0, tiles = 0;
    for (int rep = 0; rep < spec.reps + spec.warmup; ++rep) {
      const auto baseline = alloc_stats().current_bytes;
      reset_alloc_peak();
      KernelStats stats;
      const auto start = Clock::now();
      if (impl == "lightning") {
        Tensor<T> o = lightning_forward(q, k, v, spec.lambda, cfg, &stats,
                                        spec.threads);
        AttentionGrads<T> g = lightning_backward(q, k, v, grad_out,
                                                 spec.lambda, cfg, &stats,
                                                 spec.threads);
      } else if (impl == "naive") {
        Tensor<T> mask = build_decay_mask<T>(n, spec.lambda);
        Tensor<T> o = reference_forward(q, k, v, mask);
        AttentionGrads<T> g = reference_backward(q, k, v, mask, grad_out);
      } else if (impl == "softmax") {
        softmax_attention_fwd_bwd(q, k, v, grad_out);
      } else {
        throw std::invalid_argument("bench: unknown attention impl " + impl);
      }
      const double ms = ms_since(start);
      if (rep >= spec.warmup) {
        times.push_back(ms);
        peak = std::max(peak, alloc_stats().peak_bytes - baseline);
        tiles = std::max(tiles, stats.tiles_computed);
      }
    }
    row.median_ms = median(times);
    row.peak_bytes = peak;
    row.tiles_computed = tiles;
  } catch (const std::bad_alloc&) {
    row.oom = true;
  }
  return row;
}

// Per-token decode timing on a tiny model. For each requested t the median
// per-token time over a trailing window is reported, plus the state bytes at
// that point.
template <typename T>
std::vector<BenchRow> run_decode_impl(const BenchSpec& spec,
                                      const std::string& impl) {
  ModelConfig cfg;
  cfg.layers = 2;
  cfg.dim = static_cast<int>(spec.dim);
  cfg.heads = cfg.dim >= 16 ? 4 : 2;
  cfg.vocab = kByteVocab;
  cfg.seed = spec.seed;
  Model<T> model = init_model<T>(cfg);

  const std::size_t max_t =
      *std::max_element(spec.seq_lens.begin(), spec.seq_lens.end());
  std::vector<double> per_token(max_t, 0.0);
  std::vector<std::uint64_t> state_at(max_t, 0);
  Rng rng(spec.seed);

  if (impl == "recurrent") {
    DecoderSession<T> session(model, InferAlgo::Robust);
    // warmup outside the measured range
    for (int w = 0; w < 8; ++w) session.step(static_cast<int>(w % 250));
    DecoderSession<T> fresh(model, InferAlgo::Robust);
    for (std::size_t t = 0; t < max_t; ++t) {
      const int tok = static_cast<int>(rng.next_u64() % 250);
      const auto start = Clock::now();
      fresh.step(tok);
      per_token[t] = ms_since(start);
      state_at[t] = fresh.state_bytes();
    }
  } else if (impl == "kv_softmax") {
    // growing-cache softmax decoding at matched head shape
    const std::size_t hd = static_cast<std::size_t>(cfg.dim / cfg.heads);
    const std::size_t layers = static_cast<std::size_t>(cfg.layers);
    const std::size_t heads = static_cast<std::size_t>(cfg.heads);
    std::vector<std::vector<T>> kcache(layers * heads), vcache(layers * heads);
    Rng gen(spec.seed + 1);
    for (std::size_t t = 0; t < max_t; ++t) {
      const auto start = Clock::now();
      std::uint64_t bytes = 0;
      for (std::size_t lh = 0; lh < layers * heads; ++lh) {
        auto& kc = kcache[lh];
        auto& vc = vcache[lh];
        for (std::size_t c = 0; c < hd; ++c) {
          kc.push_back(static_cast<T>(gen.uniform(-1, 1)));
          vc.push_back(static_cast<T>(gen.uniform(-1, 1)));
        }
        const std::size_t len = t + 1;
        // o = softmax(q K^T / sqrt(hd)) V over the cache
        std::vector<T> q(hd), scores(len), o(hd, T(0));
        for (std::size_t c = 0; c < hd; ++c)
          q[c] = static_cast<T>(gen.uniform(-1, 1));
        T maxv = -std::numeric_limits<T>::infinity();
        for (std::size_t u = 0; u < len; ++u) {
          T dot = 0;
          for (std::size_t c = 0; c < hd; ++c) dot += q[c] * kc[u * hd + c];
          scores[u] = dot / std::sqrt(static_cast<T>(hd));
          maxv = std::max(maxv, scores[u]);
        }
        T sum = 0;
        for (std::size_t u = 0; u < len; ++u) {
          scores[u] = std::exp(scores[u] - maxv);
          sum += scores[u];
        }
        for (std::size_t u = 0; u < len; ++u)
          for (std::size_t c = 0; c < hd; ++c)
            o[c] += scores[u] / sum * vc[u * hd + c];
        bytes += 2 * len * hd * sizeof(T);
      }
      per_token[t] = ms_since(start);
      state_at[t] = bytes;
    }
  } else {
    throw std::invalid_argument("bench: unknown decode impl " + impl);
  }

  std::vector<BenchRow> rows;
  for (std::size_t n : spec.seq_lens) {
    BenchRow row;
    row.workload = spec.workload;
    row.n = n;
    row.d = spec.dim;
    row.impl = impl;
    const std::size_t hi = std::min(n, max_t);
    const std::size_t window = std::max<std::size_t>(8, hi / 8);
    const std::size_t lo = hi > window ? hi - window : 0;
    std::vector<double> times(per_token.begin() + lo, per_token.begin() + hi);
    row.median_ms = median(times);
    row.peak_bytes = state_at[hi - 1];
    rows.push_back(row);
  }
  return rows;
}

template <typename T>
BenchRow run_norm_impl(const BenchSpec& spec, std::size_t n,
                       const std::string& impl) {
  BenchRow row;
  row.workload = spec.workload;
  row.n = n;
  row.d = spec.dim;
  row.impl = impl;
  Rng rng(spec.seed + n);
  Tensor<T> x({n, spec.dim});
  rng.fill_normal(x);
  NormParams<T> p = NormParams<T>::make(parse_norm(impl), spec.dim);
  std::vector<double> times;
  std::uint64_t peak = 0;
  for (int rep = 0; rep < spec.reps + spec.warmup; ++rep) {
    const auto baseline = alloc_stats().current_bytes;
    reset_alloc_peak();
    const auto start = Clock::now();
    Tensor<T> y = norm_forward(x, p);
    const double ms = ms_since(start);
    if (rep >= spec.warmup) {
      times.push_back(ms);
      peak = std::max(peak, alloc_stats().peak_bytes - baseline);
    }
  }
  row.median_ms = median(times);
  row.peak_bytes = peak;
  return row;
}

template <typename T>
std::vector<BenchRow> run_bench_typed(const BenchSpec& spec) {
  std::vector<BenchRow> rows;
  std::vector<std::string> impls = spec.impls;
  if (spec.workload == "attn_fwd_bwd") {
    if (impls.empty()) impls = {"lightning", "naive", "softmax"};
    for (std::size_t n : spec.seq_lens)
      for (const auto& impl : impls)
        rows.push_back(run_attn_impl<T>(spec, n, impl));
  } else if (spec.workload == "inference_decode") {
    if (impls.empty()) impls = {"recurrent", "kv_softmax"};
    for (const auto& impl : impls) {
      auto sub = run_decode_impl<T>(spec, impl);
      rows.insert(rows.end(), sub.begin(), sub.end());
    }
  } else {
    if (impls.empty()) impls = {"srmsnorm", "rmsnorm", "layernorm"};
    for (std::size_t n : spec.seq_lens)
      for (const auto& impl : impls)
        rows.push_back(run_norm_impl<T>(spec, n, impl));
  }
  return rows;
}

}  // namespace bench_detail

inline std::vector<BenchRow> run_bench(const BenchSpec& spec) {
  spec.validate();
  if (spec.dtype == Dtype::F32)
    return bench_detail::run_bench_typed<float>(spec);
  return bench_detail::run_bench_typed<double>(spec);
}

}  // namespace linattn
