#pragma once

// Single-process simulation of tensor model parallelism for the two mixer
// blocks: column splits on the input projections, row splits on the output
// projection, replicated activations, and a simulated all-reduce whose
// invocations and payload bytes are counted exactly. Workers run sequentially
// by default; the threaded mode adds a barrier at each collective and reduces
// partials in worker order, so both modes produce bitwise-identical results.

#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "linattn/blocks.hpp"
#include "linattn/tensor.hpp"

namespace linattn {

struct CollectiveLedger {
  std::uint64_t forward_allreduce = 0;
  std::uint64_t backward_allreduce = 0;
  std::uint64_t forward_bytes = 0;
  std::uint64_t backward_bytes = 0;

  void reset() { *this = CollectiveLedger{}; }

  std::string to_csv() const {
    std::ostringstream os;
    os << "pass,collective_type,count,bytes\n";
    os << "forward,all_reduce," << forward_allreduce << "," << forward_bytes
       << "\n";
    os << "backward,all_reduce," << backward_allreduce << ","
       << backward_bytes << "\n";
    return os.str();
  }
};

enum class Pass { Forward, Backward };

namespace detail {

// Sums per-worker partials in worker order; the result every worker would
// hold afterwards. Does not count as communication for a single worker.
template <typename T>
Tensor<T> allreduce_sum(std::vector<Tensor<T>>& partials,
                        CollectiveLedger& ledger, Pass pass) {
  Tensor<T> sum = std::move(partials[0]);
  for (std::size_t w = 1; w < partials.size(); ++w)
    add_inplace(sum, partials[w]);
  if (partials.size() > 1) {
    if (pass == Pass::Forward) {
      ledger.forward_allreduce += 1;
      ledger.forward_bytes += sum.bytes();
    } else {
      ledger.backward_allreduce += 1;
      ledger.backward_bytes += sum.bytes();
    }
  }
  return sum;
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& x, std::size_t row0, std::size_t nrows) {
  Tensor<T> out({nrows, x.cols()});
  std::memcpy(out.data(), x.data() + row0 * x.cols(),
              nrows * x.cols() * sizeof(T));
  return out;
}

// Runs fn(w) for every worker, optionally on separate threads with a join
// barrier before the caller reduces.
inline void run_workers(int world, bool threaded,
                        const std::function<void(int)>& fn) {
  if (!threaded || world <= 1) {
    for (int w = 0; w < world; ++w) fn(w);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(world));
  for (int w = 0; w < world; ++w) pool.emplace_back(fn, w);
  for (auto& t : pool) t.join();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// SGLU sharding: Wv, Wu split along columns, Wo along rows.
// ---------------------------------------------------------------------------

template <typename T>
struct ShardedSglu {
  std::vector<SgluParams<T>> workers;
  int world() const { return static_cast<int>(workers.size()); }
};

template <typename T>
ShardedSglu<T> shard_sglu(const SgluParams<T>& p, int world) {
  if (world < 1) throw std::invalid_argument("shard_sglu: world must be >= 1");
  const std::size_t hidden = p.wv.cols();
  if (hidden % static_cast<std::size_t>(world) != 0)
    throw std::invalid_argument(
        "shard_sglu: hidden dim " + std::to_string(hidden) +
        " not divisible by world size " + std::to_string(world));
  const std::size_t chunk = hidden / static_cast<std::size_t>(world);
  ShardedSglu<T> out;
  for (int w = 0; w < world; ++w) {
    SgluParams<T> s;
    s.gate_act = p.gate_act;
    s.wv = slice_cols(p.wv, static_cast<std::size_t>(w) * chunk, chunk);
    s.wu = slice_cols(p.wu, static_cast<std::size_t>(w) * chunk, chunk);
    s.wo = detail::slice_rows(p.wo, static_cast<std::size_t>(w) * chunk, chunk);
    out.workers.push_back(std::move(s));
  }
  return out;
}

// Concatenating the shards along the split axes must reconstruct the
// original weights exactly.
template <typename T>
SgluParams<T> unshard_sglu(const ShardedSglu<T>& s) {
  const std::size_t chunk = s.workers[0].wv.cols();
  const std::size_t hidden = chunk * s.workers.size();
  SgluParams<T> p;
  p.gate_act = s.workers[0].gate_act;
  p.wv = Tensor<T>({s.workers[0].wv.rows(), hidden});
  p.wu = Tensor<T>({s.workers[0].wu.rows(), hidden});
  p.wo = Tensor<T>({hidden, s.workers[0].wo.cols()});
  for (std::size_t w = 0; w < s.workers.size(); ++w) {
    paste_cols(p.wv, s.workers[w].wv, w * chunk);
    paste_cols(p.wu, s.workers[w].wu, w * chunk);
    std::memcpy(p.wo.data() + w * chunk * p.wo.cols(), s.workers[w].wo.data(),
                s.workers[w].wo.bytes());
  }
  return p;
}

template <typename T>
Tensor<T> sglu_parallel_forward_cached(const Tensor<T>& x,
                                       const ShardedSglu<T>& shards,
                                       CollectiveLedger& ledger,
                                       std::vector<SgluCache<T>>* caches,
                                       bool threaded = false) {
  const int world = shards.world();
  if (caches) caches->resize(static_cast<std::size_t>(world));
  std::vector<Tensor<T>> partials(static_cast<std::size_t>(world));
  detail::run_workers(world, threaded, [&](int w) {
    partials[static_cast<std::size_t>(w)] = sglu_forward_cached(
        x, shards.workers[static_cast<std::size_t>(w)],
        caches ? &(*caches)[static_cast<std::size_t>(w)] : nullptr);
  });
  return detail::allreduce_sum(partials, ledger, Pass::Forward);
}

template <typename T>
Tensor<T> sglu_parallel_forward(const Tensor<T>& x,
                                const ShardedSglu<T>& shards,
                                CollectiveLedger& ledger,
                                bool threaded = false) {
  return sglu_parallel_forward_cached(
      x, shards, ledger, static_cast<std::vector<SgluCache<T>>*>(nullptr),
      threaded);
}

// Per-worker weight gradients stay local (the weights are sharded); only the
// input gradient needs the one backward all-reduce.
template <typename T>
Tensor<T> sglu_parallel_backward(const Tensor<T>& x,
                                 const ShardedSglu<T>& shards,
                                 const std::vector<SgluCache<T>>& caches,
                                 const Tensor<T>& dy,
                                 std::vector<SgluGrads<T>>& grads,
                                 CollectiveLedger& ledger,
                                 bool threaded = false) {
  const int world = shards.world();
  std::vector<Tensor<T>> partials(static_cast<std::size_t>(world));
  detail::run_workers(world, threaded, [&](int w) {
    const auto wi = static_cast<std::size_t>(w);
    partials[wi] = sglu_backward(x, shards.workers[wi], caches[wi], dy,
                                 grads[wi]);
  });
  return detail::allreduce_sum(partials, ledger, Pass::Backward);
}

// ---------------------------------------------------------------------------
// GLA sharding: each worker owns whole heads (the combined QKVU projection is
// split along columns at head boundaries), plus the matching rows of Wo and
// its heads' rotation angles and decay rates. Merged-dim normalization cannot
// be computed worker-locally, so sharding requires per-head norm mode.
// ---------------------------------------------------------------------------

template <typename T>
struct ShardedGla {
  std::vector<GlaParams<T>> workers;
  int world() const { return static_cast<int>(workers.size()); }
};

template <typename T>
ShardedGla<T> shard_gla(const GlaParams<T>& p, int world) {
  p.validate();
  if (world < 1) throw std::invalid_argument("shard_gla: world must be >= 1");
  if (p.heads % world != 0)
    throw std::invalid_argument("shard_gla: " + std::to_string(p.heads) +
                                " heads not divisible by world size " +
                                std::to_string(world));
  if (!p.per_head_norm && world > 1)
    throw std::invalid_argument(
        "shard_gla: merged-dim normalization is not computable worker-locally;"
        " use per-head norm mode");
  if (p.theta.rows() == 1 && p.heads > 1 && world > 1)
    throw std::invalid_argument(
        "shard_gla: shared rotation angles cannot be split across workers");
  const std::size_t hd = p.head_dim();
  const int heads_per_worker = p.heads / world;
  const std::size_t chunk = static_cast<std::size_t>(heads_per_worker) * hd;
  ShardedGla<T> out;
  for (int w = 0; w < world; ++w) {
    const std::size_t c0 = static_cast<std::size_t>(w) * chunk;
    GlaParams<T> s;
    s.heads = heads_per_worker;
    s.act = p.act;
    s.use_gate = p.use_gate;
    s.per_head_norm = p.per_head_norm;
    s.eps = p.eps;
    s.wq = slice_cols(p.wq, c0, chunk);
    s.wk = slice_cols(p.wk, c0, chunk);
    s.wv = slice_cols(p.wv, c0, chunk);
    if (p.use_gate) s.wu = slice_cols(p.wu, c0, chunk);
    s.wo = detail::slice_rows(p.wo, c0, chunk);
    s.theta = detail::slice_rows(
        p.theta, static_cast<std::size_t>(w * heads_per_worker),
        static_cast<std::size_t>(heads_per_worker));
    s.lambdas.assign(
        p.lambdas.begin() + w * heads_per_worker,
        p.lambdas.begin() + (w + 1) * heads_per_worker);
    out.workers.push_back(std::move(s));
  }
  return out;
}

template <typename T>
GlaParams<T> unshard_gla(const ShardedGla<T>& s) {
  const auto& first = s.workers[0];
  const std::size_t chunk = first.wq.cols();
  const std::size_t dh = chunk * s.workers.size();
  GlaParams<T> p;
  p.heads = first.heads * static_cast<int>(s.workers.size());
  p.act = first.act;
  p.use_gate = first.use_gate;
  p.per_head_norm = first.per_head_norm;
  p.eps = first.eps;
  p.wq = Tensor<T>({first.wq.rows(), dh});
  p.wk = Tensor<T>({first.wk.rows(), dh});
  p.wv = Tensor<T>({first.wv.rows(), dh});
  if (first.use_gate) p.wu = Tensor<T>({first.wu.rows(), dh});
  p.wo = Tensor<T>({dh, first.wo.cols()});
  p.theta = Tensor<T>({static_cast<std::size_t>(p.heads), first.theta.cols()});
  for (std::size_t w = 0; w < s.workers.size(); ++w) {
    const auto& sw = s.workers[w];
    paste_cols(p.wq, sw.wq, w * chunk);
    paste_cols(p.wk, sw.wk, w * chunk);
    paste_cols(p.wv, sw.wv, w * chunk);
    if (first.use_gate) paste_cols(p.wu, sw.wu, w * chunk);
    std::memcpy(p.wo.data() + w * chunk * p.wo.cols(), sw.wo.data(),
                sw.wo.bytes());
    std::memcpy(p.theta.data() +
                    w * static_cast<std::size_t>(first.heads) * p.theta.cols(),
                sw.theta.data(), sw.theta.bytes());
    p.lambdas.insert(p.lambdas.end(), sw.lambdas.begin(), sw.lambdas.end());
  }
  return p;
}

template <typename T>
Tensor<T> gla_parallel_forward_cached(const Tensor<T>& x,
                                      const ShardedGla<T>& shards,
                                      AttnMode mode, const BlockConfig& cfg,
                                      CollectiveLedger& ledger,
                                      std::vector<GlaCache<T>>* caches,
                                      bool threaded = false) {
  const int world = shards.world();
  if (caches) caches->resize(static_cast<std::size_t>(world));
  std::vector<Tensor<T>> partials(static_cast<std::size_t>(world));
  detail::run_workers(world, threaded, [&](int w) {
    const auto wi = static_cast<std::size_t>(w);
    partials[wi] = gla_forward_cached(x, shards.workers[wi], mode, cfg,
                                      caches ? &(*caches)[wi] : nullptr);
  });
  return detail::allreduce_sum(partials, ledger, Pass::Forward);
}

template <typename T>
Tensor<T> gla_parallel_forward(const Tensor<T>& x, const ShardedGla<T>& shards,
                               AttnMode mode, const BlockConfig& cfg,
                               CollectiveLedger& ledger,
                               bool threaded = false) {
  return gla_parallel_forward_cached(
      x, shards, mode, cfg, ledger,
      static_cast<std::vector<GlaCache<T>>*>(nullptr), threaded);
}

template <typename T>
Tensor<T> gla_parallel_backward(const Tensor<T>& x, const ShardedGla<T>& shards,
                                const std::vector<GlaCache<T>>& caches,
                                const Tensor<T>& dy, AttnMode mode,
                                const BlockConfig& cfg,
                                std::vector<GlaGrads<T>>& grads,
                                CollectiveLedger& ledger,
                                bool threaded = false) {
  const int world = shards.world();
  std::vector<Tensor<T>> partials(static_cast<std::size_t>(world));
  detail::run_workers(world, threaded, [&](int w) {
    const auto wi = static_cast<std::size_t>(w);
    partials[wi] = gla_backward(x, shards.workers[wi], caches[wi], dy, mode,
                                cfg, grads[wi]);
  });
  return detail::allreduce_sum(partials, ledger, Pass::Backward);
}

// ---------------------------------------------------------------------------
// Memory accounting for the split parameters (replicated inputs excluded).
// ---------------------------------------------------------------------------

template <typename T>
std::size_t sglu_param_bytes(const SgluParams<T>& p) {
  return p.wv.bytes() + p.wu.bytes() + p.wo.bytes();
}

template <typename T>
std::size_t gla_param_bytes(const GlaParams<T>& p) {
  return p.wq.bytes() + p.wk.bytes() + p.wv.bytes() +
         (p.use_gate ? p.wu.bytes() : 0) + p.wo.bytes() + p.theta.bytes();
}

}  // namespace linattn
