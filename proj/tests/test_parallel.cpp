#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "linattn/oracle.hpp"
#include "linattn/parallel_sim.hpp"

using namespace linattn;

namespace {

SgluParams<double> make_sglu(std::size_t d, std::size_t e, std::uint64_t seed) {
  Rng rng(seed);
  SgluParams<double> p;
  p.wv = Tensor<double>({d, e});
  p.wu = Tensor<double>({d, e});
  p.wo = Tensor<double>({e, d});
  rng.fill_normal(p.wv, 0, 0.3);
  rng.fill_normal(p.wu, 0, 0.3);
  rng.fill_normal(p.wo, 0, 0.3);
  return p;
}

GlaParams<double> make_gla(std::size_t d, int heads, std::uint64_t seed,
                           bool per_head_norm = true) {
  Rng rng(seed);
  GlaParams<double> p;
  p.heads = heads;
  p.per_head_norm = per_head_norm;
  p.wq = Tensor<double>({d, d});
  p.wk = Tensor<double>({d, d});
  p.wv = Tensor<double>({d, d});
  p.wu = Tensor<double>({d, d});
  p.wo = Tensor<double>({d, d});
  rng.fill_normal(p.wq, 0, 0.3);
  rng.fill_normal(p.wk, 0, 0.3);
  rng.fill_normal(p.wv, 0, 0.3);
  rng.fill_normal(p.wu, 0, 0.3);
  rng.fill_normal(p.wo, 0, 0.3);
  const std::size_t hd = d / static_cast<std::size_t>(heads);
  p.theta = Tensor<double>({static_cast<std::size_t>(heads), hd / 2});
  rng.fill_uniform(p.theta, 0.0, 1.0);
  DecaySchedule sched{heads, 3, true};
  p.lambdas = sched.layer_rates(2);
  return p;
}

bool tensors_equal(const Tensor<double>& a, const Tensor<double>& b) {
  if (!a.same_shape(b)) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i] != b[i]) return false;
  return true;
}

}  // namespace

TEST_CASE("shard round trips reconstruct the weights bit-exactly") {
  for (int world : {1, 2, 4}) {
    SgluParams<double> p = make_sglu(8, 16, 1);
    ShardedSglu<double> s = shard_sglu(p, world);
    SgluParams<double> back = unshard_sglu(s);
    CHECK(tensors_equal(back.wv, p.wv));
    CHECK(tensors_equal(back.wu, p.wu));
    CHECK(tensors_equal(back.wo, p.wo));

    GlaParams<double> g = make_gla(8, 4, 2);
    ShardedGla<double> gs = shard_gla(g, world);
    GlaParams<double> gback = unshard_gla(gs);
    CHECK(tensors_equal(gback.wq, g.wq));
    CHECK(tensors_equal(gback.wk, g.wk));
    CHECK(tensors_equal(gback.wv, g.wv));
    CHECK(tensors_equal(gback.wu, g.wu));
    CHECK(tensors_equal(gback.wo, g.wo));
    CHECK(tensors_equal(gback.theta, g.theta));
    CHECK(gback.lambdas == g.lambdas);
  }
}

TEST_CASE("indivisible shapes are rejected") {
  SgluParams<double> p = make_sglu(8, 10, 3);
  CHECK_THROWS_AS(shard_sglu(p, 4), std::invalid_argument);
  GlaParams<double> g = make_gla(8, 4, 4);
  CHECK_THROWS_AS(shard_gla(g, 3), std::invalid_argument);
}

TEST_CASE("merged-dim norm under sharding is rejected with a clear error") {
  GlaParams<double> g = make_gla(8, 4, 5, /*per_head_norm=*/false);
  CHECK_THROWS_WITH_AS(shard_gla(g, 2), doctest::Contains("per-head"),
                       std::invalid_argument);
  // world size 1 is fine in any norm mode
  CHECK_NOTHROW(shard_gla(g, 1));
}

TEST_CASE("shared rotation angles cannot be split") {
  GlaParams<double> g = make_gla(8, 4, 6);
  Tensor<double> shared({1, g.theta.cols()});
  for (std::size_t i = 0; i < shared.size(); ++i) shared[i] = g.theta[i];
  g.theta = shared;
  CHECK_THROWS_AS(shard_gla(g, 2), std::invalid_argument);
}

TEST_CASE("sharded sglu forward equals the unsharded forward") {
  const std::size_t n = 6, d = 8, e = 16;
  Rng rng(7);
  Tensor<double> x({n, d});
  rng.fill_normal(x);
  SgluParams<double> p = make_sglu(d, e, 8);
  Tensor<double> want = sglu_forward(x, p);

  for (int world : {1, 2, 4}) {
    ShardedSglu<double> s = shard_sglu(p, world);
    CollectiveLedger ledger;
    Tensor<double> got = sglu_parallel_forward(x, s, ledger);
    if (world == 1) {
      CHECK(tensors_equal(got, want));
      CHECK(ledger.forward_allreduce == 0);
    } else {
      CHECK(oracle::max_rel_err(got, want) < 1e-10);
      CHECK(ledger.forward_allreduce == 1);
      CHECK(ledger.forward_bytes == got.bytes());
    }
  }
}

TEST_CASE("sharded gla forward equals the unsharded per-head-norm forward") {
  const std::size_t n = 10, d = 8;
  Rng rng(9);
  Tensor<double> x({n, d});
  rng.fill_normal(x);
  GlaParams<double> p = make_gla(d, 4, 10);
  const BlockConfig cfg{4, 4, true};
  Tensor<double> want = gla_forward(x, p, AttnMode::Lightning, cfg);

  for (int world : {1, 2, 4}) {
    ShardedGla<double> s = shard_gla(p, world);
    CollectiveLedger ledger;
    Tensor<double> got =
        gla_parallel_forward(x, s, AttnMode::Lightning, cfg, ledger);
    CHECK(oracle::max_rel_err(got, want) < 1e-6);
    CHECK(ledger.forward_allreduce == (world > 1 ? 1 : 0));
  }
}

TEST_CASE("backward needs exactly one all-reduce and matches unsharded grads") {
  const std::size_t n = 5, d = 8, e = 16;
  Rng rng(11);
  Tensor<double> x({n, d});
  rng.fill_normal(x);
  Tensor<double> dy({n, d});
  rng.fill_normal(dy);

  // SGLU
  SgluParams<double> p = make_sglu(d, e, 12);
  SgluCache<double> cache;
  sglu_forward_cached(x, p, &cache);
  SgluGrads<double> want{Tensor<double>(p.wv.shape()),
                         Tensor<double>(p.wu.shape()),
                         Tensor<double>(p.wo.shape())};
  Tensor<double> dx_want = sglu_backward(x, p, cache, dy, want);

  ShardedSglu<double> s = shard_sglu(p, 2);
  CollectiveLedger ledger;
  std::vector<SgluCache<double>> caches;
  sglu_parallel_forward_cached(x, s, ledger, &caches);
  std::vector<SgluGrads<double>> grads;
  for (const auto& w : s.workers)
    grads.push_back(SgluGrads<double>{Tensor<double>(w.wv.shape()),
                                      Tensor<double>(w.wu.shape()),
                                      Tensor<double>(w.wo.shape())});
  Tensor<double> dx = sglu_parallel_backward(x, s, caches, dy, grads, ledger);
  CHECK(ledger.backward_allreduce == 1);
  CHECK(oracle::max_rel_err(dx, dx_want) < 1e-10);
  // per-worker weight grads concatenate to the unsharded gradient
  ShardedSglu<double> grad_shards;
  for (std::size_t w = 0; w < grads.size(); ++w) {
    SgluParams<double> gp;
    gp.wv = grads[w].wv;
    gp.wu = grads[w].wu;
    gp.wo = grads[w].wo;
    grad_shards.workers.push_back(std::move(gp));
  }
  SgluParams<double> merged = unshard_sglu(grad_shards);
  CHECK(oracle::max_rel_err(merged.wv, want.wv) < 1e-10);
  CHECK(oracle::max_rel_err(merged.wu, want.wu) < 1e-10);
  CHECK(oracle::max_rel_err(merged.wo, want.wo) < 1e-10);

  // GLA
  GlaParams<double> g = make_gla(d, 4, 13);
  const BlockConfig cfg{3, 3, true};
  GlaCache<double> gcache;
  gla_forward_cached(x, g, AttnMode::Lightning, cfg, &gcache);
  GlaGrads<double> gwant;
  gwant.wq = Tensor<double>(g.wq.shape());
  gwant.wk = Tensor<double>(g.wk.shape());
  gwant.wv = Tensor<double>(g.wv.shape());
  gwant.wu = Tensor<double>(g.wu.shape());
  gwant.wo = Tensor<double>(g.wo.shape());
  gwant.theta = Tensor<double>(g.theta.shape());
  Tensor<double> gdx_want =
      gla_backward(x, g, gcache, dy, AttnMode::Lightning, cfg, gwant);

  ShardedGla<double> gs = shard_gla(g, 2);
  CollectiveLedger gledger;
  std::vector<GlaCache<double>> gcaches;
  gla_parallel_forward_cached(x, gs, AttnMode::Lightning, cfg, gledger,
                              &gcaches);
  std::vector<GlaGrads<double>> ggrads(2);
  for (std::size_t w = 0; w < 2; ++w) {
    ggrads[w].wq = Tensor<double>(gs.workers[w].wq.shape());
    ggrads[w].wk = Tensor<double>(gs.workers[w].wk.shape());
    ggrads[w].wv = Tensor<double>(gs.workers[w].wv.shape());
    ggrads[w].wu = Tensor<double>(gs.workers[w].wu.shape());
    ggrads[w].wo = Tensor<double>(gs.workers[w].wo.shape());
    ggrads[w].theta = Tensor<double>(gs.workers[w].theta.shape());
  }
  Tensor<double> gdx = gla_parallel_backward(x, gs, gcaches, dy,
                                             AttnMode::Lightning, cfg, ggrads,
                                             gledger);
  CHECK(gledger.backward_allreduce == 1);
  CHECK(oracle::max_rel_err(gdx, gdx_want) < 1e-8);
  // spot-check one sharded gradient against the matching unsharded block
  const std::size_t chunk = gs.workers[0].wq.cols();
  for (std::size_t r = 0; r < d; ++r)
    for (std::size_t c = 0; c < chunk; ++c) {
      CHECK(oracle::rel_err(ggrads[1].wq(r, c), gwant.wq(r, chunk + c), 1e-8) <
            1e-6);
    }
}

TEST_CASE("per-worker split parameter bytes are total over W") {
  SgluParams<double> p = make_sglu(8, 32, 14);
  GlaParams<double> g = make_gla(8, 4, 15);
  for (int world : {1, 2, 4}) {
    ShardedSglu<double> s = shard_sglu(p, world);
    for (const auto& w : s.workers)
      CHECK(sglu_param_bytes(w) ==
            sglu_param_bytes(p) / static_cast<std::size_t>(world));
    ShardedGla<double> gs = shard_gla(g, world);
    for (const auto& w : gs.workers)
      CHECK(gla_param_bytes(w) ==
            gla_param_bytes(g) / static_cast<std::size_t>(world));
  }
}

TEST_CASE("threaded workers match sequential execution bitwise") {
  const std::size_t n = 7, d = 8;
  Rng rng(16);
  Tensor<double> x({n, d});
  rng.fill_normal(x);
  SgluParams<double> p = make_sglu(d, 16, 17);
  ShardedSglu<double> s = shard_sglu(p, 4);
  CollectiveLedger l1, l2;
  Tensor<double> seq = sglu_parallel_forward(x, s, l1, false);
  Tensor<double> par = sglu_parallel_forward(x, s, l2, true);
  CHECK(tensors_equal(seq, par));

  GlaParams<double> g = make_gla(d, 4, 18);
  ShardedGla<double> gs = shard_gla(g, 4);
  Tensor<double> gseq =
      gla_parallel_forward(x, gs, AttnMode::Lightning, {2, 2, true}, l1, false);
  Tensor<double> gpar =
      gla_parallel_forward(x, gs, AttnMode::Lightning, {2, 2, true}, l2, true);
  CHECK(tensors_equal(gseq, gpar));
}

TEST_CASE("ledger dumps the collective counts as csv") {
  const std::size_t n = 4, d = 8;
  Rng rng(19);
  Tensor<double> x({n, d});
  rng.fill_normal(x);
  SgluParams<double> p = make_sglu(d, 16, 20);
  ShardedSglu<double> s = shard_sglu(p, 2);
  CollectiveLedger ledger;
  sglu_parallel_forward(x, s, ledger);
  const std::string csv = ledger.to_csv();
  CHECK(csv.find("pass,collective_type,count,bytes") == 0);
  CHECK(csv.find("forward,all_reduce,1,") != std::string::npos);
  CHECK(csv.find("backward,all_reduce,0,") != std::string::npos);
  ledger.reset();
  CHECK(ledger.forward_allreduce == 0);
}
