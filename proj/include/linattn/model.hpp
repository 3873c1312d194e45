#pragma once

// Full decoder stack: byte-level embedding, L pre-norm blocks with per-layer
// decay schedules, final norm, tied output head, cross-entropy loss with
// hand-derived gradients, Adam with warmup + cosine schedule, and checkpoint
// IO. Byte vocabulary: ids 0..255 are raw bytes, 256 is the BOS marker.

#include <cmath>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "linattn/blocks.hpp"
#include "linattn/container.hpp"
#include "linattn/positional.hpp"
#include "linattn/tensor.hpp"

namespace linattn {

inline constexpr int kByteVocab = 257;
inline constexpr int kBosToken = 256;

struct ModelConfig {
  int layers = 2;
  int dim = 64;
  int heads = 4;
  int vocab = kByteVocab;
  double sglu_ratio = 8.0 / 3.0;
  NormKind norm = NormKind::SRMS;
  Activation gla_act = Activation::OnePlusElu;
  Activation glu_act = Activation::None;
  bool use_gate = true;
  bool use_decay_temperature = true;
  bool shared_theta = false;
  bool per_head_norm = false;
  double eps = 1e-6;
  double init_std = 0.02;
  double theta_base = 10000.0;
  std::uint64_t seed = 42;
  std::size_t tile_rows = 64;
  std::size_t tile_cols = 64;

  // GLU hidden width: ratio * dim rounded to the nearest multiple of 8.
  std::size_t hidden_dim() const {
    const double raw = sglu_ratio * dim;
    const long mult = std::max(1L, std::lround(raw / 8.0));
    return static_cast<std::size_t>(mult) * 8;
  }

  void validate() const {
    if (layers < 1) throw std::invalid_argument("config: layers must be >= 1");
    if (heads < 1) throw std::invalid_argument("config: heads must be >= 1");
    if (dim < 1 || dim % heads != 0)
      throw std::invalid_argument("config: dim must be divisible by heads");
    if ((dim / heads) % 2 != 0)
      throw std::invalid_argument("config: head dim must be even");
    if (vocab < 2) throw std::invalid_argument("config: vocab must be >= 2");
    if (sglu_ratio <= 0) throw std::invalid_argument("config: bad sglu_ratio");
    if (tile_rows == 0 || tile_cols == 0)
      throw std::invalid_argument("config: tile sizes must be >= 1");
  }

  BlockConfig tiles() const { return BlockConfig{tile_rows, tile_cols, true}; }
};

struct TrainConfig {
  double lr = 3e-3;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double adam_eps = 1e-8;
  int warmup_steps = 20;
  int total_steps = 500;
  double min_lr_ratio = 0.1;
  double grad_clip = 1.0;  // global-norm clip; 0 disables
  int batch = 4;
  int seq_len = 128;  // tokens per sequence including BOS
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"layers", c.layers},
                     {"dim", c.dim},
                     {"heads", c.heads},
                     {"vocab", c.vocab},
                     {"sglu_ratio", c.sglu_ratio},
                     {"norm", norm_name(c.norm)},
                     {"gla_activation", activation_name(c.gla_act)},
                     {"glu_activation", activation_name(c.glu_act)},
                     {"use_gate", c.use_gate},
                     {"use_decay_temperature", c.use_decay_temperature},
                     {"shared_theta", c.shared_theta},
                     {"per_head_norm", c.per_head_norm},
                     {"eps", c.eps},
                     {"init_std", c.init_std},
                     {"theta_base", c.theta_base},
                     {"seed", c.seed},
                     {"tile_rows", c.tile_rows},
                     {"tile_cols", c.tile_cols}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  c = ModelConfig{};
  c.layers = j.value("layers", c.layers);
  c.dim = j.value("dim", c.dim);
  c.heads = j.value("heads", c.heads);
  c.vocab = j.value("vocab", c.vocab);
  c.sglu_ratio = j.value("sglu_ratio", c.sglu_ratio);
  if (j.contains("norm")) c.norm = parse_norm(j.at("norm").get<std::string>());
  if (j.contains("gla_activation"))
    c.gla_act = parse_activation(j.at("gla_activation").get<std::string>());
  if (j.contains("glu_activation"))
    c.glu_act = parse_activation(j.at("glu_activation").get<std::string>());
  c.use_gate = j.value("use_gate", c.use_gate);
  c.use_decay_temperature =
      j.value("use_decay_temperature", c.use_decay_temperature);
  c.shared_theta = j.value("shared_theta", c.shared_theta);
  c.per_head_norm = j.value("per_head_norm", c.per_head_norm);
  c.eps = j.value("eps", c.eps);
  c.init_std = j.value("init_std", c.init_std);
  c.theta_base = j.value("theta_base", c.theta_base);
  c.seed = j.value("seed", c.seed);
  c.tile_rows = j.value("tile_rows", c.tile_rows);
  c.tile_cols = j.value("tile_cols", c.tile_cols);
}

inline void to_json(nlohmann::json& j, const TrainConfig& t) {
  j = nlohmann::json{{"lr", t.lr},
                     {"beta1", t.beta1},
                     {"beta2", t.beta2},
                     {"adam_eps", t.adam_eps},
                     {"warmup_steps", t.warmup_steps},
                     {"total_steps", t.total_steps},
                     {"min_lr_ratio", t.min_lr_ratio},
                     {"grad_clip", t.grad_clip},
                     {"batch", t.batch},
                     {"seq_len", t.seq_len}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& t) {
  t = TrainConfig{};
  t.lr = j.value("lr", t.lr);
  t.beta1 = j.value("beta1", t.beta1);
  t.beta2 = j.value("beta2", t.beta2);
  t.adam_eps = j.value("adam_eps", t.adam_eps);
  t.warmup_steps = j.value("warmup_steps", t.warmup_steps);
  t.total_steps = j.value("total_steps", t.total_steps);
  t.min_lr_ratio = j.value("min_lr_ratio", t.min_lr_ratio);
  t.grad_clip = j.value("grad_clip", t.grad_clip);
  t.batch = j.value("batch", t.batch);
  t.seq_len = j.value("seq_len", t.seq_len);
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

template <typename T>
struct Model {
  ModelConfig cfg;
  Tensor<T> embed;  // vocab x dim, tied with the output head
  std::vector<BlockParams<T>> blocks;
  NormParams<T> final_norm;
};

template <typename T>
struct ModelGrads {
  Tensor<T> embed;
  std::vector<BlockGrads<T>> blocks;
  NormGrads<T> final_norm;
};

template <typename T>
Model<T> init_model(const ModelConfig& cfg) {
  cfg.validate();
  Model<T> m;
  m.cfg = cfg;
  Rng rng(cfg.seed);
  const auto d = static_cast<std::size_t>(cfg.dim);
  const std::size_t hd = d / static_cast<std::size_t>(cfg.heads);
  const std::size_t e = cfg.hidden_dim();
  const double residual_std =
      cfg.init_std / std::sqrt(2.0 * static_cast<double>(cfg.layers));
  const DecaySchedule schedule{cfg.heads, cfg.layers, cfg.use_decay_temperature};

  m.embed = Tensor<T>({static_cast<std::size_t>(cfg.vocab), d});
  rng.fill_normal(m.embed, 0.0, cfg.init_std);

  for (int l = 1; l <= cfg.layers; ++l) {
    BlockParams<T> b;
    b.norm_gla = NormParams<T>::make(cfg.norm, d, static_cast<T>(cfg.eps));
    b.norm_sglu = NormParams<T>::make(cfg.norm, d, static_cast<T>(cfg.eps));

    GlaParams<T>& g = b.gla;
    g.heads = cfg.heads;
    g.act = cfg.gla_act;
    g.use_gate = cfg.use_gate;
    g.per_head_norm = cfg.per_head_norm;
    g.eps = static_cast<T>(cfg.eps);
    g.lambdas = schedule.layer_rates(l);
    g.wq = Tensor<T>({d, d});
    g.wk = Tensor<T>({d, d});
    g.wv = Tensor<T>({d, d});
    rng.fill_normal(g.wq, 0.0, cfg.init_std);
    rng.fill_normal(g.wk, 0.0, cfg.init_std);
    rng.fill_normal(g.wv, 0.0, cfg.init_std);
    if (cfg.use_gate) {
      g.wu = Tensor<T>({d, d});
      rng.fill_normal(g.wu, 0.0, cfg.init_std);
    }
    g.wo = Tensor<T>({d, d});
    rng.fill_normal(g.wo, 0.0, residual_std);
    // geometric frequency ladder, one row per head (or one shared row)
    const std::size_t theta_rows =
        cfg.shared_theta ? 1 : static_cast<std::size_t>(cfg.heads);
    g.theta = Tensor<T>({theta_rows, hd / 2});
    for (std::size_t r = 0; r < theta_rows; ++r)
      for (std::size_t i = 0; i < hd / 2; ++i)
        g.theta(r, i) = static_cast<T>(
            std::pow(cfg.theta_base, -2.0 * static_cast<double>(i) /
                                         static_cast<double>(hd)));

    SgluParams<T>& s = b.sglu;
    s.gate_act = cfg.glu_act;
    s.wv = Tensor<T>({d, e});
    s.wu = Tensor<T>({d, e});
    s.wo = Tensor<T>({e, d});
    rng.fill_normal(s.wv, 0.0, cfg.init_std);
    rng.fill_normal(s.wu, 0.0, cfg.init_std);
    rng.fill_normal(s.wo, 0.0, residual_std);

    m.blocks.push_back(std::move(b));
  }
  m.final_norm = NormParams<T>::make(cfg.norm, d, static_cast<T>(cfg.eps));
  return m;
}

// Visits every learnable tensor in a fixed order.
template <typename T, typename Fn>
void visit_params(Model<T>& m, Fn&& fn) {
  fn("embed", m.embed);
  for (std::size_t l = 0; l < m.blocks.size(); ++l) {
    const std::string pre = "layers." + std::to_string(l) + ".";
    BlockParams<T>& b = m.blocks[l];
    if (!b.norm_gla.gain.empty()) fn(pre + "norm_gla.gain", b.norm_gla.gain);
    if (!b.norm_gla.bias.empty()) fn(pre + "norm_gla.bias", b.norm_gla.bias);
    fn(pre + "gla.wq", b.gla.wq);
    fn(pre + "gla.wk", b.gla.wk);
    fn(pre + "gla.wv", b.gla.wv);
    if (!b.gla.wu.empty()) fn(pre + "gla.wu", b.gla.wu);
    fn(pre + "gla.wo", b.gla.wo);
    fn(pre + "gla.theta", b.gla.theta);
    if (!b.norm_sglu.gain.empty()) fn(pre + "norm_sglu.gain", b.norm_sglu.gain);
    if (!b.norm_sglu.bias.empty()) fn(pre + "norm_sglu.bias", b.norm_sglu.bias);
    fn(pre + "sglu.wv", b.sglu.wv);
    fn(pre + "sglu.wu", b.sglu.wu);
    fn(pre + "sglu.wo", b.sglu.wo);
  }
  if (!m.final_norm.gain.empty()) fn("final_norm.gain", m.final_norm.gain);
  if (!m.final_norm.bias.empty()) fn("final_norm.bias", m.final_norm.bias);
}

// Visits (name, param, grad) triples in the same fixed order.
template <typename T, typename Fn>
void visit_params_with_grads(Model<T>& m, ModelGrads<T>& g, Fn&& fn) {
  fn("embed", m.embed, g.embed);
  for (std::size_t l = 0; l < m.blocks.size(); ++l) {
    const std::string pre = "layers." + std::to_string(l) + ".";
    BlockParams<T>& b = m.blocks[l];
    BlockGrads<T>& bg = g.blocks[l];
    if (!b.norm_gla.gain.empty())
      fn(pre + "norm_gla.gain", b.norm_gla.gain, bg.norm_gla.gain);
    if (!b.norm_gla.bias.empty())
      fn(pre + "norm_gla.bias", b.norm_gla.bias, bg.norm_gla.bias);
    fn(pre + "gla.wq", b.gla.wq, bg.gla.wq);
    fn(pre + "gla.wk", b.gla.wk, bg.gla.wk);
    fn(pre + "gla.wv", b.gla.wv, bg.gla.wv);
    if (!b.gla.wu.empty()) fn(pre + "gla.wu", b.gla.wu, bg.gla.wu);
    fn(pre + "gla.wo", b.gla.wo, bg.gla.wo);
    fn(pre + "gla.theta", b.gla.theta, bg.gla.theta);
    if (!b.norm_sglu.gain.empty())
      fn(pre + "norm_sglu.gain", b.norm_sglu.gain, bg.norm_sglu.gain);
    if (!b.norm_sglu.bias.empty())
      fn(pre + "norm_sglu.bias", b.norm_sglu.bias, bg.norm_sglu.bias);
    fn(pre + "sglu.wv", b.sglu.wv, bg.sglu.wv);
    fn(pre + "sglu.wu", b.sglu.wu, bg.sglu.wu);
    fn(pre + "sglu.wo", b.sglu.wo, bg.sglu.wo);
  }
  if (!m.final_norm.gain.empty())
    fn("final_norm.gain", m.final_norm.gain, g.final_norm.gain);
  if (!m.final_norm.bias.empty())
    fn("final_norm.bias", m.final_norm.bias, g.final_norm.bias);
}

template <typename T>
ModelGrads<T> make_grads(const Model<T>& m) {
  ModelGrads<T> g;
  g.embed = Tensor<T>(m.embed.shape());
  for (const auto& b : m.blocks) {
    BlockGrads<T> bg;
    if (!b.norm_gla.gain.empty())
      bg.norm_gla.gain = Tensor<T>(b.norm_gla.gain.shape());
    if (!b.norm_gla.bias.empty())
      bg.norm_gla.bias = Tensor<T>(b.norm_gla.bias.shape());
    bg.gla.wq = Tensor<T>(b.gla.wq.shape());
    bg.gla.wk = Tensor<T>(b.gla.wk.shape());
    bg.gla.wv = Tensor<T>(b.gla.wv.shape());
    if (!b.gla.wu.empty()) bg.gla.wu = Tensor<T>(b.gla.wu.shape());
    bg.gla.wo = Tensor<T>(b.gla.wo.shape());
    bg.gla.theta = Tensor<T>(b.gla.theta.shape());
    if (!b.norm_sglu.gain.empty())
      bg.norm_sglu.gain = Tensor<T>(b.norm_sglu.gain.shape());
    if (!b.norm_sglu.bias.empty())
      bg.norm_sglu.bias = Tensor<T>(b.norm_sglu.bias.shape());
    bg.sglu.wv = Tensor<T>(b.sglu.wv.shape());
    bg.sglu.wu = Tensor<T>(b.sglu.wu.shape());
    bg.sglu.wo = Tensor<T>(b.sglu.wo.shape());
    g.blocks.push_back(std::move(bg));
  }
  if (!m.final_norm.gain.empty())
    g.final_norm.gain = Tensor<T>(m.final_norm.gain.shape());
  if (!m.final_norm.bias.empty())
    g.final_norm.bias = Tensor<T>(m.final_norm.bias.shape());
  return g;
}

template <typename T>
void zero_grads(Model<T>& m, ModelGrads<T>& g) {
  visit_params_with_grads(m, g,
                          [](const std::string&, Tensor<T>&, Tensor<T>& grad) {
                            grad.fill(T(0));
                          });
}

template <typename T>
std::size_t num_params(Model<T>& m) {
  std::size_t total = 0;
  visit_params(m, [&](const std::string&, Tensor<T>& t) { total += t.size(); });
  return total;
}

// Closed-form parameter count implied by the config shapes (no allocation).
inline std::size_t count_params(const ModelConfig& cfg) {
  const std::size_t d = static_cast<std::size_t>(cfg.dim);
  const std::size_t hd = d / static_cast<std::size_t>(cfg.heads);
  const std::size_t e = cfg.hidden_dim();
  const std::size_t theta_rows =
      cfg.shared_theta ? 1 : static_cast<std::size_t>(cfg.heads);
  std::size_t norm = 0;
  if (cfg.norm == NormKind::RMS) norm = d;
  if (cfg.norm == NormKind::LayerNorm) norm = 2 * d;
  const std::size_t gla =
      (cfg.use_gate ? 5 : 4) * d * d + theta_rows * (hd / 2);
  const std::size_t sglu = 2 * d * e + e * d;
  const std::size_t per_layer = 2 * norm + gla + sglu;
  const std::size_t embed = static_cast<std::size_t>(cfg.vocab) * d;
  return embed + static_cast<std::size_t>(cfg.layers) * per_layer + norm;
}

// ---------------------------------------------------------------------------
// Language-model forward / backward
// ---------------------------------------------------------------------------

template <typename T>
struct LmOutput {
  Tensor<T> logits;  // n x vocab
  double loss = 0.0;
  std::vector<double> position_losses;  // one per predicted position (n-1)
};

template <typename T>
struct LmCache {
  Tensor<T> x0;
  std::vector<BlockCache<T>> blocks;
  Tensor<T> x_final;
  Tensor<T> normed;
};

namespace detail {

template <typename T>
Tensor<T> embed_tokens(const Model<T>& m, const std::vector<int>& tokens) {
  const std::size_t d = static_cast<std::size_t>(m.cfg.dim);
  Tensor<T> x({tokens.size(), d});
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const int id = tokens[i];
    if (id < 0 || id >= m.cfg.vocab)
      throw std::invalid_argument("token id " + std::to_string(id) +
                                  " outside vocabulary of size " +
                                  std::to_string(m.cfg.vocab));
    std::memcpy(x.data() + i * d,
                m.embed.data() + static_cast<std::size_t>(id) * d,
                d * sizeof(T));
  }
  return x;
}

// Numerically stable log-softmax cross entropy over positions 0..n-2; the
// final position has no target. Fills per-position losses and, when dlogits
// is given, the mean-loss gradient.
template <typename T>
double lm_loss(const Tensor<T>& logits, const std::vector<int>& tokens,
               std::vector<double>* position_losses, Tensor<T>* dlogits) {
  const std::size_t n = tokens.size();
  const std::size_t vocab = logits.cols();
  if (n < 2)
    throw std::invalid_argument("loss needs at least 2 tokens, got " +
                                std::to_string(n));
  const std::size_t predictions = n - 1;
  if (position_losses) position_losses->assign(predictions, 0.0);
  double total = 0.0;
  for (std::size_t pos = 0; pos < predictions; ++pos) {
    const T* row = logits.data() + pos * vocab;
    const int target = tokens[pos + 1];
    double maxv = row[0];
    for (std::size_t j = 1; j < vocab; ++j)
      maxv = std::max(maxv, static_cast<double>(row[j]));
    double sum = 0.0;
    for (std::size_t j = 0; j < vocab; ++j)
      sum += std::exp(static_cast<double>(row[j]) - maxv);
    const double logz = maxv + std::log(sum);
    const double nll = logz - static_cast<double>(row[target]);
    total += nll;
    if (position_losses) (*position_losses)[pos] = nll;
    if (dlogits) {
      T* drow = dlogits->data() + pos * vocab;
      const double inv = 1.0 / static_cast<double>(predictions);
      for (std::size_t j = 0; j < vocab; ++j) {
        const double p = std::exp(static_cast<double>(row[j]) - logz);
        drow[j] = static_cast<T>(p * inv);
      }
      drow[target] -= static_cast<T>(inv);
    }
  }
  return total / static_cast<double>(predictions);
}

}  // namespace detail

template <typename T>
LmOutput<T> forward_lm_cached(Model<T>& m, const std::vector<int>& tokens,
                              AttnMode mode, LmCache<T>* cache,
                              int threads = 1) {
  const BlockConfig cfg = m.cfg.tiles();
  Tensor<T> x = detail::embed_tokens(m, tokens);
  if (cache) {
    cache->x0 = x;
    cache->blocks.resize(m.blocks.size());
  }
  for (std::size_t l = 0; l < m.blocks.size(); ++l) {
    Tensor<T> next =
        block_forward_cached(x, m.blocks[l], mode, cfg,
                             cache ? &cache->blocks[l] : nullptr, 0, nullptr,
                             threads);
    if (cache) cache->blocks[l].x_in = std::move(x);
    x = std::move(next);
  }
  if (cache) cache->x_final = x;
  Tensor<T> normed = norm_forward(x, m.final_norm);
  LmOutput<T> out;
  out.logits = matmul_nt(normed, m.embed);
  if (tokens.size() >= 2)
    out.loss = detail::lm_loss(out.logits, tokens, &out.position_losses,
                               static_cast<Tensor<T>*>(nullptr));
  if (cache) cache->normed = std::move(normed);
  return out;
}

template <typename T>
LmOutput<T> forward_lm(Model<T>& m, const std::vector<int>& tokens,
                       AttnMode mode = AttnMode::Lightning, int threads = 1) {
  return forward_lm_cached(m, tokens, mode, static_cast<LmCache<T>*>(nullptr),
                           threads);
}

// Accumulates gradients into `grads`; returns the mean loss for the sequence.
template <typename T>
double backward_lm(Model<T>& m, const std::vector<int>& tokens, AttnMode mode,
                   ModelGrads<T>& grads, int threads = 1) {
  const BlockConfig cfg = m.cfg.tiles();
  LmCache<T> cache;
  LmOutput<T> out = forward_lm_cached(m, tokens, mode, &cache, threads);

  Tensor<T> dlogits({tokens.size(), static_cast<std::size_t>(m.cfg.vocab)});
  detail::lm_loss(out.logits, tokens, static_cast<std::vector<double>*>(nullptr),
                  &dlogits);

  // tied head: logits = normed . embed^T
  matmul_tn_into(grads.embed, dlogits, cache.normed, true);
  Tensor<T> dnormed = matmul(dlogits, m.embed);
  Tensor<T> dx = norm_backward(cache.x_final, dnormed, m.final_norm,
                               &grads.final_norm);
  for (std::size_t l = m.blocks.size(); l-- > 0;) {
    dx = block_backward(cache.blocks[l].x_in, m.blocks[l], cache.blocks[l], dx,
                        mode, cfg, grads.blocks[l], 0, threads);
  }
  // embedding rows
  const std::size_t d = static_cast<std::size_t>(m.cfg.dim);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    T* grow = grads.embed.data() + static_cast<std::size_t>(tokens[i]) * d;
    const T* srow = dx.data() + i * d;
    for (std::size_t c = 0; c < d; ++c) grow[c] += srow[c];
  }
  return out.loss;
}

// ---------------------------------------------------------------------------
// Adam with linear warmup + cosine decay
// ---------------------------------------------------------------------------

template <typename T>
struct AdamState {
  std::map<std::string, Tensor<T>> m, v;
  long long step = 0;

  static AdamState init(Model<T>& model) {
    AdamState s;
    visit_params(model, [&](const std::string& name, Tensor<T>& t) {
      s.m.emplace(name, Tensor<T>(t.shape()));
      s.v.emplace(name, Tensor<T>(t.shape()));
    });
    return s;
  }
};

inline double lr_at_step(const TrainConfig& tc, long long step) {
  const double t = static_cast<double>(step);
  if (tc.warmup_steps > 0 && t < tc.warmup_steps)
    return tc.lr * (t + 1.0) / tc.warmup_steps;
  if (tc.total_steps <= tc.warmup_steps) return tc.lr;
  const double progress = (t - tc.warmup_steps) /
                          static_cast<double>(tc.total_steps - tc.warmup_steps);
  const double clamped = std::min(1.0, std::max(0.0, progress));
  const double floor = tc.lr * tc.min_lr_ratio;
  return floor + 0.5 * (tc.lr - floor) * (1.0 + std::cos(3.14159265358979323846 * clamped));
}

// One optimizer step over a batch of token sequences. Gradient accumulation
// order is fixed, so runs are reproducible for a fixed seed.
template <typename T>
double train_step(Model<T>& model, AdamState<T>& opt, const TrainConfig& tc,
                  const std::vector<std::vector<int>>& batch,
                  AttnMode mode = AttnMode::Lightning, int threads = 1) {
  if (batch.empty()) throw std::invalid_argument("train_step: empty batch");
  ModelGrads<T> grads = make_grads(model);
  double loss = 0.0;
  for (const auto& seq : batch)
    loss += backward_lm(model, seq, mode, grads, threads);
  loss /= static_cast<double>(batch.size());
  if (!std::isfinite(loss))
    throw std::runtime_error("train_step: non-finite loss at step " +
                             std::to_string(opt.step));
  const T inv_batch = static_cast<T>(1.0 / batch.size());
  visit_params_with_grads(model, grads,
                          [&](const std::string&, Tensor<T>&, Tensor<T>& g) {
                            scale_inplace(g, inv_batch);
                          });

  if (tc.grad_clip > 0) {
    double sq = 0.0;
    visit_params_with_grads(model, grads,
                            [&](const std::string&, Tensor<T>&, Tensor<T>& g) {
                              for (std::size_t i = 0; i < g.size(); ++i)
                                sq += static_cast<double>(g[i]) * g[i];
                            });
    const double norm = std::sqrt(sq);
    if (norm > tc.grad_clip) {
      const T s = static_cast<T>(tc.grad_clip / norm);
      visit_params_with_grads(model, grads,
                              [&](const std::string&, Tensor<T>&,
                                  Tensor<T>& g) { scale_inplace(g, s); });
    }
  }

  const double lr = lr_at_step(tc, opt.step);
  const double bias1 = 1.0 - std::pow(tc.beta1, opt.step + 1);
  const double bias2 = 1.0 - std::pow(tc.beta2, opt.step + 1);
  visit_params_with_grads(
      model, grads,
      [&](const std::string& name, Tensor<T>& p, Tensor<T>& g) {
        Tensor<T>& mt = opt.m.at(name);
        Tensor<T>& vt = opt.v.at(name);
        bool finite = true;
        for (std::size_t i = 0; i < p.size(); ++i) {
          mt[i] = static_cast<T>(tc.beta1) * mt[i] +
                  static_cast<T>(1.0 - tc.beta1) * g[i];
          vt[i] = static_cast<T>(tc.beta2) * vt[i] +
                  static_cast<T>(1.0 - tc.beta2) * g[i] * g[i];
          const double mhat = mt[i] / bias1;
          const double vhat = vt[i] / bias2;
          p[i] -= static_cast<T>(lr * mhat / (std::sqrt(vhat) + tc.adam_eps));
          finite = finite && std::isfinite(p[i]);
        }
        if (!finite)
          throw std::runtime_error(
              "train_step: parameter group '" + name +
              "' became non-finite at step " + std::to_string(opt.step));
      });
  opt.step += 1;
  return loss;
}

// ---------------------------------------------------------------------------
// Corpus helpers (byte-level)
// ---------------------------------------------------------------------------

inline std::vector<std::uint8_t> load_corpus(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open corpus: " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)),
                                  std::istreambuf_iterator<char>());
  if (bytes.empty()) throw std::runtime_error("corpus is empty: " + path);
  return bytes;
}

inline std::vector<int> tokenize_bytes(const std::string& text,
                                       bool with_bos = true) {
  std::vector<int> out;
  out.reserve(text.size() + 1);
  if (with_bos) out.push_back(kBosToken);
  for (unsigned char c : text) out.push_back(static_cast<int>(c));
  return out;
}

// Deterministic window sampling: the window for (seed, step, index) never
// depends on prior draws, so training can resume mid-run bit-exactly.
inline std::vector<int> sample_window(const std::vector<std::uint8_t>& corpus,
                                      std::uint64_t seed, long long step,
                                      int index, int seq_len) {
  std::uint64_t h = seed;
  h ^= static_cast<std::uint64_t>(step) * 0x9E3779B97F4A7C15ULL;
  h ^= (static_cast<std::uint64_t>(index) + 1) * 0xBF58476D1CE4E5B9ULL;
  Rng rng(h);
  const std::size_t start =
      static_cast<std::size_t>(rng.next_u64() % corpus.size());
  std::vector<int> tokens;
  tokens.reserve(static_cast<std::size_t>(seq_len));
  tokens.push_back(kBosToken);
  for (int i = 0; i + 1 < seq_len; ++i)
    tokens.push_back(corpus[(start + static_cast<std::size_t>(i)) % corpus.size()]);
  return tokens;
}

inline std::vector<std::vector<int>> sample_batch(
    const std::vector<std::uint8_t>& corpus, std::uint64_t seed,
    long long step, int batch, int seq_len) {
  std::vector<std::vector<int>> out;
  out.reserve(static_cast<std::size_t>(batch));
  for (int b = 0; b < batch; ++b)
    out.push_back(sample_window(corpus, seed, step, b, seq_len));
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

template <typename T>
void save_checkpoint(const std::string& path, Model<T>& model,
                     const TrainConfig* tc = nullptr,
                     AdamState<T>* opt = nullptr) {
  nlohmann::json manifest;
  manifest["format"] = "linattn-checkpoint";
  manifest["dtype"] = dtype_of<T>::name;
  manifest["model"] = model.cfg;
  if (tc) manifest["train"] = *tc;
  manifest["step"] = opt ? opt->step : 0;
  manifest["has_optimizer"] = opt != nullptr;

  ContainerWriter<T> w;
  visit_params(model, [&](const std::string& name, Tensor<T>& t) {
    w.add(name, t);
  });
  if (opt) {
    for (auto& [name, t] : opt->m) w.add("opt.m." + name, t);
    for (auto& [name, t] : opt->v) w.add("opt.v." + name, t);
  }
  w.write(path, manifest.dump(2));
}

template <typename T>
struct Checkpoint {
  Model<T> model;
  TrainConfig train;
  bool has_train = false;
  AdamState<T> opt;
  bool has_optimizer = false;
};

template <typename T>
Checkpoint<T> load_checkpoint(const std::string& path) {
  ContainerReader r(path);
  nlohmann::json manifest = nlohmann::json::parse(r.manifest());
  if (manifest.value("format", "") != "linattn-checkpoint")
    throw std::runtime_error("not a model checkpoint: " + path);
  Checkpoint<T> ck;
  ModelConfig cfg = manifest.at("model").get<ModelConfig>();
  ck.model = init_model<T>(cfg);
  visit_params(ck.model, [&](const std::string& name, Tensor<T>& t) {
    Tensor<T> loaded = r.read<T>(name);
    if (!loaded.same_shape(t))
      throw std::runtime_error("checkpoint/config mismatch for '" + name +
                               "': stored " + shape_str(loaded.shape()) +
                               ", expected " + shape_str(t.shape()));
    t = std::move(loaded);
  });
  if (manifest.contains("train")) {
    ck.train = manifest.at("train").get<TrainConfig>();
    ck.has_train = true;
  }
  if (manifest.value("has_optimizer", false)) {
    ck.opt = AdamState<T>::init(ck.model);
    ck.opt.step = manifest.value("step", 0LL);
    for (auto& [name, t] : ck.opt.m) t = r.read<T>("opt.m." + name);
    for (auto& [name, t] : ck.opt.v) t = r.read<T>("opt.v." + name);
    ck.has_optimizer = true;
  }
  return ck;
}

}  // namespace linattn
