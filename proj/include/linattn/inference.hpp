#pragma once

// Constant-memory recurrent decoding. Two per-head update rules related by
// kv_t = lambda^(-t) * kv_robust_t: the origin form accumulates explicitly
// rescaled outer products and overflows for long sequences when lambda < 1;
// the robust form decays the state instead and stays bounded. The decoder
// session runs a whole model token by token with per-head state of fixed
// size, reproducing the parallel path exactly.

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "linattn/container.hpp"
#include "linattn/model.hpp"

namespace linattn {

enum class InferAlgo { Origin, Robust };

inline const char* infer_algo_name(InferAlgo a) {
  return a == InferAlgo::Origin ? "origin" : "robust";
}

inline InferAlgo parse_infer_algo(const std::string& s) {
  if (s == "origin") return InferAlgo::Origin;
  if (s == "robust") return InferAlgo::Robust;
  throw std::invalid_argument("unknown inference algorithm: " + s);
}

// Single-head accumulated key-value state of fixed head_dim x head_dim size.
template <typename T>
struct RecurrentHead {
  Tensor<T> kv;
  std::size_t t = 0;  // tokens consumed; the next token sits at position t
  double lambda = 1.0;
  InferAlgo algo = InferAlgo::Robust;
  std::optional<std::size_t> first_nonfinite;

  RecurrentHead() = default;
  RecurrentHead(std::size_t head_dim, double lambda_, InferAlgo algo_)
      : kv({head_dim, head_dim}), lambda(lambda_), algo(algo_) {}

  // q, k, v must each hold head_dim values; returns o with head_dim values.
  Tensor<T> step(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v) {
    const std::size_t hd = kv.rows();
    if (q.size() != hd || k.size() != hd || v.size() != hd)
      throw std::invalid_argument("recurrent step: expected vectors of size " +
                                  std::to_string(hd));
    Tensor<T> o({hd});
    const double log_lambda = std::log(lambda);
    if (algo == InferAlgo::Robust) {
      // kv <- lambda * kv + k v^T;  o = q^T kv
      const T lam = static_cast<T>(lambda);
      for (std::size_t i = 0; i < hd; ++i) {
        T* row = kv.data() + i * hd;
        const T ki = k[i];
        for (std::size_t j = 0; j < hd; ++j) row[j] = lam * row[j] + ki * v[j];
      }
      for (std::size_t i = 0; i < hd; ++i) {
        const T qi = q[i];
        const T* row = kv.data() + i * hd;
        for (std::size_t j = 0; j < hd; ++j) o[j] += qi * row[j];
      }
    } else {
      // kv <- kv + lambda^(-t) k v^T;  o = lambda^t q^T kv
      // overflow for large t is expected and surfaced, not masked
      const double p = static_cast<double>(t);
      const T up = static_cast<T>(std::exp(-p * log_lambda));
      const T down = static_cast<T>(std::exp(p * log_lambda));
      for (std::size_t i = 0; i < hd; ++i) {
        T* row = kv.data() + i * hd;
        const T ki = up * k[i];
        for (std::size_t j = 0; j < hd; ++j) row[j] += ki * v[j];
      }
      for (std::size_t i = 0; i < hd; ++i) {
        const T qi = down * q[i];
        const T* row = kv.data() + i * hd;
        for (std::size_t j = 0; j < hd; ++j) o[j] += qi * row[j];
      }
    }
    if (!first_nonfinite) {
      bool ok = true;
      for (std::size_t i = 0; i < hd * hd && ok; ++i)
        ok = std::isfinite(kv[i]);
      for (std::size_t i = 0; i < hd && ok; ++i) ok = std::isfinite(o[i]);
      if (!ok) first_nonfinite = t;
    }
    t += 1;
    return o;
  }
};

// ---------------------------------------------------------------------------
// Whole-model decoding session
// ---------------------------------------------------------------------------

template <typename T>
class DecoderSession {
 public:
  DecoderSession(const Model<T>& model, InferAlgo algo = InferAlgo::Robust,
                 double lambda_cap = 0.0)
      : model_(&model), algo_(algo) {
    const std::size_t hd = static_cast<std::size_t>(model.cfg.dim) /
                           static_cast<std::size_t>(model.cfg.heads);
    heads_.resize(model.blocks.size());
    for (std::size_t l = 0; l < model.blocks.size(); ++l) {
      for (int h = 0; h < model.cfg.heads; ++h) {
        double lam = model.blocks[l].gla.lambdas[static_cast<std::size_t>(h)];
        if (lambda_cap > 0.0) lam = std::min(lam, lambda_cap);
        heads_[l].emplace_back(hd, lam, algo);
      }
    }
  }

  std::size_t position() const { return pos_; }
  InferAlgo algo() const { return algo_; }
  const Model<T>& model() const { return *model_; }

  // Fixed-size recurrent state in bytes, independent of how many tokens have
  // been consumed.
  std::size_t state_bytes() const {
    std::size_t total = 0;
    for (const auto& layer : heads_)
      for (const auto& h : layer) total += h.kv.bytes();
    return total;
  }

  std::optional<std::size_t> first_nonfinite() const {
    std::optional<std::size_t> best;
    for (const auto& layer : heads_)
      for (const auto& h : layer)
        if (h.first_nonfinite && (!best || *h.first_nonfinite < *best))
          best = h.first_nonfinite;
    return best;
  }

  // Consumes one token and returns the next-token logits (vocab values).
  Tensor<T> step(int token) {
    const Model<T>& m = *model_;
    const auto d = static_cast<std::size_t>(m.cfg.dim);
    const std::size_t hd = d / static_cast<std::size_t>(m.cfg.heads);
    if (token < 0 || token >= m.cfg.vocab)
      throw std::invalid_argument("token id " + std::to_string(token) +
                                  " outside vocabulary of size " +
                                  std::to_string(m.cfg.vocab));
    Tensor<T> x({1, d});
    std::memcpy(x.data(), m.embed.data() + static_cast<std::size_t>(token) * d,
                d * sizeof(T));

    for (std::size_t l = 0; l < m.blocks.size(); ++l) {
      const BlockParams<T>& b = m.blocks[l];
      const GlaParams<T>& g = b.gla;
      Tensor<T> xn1 = norm_forward(x, b.norm_gla);
      Tensor<T> zq = matmul(xn1, g.wq);
      Tensor<T> zk = matmul(xn1, g.wk);
      Tensor<T> zv = matmul(xn1, g.wv);
      Tensor<T> zu = g.use_gate ? matmul(xn1, g.wu) : Tensor<T>();
      Tensor<T> qa = apply_activation(zq, g.act);
      Tensor<T> ka = apply_activation(zk, g.act);

      Tensor<T> attn({1, g.inner_dim()});
      for (int h = 0; h < g.heads; ++h) {
        const std::size_t c0 = static_cast<std::size_t>(h) * hd;
        Tensor<T> th = g.theta_for_head(h);
        Tensor<T> qh = slice_cols(qa, c0, hd);
        Tensor<T> kh = slice_cols(ka, c0, hd);
        apply_lrpe_inplace(qh, th, pos_);
        apply_lrpe_inplace(kh, th, pos_);
        Tensor<T> vh = slice_cols(zv, c0, hd);
        Tensor<T> oh =
            heads_[l][static_cast<std::size_t>(h)].step(qh, kh, vh);
        std::memcpy(attn.data() + c0, oh.data(), hd * sizeof(T));
      }
      Tensor<T> normed =
          srmsnorm(attn, g.eps, g.per_head_norm ? hd : std::size_t(0));
      Tensor<T> gated = g.use_gate ? mul(normed, zu) : std::move(normed);
      Tensor<T> y = matmul(gated, g.wo);
      add_inplace(x, y);

      Tensor<T> xn2 = norm_forward(x, b.norm_sglu);
      Tensor<T> y2 = sglu_forward(xn2, b.sglu);
      add_inplace(x, y2);
    }

    Tensor<T> normed = norm_forward(x, m.final_norm);
    Tensor<T> logits = matmul_nt(normed, m.embed);
    pos_ += 1;
    Tensor<T> out({static_cast<std::size_t>(m.cfg.vocab)});
    std::memcpy(out.data(), logits.data(), logits.bytes());
    return out;
  }

  // --- snapshot / restore (binary tensor records + JSON manifest) ---

  void save_state(const std::string& path) const {
    nlohmann::json manifest;
    manifest["format"] = "linattn-state";
    manifest["algo"] = infer_algo_name(algo_);
    manifest["position"] = pos_;
    manifest["layers"] = heads_.size();
    manifest["heads"] = heads_.empty() ? 0 : heads_[0].size();
    ContainerWriter<T> w;
    for (std::size_t l = 0; l < heads_.size(); ++l)
      for (std::size_t h = 0; h < heads_[l].size(); ++h)
        w.add("kv." + std::to_string(l) + "." + std::to_string(h),
              heads_[l][h].kv);
    w.write(path, manifest.dump(2));
  }

  void load_state(const std::string& path) {
    ContainerReader r(path);
    nlohmann::json manifest = nlohmann::json::parse(r.manifest());
    if (manifest.value("format", "") != "linattn-state")
      throw std::runtime_error("not a decoder state file: " + path);
    if (manifest.value("layers", std::size_t(0)) != heads_.size() ||
        manifest.value("heads", std::size_t(0)) !=
            (heads_.empty() ? 0 : heads_[0].size()))
      throw std::runtime_error("state/model shape mismatch in " + path);
    algo_ = parse_infer_algo(manifest.value("algo", "robust"));
    pos_ = manifest.value("position", std::size_t(0));
    for (std::size_t l = 0; l < heads_.size(); ++l)
      for (std::size_t h = 0; h < heads_[l].size(); ++h) {
        auto& head = heads_[l][h];
        head.kv = r.read<T>("kv." + std::to_string(l) + "." +
                            std::to_string(h));
        head.t = pos_;
        head.algo = algo_;
      }
  }

 private:
  const Model<T>* model_;
  InferAlgo algo_;
  std::size_t pos_ = 0;
  std::vector<std::vector<RecurrentHead<T>>> heads_;
};

// ---------------------------------------------------------------------------
// Sampling + decode loop
// ---------------------------------------------------------------------------

struct Sampler {
  bool greedy = true;
  double temperature = 1.0;
  std::uint64_t seed = 0;
};

template <typename T>
int sample_token(const Tensor<T>& logits, const Sampler& s, Rng& rng) {
  const std::size_t vocab = logits.size();
  if (s.greedy) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < vocab; ++j)
      if (logits[j] > logits[best]) best = j;
    return static_cast<int>(best);
  }
  const double tau = std::max(s.temperature, 1e-6);
  double maxv = logits[0];
  for (std::size_t j = 1; j < vocab; ++j)
    maxv = std::max(maxv, static_cast<double>(logits[j]));
  std::vector<double> probs(vocab);
  double sum = 0.0;
  for (std::size_t j = 0; j < vocab; ++j) {
    probs[j] = std::exp((static_cast<double>(logits[j]) - maxv) / tau);
    sum += probs[j];
  }
  double u = rng.uniform() * sum;
  for (std::size_t j = 0; j < vocab; ++j) {
    u -= probs[j];
    if (u <= 0) return static_cast<int>(j);
  }
  return static_cast<int>(vocab - 1);
}

// Ingests the prompt token by token, then samples `steps` continuation
// tokens. Returns prompt + continuation.
template <typename T>
std::vector<int> decode(const Model<T>& model, const std::vector<int>& prompt,
                        int steps, const Sampler& sampler = {},
                        InferAlgo algo = InferAlgo::Robust,
                        DecoderSession<T>* session_out = nullptr,
                        double lambda_cap = 0.0) {
  DecoderSession<T> session(model, algo, lambda_cap);
  std::vector<int> out = prompt;
  Tensor<T> logits;
  for (int tok : prompt) logits = session.step(tok);
  Rng rng(sampler.seed);
  for (int s = 0; s < steps; ++s) {
    if (logits.empty()) {
      // empty prompt: start from the BOS marker
      logits = session.step(kBosToken);
    }
    const int next = sample_token(logits, sampler, rng);
    out.push_back(next);
    logits = session.step(next);
  }
  if (session_out) *session_out = std::move(session);
  return out;
}

}  // namespace linattn
