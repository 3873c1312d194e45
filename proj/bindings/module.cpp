// Python bindings for the main operations: decay schedules, rotations,
// norms, the attention kernels with gradients, recurrent decoding, and a
// small LM handle for training and generation from python.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "linattn/bench.hpp"
#include "linattn/inference.hpp"
#include "linattn/model.hpp"
#include "linattn/parallel_sim.hpp"

namespace py = pybind11;
using namespace linattn;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor<double> to_tensor(const Array& arr) {
  Shape shape(static_cast<std::size_t>(arr.ndim()));
  for (py::ssize_t i = 0; i < arr.ndim(); ++i)
    shape[static_cast<std::size_t>(i)] =
        static_cast<std::size_t>(arr.shape(i));
  Tensor<double> t(shape);
  std::memcpy(t.data(), arr.data(), t.bytes());
  return t;
}

py::array_t<double> to_array(const Tensor<double>& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<double> arr(shape);
  std::memcpy(arr.mutable_data(), t.data(), t.bytes());
  return arr;
}

// Owns a model plus optimizer state; the python-facing training handle.
struct LmHandle {
  Model<double> model;
  AdamState<double> opt;
  TrainConfig tc;

  static LmHandle from_config(const std::string& config_json) {
    nlohmann::json j = nlohmann::json::parse(config_json);
    LmHandle h;
    h.model = init_model<double>(j.get<ModelConfig>());
    if (j.contains("train")) h.tc = j.at("train").get<TrainConfig>();
    h.opt = AdamState<double>::init(h.model);
    return h;
  }

  static LmHandle load(const std::string& path) {
    auto ck = load_checkpoint<double>(path);
    LmHandle h;
    h.model = std::move(ck.model);
    h.tc = ck.has_train ? ck.train : TrainConfig{};
    if (ck.has_optimizer)
      h.opt = std::move(ck.opt);
    else
      h.opt = AdamState<double>::init(h.model);
    return h;
  }

  void save(const std::string& path) {
    save_checkpoint(path, model, &tc, &opt);
  }

  std::vector<double> train_on(const std::string& text, int steps) {
    if (text.empty()) throw std::invalid_argument("empty training text");
    std::vector<std::uint8_t> corpus(text.begin(), text.end());
    if (tc.total_steps < steps) tc.total_steps = steps;
    std::vector<double> losses;
    for (int i = 0; i < steps; ++i) {
      auto batch = sample_batch(corpus, model.cfg.seed, opt.step, tc.batch,
                                tc.seq_len);
      losses.push_back(train_step(model, opt, tc, batch));
    }
    return losses;
  }

  double loss_of(const std::string& text) {
    return forward_lm(model, tokenize_bytes(text)).loss;
  }

  std::string generate(const std::string& prompt, int steps, bool greedy,
                       double temperature, std::uint64_t seed) {
    Sampler sampler{greedy, temperature, seed};
    auto out = decode(model, tokenize_bytes(prompt), steps, sampler);
    std::string text;
    for (int tok : out)
      if (tok < 256) text.push_back(static_cast<char>(tok));
    return text;
  }

  std::string config_json() const {
    return nlohmann::json(model.cfg).dump();
  }

  std::size_t parameter_count() { return num_params(model); }
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "linear attention engine: decay-aware blocked kernels, recurrent"
            " decoding, and a toy byte-level language model";

  m.def(
      "decay_rate",
      [](int heads, int layers, int head, int layer, bool use_temperature) {
        return DecaySchedule{heads, layers, use_temperature}.rate(head, layer);
      },
      py::arg("heads"), py::arg("layers"), py::arg("head"), py::arg("layer"),
      py::arg("use_temperature") = true,
      "per-head/per-layer decay rate (1-based indices)");

  m.def(
      "decay_mask",
      [](std::size_t n, double lam) {
        return to_array(build_decay_mask<double>(n, lam));
      },
      py::arg("n"), py::arg("lam"),
      "lower-triangular matrix with entries lam^(s-t)");

  m.def(
      "apply_lrpe",
      [](const Array& x, const Array& theta, std::size_t position_offset) {
        return to_array(
            apply_lrpe(to_tensor(x), to_tensor(theta), position_offset));
      },
      py::arg("x"), py::arg("theta"), py::arg("position_offset") = 0,
      "rotate adjacent dimension pairs by the per-pair angle times position");

  m.def(
      "srmsnorm",
      [](const Array& x, double eps, std::size_t group) {
        return to_array(srmsnorm(to_tensor(x), eps, group));
      },
      py::arg("x"), py::arg("eps") = 1e-6, py::arg("group") = 0);

  m.def(
      "attention_reference",
      [](const Array& q, const Array& k, const Array& v, double lam) {
        Tensor<double> qq = to_tensor(q);
        Tensor<double> mask = build_decay_mask<double>(qq.rows(), lam);
        return to_array(
            reference_forward(qq, to_tensor(k), to_tensor(v), mask));
      },
      py::arg("q"), py::arg("k"), py::arg("v"), py::arg("lam") = 1.0,
      "quadratic-form masked linear attention (the oracle path)");

  m.def(
      "attention_lightning",
      [](const Array& q, const Array& k, const Array& v, double lam,
         std::size_t tile_rows, std::size_t tile_cols, int threads) {
        return to_array(lightning_forward(to_tensor(q), to_tensor(k),
                                          to_tensor(v), lam,
                                          {tile_rows, tile_cols, true},
                                          nullptr, threads));
      },
      py::arg("q"), py::arg("k"), py::arg("v"), py::arg("lam") = 1.0,
      py::arg("tile_rows") = 64, py::arg("tile_cols") = 64,
      py::arg("threads") = 1, "blocked masked linear attention");

  m.def(
      "attention_lightning_grads",
      [](const Array& q, const Array& k, const Array& v, const Array& grad_out,
         double lam, std::size_t tile_rows, std::size_t tile_cols) {
        AttentionGrads<double> g = lightning_backward(
            to_tensor(q), to_tensor(k), to_tensor(v), to_tensor(grad_out), lam,
            {tile_rows, tile_cols, true});
        return py::make_tuple(to_array(g.dq), to_array(g.dk), to_array(g.dv));
      },
      py::arg("q"), py::arg("k"), py::arg("v"), py::arg("grad_out"),
      py::arg("lam") = 1.0, py::arg("tile_rows") = 64,
      py::arg("tile_cols") = 64,
      "analytic gradients (dq, dk, dv) of the blocked kernel");

  m.def(
      "right_product",
      [](const Array& q, const Array& k, const Array& v) {
        return to_array(
            right_product_forward(to_tensor(q), to_tensor(k), to_tensor(v)));
      },
      py::arg("q"), py::arg("k"), py::arg("v"),
      "non-causal linear form Q (K^T V)");

  m.def(
      "sglu",
      [](const Array& x, const Array& wv, const Array& wu, const Array& wo) {
        SgluParams<double> p;
        p.wv = to_tensor(wv);
        p.wu = to_tensor(wu);
        p.wo = to_tensor(wo);
        return to_array(sglu_forward(to_tensor(x), p));
      },
      py::arg("x"), py::arg("wv"), py::arg("wu"), py::arg("wo"),
      "channel mixer (X Wv . X Wu) Wo");

  py::class_<RecurrentHead<double>>(m, "RecurrentHead",
                                    "constant-size per-head decode state")
      .def(py::init([](std::size_t head_dim, double lam,
                       const std::string& algo) {
             return RecurrentHead<double>(head_dim, lam,
                                          parse_infer_algo(algo));
           }),
           py::arg("head_dim"), py::arg("lam"), py::arg("algo") = "robust")
      .def("step",
           [](RecurrentHead<double>& self, const Array& q, const Array& k,
              const Array& v) {
             return to_array(
                 self.step(to_tensor(q), to_tensor(k), to_tensor(v)));
           })
      .def_property_readonly(
          "kv", [](const RecurrentHead<double>& self) { return to_array(self.kv); })
      .def_property_readonly(
          "position", [](const RecurrentHead<double>& self) { return self.t; })
      .def_property_readonly("first_nonfinite",
                             [](const RecurrentHead<double>& self)
                                 -> py::object {
                               if (self.first_nonfinite)
                                 return py::int_(*self.first_nonfinite);
                               return py::none();
                             });

  py::class_<LmHandle>(m, "LmModel", "byte-level language model handle")
      .def_static("from_config", &LmHandle::from_config, py::arg("config_json"))
      .def_static("load", &LmHandle::load, py::arg("path"))
      .def("save", &LmHandle::save, py::arg("path"))
      .def("train_on", &LmHandle::train_on, py::arg("text"), py::arg("steps"),
           "run optimizer steps on repeated text; returns per-step losses")
      .def("loss_of", &LmHandle::loss_of, py::arg("text"))
      .def("decode", &LmHandle::generate, py::arg("prompt"),
           py::arg("steps") = 32, py::arg("greedy") = true,
           py::arg("temperature") = 1.0, py::arg("seed") = 42)
      .def("config_json", &LmHandle::config_json)
      .def_property_readonly("num_params", &LmHandle::parameter_count);
}
