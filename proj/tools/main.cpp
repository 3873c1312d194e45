// Command-line surface: verification suites, attention/inference benchmarks
// with CSV output, toy training, and decoding.
//
// Exit codes: 0 success, 1 check/benchmark failure, 2 usage error.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "linattn/bench.hpp"
#include "linattn/inference.hpp"
#include "linattn/model.hpp"
#include "verify.hpp"

namespace {

using namespace linattn;

std::uint64_t default_seed() {
  if (const char* env = std::getenv("LINATTN_SEED")) {
    try {
      return std::stoull(env);
    } catch (...) {
      std::cerr << "warning: ignoring invalid LINATTN_SEED='" << env << "'\n";
    }
  }
  return 42;
}

std::vector<std::size_t> parse_size_list(const std::string& csv) {
  std::vector<std::size_t> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(std::stoull(item));
  return out;
}

std::vector<std::string> parse_string_list(const std::string& csv) {
  std::vector<std::string> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

int run_verify(const std::string& suite, std::uint64_t seed, bool fault_dk) {
  if (fault_dk) set_fault_dk_sign(true);
  const auto checks = verify::run_suite(suite, seed);
  std::size_t failures = 0;
  for (const auto& c : checks) {
    std::cout << "suite=" << c.suite << " check=" << c.name
              << " status=" << (c.pass ? "pass" : "fail");
    if (!c.pass && !c.detail.empty())
      std::cout << " detail=\"" << c.detail << "\"";
    std::cout << "\n";
    if (!c.pass) ++failures;
  }
  std::cout << "verify: suite=" << suite << " checks=" << checks.size()
            << " failures=" << failures << " seed=" << seed << "\n";
  return failures == 0 ? 0 : 1;
}

struct TrainOptions {
  std::string config_path, corpus_path, out_path, loss_csv, resume;
  int steps = 0;
  int threads = 1;
  std::string dtype = "f64";
  std::string mode = "lightning";
};

template <typename T>
int run_train_typed(const TrainOptions& opt, const nlohmann::json& cfg_json) {
  ModelConfig cfg = cfg_json.get<ModelConfig>();
  TrainConfig tc;
  if (cfg_json.contains("train")) tc = cfg_json.at("train").get<TrainConfig>();
  if (!cfg_json.contains("train") ||
      !cfg_json.at("train").contains("total_steps"))
    tc.total_steps = std::max(opt.steps, 1);

  Model<T> model;
  AdamState<T> adam;
  if (!opt.resume.empty()) {
    auto ck = load_checkpoint<T>(opt.resume);
    if (!ck.has_optimizer)
      throw std::runtime_error("checkpoint has no optimizer state: " +
                               opt.resume);
    model = std::move(ck.model);
    adam = std::move(ck.opt);
    if (ck.has_train) tc = ck.train;
    std::cout << "resumed from " << opt.resume << " at step " << adam.step
              << "\n";
  } else {
    model = init_model<T>(cfg);
    adam = AdamState<T>::init(model);
  }

  const auto corpus = load_corpus(opt.corpus_path);
  const AttnMode mode =
      opt.mode == "reference" ? AttnMode::Reference : AttnMode::Lightning;

  std::ofstream loss_csv;
  if (!opt.loss_csv.empty()) {
    loss_csv.open(opt.loss_csv);
    if (!loss_csv) throw std::runtime_error("cannot write " + opt.loss_csv);
    loss_csv << "step,loss,lr\n";
  }

  const long long start = adam.step;
  const int log_every = std::max(1, opt.steps / 20);
  for (long long step = start; step < start + opt.steps; ++step) {
    auto batch =
        sample_batch(corpus, model.cfg.seed, step, tc.batch, tc.seq_len);
    const double loss = train_step(model, adam, tc, batch, mode, opt.threads);
    if (loss_csv.is_open())
      loss_csv << step << "," << loss << "," << lr_at_step(tc, step) << "\n";
    if ((step - start) % log_every == 0 || step + 1 == start + opt.steps)
      std::cout << "step " << step << " loss " << loss << "\n";
  }
  save_checkpoint(opt.out_path, model, &tc, &adam);
  std::cout << "wrote checkpoint " << opt.out_path << " ("
            << num_params(model) << " parameters)\n";
  return 0;
}

int run_train(const TrainOptions& opt) {
  std::ifstream is(opt.config_path);
  if (!is) throw std::runtime_error("cannot open config: " + opt.config_path);
  nlohmann::json cfg_json = nlohmann::json::parse(is);
  if (opt.dtype == "f32") return run_train_typed<float>(opt, cfg_json);
  return run_train_typed<double>(opt, cfg_json);
}

struct DecodeOptions {
  std::string checkpoint, prompt;
  int steps = 32;
  std::string sampler = "greedy";
  double temperature = 1.0;
  std::string algorithm = "robust";
  double lambda_floor = 0.0;
  std::uint64_t seed = 42;
};

template <typename T>
int run_decode_typed(const DecodeOptions& opt) {
  auto ck = load_checkpoint<T>(opt.checkpoint);
  std::vector<int> prompt = tokenize_bytes(opt.prompt);
  Sampler sampler;
  sampler.greedy = opt.sampler == "greedy";
  sampler.temperature = opt.temperature;
  sampler.seed = opt.seed;
  const InferAlgo algo = parse_infer_algo(opt.algorithm);

  DecoderSession<T> session(ck.model, algo, opt.lambda_floor);
  std::vector<int> out = decode(ck.model, prompt, opt.steps, sampler, algo,
                                &session, opt.lambda_floor);
  std::string text;
  for (int tok : out)
    if (tok < 256) text.push_back(static_cast<char>(tok));
  std::cout << text << "\n";
  if (auto bad = session.first_nonfinite())
    std::cout << "first non-finite position: " << *bad << "\n";
  else if (algo == InferAlgo::Origin)
    std::cout << "all positions finite\n";
  return 0;
}

int run_decode(const DecodeOptions& opt) {
  ContainerReader reader(opt.checkpoint);
  const auto manifest = nlohmann::json::parse(reader.manifest());
  const std::string dtype = manifest.value("dtype", "f64");
  if (dtype == "f32") return run_decode_typed<float>(opt);
  return run_decode_typed<double>(opt);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"linattn: linear-attention engine with blocked kernels,"
               " constant-memory decoding, and a tensor-parallel simulator"};
  app.require_subcommand(1);
  const std::uint64_t env_seed = default_seed();

  auto* verify_cmd =
      app.add_subcommand("verify", "run the verification suites");
  std::string suite = "all";
  std::uint64_t verify_seed = env_seed;
  bool fault_dk = false;
  verify_cmd->add_option("--suite", suite, "suite to run")
      ->check(CLI::IsMember(
          {"attention", "gradcheck", "inference", "parallel", "all"}));
  verify_cmd->add_option("--seed", verify_seed, "rng seed");
  verify_cmd
      ->add_flag("--fault-dk-sign", fault_dk,
                 "inject a sign flip into the kernel's dK (checker self-test)")
      ->group("");  // hidden

  auto* bench_cmd =
      app.add_subcommand("bench", "benchmark kernels, csv on stdout");
  BenchSpec spec;
  spec.seed = env_seed;
  std::string seq_lens_csv = "256,512,1024";
  std::string impls_csv, dtype_str = "f32", out_path;
  bench_cmd->add_option("--workload", spec.workload, "workload")
      ->check(CLI::IsMember({"attn_fwd_bwd", "inference_decode", "srmsnorm"}));
  bench_cmd->add_option("--seq-lens", seq_lens_csv,
                        "comma-separated sequence lengths");
  bench_cmd->add_option("--dim", spec.dim, "feature dim");
  bench_cmd->add_option("--tile-r", spec.tile_rows, "row tile size");
  bench_cmd->add_option("--tile-c", spec.tile_cols, "column tile size");
  bench_cmd->add_option("--reps", spec.reps, "repetitions (median reported)");
  bench_cmd->add_option("--warmup", spec.warmup, "warmup repetitions");
  bench_cmd->add_option("--lambda", spec.lambda, "decay rate");
  bench_cmd->add_option("--threads", spec.threads, "worker threads");
  bench_cmd->add_option("--impls", impls_csv, "comma-separated impl filter");
  bench_cmd->add_option("--dtype", dtype_str, "f32 or f64")
      ->check(CLI::IsMember({"f32", "f64"}));
  bench_cmd->add_option("--seed", spec.seed, "rng seed");
  bench_cmd->add_option("--out", out_path, "write csv here instead of stdout");

  auto* train_cmd = app.add_subcommand("train", "train a toy model");
  TrainOptions topt;
  train_cmd->add_option("--config", topt.config_path, "model config json")
      ->required();
  train_cmd->add_option("--corpus", topt.corpus_path, "utf-8 text corpus")
      ->required();
  train_cmd->add_option("--steps", topt.steps, "optimizer steps to run")
      ->required();
  train_cmd->add_option("--out", topt.out_path, "checkpoint output path")
      ->required();
  train_cmd->add_option("--loss-csv", topt.loss_csv, "per-step loss csv");
  train_cmd->add_option("--resume", topt.resume, "checkpoint to resume from");
  train_cmd->add_option("--threads", topt.threads, "worker threads");
  train_cmd->add_option("--dtype", topt.dtype, "f32 or f64")
      ->check(CLI::IsMember({"f32", "f64"}));
  train_cmd->add_option("--mode", topt.mode, "attention path")
      ->check(CLI::IsMember({"lightning", "reference"}));

  auto* decode_cmd = app.add_subcommand("decode", "generate from a checkpoint");
  DecodeOptions dopt;
  dopt.seed = env_seed;
  decode_cmd->add_option("--checkpoint", dopt.checkpoint, "model checkpoint")
      ->required();
  decode_cmd->add_option("--prompt", dopt.prompt, "prompt text");
  decode_cmd->add_option("--steps", dopt.steps, "tokens to generate");
  decode_cmd->add_option("--sampler", dopt.sampler, "greedy or temperature")
      ->check(CLI::IsMember({"greedy", "temperature"}));
  decode_cmd->add_option("--temperature", dopt.temperature,
                         "softmax temperature");
  decode_cmd->add_option("--algorithm", dopt.algorithm,
                         "recurrence: robust (default) or origin")
      ->check(CLI::IsMember({"robust", "origin"}));
  decode_cmd->add_option(
      "--lambda-floor", dopt.lambda_floor,
      "clamp head decay rates to at most this value (instability demo)");
  decode_cmd->add_option("--seed", dopt.seed, "sampling seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (verify_cmd->parsed()) return run_verify(suite, verify_seed, fault_dk);
    if (bench_cmd->parsed()) {
      spec.seq_lens = parse_size_list(seq_lens_csv);
      spec.impls = parse_string_list(impls_csv);
      spec.dtype = dtype_str == "f32" ? Dtype::F32 : Dtype::F64;
      const auto rows = run_bench(spec);
      std::ostream* os = &std::cout;
      std::ofstream file;
      if (!out_path.empty()) {
        file.open(out_path);
        if (!file) throw std::runtime_error("cannot write " + out_path);
        os = &file;
      }
      *os << bench_csv_header() << "\n";
      for (const auto& row : rows) *os << to_csv(row) << "\n";
      return 0;
    }
    if (train_cmd->parsed()) return run_train(topt);
    if (decode_cmd->parsed()) return run_decode(dopt);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
