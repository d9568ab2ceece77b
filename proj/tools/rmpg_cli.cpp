// rmpg: cost sweeps, refinement forward passes, parse-graph inference,
// toy pose training/evaluation, golden vectors and the self-test suite.
//
// Exit codes: 0 ok, 1 test failure, 2 input error, 3 capacity exceeded,
// 4 numeric failure.

#include <CLI11.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "rmpg/cost_model.hpp"
#include "rmpg/errors.hpp"
#include "rmpg/hierarchy.hpp"
#include "rmpg/hpe/train.hpp"
#include "rmpg/parse_graph.hpp"
#include "rmpg/random.hpp"
#include "rmpg/rmpg.hpp"
#include "rmpg/selftest.hpp"
#include "rmpg/tensor_io.hpp"

#ifndef RMPG_DATA_DIR
#define RMPG_DATA_DIR "data"
#endif

namespace fs = std::filesystem;
using namespace rmpg;

namespace {

enum Exit : int { ok = 0, test_failure = 1, input_error = 2, capacity = 3, numeric = 4 };

struct AnalyzeArgs {
  std::string mode = "channel";
  std::string sweep;
  std::string desc;
  std::size_t max_depth = 7;
  std::size_t tokens = 64 * 48;
  std::size_t channels = 256;
  std::size_t repeats = 1;
  std::string out = ".";
};

int cmd_analyze(const AnalyzeArgs& a) {
  std::vector<cost::SweepRow> rows;
  if (!a.desc.empty()) {
    rows.push_back(cost::make_row(parse_descriptor(a.desc), a.tokens, a.channels, a.repeats));
  } else {
    const Mode mode = parse_mode(a.mode);
    if (a.sweep == "depth") {
      rows = cost::depth_sweep(mode, a.max_depth, a.tokens, a.channels, a.repeats);
    } else if (a.sweep == "breadth") {
      rows = cost::breadth_sweep(mode, a.max_depth, a.tokens, a.channels, a.repeats);
    } else {
      throw ParseError("give --desc or --sweep depth|breadth");
    }
  }
  fs::create_directories(a.out);
  const fs::path path = fs::path(a.out) / "analyze.csv";
  std::ofstream file(path);
  if (!file) throw FormatError("cannot write " + path.string());
  cost::write_csv(file, rows);
  cost::write_csv(std::cout, rows);
  std::cerr << "wrote " << rows.size() << " rows to " << path.string() << '\n';
  return ok;
}

struct ForwardArgs {
  std::string input;
  std::string desc = "[2,2]";
  std::size_t repeats = 1;
  std::uint64_t seed = 0;
  std::string init = "random";
  std::string out = ".";
};

int cmd_forward(const ForwardArgs& a) {
  const auto F = io::load_tensor<float>(a.input);
  if (F.rank() != 2) throw DimensionError("input must be a tokens x channels matrix, got " + to_string(F.shape()));
  const auto desc = parse_descriptor(a.desc);
  RmpgStack<float> stack;
  if (a.init == "zero") {
    stack = RmpgStack<float>::zeros(desc, F.rows(), F.cols(), a.repeats);
  } else if (a.init == "random") {
    Rng rng(a.seed);
    stack = RmpgStack<float>::random(desc, F.rows(), F.cols(), a.repeats, rng);
  } else {
    throw ParseError("--init must be zero or random");
  }
  const auto out = rmpg_iterate(F, stack);
  fs::create_directories(a.out);
  const fs::path path = fs::path(a.out) / "output.rmpg";
  io::save_tensor(path, out);
  std::cout << "shape " << to_string(out.shape()) << '\n'
            << "checksum " << std::hex << std::setw(16) << std::setfill('0') << io::checksum(out) << std::dec << '\n'
            << "output " << path.string() << '\n';
  return ok;
}

std::string join(const pg::Assignment& a) {
  std::string s = "[";
  for (std::size_t i = 0; i < a.size(); ++i) s += (i ? "," : "") + std::to_string(a[i]);
  return s + "]";
}

int cmd_parsegraph(const std::string& file, bool oracle, std::uint64_t cap) {
  const auto model = pg::load_model(file);
  const auto r = pg::infer(model);
  std::cout << std::setprecision(17) << "assignment " << join(r.assignment) << '\n' << "score " << r.score << '\n';
  if (!oracle) return ok;
  const auto bf = pg::map_brute_force(model, cap);
  std::cout << "oracle_assignment " << join(bf.assignment) << '\n' << "oracle_score " << bf.score << '\n';
  std::cout << (bf.score == r.score ? "MATCH" : "MISMATCH") << '\n';
  return ok;
}

struct TrainArgs {
  std::string config;
  std::optional<std::size_t> steps, batch, samples;
  std::optional<std::uint64_t> seed;
  std::optional<double> lr;
  bool no_context = false, no_rmpg_u = false, no_parts = false;
  std::string out = "run";
};

hpe::TrainConfig resolve(const TrainArgs& a) {
  hpe::TrainConfig cfg = a.config.empty() ? hpe::TrainConfig{} : hpe::load_train_config(a.config);
  if (a.steps) cfg.steps = *a.steps;
  if (a.batch) cfg.batch = *a.batch;
  if (a.samples) cfg.train_samples = *a.samples;
  if (a.seed) cfg.net.seed = *a.seed;
  if (a.lr) cfg.learning_rate = *a.lr;
  if (a.no_context) cfg.net.context = false;
  if (a.no_rmpg_u) cfg.net.use_rmpg_u = false;
  if (a.no_parts) cfg.net.supervise_parts = false;
  cfg.validate();
  return cfg;
}

int cmd_train(const TrainArgs& a) {
  const auto cfg = resolve(a);
  fs::create_directories(a.out);
  const fs::path dir(a.out);
  std::ofstream(dir / "config.json") << hpe::config_to_json(cfg).dump(2) << '\n';
  auto net = hpe::ToyNet<float>::build(cfg.net);
  const auto data = hpe::make_dataset<float>(cfg.train_samples, cfg.data_seed, hpe::Split::train, cfg.net);
  std::ofstream metrics(dir / "metrics.csv");
  metrics << hpe::metrics_header << '\n';
  const auto trace = hpe::train(net, data, cfg, [&](const hpe::StepRecord& r) {
    hpe::write_metrics_row(metrics, r);
    if ((r.step + 1) % 50 == 0) std::cerr << "step " << r.step + 1 << " loss " << r.loss.total << '\n';
  });
  hpe::save_checkpoint(net, dir / "checkpoint.rmpc");
  std::cout << "steps " << trace.size() << '\n';
  if (!trace.empty()) std::cout << "final_loss " << trace.back().loss.total << '\n';
  std::cout << "checkpoint " << (dir / "checkpoint.rmpc").string() << '\n';
  return ok;
}

struct EvalArgs {
  std::string checkpoint;
  std::string config;
  std::optional<std::size_t> samples;
  std::optional<double> threshold;
};

int cmd_eval(const EvalArgs& a) {
  const fs::path ckpt(a.checkpoint);
  const fs::path config = a.config.empty() ? ckpt.parent_path() / "config.json" : fs::path(a.config);
  const auto cfg = hpe::load_train_config(config);
  cfg.validate();
  auto net = hpe::ToyNet<float>::build(cfg.net);
  hpe::load_checkpoint(net, ckpt);
  const std::size_t n = a.samples.value_or(cfg.eval_samples);
  const double threshold = a.threshold.value_or(cfg.pck_threshold);
  const auto data = hpe::make_dataset<float>(n, cfg.data_seed, hpe::Split::held_out, cfg.net);
  std::cout << "pck " << hpe::evaluate_pck(net, data, threshold) << '\n'
            << "threshold " << threshold << '\n'
            << "samples " << n << '\n';
  return ok;
}

int cmd_selftest(const std::string& filter, const std::string& golden_dir) {
  const auto outcomes = selftest::run(golden_dir, filter, std::cout);
  std::size_t failed = 0;
  for (const auto& o : outcomes) failed += !o.failure.empty();
  if (outcomes.empty()) {
    std::cerr << "no checks match filter '" << filter << "'\n";
    return input_error;
  }
  std::cout << outcomes.size() - failed << " passed, " << failed << " failed\n";
  if (failed == 0) return ok;
  std::cerr << "failures:\n";
  for (const auto& o : outcomes) {
    if (!o.failure.empty()) std::cerr << "  [" << o.tag << "] " << o.name << ": " << o.failure << '\n';
  }
  return test_failure;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Recursive multi-level parse-graph refinement toolkit"};
  app.require_subcommand(1);

  AnalyzeArgs an;
  auto* analyze = app.add_subcommand("analyze", "Parameter and mul-add counts for descriptors or sweeps");
  analyze->add_option("--mode", an.mode, "Decomposition mode for sweeps: channel or spatial")->capture_default_str();
  analyze->add_option("--sweep", an.sweep, "Sweep kind: depth ([2]*d) or breadth ([2^n,2])");
  analyze->add_option("--desc", an.desc, "Single descriptor, e.g. \"[2,2]\" or \"[2,n]||\"");
  analyze->add_option("--max-depth", an.max_depth, "Largest depth (or breadth exponent) of the sweep")
      ->capture_default_str();
  analyze->add_option("--L", an.tokens, "Token count")->capture_default_str();
  analyze->add_option("--C", an.channels, "Channel count")->capture_default_str();
  analyze->add_option("--repeats", an.repeats, "Refinement stages")->capture_default_str();
  analyze->add_option("--out", an.out, "Output directory for analyze.csv")->capture_default_str();

  ForwardArgs fw;
  auto* forward = app.add_subcommand("forward", "Run seeded refinement stages over a tensor file");
  forward->add_option("--input", fw.input, "Input tensor file (tokens x channels)")->required();
  forward->add_option("--desc", fw.desc, "Hierarchy descriptor")->capture_default_str();
  forward->add_option("--repeats", fw.repeats, "Refinement stages; 0 is the identity")->capture_default_str();
  forward->add_option("--seed", fw.seed, "Parameter seed")->capture_default_str();
  forward->add_option("--init", fw.init, "Parameter initialisation: zero or random")->capture_default_str();
  forward->add_option("--out", fw.out, "Output directory for output.rmpg")->capture_default_str();

  std::string pg_file;
  bool pg_oracle = false;
  std::uint64_t pg_capacity = pg::default_capacity;
  auto* parsegraph = app.add_subcommand("parsegraph", "Parse-graph inference");
  parsegraph->require_subcommand(1);
  auto* infer = parsegraph->add_subcommand("infer", "Two-pass MAP inference on a model file");
  infer->add_option("file", pg_file, "Model file (JSON)")->required();
  infer->add_flag("--oracle", pg_oracle, "Also enumerate all assignments and compare");
  infer->add_option("--capacity", pg_capacity, "Largest assignment count the oracle enumerates")->capture_default_str();

  TrainArgs tr;
  auto* train = app.add_subcommand("train", "Train the toy pose network");
  train->add_option("--config", tr.config, "Training config file (JSON); flags override it");
  train->add_option("--steps", tr.steps, "Gradient steps");
  train->add_option("--batch", tr.batch, "Samples per step");
  train->add_option("--samples", tr.samples, "Training set size");
  train->add_option("--seed", tr.seed, "Model and shuffle seed");
  train->add_option("--lr", tr.lr, "Learning rate");
  train->add_flag("--no-context", tr.no_context, "Replace sibling attention by the identity");
  train->add_flag("--no-rmpg-u", tr.no_rmpg_u, "Drop the unsupervised refinement block");
  train->add_flag("--no-parts", tr.no_parts, "Drop part and intermediate joint supervision");
  train->add_option("--out", tr.out, "Output directory (metrics.csv, checkpoint.rmpc, config.json)")
      ->capture_default_str();

  EvalArgs ev;
  auto* eval = app.add_subcommand("eval", "PCK of a checkpoint on held-out samples");
  eval->add_option("--checkpoint", ev.checkpoint, "Checkpoint written by train")->required();
  eval->add_option("--config", ev.config, "Config file; defaults to config.json beside the checkpoint");
  eval->add_option("--samples", ev.samples, "Held-out sample count");
  eval->add_option("--threshold", ev.threshold, "PCK threshold as a fraction of the bbox diagonal");

  std::string golden_out = std::string(RMPG_DATA_DIR) + "/golden";
  auto* golden = app.add_subcommand("golden", "Regenerate golden vectors");
  golden->add_option("--out", golden_out, "Output directory")->capture_default_str();

  std::string filter;
  std::string golden_dir = std::string(RMPG_DATA_DIR) + "/golden";
  auto* self = app.add_subcommand("selftest", "Run the built-in invariant suite");
  self->add_option("--filter", filter, "Only checks with this tag (tensor, rmpg, cost, parsegraph, hpe, golden)");
  self->add_option("--golden-dir", golden_dir, "Directory of golden vectors")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return input_error;
  }

  try {
    if (*analyze) return cmd_analyze(an);
    if (*forward) return cmd_forward(fw);
    if (*parsegraph) return cmd_parsegraph(pg_file, pg_oracle, pg_capacity);
    if (*train) return cmd_train(tr);
    if (*eval) return cmd_eval(ev);
    if (*golden) {
      selftest::write_golden(golden_out);
      std::cout << "golden vectors written to " << golden_out << '\n';
      return ok;
    }
    if (*self) return cmd_selftest(filter, golden_dir);
  } catch (const CapacityError& e) {
    std::cerr << "capacity exceeded: " << e.what() << '\n';
    return capacity;
  } catch (const TrainingError& e) {
    std::cerr << "training failed at step " << e.step << ": " << e.what() << '\n';
    return numeric;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return numeric;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return input_error;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return input_error;
  }
  return input_error;
}
