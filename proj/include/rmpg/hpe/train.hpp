#pragma once

// Synthetic dataset, gradient-descent training, PCK evaluation and
// checkpoints for the toy pose network.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "rmpg/errors.hpp"
#include "rmpg/hpe/heatmap.hpp"
#include "rmpg/hpe/network.hpp"
#include "rmpg/hpe/skeleton.hpp"
#include "rmpg/random.hpp"
#include "rmpg/tape.hpp"
#include "rmpg/tensor_io.hpp"

namespace rmpg::hpe {

struct TrainConfig {
  ToyNetConfig net;
  double learning_rate = 0.05;
  std::size_t steps = 500;
  std::size_t batch = 1;
  std::size_t train_samples = 256;
  std::size_t eval_samples = 64;
  std::uint64_t data_seed = 1;
  double pck_threshold = 0.25;

  void validate() const {
    net.validate();
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw ContractError("learning rate must be >= 0");
    if (batch == 0) throw ContractError("batch size must be positive");
    if (train_samples == 0) throw ContractError("training set is empty");
    if (!(pck_threshold > 0.0)) throw ContractError("PCK threshold must be positive");
  }
};

/// Flat JSON object; unknown keys are rejected, absent keys keep their
/// current value.
inline void apply_config_json(TrainConfig& cfg, const nlohmann::json& j) {
  if (!j.is_object()) throw ParseError("training config must be a JSON object");
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "image_size") cfg.net.image_size = v.get<std::size_t>();
      else if (key == "channels") cfg.net.channels = v.get<std::size_t>();
      else if (key == "rmpg_s") cfg.net.rmpg_s = v.get<std::string>();
      else if (key == "rmpg_u") cfg.net.rmpg_u = v.get<std::string>();
      else if (key == "use_rmpg_u") cfg.net.use_rmpg_u = v.get<bool>();
      else if (key == "supervise_parts") cfg.net.supervise_parts = v.get<bool>();
      else if (key == "context") cfg.net.context = v.get<bool>();
      else if (key == "share_rmpg_s") cfg.net.share_rmpg_s = v.get<bool>();
      else if (key == "weight_body") cfg.net.weight_body = v.get<double>();
      else if (key == "weight_parts") cfg.net.weight_parts = v.get<double>();
      else if (key == "weight_joints_mid") cfg.net.weight_joints_mid = v.get<double>();
      else if (key == "weight_joints_final") cfg.net.weight_joints_final = v.get<double>();
      else if (key == "seed") cfg.net.seed = v.get<std::uint64_t>();
      else if (key == "learning_rate") cfg.learning_rate = v.get<double>();
      else if (key == "steps") cfg.steps = v.get<std::size_t>();
      else if (key == "batch") cfg.batch = v.get<std::size_t>();
      else if (key == "train_samples") cfg.train_samples = v.get<std::size_t>();
      else if (key == "eval_samples") cfg.eval_samples = v.get<std::size_t>();
      else if (key == "data_seed") cfg.data_seed = v.get<std::uint64_t>();
      else if (key == "pck_threshold") cfg.pck_threshold = v.get<double>();
      else throw ParseError("unknown config key '" + key + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("bad config value: ") + e.what());
  }
}

inline TrainConfig load_train_config(const std::filesystem::path& path, TrainConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("config " + path.string() + ": " + e.what());
  }
  apply_config_json(base, j);
  return base;
}

inline nlohmann::json config_to_json(const TrainConfig& c) {
  return {{"image_size", c.net.image_size},
          {"channels", c.net.channels},
          {"rmpg_s", c.net.rmpg_s},
          {"rmpg_u", c.net.rmpg_u},
          {"use_rmpg_u", c.net.use_rmpg_u},
          {"supervise_parts", c.net.supervise_parts},
          {"context", c.net.context},
          {"share_rmpg_s", c.net.share_rmpg_s},
          {"weight_body", c.net.weight_body},
          {"weight_parts", c.net.weight_parts},
          {"weight_joints_mid", c.net.weight_joints_mid},
          {"weight_joints_final", c.net.weight_joints_final},
          {"seed", c.net.seed},
          {"learning_rate", c.learning_rate},
          {"steps", c.steps},
          {"batch", c.batch},
          {"train_samples", c.train_samples},
          {"eval_samples", c.eval_samples},
          {"data_seed", c.data_seed},
          {"pck_threshold", c.pck_threshold}};
}

template <class T>
struct Sample {
  Skeleton skeleton;
  Tensor<T> image;
  Targets<T> targets;
};

/// Held-out samples draw from a disjoint seed stream.
enum class Split { train, held_out };

template <class T>
std::vector<Sample<T>> make_dataset(std::size_t count, std::uint64_t seed, Split split, const ToyNetConfig& net,
                                    const PosePrior& prior = {}) {
  const std::uint64_t base = mix_seed(seed, split == Split::train ? 0 : 1);
  const PosePrior p = prior.resized(static_cast<double>(net.image_size));
  std::vector<Sample<T>> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    Skeleton s = sample_pose(mix_seed(base, i), p);
    out.push_back({s, render<T>(s, net.image_size), make_targets<T>(s, net.grid())});
  }
  return out;
}

template <class T>
LossTerms sample_loss(const ToyNet<T>& net, const Sample<T>& sample) {
  Tape<T> tape;
  const auto b = bind(tape, net, false);
  const auto out = forward(tape, tape.input(sample.image), net, b);
  LossTerms terms;
  total_loss(tape, out, sample.targets, net.config, terms);
  return terms;
}

inline LossTerms& operator+=(LossTerms& a, const LossTerms& b) {
  a.body += b.body;
  a.parts += b.parts;
  a.joints_mid += b.joints_mid;
  a.joints_final += b.joints_final;
  a.total += b.total;
  return a;
}

inline LossTerms operator/(LossTerms a, double d) {
  a.body /= d;
  a.parts /= d;
  a.joints_mid /= d;
  a.joints_final /= d;
  a.total /= d;
  return a;
}

template <class T>
LossTerms mean_loss(const ToyNet<T>& net, const std::vector<Sample<T>>& samples) {
  if (samples.empty()) throw ContractError("mean loss over an empty dataset");
  LossTerms acc;
  for (const auto& s : samples) acc += sample_loss(net, s);
  return acc / static_cast<double>(samples.size());
}

/// Loss, and gradients in ToyNet::visit order, for one sample.
template <class T>
LossTerms sample_gradients(const ToyNet<T>& net, const Sample<T>& sample, std::vector<Tensor<T>>& grads) {
  Tape<T> tape;
  const auto b = bind(tape, net, true);
  const auto out = forward(tape, tape.input(sample.image), net, b);
  LossTerms terms;
  const Var loss = total_loss(tape, out, sample.targets, net.config, terms);
  tape.backward(loss);
  if (grads.empty()) {
    for (Var v : b.vars) grads.emplace_back(tape.value(v).shape());
  }
  for (std::size_t k = 0; k < b.vars.size(); ++k) {
    if (!tape.has_grad(b.vars[k])) continue;
    auto dst = grads[k].data();
    const auto src = tape.grad(b.vars[k]).data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  }
  return terms;
}

struct StepRecord {
  std::size_t step = 0;
  LossTerms loss;  // batch mean before the update
};

inline constexpr const char* metrics_header = "step,loss_body,loss_parts,loss_joints_mid,loss_joints_final,total";

inline void write_metrics_row(std::ostream& out, const StepRecord& r) {
  out << r.step << ',' << r.loss.body << ',' << r.loss.parts << ',' << r.loss.joints_mid << ',' << r.loss.joints_final
      << ',' << r.loss.total << '\n';
}

/// Mini-batch gradient descent over an epoch-wise seeded shuffle. A
/// non-finite loss or value raises TrainingError carrying the step.
template <class T>
std::vector<StepRecord> train(ToyNet<T>& net, const std::vector<Sample<T>>& data, const TrainConfig& cfg,
                              const std::function<void(const StepRecord&)>& on_step = {}) {
  cfg.validate();
  if (data.empty()) throw ContractError("training set is empty");
  Rng rng(mix_seed(cfg.net.seed, 0x7261696eULL));
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t cursor = order.size();

  std::vector<StepRecord> trace;
  trace.reserve(cfg.steps);
  std::vector<Tensor<T>> grads;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    LossTerms acc;
    for (auto& g : grads) std::fill(g.data().begin(), g.data().end(), T{0});
    for (std::size_t k = 0; k < cfg.batch; ++k) {
      if (cursor == order.size()) {
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
        cursor = 0;
      }
      try {
        acc += sample_gradients(net, data[order[cursor++]], grads);
      } catch (const NumericError& e) {
        throw TrainingError(step, e.what());
      }
    }
    StepRecord rec{step, acc / static_cast<double>(cfg.batch)};
    if (!std::isfinite(rec.loss.total)) throw TrainingError(step, "non-finite loss");
    const T factor = static_cast<T>(cfg.learning_rate / static_cast<double>(cfg.batch));
    std::size_t k = 0;
    net.visit([&](const std::string&, Tensor<T>& p) {
      const auto g = grads[k++].data();
      auto d = p.data();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] -= factor * g[i];
    });
    trace.push_back(rec);
    if (on_step) on_step(rec);
  }
  return trace;
}

/// Argmax-decoded final joint predictions in heatmap coordinates.
template <class T>
std::vector<Point> predict_joints(const ToyNet<T>& net, const Tensor<T>& image) {
  Tape<T> tape;
  const auto b = bind(tape, net, false);
  const auto out = forward(tape, tape.input(image), net, b);
  return decode_columns(tape.value(out.joints_final), net.config.grid());
}

template <class T>
double evaluate_pck(const ToyNet<T>& net, const std::vector<Sample<T>>& samples, double threshold) {
  if (samples.empty()) throw ContractError("PCK over an empty dataset");
  PckCounter pck(net.config.grid(), threshold);
  for (const auto& s : samples) pck.add(predict_joints(net, s.image), s.skeleton);
  return pck.value();
}

template <class T>
void save_checkpoint(const ToyNet<T>& net, const std::filesystem::path& path) {
  io::NamedTensors<T> entries;
  net.visit([&](const std::string& name, const Tensor<T>& t) { entries.emplace_back(name, t); });
  io::save_container(path, entries);
}

/// Loads tensors into a network built from the matching configuration.
template <class T>
void load_checkpoint(ToyNet<T>& net, const std::filesystem::path& path) {
  const auto entries = io::load_container<T>(path);
  std::size_t k = 0;
  net.visit([&](const std::string& name, Tensor<T>& t) {
    if (k >= entries.size()) throw FormatError("checkpoint is missing '" + name + "'");
    const auto& [stored, value] = entries[k++];
    if (stored != name) throw FormatError("checkpoint entry '" + stored + "' where '" + name + "' was expected");
    if (value.shape() != t.shape()) {
      throw FormatError("checkpoint entry '" + name + "' has shape " + to_string(value.shape()) + ", expected " +
                        to_string(t.shape()));
    }
    t = value;
  });
  if (k != entries.size()) throw FormatError("checkpoint has unexpected extra entries");
}

}  // namespace rmpg::hpe
