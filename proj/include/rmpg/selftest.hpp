#pragma once

// Built-in invariant suite behind `rmpg selftest`. Each check carries a tag
// (tensor, rmpg, cost, parsegraph, hpe, golden) for filtering and reports
// an empty string on success or a failure description.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <ostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "rmpg/check/finite_difference.hpp"
#include "rmpg/cost_model.hpp"
#include "rmpg/errors.hpp"
#include "rmpg/hierarchy.hpp"
#include "rmpg/hpe/heatmap.hpp"
#include "rmpg/hpe/network.hpp"
#include "rmpg/hpe/skeleton.hpp"
#include "rmpg/ops.hpp"
#include "rmpg/parse_graph.hpp"
#include "rmpg/random.hpp"
#include "rmpg/rmpg.hpp"
#include "rmpg/tensor_io.hpp"

namespace rmpg::selftest {

struct Check {
  std::string tag;
  std::string name;
  std::function<std::string()> run;
};

struct Outcome {
  std::string tag;
  std::string name;
  std::string failure;  // empty on success
};

// ---------------------------------------------------------------- golden

struct GoldenVector {
  std::string name;
  io::NamedTensors<float> tensors;
};

namespace detail {

inline GoldenVector rmpg_golden(const std::string& name, const std::string& desc, std::size_t L, std::size_t C,
                                std::size_t repeats, std::uint64_t seed) {
  Rng rng(seed);
  const auto d = parse_descriptor(desc);
  const auto input = rng.uniform_tensor<float>({L, C}, -1.0, 1.0);
  const auto stack = RmpgStack<float>::random(d, L, C, repeats, rng);
  return {name, {{"input", input}, {"output", rmpg_iterate(input, stack)}}};
}

}  // namespace detail

/// Reference outputs regenerated by `rmpg golden`; selftest recomputes
/// each one and compares against the stored file.
inline std::vector<GoldenVector> golden_vectors() {
  std::vector<GoldenVector> out;
  out.push_back(detail::rmpg_golden("rmpg_channel_2_2", "[2,2]", 16, 8, 1, 11));
  out.push_back(detail::rmpg_golden("rmpg_spatial_2_2", "[2,2]||", 16, 8, 1, 12));
  out.push_back(detail::rmpg_golden("rmpg_channel_5_2_x2", "[5,2]", 12, 10, 2, 13));
  const hpe::Skeleton s = hpe::sample_pose(3);
  const hpe::Grid grid;
  const std::array<hpe::Heatmap, 1> body{hpe::body_heatmap(s, grid)};
  out.push_back({"heatmaps_pose3",
                 {{"image", hpe::render<float>(s, 64)},
                  {"body", hpe::stack_columns<float>(body)},
                  {"parts", hpe::stack_columns<float>(hpe::part_heatmaps(s, grid))},
                  {"joints", hpe::stack_columns<float>(hpe::joint_heatmaps(s, grid))}}});
  return out;
}

inline constexpr double golden_tolerance = 1e-5;

inline void write_golden(const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  for (const auto& g : golden_vectors()) io::save_container(dir / (g.name + ".rmpc"), g.tensors);
}

// ---------------------------------------------------------------- checks

namespace detail {

inline std::string expect(bool ok, const std::string& message) { return ok ? std::string() : message; }

/// Loss sum(rmpg_forward(F) * R) over F and every parameter, in double.
inline check::GradientReport rmpg_gradient_report(const std::string& desc_text, std::size_t L, std::size_t C,
                                                  std::uint64_t seed, bool context = true) {
  Rng rng(seed);
  const auto desc = parse_descriptor(desc_text);
  const auto params = RmpgParams<double>::random(desc, L, C, rng);
  std::vector<Tensor<double>> inputs{rng.uniform_tensor<double>({L, C}, -1.0, 1.0)};
  params.visit([&](const std::string&, const Tensor<double>& t) { inputs.push_back(t); });
  const auto weights = rng.uniform_tensor<double>({L, C}, -1.0, 1.0);
  const RmpgOptions options{context};
  return check::compare_gradients(inputs, [&](Tape<double>& tape, std::span<const Var> vars) {
    const auto b = bind_vars(params, vars.subspan(1));
    const Var out = rmpg_forward(tape, vars[0], b, options);
    return ops::sum(tape, ops::mul(tape, out, tape.input(weights)));
  });
}

inline std::vector<Check> tensor_checks() {
  std::vector<Check> c;
  c.push_back({"tensor", "matmul matches the triple loop", [] {
                 Rng rng(1);
                 const auto a = rng.uniform_tensor<double>({5, 7}, -1, 1);
                 const auto b = rng.uniform_tensor<double>({7, 3}, -1, 1);
                 Tape<double> tape;
                 const auto& m = tape.value(ops::matmul(tape, tape.input(a), tape.input(b)));
                 double worst = 0;
                 for (std::size_t i = 0; i < 5; ++i) {
                   for (std::size_t j = 0; j < 3; ++j) {
                     double s = 0;
                     for (std::size_t k = 0; k < 7; ++k) s += a.at(i, k) * b.at(k, j);
                     worst = std::max(worst, std::abs(s - m.at(i, j)));
                   }
                 }
                 return expect(worst < 1e-12, "max deviation " + std::to_string(worst));
               }});
  c.push_back({"tensor", "fused attention matches the primitive chain", [] {
                 Rng rng(2);
                 const auto x = rng.uniform_tensor<double>({70, 3}, -2, 2);
                 Tape<double> tape;
                 const Var v = tape.input(x);
                 const Tensor<double> fused = tape.value(ops::self_attention(tape, v, 0.5));
                 const Var s = ops::scale(tape, ops::matmul(tape, v, ops::transpose(tape, v)), 0.5);
                 const auto& chain = tape.value(ops::matmul(tape, ops::softmax_rows(tape, s), v));
                 return expect(max_abs_diff(fused, chain) < 1e-12, "fused and unfused attention differ");
               }});
  c.push_back({"tensor", "primitive gradients match finite differences", [] {
                 Rng rng(3);
                 std::vector<Tensor<double>> in{rng.uniform_tensor<double>({6, 4}, -1, 1),
                                                rng.uniform_tensor<double>({4, 5}, -1, 1),
                                                rng.uniform_tensor<double>({5}, -1, 1)};
                 const auto r = check::compare_gradients(in, [](Tape<double>& t, std::span<const Var> v) {
                   const Var a = ops::affine_channels(t, v[0], v[1], v[2]);
                   const Var att = ops::self_attention(t, ops::relu(t, a), 0.7);
                   return ops::sum(t, ops::mul(t, att, att));
                 });
                 return expect(r.max_rel_error < 1e-6, "max relative error " + std::to_string(r.max_rel_error));
               }});
  c.push_back({"tensor", "tensor file round trip", [] {
                 Rng rng(4);
                 const auto t = rng.uniform_tensor<float>({3, 4, 2}, -1, 1);
                 std::stringstream ss;
                 io::write_tensor(ss, t);
                 return expect(io::read_tensor<float>(ss) == t, "round trip changed the tensor");
               }});
  return c;
}

inline std::vector<Check> rmpg_checks() {
  std::vector<Check> c;
  for (const char* desc : {"[2,2]", "[2,2]||"}) {
    c.push_back({"rmpg", std::string("gradients match finite differences for ") + desc, [desc] {
                   const std::size_t L = parse_descriptor(desc).mode == Mode::spatial ? 8 : 5;
                   const auto r = rmpg_gradient_report(desc, L, 4, 21);
                   return expect(r.max_rel_error < 1e-4, "max relative error " + std::to_string(r.max_rel_error));
                 }});
  }
  c.push_back({"rmpg", "zero parameters give the identity", [] {
                 Rng rng(22);
                 const auto d = parse_descriptor("[3,2]");
                 const auto F = rng.uniform_tensor<double>({7, 5}, -3, 3);
                 return expect(rmpg_forward(F, RmpgParams<double>::zeros(d, 7, 5)) == F, "output differs from input");
               }});
  c.push_back({"rmpg", "spatial leaf count does not change the output", [] {
                 Rng rng(23);
                 const std::size_t L = 32, C = 6;
                 const auto F = rng.uniform_tensor<double>({L, C}, -1, 1);
                 const auto base = RmpgParams<double>::random(parse_descriptor("[2,2]||"), L, C, rng);
                 const auto ref = rmpg_forward(F, base);
                 for (const char* d : {"[2,4]||", "[2,8]||"}) {
                   auto p = RmpgParams<double>::zeros(parse_descriptor(d), L, C);
                   std::vector<Tensor<double>> src;
                   base.visit([&](const std::string&, const Tensor<double>& t) { src.push_back(t); });
                   std::size_t k = 0;
                   p.visit([&](const std::string&, Tensor<double>& t) { t = src.at(k++); });
                   const double diff = max_abs_diff(rmpg_forward(F, p), ref);
                   if (diff > 1e-6) return std::string(d) + " differs by " + std::to_string(diff);
                 }
                 return std::string();
               }});
  return c;
}

inline std::vector<Check> cost_checks() {
  std::vector<Check> c;
  c.push_back({"cost", "analytic counts equal allocation and instrumented counts", [] {
                 const std::vector<std::pair<std::string, std::pair<std::size_t, std::size_t>>> cases{
                     {"[2]", {6, 5}}, {"[3,2]", {6, 7}}, {"[2,2]||", {8, 3}}, {"[2,3]||", {12, 4}}, {"[5,2]", {4, 32}}};
                 Rng rng(31);
                 for (const auto& [text, dims] : cases) {
                   const auto d = parse_descriptor(text);
                   const auto [L, C] = dims;
                   const auto p = RmpgParams<float>::random(d, L, C, rng);
                   OpCounter ops_count;
                   rmpg_forward(rng.uniform_tensor<float>({L, C}, -1, 1), p, {}, &ops_count);
                   const auto r = cost::analyze(d, L, C);
                   if (r.params != p.parameter_count()) return text + ": parameter count mismatch";
                   if (r.mul_adds != ops_count.mul_adds || r.exp_evals != ops_count.exp_evals) {
                     return text + ": operation count mismatch";
                   }
                 }
                 return std::string();
               }});
  c.push_back({"cost", "repeats scale counts linearly", [] {
                 const auto d = parse_descriptor("[2,2]");
                 const auto one = cost::analyze(d, 64, 16, 1);
                 for (std::size_t t : {2u, 3u, 12u}) {
                   const auto r = cost::analyze(d, 64, 16, t);
                   if (r.params != t * one.params || r.mul_adds != t * one.mul_adds) {
                     return "repeats " + std::to_string(t) + " not linear";
                   }
                 }
                 return std::string();
               }});
  c.push_back({"cost", "depth sweep trends", [] {
                 const auto ch = cost::depth_sweep(Mode::channel, 7, 3072, 256);
                 const auto sp = cost::depth_sweep(Mode::spatial, 7, 3072, 256);
                 for (std::size_t i = 1; i < ch.size(); ++i) {
                   if (ch[i].cost.params <= ch[i - 1].cost.params) return std::string("channel params not increasing");
                   if (i >= 2 && ch[i].cost.params - ch[i - 1].cost.params >= ch[i - 1].cost.params - ch[i - 2].cost.params) {
                     return std::string("channel increments not decreasing");
                   }
                   if (i >= 2 && static_cast<double>(sp[i].cost.params) < 1.8 * static_cast<double>(sp[i - 1].cost.params)) {
                     return std::string("spatial growth below 1.8x");
                   }
                 }
                 return std::string();
               }});
  return c;
}

inline std::vector<Check> parsegraph_checks() {
  std::vector<Check> c;
  c.push_back({"parsegraph", "two-pass MAP equals enumeration without context", [] {
                 for (std::uint64_t seed = 0; seed < 20; ++seed) {
                   Rng rng(mix_seed(41, seed));
                   const auto m = pg::random_model(rng);
                   if (pg::infer(m).score != pg::map_brute_force(m).score) return "seed " + std::to_string(seed);
                 }
                 return std::string();
               }});
  c.push_back({"parsegraph", "two-pass MAP never beats enumeration with context", [] {
                 pg::RandomModelOptions opt;
                 opt.context = true;
                 for (std::uint64_t seed = 0; seed < 20; ++seed) {
                   Rng rng(mix_seed(42, seed));
                   const auto m = pg::random_model(rng, opt);
                   if (pg::infer(m).score > pg::map_brute_force(m).score) return "seed " + std::to_string(seed);
                 }
                 return std::string();
               }});
  c.push_back({"parsegraph", "probabilities sum to one", [] {
                 Rng rng(43);
                 pg::RandomModelOptions opt;
                 opt.context = true;
                 const double total = pg::total_probability(pg::random_model(rng, opt));
                 return expect(std::abs(total - 1.0) < 1e-9, "sum is " + std::to_string(total));
               }});
  return c;
}

inline std::vector<Check> hpe_checks() {
  std::vector<Check> c;
  c.push_back({"hpe", "joint maps peak at their joints", [] {
                 const auto s = hpe::sample_pose(5);
                 const hpe::Grid grid;
                 const auto maps = hpe::joint_heatmaps(s, grid);
                 for (std::size_t j = 0; j < hpe::joint_count; ++j) {
                   const auto p = grid.to_grid(s.joints[j]);
                   if (hpe::distance(maps[j].argmax(), p) > 1.0) return "joint " + std::string(hpe::joint_names[j]);
                   if (maps[j].max() > 1.0) return std::string("peak above 1");
                 }
                 return std::string();
               }});
  c.push_back({"hpe", "labels are deterministic", [] {
                 const hpe::Grid grid;
                 const auto a = hpe::part_heatmaps(hpe::sample_pose(9), grid);
                 const auto b = hpe::part_heatmaps(hpe::sample_pose(9), grid);
                 return expect(a == b, "identical poses gave different maps");
               }});
  c.push_back({"hpe", "network forward shapes", [] {
                 hpe::ToyNetConfig cfg;
                 cfg.image_size = 16;
                 const auto net = hpe::ToyNet<float>::build(cfg);
                 Tape<float> tape;
                 const auto b = hpe::bind(tape, net, false);
                 const auto out = hpe::forward(tape, tape.input(Tensor<float>({256, 1})), net, b);
                 const auto& j = tape.value(out.joints_final);
                 return expect(j.rows() == 64 && j.cols() == hpe::joint_count && j.all_finite(), "bad output shape");
               }});
  return c;
}

inline std::vector<Check> golden_checks(const std::filesystem::path& dir) {
  std::vector<Check> c;
  for (auto& g : golden_vectors()) {
    c.push_back({"golden", g.name, [dir, g] {
                   const auto path = dir / (g.name + ".rmpc");
                   const auto stored = io::load_container<float>(path);
                   if (stored.size() != g.tensors.size()) return "entry count differs in " + path.string();
                   for (std::size_t i = 0; i < stored.size(); ++i) {
                     const auto& [name, t] = g.tensors[i];
                     if (stored[i].first != name || stored[i].second.shape() != t.shape()) {
                       return "layout of '" + name + "' differs in " + path.string();
                     }
                     const double diff = max_abs_diff(stored[i].second, t);
                     if (!(diff <= golden_tolerance)) return "'" + name + "' deviates by " + std::to_string(diff);
                   }
                   return std::string();
                 }});
  }
  return c;
}

}  // namespace detail

inline std::vector<Check> all_checks(const std::filesystem::path& golden_dir) {
  std::vector<Check> out;
  for (auto group : {detail::tensor_checks(), detail::rmpg_checks(), detail::cost_checks(), detail::parsegraph_checks(),
                     detail::hpe_checks(), detail::golden_checks(golden_dir)}) {
    for (auto& c : group) out.push_back(std::move(c));
  }
  return out;
}

/// Runs the checks whose tag equals `filter` (all when empty); prints one
/// line per check and returns the outcomes.
inline std::vector<Outcome> run(const std::filesystem::path& golden_dir, const std::string& filter, std::ostream& log) {
  std::vector<Outcome> out;
  for (const auto& c : all_checks(golden_dir)) {
    if (!filter.empty() && c.tag != filter) continue;
    Outcome o{c.tag, c.name, {}};
    try {
      o.failure = c.run();
    } catch (const std::exception& e) {
      o.failure = std::string("exception: ") + e.what();
    }
    log << (o.failure.empty() ? "ok   " : "FAIL ") << '[' << c.tag << "] " << c.name;
    if (!o.failure.empty()) log << ": " << o.failure;
    log << '\n';
    out.push_back(std::move(o));
  }
  return out;
}

}  // namespace rmpg::selftest
