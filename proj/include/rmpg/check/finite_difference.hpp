#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "rmpg/tape.hpp"
#include "rmpg/tensor.hpp"

namespace rmpg::check {

/// Relative error used by every gradient check:
///   |analytic - numeric| / max(|analytic|, |numeric|, relative_floor)
/// The floor turns the comparison absolute for gradients that are
/// essentially zero.
inline constexpr double relative_floor = 1e-3;

inline double relative_error(double analytic, double numeric) {
  const double scale = std::max({std::abs(analytic), std::abs(numeric), relative_floor});
  return std::abs(analytic - numeric) / scale;
}

struct GradientReport {
  double max_rel_error = 0.0;
  std::size_t entries = 0;
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
};

/// Builds a scalar loss from tape variables bound to the given inputs.
using LossBuilder = std::function<Var(Tape<double>&, std::span<const Var>)>;

inline double evaluate_loss(const std::vector<Tensor<double>>& inputs, const LossBuilder& build) {
  Tape<double> tape;
  std::vector<Var> vars;
  vars.reserve(inputs.size());
  for (const auto& t : inputs) vars.push_back(tape.input(t, false));
  return tape.value(build(tape, vars))[0];
}

/// Compares reverse-mode gradients against central differences
/// (f(x+eps) - f(x-eps)) / 2 eps for every entry of every input. With
/// stride > 1 only every stride-th entry of each input is probed.
inline GradientReport compare_gradients(std::vector<Tensor<double>> inputs, const LossBuilder& build,
                                        double eps = 1e-5, std::size_t stride = 1) {
  Tape<double> tape;
  std::vector<Var> vars;
  for (const auto& t : inputs) vars.push_back(tape.parameter(t));
  const Var loss = build(tape, vars);
  tape.backward(loss);

  GradientReport report;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const bool has = tape.has_grad(vars[i]);
    for (std::size_t j = 0; j < inputs[i].size(); j += stride) {
      const double analytic = has ? tape.grad(vars[i])[j] : 0.0;
      const double saved = inputs[i][j];
      inputs[i][j] = saved + eps;
      const double up = evaluate_loss(inputs, build);
      inputs[i][j] = saved - eps;
      const double down = evaluate_loss(inputs, build);
      inputs[i][j] = saved;
      const double err = relative_error(analytic, (up - down) / (2.0 * eps));
      if (err > report.max_rel_error) {
        report.max_rel_error = err;
        report.worst_input = i;
        report.worst_index = j;
      }
      ++report.entries;
    }
  }
  return report;
}

}  // namespace rmpg::check
