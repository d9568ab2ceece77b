#pragma once

// Hierarchical pose network:
//
//   image -> backbone -> F0 -> body head
//   F0 -> RMPG_s (parts)  -> F1, one part head per root child
//   F1 -> RMPG_s (joints) -> F2, one joint head per root child
//   F2 -> RMPG_u -> F3 -> final joint head
//
// Feature maps are tokens x channels with token = y * width + x.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "rmpg/errors.hpp"
#include "rmpg/hierarchy.hpp"
#include "rmpg/hpe/heatmap.hpp"
#include "rmpg/hpe/skeleton.hpp"
#include "rmpg/ops.hpp"
#include "rmpg/random.hpp"
#include "rmpg/rmpg.hpp"

namespace rmpg::hpe {

struct ToyNetConfig {
  std::size_t image_size = 64;  // heatmaps and features live at image_size / 2
  std::size_t channels = 32;
  std::string rmpg_s = "[5,2]";
  std::string rmpg_u = "[2,2]";

  bool use_rmpg_u = true;
  bool supervise_parts = true;  // part heads on the first RMPG_s, joint heads on the second
  bool context = true;
  bool share_rmpg_s = false;

  double weight_body = 1.0;
  double weight_parts = 1.0;
  double weight_joints_mid = 1.0;
  double weight_joints_final = 1.0;

  std::uint64_t seed = 7;

  std::size_t grid_size() const { return image_size / 2; }
  Grid grid() const { return Grid{grid_size(), grid_size(), 2.0}; }
  std::size_t tokens() const { return grid_size() * grid_size(); }

  void validate() const {
    if (image_size < 8 || image_size % 8 != 0) throw ContractError("image size must be a positive multiple of 8");
    if (channels == 0) throw ContractError("channel count must be positive");
    const auto s = parse_descriptor(rmpg_s);
    const auto u = parse_descriptor(rmpg_u);
    if (s.mode != Mode::channel || u.mode != Mode::channel) {
      throw ContractError("the pose network uses channel decomposition");
    }
    if (supervise_parts && s.breadths.front() != part_count) {
      throw ContractError("supervised RMPG needs " + std::to_string(part_count) + " root children, got " + rmpg_s);
    }
    // Both blocks must accept the feature width after root lifting.
    NodeTree(s, tokens(), lifted_channels(s, channels));
    NodeTree(u, tokens(), lifted_channels(u, channels));
  }
};

/// All learnable tensors of the network.
template <class T>
struct ToyNet {
  ToyNetConfig config;
  AffineMap<T> conv1, conv2, conv3, fuse;  // 3x3 convolutions as (9*C_in) x C_out maps
  AffineMap<T> body_head;
  std::vector<AffineMap<T>> part_heads;
  std::vector<AffineMap<T>> joint_heads;
  RmpgParams<T> rmpg_s1;
  std::optional<RmpgParams<T>> rmpg_s2;  // empty when sharing rmpg_s1
  std::optional<RmpgParams<T>> rmpg_u;
  AffineMap<T> final_head;

  static ToyNet build(const ToyNetConfig& config) {
    config.validate();
    Rng rng(config.seed);
    const std::size_t C = config.channels, L = config.tokens();
    const auto ds = parse_descriptor(config.rmpg_s);
    const auto du = parse_descriptor(config.rmpg_u);
    auto conv = [&](std::size_t in, std::size_t out) { return AffineMap<T>::random(9 * in, out, rng); };
    auto c1 = conv(1, C);
    auto c2 = conv(C, C);
    auto c3 = conv(C, C);
    auto cf = conv(C, C);
    auto body = AffineMap<T>::random(C, 1, rng);
    auto s1 = RmpgParams<T>::random(ds, L, C, rng);
    ToyNet net{config, std::move(c1), std::move(c2), std::move(c3), std::move(cf), std::move(body), {}, {},
               std::move(s1), std::nullopt, std::nullopt, AffineMap<T>::zeros(1, 1)};
    if (!config.share_rmpg_s) net.rmpg_s2 = RmpgParams<T>::random(ds, L, C, rng);
    if (config.use_rmpg_u) net.rmpg_u = RmpgParams<T>::random(du, L, C, rng);
    if (config.supervise_parts) {
      const std::size_t child_width = net.rmpg_s1.tree().node(1).dims.channels;
      for (std::size_t k = 0; k < part_count; ++k) net.part_heads.push_back(AffineMap<T>::random(child_width, 1, rng));
      for (std::size_t k = 0; k < part_count; ++k) {
        net.joint_heads.push_back(AffineMap<T>::random(child_width, part_joints(k).size(), rng));
      }
    }
    net.final_head = AffineMap<T>::random(C, joint_count, rng);
    return net;
  }

  const RmpgParams<T>& second_rmpg_s() const { return rmpg_s2 ? *rmpg_s2 : rmpg_s1; }

  /// Every tensor with its checkpoint name, in a fixed order.
  template <class F>
  void visit(F&& f) {
    visit_impl(*this, f);
  }
  template <class F>
  void visit(F&& f) const {
    visit_impl(*this, f);
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    visit([&n](const std::string&, const Tensor<T>& t) { n += t.size(); });
    return n;
  }

  /// Backbone and head parameters only (everything outside the RMPG blocks).
  std::size_t plain_parameter_count() const {
    std::size_t n = conv1.size() + conv2.size() + conv3.size() + fuse.size() + body_head.size() + final_head.size();
    for (const auto& h : part_heads) n += h.size();
    for (const auto& h : joint_heads) n += h.size();
    return n;
  }

 private:
  template <class Self, class F>
  static void visit_impl(Self& self, F& f) {
    auto affine = [&f](const std::string& name, auto& m) {
      f(name + "/w", m.weight);
      f(name + "/b", m.bias);
    };
    auto block = [&f](const std::string& prefix, auto& params) {
      params.visit([&](const std::string& name, auto& t) { f(prefix + "/stage0/" + name, t); });
    };
    affine("backbone/conv1", self.conv1);
    affine("backbone/conv2", self.conv2);
    affine("backbone/conv3", self.conv3);
    affine("backbone/fuse", self.fuse);
    affine("heads/body", self.body_head);
    block("rmpg_s1", self.rmpg_s1);
    if (self.rmpg_s2) block("rmpg_s2", *self.rmpg_s2);
    if (self.rmpg_u) block("rmpg_u", *self.rmpg_u);
    for (std::size_t k = 0; k < self.part_heads.size(); ++k) affine("heads/part" + std::to_string(k), self.part_heads[k]);
    for (std::size_t k = 0; k < self.joint_heads.size(); ++k) affine("heads/joint" + std::to_string(k), self.joint_heads[k]);
    affine("heads/final", self.final_head);
  }
};

/// Network tensors placed on a tape, in ToyNet::visit order.
template <class T>
struct ToyNetBinding {
  std::vector<Var> vars;
  AffineVars conv1, conv2, conv3, fuse, body_head, final_head;
  std::vector<AffineVars> part_heads, joint_heads;
  RmpgBinding<T> rmpg_s1, rmpg_s2;
  std::optional<RmpgBinding<T>> rmpg_u;
};

template <class T>
ToyNetBinding<T> bind(Tape<T>& tape, const ToyNet<T>& net, bool requires_grad) {
  ToyNetBinding<T> b;
  auto affine = [&](const AffineMap<T>& m) {
    AffineVars v{tape.input(m.weight, requires_grad), tape.input(m.bias, requires_grad)};
    b.vars.push_back(v.weight);
    b.vars.push_back(v.bias);
    return v;
  };
  auto block = [&](const RmpgParams<T>& p) {
    auto rb = rmpg::bind(tape, p, requires_grad);
    for (Var v : rb.vars()) b.vars.push_back(v);
    return rb;
  };
  b.conv1 = affine(net.conv1);
  b.conv2 = affine(net.conv2);
  b.conv3 = affine(net.conv3);
  b.fuse = affine(net.fuse);
  b.body_head = affine(net.body_head);
  b.rmpg_s1 = block(net.rmpg_s1);
  b.rmpg_s2 = net.rmpg_s2 ? block(*net.rmpg_s2) : b.rmpg_s1;
  if (net.rmpg_u) b.rmpg_u = block(*net.rmpg_u);
  for (const auto& h : net.part_heads) b.part_heads.push_back(affine(h));
  for (const auto& h : net.joint_heads) b.joint_heads.push_back(affine(h));
  b.final_head = affine(net.final_head);
  return b;
}

/// Heatmap predictions as tokens x maps matrices. `parts` and `joints_mid`
/// are absent when part supervision is disabled.
struct ToyNetOutputs {
  Var features;  // F0
  Var body;
  std::optional<Var> parts;
  std::optional<Var> joints_mid;
  Var joints_final;
};

template <class T>
Var conv3x3(Tape<T>& tape, Var x, std::size_t size, std::size_t stride, const AffineVars& map) {
  return ops::affine_channels(tape, ops::im2col3x3(tape, x, size, size, stride), map.weight, map.bias);
}

template <class T>
ToyNetOutputs forward(Tape<T>& tape, Var image, const ToyNet<T>& net, const ToyNetBinding<T>& b) {
  const auto& cfg = net.config;
  const std::size_t s0 = cfg.image_size, s1 = s0 / 2, s2 = s0 / 4, s3 = s0 / 8;
  const RmpgOptions opts{cfg.context};

  const Var x1 = ops::relu(tape, conv3x3(tape, image, s0, 2, b.conv1));
  const Var x2 = ops::relu(tape, conv3x3(tape, x1, s1, 2, b.conv2));
  const Var x3 = ops::relu(tape, conv3x3(tape, x2, s2, 2, b.conv3));
  const Var u2 = ops::add(tape, ops::upsample2x(tape, x3, s3, s3), x2);
  const Var u1 = ops::add(tape, ops::upsample2x(tape, u2, s2, s2), x1);
  const Var f0 = ops::relu(tape, conv3x3(tape, u1, s1, 1, b.fuse));

  ToyNetOutputs out;
  out.features = f0;
  out.body = ops::affine_channels(tape, f0, b.body_head.weight, b.body_head.bias);

  const auto t1 = rmpg_forward_traced(tape, f0, b.rmpg_s1, opts);
  const auto t2 = rmpg_forward_traced(tape, t1.output, b.rmpg_s2, opts);
  if (cfg.supervise_parts) {
    std::vector<Var> parts;
    for (std::size_t k = 0; k < part_count; ++k) {
      parts.push_back(ops::affine_channels(tape, t1.root_children[k], b.part_heads[k].weight, b.part_heads[k].bias));
    }
    out.parts = ops::concat_cols(tape, parts);
    // Columns in joint-index order: the torso child emits the head, then
    // the four limbs in order.
    std::vector<Var> joints;
    for (std::size_t k : {torso_part, std::size_t{0}, std::size_t{1}, std::size_t{2}, std::size_t{3}}) {
      joints.push_back(ops::affine_channels(tape, t2.root_children[k], b.joint_heads[k].weight, b.joint_heads[k].bias));
    }
    out.joints_mid = ops::concat_cols(tape, joints);
  }
  const Var f3 = b.rmpg_u ? rmpg_forward(tape, t2.output, *b.rmpg_u, opts) : t2.output;
  out.joints_final = ops::affine_channels(tape, f3, b.final_head.weight, b.final_head.bias);
  return out;
}

/// Heatmap targets of one sample as tokens x maps matrices.
template <class T>
struct Targets {
  Tensor<T> body;
  Tensor<T> parts;
  Tensor<T> joints;
};

template <class T>
Targets<T> make_targets(const Skeleton& s, const Grid& grid) {
  const std::array<Heatmap, 1> body{body_heatmap(s, grid)};
  return {stack_columns<T>(body), stack_columns<T>(part_heatmaps(s, grid)), stack_columns<T>(joint_heatmaps(s, grid))};
}

struct LossTerms {
  double body = 0.0;
  double parts = 0.0;
  double joints_mid = 0.0;
  double joints_final = 0.0;
  double total = 0.0;
};

/// Weighted sum of per-heatmap mean squared errors over every supervised
/// output. Returns the scalar loss variable and fills `terms`.
template <class T>
Var total_loss(Tape<T>& tape, const ToyNetOutputs& out, const Targets<T>& targets, const ToyNetConfig& cfg,
               LossTerms& terms) {
  auto weighted = [&](Var pred, const Tensor<T>& target, double w, double& slot) {
    const Var l = ops::column_mse_sum(tape, pred, target);
    slot = static_cast<double>(tape.value(l)[0]);
    return ops::scale(tape, l, static_cast<T>(w));
  };
  Var total = weighted(out.body, targets.body, cfg.weight_body, terms.body);
  if (out.parts) total = ops::add(tape, total, weighted(*out.parts, targets.parts, cfg.weight_parts, terms.parts));
  if (out.joints_mid) {
    total = ops::add(tape, total, weighted(*out.joints_mid, targets.joints, cfg.weight_joints_mid, terms.joints_mid));
  }
  total = ops::add(tape, total, weighted(out.joints_final, targets.joints, cfg.weight_joints_final, terms.joints_final));
  terms.total = static_cast<double>(tape.value(total)[0]);
  return total;
}

}  // namespace rmpg::hpe
