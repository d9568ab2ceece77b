#pragma once

// Recursive decomposition / attention composition refinement.
//
// A feature map F (tokens x channels) is lifted by a root projection,
// sliced top-down into a tree of equally sized sub-maps, and recomposed
// bottom-up: at each parent the children are stacked along the token axis,
// mixed with scaled dot-product self-attention, folded back to the parent
// layout and passed through the parent's channel map. The root's map
// returns to the input width and the result is added back onto F.

#include <cmath>
#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "rmpg/errors.hpp"
#include "rmpg/hierarchy.hpp"
#include "rmpg/ops.hpp"
#include "rmpg/random.hpp"
#include "rmpg/tape.hpp"
#include "rmpg/tensor.hpp"

namespace rmpg {

template <class T>
struct AffineMap {
  Tensor<T> weight;  // in x out
  Tensor<T> bias;    // out

  static AffineMap zeros(std::size_t in, std::size_t out) { return {Tensor<T>({in, out}), Tensor<T>({out})}; }

  // Fan-average uniform weights, zero bias.
  static AffineMap random(std::size_t in, std::size_t out, Rng& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
    return {rng.uniform_tensor<T>({in, out}, -limit, limit), Tensor<T>({out})};
  }

  std::size_t size() const noexcept { return weight.size() + bias.size(); }
};

/// Width after the root projection: channel mode rounds C up to the next
/// multiple of the leaf count, spatial mode keeps C.
inline std::size_t lifted_channels(const HierarchyDescriptor& desc, std::size_t channels) {
  if (desc.mode == Mode::spatial) return channels;
  const std::size_t p = desc.leaf_count();
  return (channels + p - 1) / p * p;
}

struct RmpgOptions {
  // When false the attention step is replaced by the identity (X' = X).
  bool context = true;
};

/// Parameters of one refinement stage: the root input/output projections
/// plus one square channel map for every non-root, non-leaf node.
template <class T>
class RmpgParams {
 public:
  static RmpgParams random(const HierarchyDescriptor& desc, std::size_t tokens, std::size_t channels, Rng& rng) {
    return RmpgParams(desc, tokens, channels, [&rng](std::size_t in, std::size_t out) {
      return AffineMap<T>::random(in, out, rng);
    });
  }

  static RmpgParams zeros(const HierarchyDescriptor& desc, std::size_t tokens, std::size_t channels) {
    return RmpgParams(desc, tokens, channels, [](std::size_t in, std::size_t out) { return AffineMap<T>::zeros(in, out); });
  }

  const NodeTree& tree() const noexcept { return tree_; }
  const HierarchyDescriptor& descriptor() const noexcept { return tree_.descriptor(); }
  std::size_t tokens() const noexcept { return tree_.tokens(); }
  std::size_t channels() const noexcept { return channels_; }
  std::size_t lifted() const noexcept { return tree_.channels(); }

  AffineMap<T> project_in;   // C -> C'
  AffineMap<T> project_out;  // C' -> C, the root's composition map
  // Indexed like tree().nodes(); engaged for non-root non-leaf nodes.
  std::vector<std::optional<AffineMap<T>>> node_maps;

  /// Visits every tensor with its checkpoint-relative name, in allocation
  /// order.
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

 private:
  template <class Make>
  RmpgParams(const HierarchyDescriptor& desc, std::size_t tokens, std::size_t channels, Make&& make)
      : project_in(AffineMap<T>::zeros(1, 1)),
        project_out(AffineMap<T>::zeros(1, 1)),
        tree_(desc, tokens, lifted_channels(desc, channels)),
        channels_(channels) {
    project_in = make(channels, tree_.channels());
    project_out = make(tree_.channels(), channels);
    node_maps.resize(tree_.size());
    for (std::size_t i = 1; i < tree_.size(); ++i) {
      const Node& n = tree_.node(i);
      if (n.is_leaf()) continue;
      node_maps[i] = make(n.dims.channels, n.dims.channels);
    }
  }

  template <class Self, class F>
  static void visit_impl(Self& self, F& f) {
    f(std::string("project_in/w"), self.project_in.weight);
    f(std::string("project_in/b"), self.project_in.bias);
    f(std::string("node/w"), self.project_out.weight);
    f(std::string("node/b"), self.project_out.bias);
    for (std::size_t i = 0; i < self.node_maps.size(); ++i) {
      if (!self.node_maps[i]) continue;
      const std::string base = "node" + path_string(self.tree_.node(i).path);
      f(base + "/w", self.node_maps[i]->weight);
      f(base + "/b", self.node_maps[i]->bias);
    }
  }

  NodeTree tree_;
  std::size_t channels_;
};

/// T refinement stages with independent parameters.
template <class T>
struct RmpgStack {
  std::vector<RmpgParams<T>> stages;

  static RmpgStack random(const HierarchyDescriptor& desc, std::size_t tokens, std::size_t channels,
                          std::size_t repeats, Rng& rng) {
    RmpgStack s;
    for (std::size_t t = 0; t < repeats; ++t) s.stages.push_back(RmpgParams<T>::random(desc, tokens, channels, rng));
    return s;
  }

  static RmpgStack zeros(const HierarchyDescriptor& desc, std::size_t tokens, std::size_t channels,
                         std::size_t repeats) {
    RmpgStack s;
    for (std::size_t t = 0; t < repeats; ++t) s.stages.push_back(RmpgParams<T>::zeros(desc, tokens, channels));
    return s;
  }

  std::size_t repeats() const noexcept { return stages.size(); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& s : stages) n += s.parameter_count();
    return n;
  }

  /// Checkpoint entries named stage{t}/...
  template <class F>
  void visit(F&& f) const {
    for (std::size_t t = 0; t < stages.size(); ++t) {
      stages[t].visit([&](const std::string& name, const Tensor<T>& x) { f("stage" + std::to_string(t) + "/" + name, x); });
    }
  }
  template <class F>
  void visit(F&& f) {
    for (std::size_t t = 0; t < stages.size(); ++t) {
      stages[t].visit([&](const std::string& name, Tensor<T>& x) { f("stage" + std::to_string(t) + "/" + name, x); });
    }
  }
};

struct AffineVars {
  Var weight;
  Var bias;
};

/// Parameters of one stage placed on a tape.
template <class T>
struct RmpgBinding {
  const RmpgParams<T>* params = nullptr;
  AffineVars project_in;
  AffineVars project_out;
  std::vector<std::optional<AffineVars>> node_maps;

  /// Tape variables in the same order as RmpgParams::visit.
  std::vector<Var> vars() const {
    std::vector<Var> out{project_in.weight, project_in.bias, project_out.weight, project_out.bias};
    for (const auto& m : node_maps) {
      if (m) {
        out.push_back(m->weight);
        out.push_back(m->bias);
      }
    }
    return out;
  }
};

template <class T>
RmpgBinding<T> bind(Tape<T>& tape, const RmpgParams<T>& params, bool requires_grad) {
  auto put = [&](const AffineMap<T>& m) {
    return AffineVars{tape.input(m.weight, requires_grad), tape.input(m.bias, requires_grad)};
  };
  RmpgBinding<T> b;
  b.params = &params;
  b.project_in = put(params.project_in);
  b.project_out = put(params.project_out);
  b.node_maps.resize(params.node_maps.size());
  for (std::size_t i = 0; i < params.node_maps.size(); ++i) {
    if (params.node_maps[i]) b.node_maps[i] = put(*params.node_maps[i]);
  }
  return b;
}

/// Binding over variables the caller already recorded, one per tensor in
/// RmpgParams::visit order (weight then bias).
template <class T>
RmpgBinding<T> bind_vars(const RmpgParams<T>& params, std::span<const Var> vars) {
  std::size_t expected = 0;
  params.visit([&expected](const std::string&, const Tensor<T>&) { ++expected; });
  if (vars.size() != expected) {
    throw ContractError("expected " + std::to_string(expected) + " variables, got " + std::to_string(vars.size()));
  }
  std::size_t k = 0;
  auto next = [&] {
    AffineVars v{vars[k], vars[k + 1]};
    k += 2;
    return v;
  };
  RmpgBinding<T> b;
  b.params = &params;
  b.project_in = next();
  b.project_out = next();
  b.node_maps.resize(params.node_maps.size());
  for (std::size_t i = 0; i < params.node_maps.size(); ++i) {
    if (params.node_maps[i]) b.node_maps[i] = next();
  }
  return b;
}

/// Lifts F (L x C) to the root width C'. Spatial mode additionally needs L
/// divisible by the leaf count.
template <class T>
Var project_root(Tape<T>& tape, Var features, const RmpgBinding<T>& binding) {
  const auto& F = tape.value(features);
  const auto& p = *binding.params;
  if (F.rank() != 2 || F.rows() != p.tokens() || F.cols() != p.channels()) {
    throw DimensionError("input " + to_string(F.shape()) + " does not match parameters for (" +
                         std::to_string(p.tokens()) + ", " + std::to_string(p.channels()) + ")");
  }
  return ops::affine_channels(tape, features, binding.project_in.weight, binding.project_in.bias);
}

/// Parameter-free split of a node into its children: contiguous channel
/// slices (channel mode) or contiguous token blocks (spatial mode).
template <class T>
std::vector<Var> decompose(Tape<T>& tape, Var parent, const NodeTree& tree, std::size_t index) {
  const Node& node = tree.node(index);
  const auto& P = tape.value(parent);
  if (P.rank() != 2 || P.rows() != node.dims.tokens || P.cols() != node.dims.channels) {
    throw ContractError("node tensor " + to_string(P.shape()) + " does not match node dims (" +
                        std::to_string(node.dims.tokens) + ", " + std::to_string(node.dims.channels) + ")");
  }
  if (node.is_leaf()) return {};
  const std::size_t g = node.children.size();
  if (g == 1) return {parent};
  std::vector<Var> out;
  out.reserve(g);
  const NodeDims child = tree.node(node.children.front()).dims;
  for (std::size_t k = 0; k < g; ++k) {
    if (tree.descriptor().mode == Mode::channel) {
      out.push_back(ops::slice_cols(tape, parent, k * child.channels, child.channels));
    } else {
      out.push_back(ops::slice_rows(tape, parent, k * child.tokens, child.tokens));
    }
  }
  return out;
}

/// The context step alone: X' = softmax(X X^T / sqrt(c)) X over the stacked
/// children X (L_hat x c).
template <class T>
Var context_attention(Tape<T>& tape, Var stacked) {
  const std::size_t c = tape.value(stacked).cols();
  return ops::self_attention(tape, stacked, static_cast<T>(1.0 / std::sqrt(static_cast<double>(c))));
}

/// Stacks the children, mixes them, folds the result back to the parent
/// layout (row block k -> channel slice k in channel mode; token blocks
/// stay in place in spatial mode) and applies the parent's channel map.
template <class T>
Var compose(Tape<T>& tape, const std::vector<Var>& children, const NodeTree& tree, std::size_t index,
            const AffineVars& map, const RmpgOptions& options = {}) {
  const Node& node = tree.node(index);
  if (node.is_leaf()) throw ContractError("leaf nodes have no children to compose");
  if (children.size() != node.children.size()) {
    throw ContractError("expected " + std::to_string(node.children.size()) + " children, got " +
                        std::to_string(children.size()));
  }
  const NodeDims child = tree.node(node.children.front()).dims;
  for (Var c : children) {
    const auto& v = tape.value(c);
    if (v.rank() != 2 || v.rows() != child.tokens || v.cols() != child.channels) {
      throw ContractError("heterogeneous children: " + to_string(v.shape()) + " vs (" + std::to_string(child.tokens) +
                          ", " + std::to_string(child.channels) + ")");
    }
  }
  const Var stacked = ops::concat_rows(tape, children);
  const Var mixed = options.context ? context_attention(tape, stacked) : stacked;
  Var folded = mixed;
  if (tree.descriptor().mode == Mode::channel && children.size() > 1) {
    std::vector<Var> blocks;
    for (std::size_t k = 0; k < children.size(); ++k) {
      blocks.push_back(ops::slice_rows(tape, mixed, k * child.tokens, child.tokens));
    }
    folded = ops::concat_cols(tape, blocks);
  }
  return ops::affine_channels(tape, folded, map.weight, map.bias);
}

template <class T>
struct RmpgTrace {
  Var output;                     // F + root, same shape as F
  Var root;                       // composed root after its output map
  std::vector<Var> root_children;  // children of the root after their own composition
};

/// One refinement pass: project, full top-down split, level-by-level
/// bottom-up composition from level 1 to the root, residual add.
template <class T>
RmpgTrace<T> rmpg_forward_traced(Tape<T>& tape, Var features, const RmpgBinding<T>& binding,
                                 const RmpgOptions& options = {}) {
  const auto& tree = binding.params->tree();
  std::vector<std::optional<Var>> state(tree.size());
  state[0] = project_root(tape, features, binding);
  for (std::size_t i = 0; i < tree.size(); ++i) {
    const Node& n = tree.node(i);
    if (n.is_leaf()) continue;
    auto kids = decompose(tape, *state[i], tree, i);
    for (std::size_t k = 0; k < kids.size(); ++k) state[n.children[k]] = kids[k];
  }
  for (std::size_t level = 1; level <= tree.depth(); ++level) {
    for (std::size_t i : tree.level_indices(level)) {
      const Node& n = tree.node(i);
      std::vector<Var> kids;
      for (std::size_t c : n.children) kids.push_back(*state[c]);
      const AffineVars& map = n.is_root() ? binding.project_out : *binding.node_maps[i];
      state[i] = compose(tape, kids, tree, i, map, options);
    }
  }
  RmpgTrace<T> trace;
  trace.root = *state[0];
  for (std::size_t c : tree.root().children) trace.root_children.push_back(*state[c]);
  trace.output = ops::add(tape, features, trace.root);
  return trace;
}

template <class T>
Var rmpg_forward(Tape<T>& tape, Var features, const RmpgBinding<T>& binding, const RmpgOptions& options = {}) {
  return rmpg_forward_traced(tape, features, binding, options).output;
}

/// Chains rmpg_forward over the stages, F <- F'.
template <class T>
Var rmpg_iterate(Tape<T>& tape, Var features, const std::vector<RmpgBinding<T>>& stages,
                 const RmpgOptions& options = {}) {
  Var current = features;
  for (const auto& stage : stages) current = rmpg_forward(tape, current, stage, options);
  return current;
}

// Value-level conveniences. They record on a private tape without
// gradients; pass a counter to collect the operation counts.

template <class T>
Tensor<T> project_root(const Tensor<T>& features, const RmpgParams<T>& params) {
  Tape<T> tape;
  const auto b = bind(tape, params, false);
  return tape.value(project_root(tape, tape.input(features), b));
}

template <class T>
std::vector<Tensor<T>> decompose(const Tensor<T>& parent, const NodeTree& tree, std::size_t index) {
  Tape<T> tape;
  std::vector<Tensor<T>> out;
  for (Var v : decompose(tape, tape.input(parent), tree, index)) out.push_back(tape.value(v));
  return out;
}

template <class T>
Tensor<T> compose(const std::vector<Tensor<T>>& children, const NodeTree& tree, std::size_t index,
                  const AffineMap<T>& map, const RmpgOptions& options = {}) {
  Tape<T> tape;
  std::vector<Var> kids;
  for (const auto& c : children) kids.push_back(tape.input(c));
  const AffineVars m{tape.input(map.weight), tape.input(map.bias)};
  return tape.value(compose(tape, kids, tree, index, m, options));
}

template <class T>
Tensor<T> rmpg_forward(const Tensor<T>& features, const RmpgParams<T>& params, const RmpgOptions& options = {},
                       OpCounter* counter = nullptr) {
  Tape<T> tape;
  const auto b = bind(tape, params, false);
  Tensor<T> out = tape.value(rmpg_forward(tape, tape.input(features), b, options));
  if (counter) *counter = tape.counter();
  return out;
}

template <class T>
Tensor<T> rmpg_iterate(const Tensor<T>& features, const RmpgStack<T>& stack, const RmpgOptions& options = {},
                       OpCounter* counter = nullptr) {
  Tape<T> tape;
  std::vector<RmpgBinding<T>> bindings;
  for (const auto& s : stack.stages) bindings.push_back(bind(tape, s, false));
  Tensor<T> out = tape.value(rmpg_iterate(tape, tape.input(features), bindings, options));
  if (counter) *counter = tape.counter();
  return out;
}

}  // namespace rmpg
