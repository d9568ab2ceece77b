#pragma once

// Discrete hierarchical parse graph: a rooted tree of nodes with finite
// state spaces, leaf evidence tables, parent-child compatibility tables and
// pairwise context tables between siblings. Scores live in the log domain
// (score = -energy).
//
//   score(Ω) = Σ_leaf ψ_leaf(s_u) + Σ_{v non-root} ψ_{parent(v),v}(s_parent, s_v)
//            + Σ_{sibling pairs (a,b)} ξ_ab(s_a, s_b)

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "rmpg/errors.hpp"
#include "rmpg/random.hpp"

namespace rmpg::pg {

struct PgNode {
  std::string name;
  std::optional<std::size_t> parent;
  std::size_t states = 1;
  std::vector<double> leaf;      // [s], leaves only
  std::vector<double> pairwise;  // [s_parent * states + s], non-root only
};

/// Context potential between two children of the same parent, table
/// indexed [s_first * states(second) + s_second]. first < second.
struct SiblingTerm {
  std::size_t first = 0;
  std::size_t second = 0;
  std::vector<double> table;
};

using Assignment = std::vector<std::size_t>;

class Model {
 public:
  /// Nodes must be listed parents-first: node 0 is the root and every other
  /// node's parent has a smaller index.
  Model(std::vector<PgNode> nodes, std::vector<SiblingTerm> context = {})
      : nodes_(std::move(nodes)), context_(std::move(context)) {
    if (nodes_.empty()) throw ContractError("parse graph needs at least one node");
    children_.resize(nodes_.size());
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      const PgNode& n = nodes_[i];
      if (n.states == 0) throw ContractError("node " + label(i) + " has an empty state space");
      if (i == 0) {
        if (n.parent) throw ContractError("node 0 must be the root");
      } else {
        if (!n.parent || *n.parent >= i) throw ContractError("node " + label(i) + " must have a parent listed before it");
        children_[*n.parent].push_back(i);
      }
    }
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      const PgNode& n = nodes_[i];
      if (is_leaf(i)) {
        require_table(n.leaf, n.states, "leaf potential of " + label(i));
      } else if (!n.leaf.empty()) {
        throw ContractError("non-leaf node " + label(i) + " cannot carry a leaf potential");
      }
      if (n.parent) {
        require_table(n.pairwise, nodes_[*n.parent].states * n.states, "pairwise potential of " + label(i));
      } else if (!n.pairwise.empty()) {
        throw ContractError("root cannot carry a pairwise potential");
      }
    }
    for (const auto& term : context_) {
      if (term.first >= nodes_.size() || term.second >= nodes_.size() || term.first >= term.second ||
          term.first == 0 || nodes_[term.first].parent != nodes_[term.second].parent) {
        throw ContractError("context term must link two distinct siblings in index order");
      }
      require_table(term.table, nodes_[term.first].states * nodes_[term.second].states, "context potential");
    }
  }

  std::size_t size() const noexcept { return nodes_.size(); }
  const PgNode& node(std::size_t i) const { return nodes_.at(i); }
  const std::vector<std::size_t>& children(std::size_t i) const { return children_.at(i); }
  bool is_leaf(std::size_t i) const { return children_.at(i).empty(); }
  const std::vector<SiblingTerm>& context() const noexcept { return context_; }

  /// Number of joint assignments, saturating at uint64 max.
  std::uint64_t assignment_count() const {
    std::uint64_t total = 1;
    for (const auto& n : nodes_) {
      if (total > std::numeric_limits<std::uint64_t>::max() / n.states) return std::numeric_limits<std::uint64_t>::max();
      total *= n.states;
    }
    return total;
  }

  double pairwise(std::size_t v, std::size_t parent_state, std::size_t state) const {
    return nodes_[v].pairwise[parent_state * nodes_[v].states + state];
  }

  std::string label(std::size_t i) const {
    return nodes_[i].name.empty() ? "#" + std::to_string(i) : "'" + nodes_[i].name + "'";
  }

 private:
  static void require_table(const std::vector<double>& t, std::size_t expected, const std::string& what) {
    if (t.size() != expected) {
      throw ContractError(what + " has " + std::to_string(t.size()) + " entries, expected " + std::to_string(expected));
    }
    for (double v : t) {
      if (!std::isfinite(v)) throw ContractError(what + " contains a non-finite entry");
    }
  }

  std::vector<PgNode> nodes_;
  std::vector<SiblingTerm> context_;
  std::vector<std::vector<std::size_t>> children_;
};

inline double score(const Model& model, const Assignment& a) {
  if (a.size() != model.size()) {
    throw ContractError("assignment covers " + std::to_string(a.size()) + " of " + std::to_string(model.size()) +
                        " nodes");
  }
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] >= model.node(i).states) throw ContractError("state out of range for node " + model.label(i));
  }
  double total = 0.0;
  for (std::size_t i = 0; i < model.size(); ++i) {
    const PgNode& n = model.node(i);
    if (model.is_leaf(i)) total += n.leaf[a[i]];
    if (n.parent) total += model.pairwise(i, a[*n.parent], a[i]);
  }
  for (const auto& t : model.context()) total += t.table[a[t.first] * model.node(t.second).states + a[t.second]];
  return total;
}

using Tables = std::vector<std::vector<double>>;

namespace detail {
// First index of the maximum; ties resolve to the lowest state.
inline std::size_t argmax(const std::vector<double>& v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}
}  // namespace detail

/// Upward max-sum messages: F_up(leaf) = ψ_leaf, and for a non-leaf u
/// F_up(u)(s) = Σ_v max_{s_v} [ψ_uv(s, s_v) + F_up(v)(s_v)].
/// Sibling context terms are not part of the upward pass.
inline Tables bottom_up(const Model& model) {
  Tables up(model.size());
  for (std::size_t i = model.size(); i-- > 0;) {
    const PgNode& n = model.node(i);
    if (model.is_leaf(i)) {
      up[i] = n.leaf;
      continue;
    }
    up[i].assign(n.states, 0.0);
    for (std::size_t v : model.children(i)) {
      for (std::size_t s = 0; s < n.states; ++s) {
        double best = -std::numeric_limits<double>::infinity();
        for (std::size_t sv = 0; sv < model.node(v).states; ++sv) {
          best = std::max(best, model.pairwise(v, s, sv) + up[v][sv]);
        }
        up[i][s] += best;
      }
    }
  }
  return up;
}

struct InferenceResult {
  Tables up;
  Tables down;
  Assignment assignment;
  double score = 0.0;
};

/// Downward refinement: the root takes argmax F_up; every other node v,
/// visited in index order, scores
///   F_down(v)(s) = ψ_uv(s*_u, s) + F_up(v)(s) + Σ_{h fixed sibling} ξ_vh(s, s*_h)
/// and takes its argmax. Siblings are fixed in child-index order, so only
/// lower-indexed siblings contribute context. `score` is the full score of
/// the returned assignment.
inline InferenceResult top_down(const Model& model, Tables up) {
  InferenceResult r;
  r.assignment.assign(model.size(), 0);
  r.down.resize(model.size());
  r.down[0] = up[0];
  r.assignment[0] = detail::argmax(r.down[0]);
  for (std::size_t v = 1; v < model.size(); ++v) {
    const PgNode& n = model.node(v);
    const std::size_t parent_state = r.assignment[*n.parent];
    auto& table = r.down[v];
    table.assign(n.states, 0.0);
    for (std::size_t s = 0; s < n.states; ++s) table[s] = model.pairwise(v, parent_state, s) + up[v][s];
    for (const auto& t : model.context()) {
      if (t.second != v) continue;
      const std::size_t fixed = r.assignment[t.first];
      for (std::size_t s = 0; s < n.states; ++s) table[s] += t.table[fixed * n.states + s];
    }
    r.assignment[v] = detail::argmax(table);
  }
  r.up = std::move(up);
  r.score = score(model, r.assignment);
  return r;
}

inline InferenceResult infer(const Model& model) { return top_down(model, bottom_up(model)); }

inline constexpr std::uint64_t default_capacity = 1'000'000;

namespace detail {
inline void require_capacity(const Model& model, std::uint64_t capacity) {
  const std::uint64_t count = model.assignment_count();
  if (count > capacity) {
    throw CapacityError("state space of " + std::to_string(count) + " assignments exceeds the bound of " +
                        std::to_string(capacity));
  }
}

// Visits every assignment in lexicographic order (node 0 most significant).
template <class F>
void enumerate(const Model& model, F&& f) {
  Assignment a(model.size(), 0);
  while (true) {
    f(a);
    std::size_t i = model.size();
    while (i-- > 0) {
      if (++a[i] < model.node(i).states) break;
      a[i] = 0;
      if (i == 0) return;
    }
  }
}
}  // namespace detail

struct MapResult {
  Assignment assignment;
  double score = 0.0;
};

/// Exact maximiser by enumeration; the lexicographically smallest optimum
/// wins ties.
inline MapResult map_brute_force(const Model& model, std::uint64_t capacity = default_capacity) {
  detail::require_capacity(model, capacity);
  MapResult best{{}, -std::numeric_limits<double>::infinity()};
  detail::enumerate(model, [&](const Assignment& a) {
    const double s = score(model, a);
    if (s > best.score) best = {a, s};
  });
  return best;
}

/// log Σ_Ω exp(score(Ω) / temperature), accumulated stably.
inline double log_partition_function(const Model& model, double temperature = 1.0,
                                     std::uint64_t capacity = default_capacity) {
  if (!(temperature > 0.0)) throw ContractError("temperature must be positive");
  const double peak = map_brute_force(model, capacity).score / temperature;
  double total = 0.0;
  detail::enumerate(model, [&](const Assignment& a) { total += std::exp(score(model, a) / temperature - peak); });
  return peak + std::log(total);
}

inline double partition_function(const Model& model, double temperature = 1.0,
                                  std::uint64_t capacity = default_capacity) {
  return std::exp(log_partition_function(model, temperature, capacity));
}

/// P(Ω) = exp(score(Ω) / temperature) / Z.
inline double probability(const Model& model, const Assignment& a, double log_z, double temperature = 1.0) {
  return std::exp(score(model, a) / temperature - log_z);
}

/// Σ_Ω P(Ω); equals 1 up to rounding.
inline double total_probability(const Model& model, double temperature = 1.0,
                                std::uint64_t capacity = default_capacity) {
  const double log_z = log_partition_function(model, temperature, capacity);
  double total = 0.0;
  detail::enumerate(model, [&](const Assignment& a) { total += probability(model, a, log_z, temperature); });
  return total;
}

struct RandomModelOptions {
  std::size_t max_levels = 3;  // root counts as one level
  std::size_t max_children = 3;
  std::size_t max_states = 3;
  std::size_t max_nodes = 10;
  bool context = false;
  double context_scale = 1.0;
};

/// Random tree with uniform(-1, 1) potentials; context tables (when
/// enabled) are scaled by context_scale for every sibling pair.
inline Model random_model(Rng& rng, const RandomModelOptions& opt = {}) {
  std::vector<PgNode> nodes;
  std::vector<std::size_t> level_of;
  auto add = [&](std::optional<std::size_t> parent, std::size_t level) {
    PgNode n;
    n.name = "n" + std::to_string(nodes.size());
    n.parent = parent;
    n.states = 1 + rng.index(opt.max_states);
    nodes.push_back(std::move(n));
    level_of.push_back(level);
  };
  add(std::nullopt, 0);
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    if (level_of[i] + 1 >= opt.max_levels) continue;
    const std::size_t kids = rng.index(opt.max_children + 1);
    for (std::size_t k = 0; k < kids && nodes.size() < opt.max_nodes; ++k) add(i, level_of[i] + 1);
  }
  std::vector<bool> has_child(nodes.size(), false);
  for (const auto& n : nodes) {
    if (n.parent) has_child[*n.parent] = true;
  }
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    auto& n = nodes[i];
    if (!has_child[i]) {
      for (std::size_t s = 0; s < n.states; ++s) n.leaf.push_back(rng.uniform(-1.0, 1.0));
    }
    if (n.parent) {
      const std::size_t count = nodes[*n.parent].states * n.states;
      for (std::size_t s = 0; s < count; ++s) n.pairwise.push_back(rng.uniform(-1.0, 1.0));
    }
  }
  std::vector<SiblingTerm> context;
  if (opt.context) {
    for (std::size_t a = 1; a < nodes.size(); ++a) {
      for (std::size_t b = a + 1; b < nodes.size(); ++b) {
        if (nodes[a].parent != nodes[b].parent) continue;
        SiblingTerm t{a, b, {}};
        for (std::size_t s = 0; s < nodes[a].states * nodes[b].states; ++s) {
          t.table.push_back(opt.context_scale * rng.uniform(-1.0, 1.0));
        }
        context.push_back(std::move(t));
      }
    }
  }
  return Model(std::move(nodes), std::move(context));
}

// JSON model document:
// {
//   "nodes": [ {"name": "body", "states": 2},
//              {"name": "leg", "parent": 0, "states": 2,
//               "pairwise": [[...], [...]],   // [parent state][state]
//               "leaf": [...]} ],             // leaves only
//   "context": [ {"nodes": [1, 2], "table": [[...], ...]} ]
// }

namespace detail {
inline std::vector<double> flatten(const nlohmann::json& j, const std::string& what) {
  std::vector<double> out;
  if (!j.is_array()) throw ParseError(what + " must be an array");
  for (const auto& row : j) {
    if (row.is_array()) {
      for (const auto& v : row) {
        if (!v.is_number()) throw ParseError(what + " entries must be numbers");
        out.push_back(v.get<double>());
      }
    } else if (row.is_number()) {
      out.push_back(row.get<double>());
    } else {
      throw ParseError(what + " entries must be numbers");
    }
  }
  return out;
}
}  // namespace detail

inline Model parse_model(const std::string& text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("model document is not valid JSON: ") + e.what());
  }
  try {
    if (!doc.is_object() || !doc.contains("nodes")) throw ParseError("model document needs a \"nodes\" array");
    for (const auto& [key, _] : doc.items()) {
      if (key != "nodes" && key != "context") throw ParseError("unknown model key '" + key + "'");
    }
    std::vector<PgNode> nodes;
    for (const auto& jn : doc.at("nodes")) {
      PgNode n;
      for (const auto& [key, _] : jn.items()) {
        if (key != "name" && key != "parent" && key != "states" && key != "leaf" && key != "pairwise") {
          throw ParseError("unknown node key '" + key + "'");
        }
      }
      n.name = jn.value("name", std::string{});
      if (jn.contains("parent") && !jn.at("parent").is_null()) n.parent = jn.at("parent").get<std::size_t>();
      n.states = jn.at("states").get<std::size_t>();
      if (jn.contains("leaf")) n.leaf = detail::flatten(jn.at("leaf"), "leaf");
      if (jn.contains("pairwise")) n.pairwise = detail::flatten(jn.at("pairwise"), "pairwise");
      nodes.push_back(std::move(n));
    }
    std::vector<SiblingTerm> context;
    if (doc.contains("context")) {
      for (const auto& jc : doc.at("context")) {
        const auto ids = jc.at("nodes").get<std::vector<std::size_t>>();
        if (ids.size() != 2) throw ParseError("context entries link exactly two nodes");
        context.push_back(SiblingTerm{ids[0], ids[1], detail::flatten(jc.at("table"), "context table")});
      }
    }
    return Model(std::move(nodes), std::move(context));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("malformed model document: ") + e.what());
  } catch (const ContractError& e) {
    throw ParseError(std::string("invalid model: ") + e.what());
  }
}

inline Model load_model(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open model file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_model(ss.str());
}

}  // namespace rmpg::pg
