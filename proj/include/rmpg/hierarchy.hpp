#pragma once

#include <cctype>
#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "rmpg/errors.hpp"

namespace rmpg {

enum class Mode { channel, spatial };

inline std::string to_string(Mode m) { return m == Mode::channel ? "channel" : "spatial"; }

inline Mode parse_mode(std::string_view text) {
  if (text == "channel") return Mode::channel;
  if (text == "spatial") return Mode::spatial;
  throw ParseError("unknown decomposition mode '" + std::string(text) + "'");
}

/// Breadths listed root-first: breadths[0] = g_d is the child count of the
/// root, breadths.back() = g_1 the child count of each level-1 node.
struct HierarchyDescriptor {
  std::vector<std::size_t> breadths;
  Mode mode = Mode::channel;
  // Leaf breadth was written as `n` and resolved to a default.
  bool symbolic_leaf = false;

  std::size_t depth() const noexcept { return breadths.size(); }

  // Children per node at `level` (1 <= level <= depth).
  std::size_t breadth_at(std::size_t level) const { return breadths.at(depth() - level); }

  // Product of the breadths from the root down to (excluding) `level`,
  // i.e. the number of nodes at `level`.
  std::size_t nodes_at(std::size_t level) const {
    std::size_t p = 1;
    for (std::size_t k = 0; k + level < depth(); ++k) p *= breadths[k];
    return p;
  }

  std::size_t leaf_count() const { return nodes_at(0); }

  friend bool operator==(const HierarchyDescriptor&, const HierarchyDescriptor&) = default;
};

inline constexpr std::size_t default_symbolic_breadth = 2;

/// Parses "[g_d,...,g_1]" (channel mode) or "[g_d,...,g_1]||" (spatial
/// mode). In spatial mode the last entry may be the symbol `n`.
inline HierarchyDescriptor parse_descriptor(std::string_view text,
                                            std::size_t symbolic_default = default_symbolic_breadth) {
  auto fail = [&](const std::string& why) -> ParseError {
    return ParseError("invalid descriptor '" + std::string(text) + "': " + why);
  };
  std::string s;
  for (char ch : text) {
    if (!std::isspace(static_cast<unsigned char>(ch))) s += ch;
  }
  HierarchyDescriptor desc;
  constexpr std::string_view parallel_utf8 = "\xe2\x88\xa5";
  if (s.ends_with("||")) {
    desc.mode = Mode::spatial;
    s.resize(s.size() - 2);
  } else if (s.ends_with(parallel_utf8)) {
    desc.mode = Mode::spatial;
    s.resize(s.size() - parallel_utf8.size());
  }
  if (s.size() < 2 || s.front() != '[' || s.back() != ']') throw fail("expected a bracketed list");
  const std::string body = s.substr(1, s.size() - 2);
  if (body.empty()) throw fail("empty breadth list");

  std::vector<std::string> items;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = body.find(',', start);
    items.push_back(body.substr(start, comma == std::string::npos ? std::string::npos : comma - start));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  for (std::size_t i = 0; i < items.size(); ++i) {
    const std::string& item = items[i];
    if (item.empty()) throw fail("empty entry");
    if (item == "n") {
      if (desc.mode != Mode::spatial) throw fail("symbolic breadth `n` requires spatial mode");
      if (i + 1 != items.size()) throw fail("only the leaf breadth may be symbolic");
      desc.symbolic_leaf = true;
      desc.breadths.push_back(symbolic_default);
      continue;
    }
    std::size_t value = 0;
    for (char ch : item) {
      if (ch == '-') throw fail("negative breadth");
      if (!std::isdigit(static_cast<unsigned char>(ch))) throw fail("non-numeric entry '" + item + "'");
      value = value * 10 + static_cast<std::size_t>(ch - '0');
      if (value > 1'000'000) throw fail("breadth too large");
    }
    if (value == 0) throw fail("breadth must be at least 1");
    desc.breadths.push_back(value);
  }
  if (desc.symbolic_leaf && symbolic_default == 0) throw fail("symbolic default must be positive");
  return desc;
}

inline std::string render(const HierarchyDescriptor& desc) {
  std::string out = "[";
  for (std::size_t i = 0; i < desc.breadths.size(); ++i) {
    if (i) out += ",";
    if (desc.symbolic_leaf && i + 1 == desc.breadths.size()) {
      out += "n";
    } else {
      out += std::to_string(desc.breadths[i]);
    }
  }
  out += "]";
  if (desc.mode == Mode::spatial) out += "||";
  return out;
}

struct NodeDims {
  std::size_t tokens = 0;
  std::size_t channels = 0;
  friend bool operator==(const NodeDims&, const NodeDims&) = default;
};

/// (tokens, channels) of every node at `level`. Channel mode divides the
/// channel extent by the product of breadths above the level; spatial mode
/// divides the token extent.
inline NodeDims child_dims(const HierarchyDescriptor& desc, std::size_t tokens, std::size_t channels,
                           std::size_t level) {
  if (desc.depth() == 0) throw ContractError("descriptor has no levels");
  if (level > desc.depth()) {
    throw ContractError("level " + std::to_string(level) + " exceeds depth " + std::to_string(desc.depth()));
  }
  const std::size_t divisor = desc.nodes_at(level);
  const std::size_t divided = desc.mode == Mode::channel ? channels : tokens;
  if (divided % divisor != 0) {
    throw DivisibilityError(std::string(desc.mode == Mode::channel ? "channel" : "token") + " extent " +
                            std::to_string(divided) + " is not divisible by " + std::to_string(divisor) +
                            " at level " + std::to_string(level) + " of " + render(desc));
  }
  if (desc.mode == Mode::channel) return {tokens, channels / divisor};
  return {tokens / divisor, channels};
}

struct Node {
  std::size_t level = 0;
  std::vector<std::size_t> path;  // child indices from the root
  NodeDims dims;
  std::optional<std::size_t> parent;
  std::vector<std::size_t> children;

  bool is_leaf() const noexcept { return level == 0; }
  bool is_root() const noexcept { return !parent.has_value(); }
};

inline std::string path_string(const std::vector<std::size_t>& path) {
  std::string out;
  for (std::size_t i = 0; i < path.size(); ++i) {
    if (i) out += ".";
    out += std::to_string(path[i]);
  }
  return out;
}

/// Decomposition tree in breadth-first order; index 0 is the root and the
/// children of a node are contiguous and in child order.
class NodeTree {
 public:
  NodeTree(HierarchyDescriptor desc, std::size_t tokens, std::size_t channels)
      : desc_(std::move(desc)), tokens_(tokens), channels_(channels) {
    if (desc_.depth() == 0) throw ContractError("descriptor has no levels");
    std::vector<NodeDims> dims_by_level(desc_.depth() + 1);
    for (std::size_t level = 0; level <= desc_.depth(); ++level) {
      dims_by_level[level] = child_dims(desc_, tokens, channels, level);
    }
    nodes_.push_back(Node{desc_.depth(), {}, dims_by_level[desc_.depth()], std::nullopt, {}});
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      if (nodes_[i].level == 0) continue;
      const std::size_t child_level = nodes_[i].level - 1;
      const std::size_t g = desc_.breadth_at(nodes_[i].level);
      for (std::size_t k = 0; k < g; ++k) {
        Node child{child_level, nodes_[i].path, dims_by_level[child_level], i, {}};
        child.path.push_back(k);
        nodes_[i].children.push_back(nodes_.size());
        nodes_.push_back(std::move(child));
      }
    }
  }

  const HierarchyDescriptor& descriptor() const noexcept { return desc_; }
  std::size_t tokens() const noexcept { return tokens_; }
  std::size_t channels() const noexcept { return channels_; }
  std::size_t depth() const noexcept { return desc_.depth(); }
  std::size_t size() const noexcept { return nodes_.size(); }

  const Node& root() const { return nodes_.front(); }
  const Node& node(std::size_t i) const { return nodes_.at(i); }
  const std::vector<Node>& nodes() const noexcept { return nodes_; }

  std::vector<std::size_t> level_indices(std::size_t level) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      if (nodes_[i].level == level) out.push_back(i);
    }
    return out;
  }

 private:
  HierarchyDescriptor desc_;
  std::size_t tokens_;
  std::size_t channels_;
  std::vector<Node> nodes_;
};

inline NodeTree build_tree(const HierarchyDescriptor& desc, std::size_t tokens, std::size_t channels) {
  return NodeTree(desc, tokens, channels);
}

}  // namespace rmpg
