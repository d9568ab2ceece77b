#pragma once

// Closed-form parameter and operation counts for a refinement stack.
// One FLOP here is one scalar multiply-accumulate; exponentials are
// reported separately. The counts follow the layer inventory of
// RmpgParams and the primitive sequence of rmpg_forward exactly.

#include <cstddef>
#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "rmpg/hierarchy.hpp"
#include "rmpg/rmpg.hpp"

namespace rmpg::cost {

struct LevelCost {
  std::size_t level = 0;
  std::uint64_t params = 0;
  std::uint64_t mul_adds = 0;
  std::uint64_t exp_evals = 0;
};

struct CostReport {
  std::uint64_t params = 0;
  std::uint64_t mul_adds = 0;
  std::uint64_t exp_evals = 0;
  std::vector<LevelCost> per_level;  // levels 1..d, for a single stage
};

/// Costs of `repeats` stages on an L x C input. Throws DivisibilityError
/// for configurations rmpg_forward would reject.
inline CostReport analyze(const HierarchyDescriptor& desc, std::size_t tokens, std::size_t channels,
                          std::size_t repeats = 1, bool context = true) {
  using u64 = std::uint64_t;
  const NodeTree tree(desc, tokens, lifted_channels(desc, channels));
  const u64 L = tokens, C = channels, lifted = tree.channels();

  CostReport stage;
  for (std::size_t level = 1; level <= desc.depth(); ++level) {
    LevelCost lc{level, 0, 0, 0};
    const NodeDims parent = child_dims(desc, tokens, lifted, level);
    const NodeDims child = child_dims(desc, tokens, lifted, level - 1);
    const u64 count = desc.nodes_at(level);
    const u64 stacked = u64{child.tokens} * desc.breadth_at(level);
    if (context) {
      lc.mul_adds += count * 2 * stacked * stacked * child.channels;
      lc.exp_evals += count * stacked * stacked;
    }
    if (level == desc.depth()) {
      lc.params += C * lifted + lifted + lifted * C + C;
      lc.mul_adds += L * C * lifted + L * lifted * C;
    } else {
      const u64 c = parent.channels;
      lc.params += count * (c * c + c);
      lc.mul_adds += count * u64{parent.tokens} * c * c;
    }
    stage.per_level.push_back(lc);
    stage.params += lc.params;
    stage.mul_adds += lc.mul_adds;
    stage.exp_evals += lc.exp_evals;
  }
  stage.params *= repeats;
  stage.mul_adds *= repeats;
  stage.exp_evals *= repeats;
  return stage;
}

inline std::uint64_t count_params(const HierarchyDescriptor& desc, std::size_t tokens, std::size_t channels,
                                  std::size_t repeats = 1) {
  return analyze(desc, tokens, channels, repeats).params;
}

inline std::uint64_t count_flops(const HierarchyDescriptor& desc, std::size_t tokens, std::size_t channels,
                                 std::size_t repeats = 1, bool context = true) {
  return analyze(desc, tokens, channels, repeats, context).mul_adds;
}

struct SweepRow {
  HierarchyDescriptor desc;
  std::size_t tokens = 0;
  std::size_t channels = 0;
  std::size_t repeats = 1;
  CostReport cost;
};

inline SweepRow make_row(const HierarchyDescriptor& desc, std::size_t tokens, std::size_t channels,
                         std::size_t repeats = 1) {
  return SweepRow{desc, tokens, channels, repeats, analyze(desc, tokens, channels, repeats)};
}

/// G = [2,...,2] for d = 1..max_depth.
inline std::vector<SweepRow> depth_sweep(Mode mode, std::size_t max_depth, std::size_t tokens, std::size_t channels,
                                         std::size_t repeats = 1) {
  std::vector<SweepRow> rows;
  for (std::size_t d = 1; d <= max_depth; ++d) {
    rows.push_back(make_row(HierarchyDescriptor{std::vector<std::size_t>(d, 2), mode, false}, tokens, channels, repeats));
  }
  return rows;
}

/// G = [2^n, 2] for n = 1..max_exponent.
inline std::vector<SweepRow> breadth_sweep(Mode mode, std::size_t max_exponent, std::size_t tokens,
                                           std::size_t channels, std::size_t repeats = 1) {
  std::vector<SweepRow> rows;
  for (std::size_t n = 1; n <= max_exponent; ++n) {
    rows.push_back(make_row(HierarchyDescriptor{{std::size_t{1} << n, 2}, mode, false}, tokens, channels, repeats));
  }
  return rows;
}

inline constexpr const char* csv_header = "mode,descriptor,L,C,repeats,params,mul_adds,exp_evals";

inline void write_csv(std::ostream& out, const std::vector<SweepRow>& rows) {
  out << csv_header << '\n';
  for (const auto& r : rows) {
    out << to_string(r.desc.mode) << ",\"" << render(r.desc) << "\"," << r.tokens << ',' << r.channels << ','
        << r.repeats << ',' << r.cost.params << ',' << r.cost.mul_adds << ',' << r.cost.exp_evals << '\n';
  }
}

}  // namespace rmpg::cost
