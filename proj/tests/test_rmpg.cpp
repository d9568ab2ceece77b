#include <gtest/gtest.h>

#include <cmath>
#include <string>
#include <vector>

#include "rmpg/check/finite_difference.hpp"
#include "rmpg/random.hpp"
#include "rmpg/rmpg.hpp"

using namespace rmpg;

namespace {

using Mat = std::vector<std::vector<double>>;  // row-major, rows x cols

Mat to_mat(const Tensor<double>& t) {
  Mat m(t.rows(), std::vector<double>(t.cols()));
  for (std::size_t r = 0; r < t.rows(); ++r)
    for (std::size_t c = 0; c < t.cols(); ++c) m[r][c] = t.at(r, c);
  return m;
}

Mat affine(const Mat& x, const AffineMap<double>& m) {
  const std::size_t out = m.weight.cols();
  Mat y(x.size(), std::vector<double>(out));
  for (std::size_t r = 0; r < x.size(); ++r)
    for (std::size_t o = 0; o < out; ++o) {
      double s = m.bias[o];
      for (std::size_t i = 0; i < x[r].size(); ++i) s += x[r][i] * m.weight.at(i, o);
      y[r][o] = s;
    }
  return y;
}

Mat attention(const Mat& x) {
  const std::size_t n = x.size(), c = x[0].size();
  Mat y(n, std::vector<double>(c, 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> w(n);
    double mx = -1e300;
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0;
      for (std::size_t k = 0; k < c; ++k) s += x[i][k] * x[j][k];
      w[j] = s / std::sqrt(static_cast<double>(c));
      mx = std::max(mx, w[j]);
    }
    double z = 0;
    for (auto& v : w) z += (v = std::exp(v - mx));
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t k = 0; k < c; ++k) y[i][k] += w[j] / z * x[j][k];
  }
  return y;
}

// Straightforward recursive transcription of the refinement pass.
Mat naive_node(const Mat& x, const RmpgParams<double>& p, std::size_t index, bool context) {
  const auto& tree = p.tree();
  const Node& node = tree.node(index);
  if (node.is_leaf()) return x;
  const bool channel = tree.descriptor().mode == Mode::channel;
  const std::size_t g = node.children.size();
  const NodeDims cd = tree.node(node.children[0]).dims;
  Mat stacked;
  for (std::size_t k = 0; k < g; ++k) {
    Mat part;
    if (channel) {
      for (const auto& row : x) part.emplace_back(row.begin() + k * cd.channels, row.begin() + (k + 1) * cd.channels);
    } else {
      part.assign(x.begin() + k * cd.tokens, x.begin() + (k + 1) * cd.tokens);
    }
    const Mat child = naive_node(part, p, node.children[k], context);
    stacked.insert(stacked.end(), child.begin(), child.end());
  }
  const Mat mixed = context ? attention(stacked) : stacked;
  Mat folded;
  if (channel) {
    folded.assign(cd.tokens, {});
    for (std::size_t k = 0; k < g; ++k)
      for (std::size_t r = 0; r < cd.tokens; ++r)
        folded[r].insert(folded[r].end(), mixed[k * cd.tokens + r].begin(), mixed[k * cd.tokens + r].end());
  } else {
    folded = mixed;
  }
  return affine(folded, node.is_root() ? p.project_out : *p.node_maps[index]);
}

Mat naive_forward(const Tensor<double>& F, const RmpgParams<double>& p, bool context = true) {
  const Mat x = to_mat(F);
  const Mat root = naive_node(affine(x, p.project_in), p, 0, context);
  Mat out = x;
  for (std::size_t r = 0; r < out.size(); ++r)
    for (std::size_t c = 0; c < out[r].size(); ++c) out[r][c] += root[r][c];
  return out;
}

double max_diff(const Tensor<double>& a, const Mat& b) {
  std::vector<double> flat;
  for (const auto& row : b) flat.insert(flat.end(), row.begin(), row.end());
  return max_abs_diff(a, Tensor<double>({b.size(), b[0].size()}, std::move(flat)));
}

}  // namespace

TEST(ProjectRoot, LiftsToMultipleOfLeafCount) {
  EXPECT_EQ(lifted_channels(parse_descriptor("[5,2]"), 32), 40u);
  EXPECT_EQ(lifted_channels(parse_descriptor("[2,2]"), 8), 8u);
  EXPECT_EQ(lifted_channels(parse_descriptor("[3,3]"), 10), 18u);
  EXPECT_EQ(lifted_channels(parse_descriptor("[2,2]||"), 7), 7u);
  Rng rng(1);
  const auto p = RmpgParams<double>::random(parse_descriptor("[5,2]"), 6, 32, rng);
  EXPECT_EQ(project_root(rng.uniform_tensor<double>({6, 32}, -1, 1), p).shape(), (Shape{6, 40}));
}

TEST(ProjectRoot, RejectsMismatchedInput) {
  Rng rng(2);
  const auto p = RmpgParams<double>::random(parse_descriptor("[2]"), 4, 6, rng);
  EXPECT_THROW(project_root(Tensor<double>({4, 5}), p), DimensionError);
  EXPECT_THROW(project_root(Tensor<double>({3, 6}), p), DimensionError);
}

TEST(Params, SpatialModeNeedsDivisibleTokens) {
  Rng rng(3);
  EXPECT_THROW(RmpgParams<double>::random(parse_descriptor("[2,2]||"), 6, 4, rng), DivisibilityError);
}

TEST(Decompose, ChannelSlicesAndTokenBlocks) {
  const auto parent = Tensor<double>::matrix(4, 4, {0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15});
  const NodeTree ct(parse_descriptor("[2]"), 4, 4);
  const auto cs = decompose(parent, ct, 0);
  ASSERT_EQ(cs.size(), 2u);
  EXPECT_EQ(cs[1], Tensor<double>::matrix(4, 2, {2, 3, 6, 7, 10, 11, 14, 15}));
  const NodeTree st(parse_descriptor("[2]||"), 4, 4);
  const auto ss = decompose(parent, st, 0);
  EXPECT_EQ(ss[1], Tensor<double>::matrix(2, 4, {8, 9, 10, 11, 12, 13, 14, 15}));
}

TEST(Decompose, SingleChildIsTheParentAndLeavesHaveNone) {
  const auto parent = Tensor<double>::matrix(2, 2, {1, 2, 3, 4});
  const NodeTree t(parse_descriptor("[1,2]"), 2, 2);
  const auto one = decompose(parent, t, 0);
  ASSERT_EQ(one.size(), 1u);
  EXPECT_EQ(one[0], parent);
  EXPECT_TRUE(decompose(Tensor<double>({2, 1}), t, t.level_indices(0)[0]).empty());
  EXPECT_THROW(decompose(Tensor<double>({3, 2}), t, 0), ContractError);
}

TEST(Compose, MatchesHandComputedAttention) {
  Rng rng(4);
  const NodeTree t(parse_descriptor("[3]"), 2, 6);
  std::vector<Tensor<double>> kids;
  for (int k = 0; k < 3; ++k) kids.push_back(rng.uniform_tensor<double>({2, 2}, -1, 1));
  const auto map = AffineMap<double>::random(6, 6, rng);
  const auto out = compose(kids, t, 0, map);
  Mat stacked;
  for (const auto& k : kids)
    for (const auto& row : to_mat(k)) stacked.push_back(row);
  const Mat mixed = attention(stacked);
  Mat folded(2);
  for (int k = 0; k < 3; ++k)
    for (int r = 0; r < 2; ++r) folded[r].insert(folded[r].end(), mixed[k * 2 + r].begin(), mixed[k * 2 + r].end());
  EXPECT_LT(max_diff(out, affine(folded, map)), 1e-12);
}

TEST(Compose, RejectsWrongChildren) {
  const NodeTree t(parse_descriptor("[2]"), 2, 4);
  const auto map = AffineMap<double>::zeros(4, 4);
  EXPECT_THROW(compose({Tensor<double>({2, 2})}, t, 0, map), ContractError);
  EXPECT_THROW(compose({Tensor<double>({2, 2}), Tensor<double>({2, 3})}, t, 0, map), ContractError);
  EXPECT_THROW(compose({Tensor<double>({2, 2}), Tensor<double>({2, 2})}, t, 1, map), ContractError);
}

TEST(Forward, MatchesNaiveTranscription) {
  Rng rng(5);
  const std::vector<std::pair<std::string, std::pair<std::size_t, std::size_t>>> cases{
      {"[2]", {3, 4}}, {"[3,2]", {4, 5}}, {"[2,2,2]", {3, 8}}, {"[2,2]||", {8, 3}}, {"[3,1]||", {6, 2}}};
  for (const auto& [text, dims] : cases) {
    const auto p = RmpgParams<double>::random(parse_descriptor(text), dims.first, dims.second, rng);
    const auto F = rng.uniform_tensor<double>({dims.first, dims.second}, -1, 1);
    EXPECT_LT(max_diff(rmpg_forward(F, p), naive_forward(F, p)), 1e-12) << text;
    EXPECT_LT(max_diff(rmpg_forward(F, p, {false}), naive_forward(F, p, false)), 1e-12) << text;
  }
}

TEST(Forward, ZeroParametersGiveTheIdentity) {
  Rng rng(6);
  for (const char* text : {"[2,2]", "[5,2]", "[2,4]||"}) {
    const auto d = parse_descriptor(text);
    const auto F = rng.uniform_tensor<double>({8, 10}, -5, 5);
    EXPECT_EQ(rmpg_forward(F, RmpgParams<double>::zeros(d, 8, 10)), F) << text;
  }
}

TEST(Forward, SpatialLeafCountIsInvisible) {
  Rng rng(7);
  const std::size_t L = 16, C = 4;
  const auto F = rng.uniform_tensor<double>({L, C}, -1, 1);
  const auto base = RmpgParams<double>::random(parse_descriptor("[2,2]||"), L, C, rng);
  std::vector<Tensor<double>> shared;
  base.visit([&](const std::string&, const Tensor<double>& t) { shared.push_back(t); });
  for (const char* text : {"[2,4]||", "[2,8]||"}) {
    auto p = RmpgParams<double>::zeros(parse_descriptor(text), L, C);
    std::size_t k = 0;
    p.visit([&](const std::string&, Tensor<double>& t) { t = shared.at(k++); });
    EXPECT_LT(max_abs_diff(rmpg_forward(F, p), rmpg_forward(F, base)), 1e-12) << text;
  }
}

TEST(Forward, ContextChangesTheResult) {
  Rng rng(8);
  const auto p = RmpgParams<double>::random(parse_descriptor("[2,2]"), 4, 8, rng);
  const auto F = rng.uniform_tensor<double>({4, 8}, -1, 1);
  EXPECT_GT(max_abs_diff(rmpg_forward(F, p), rmpg_forward(F, p, {false})), 1e-6);
}

TEST(Forward, GradientsMatchFiniteDifferences) {
  Rng rng(9);
  for (const char* text : {"[2,2]", "[3]||"}) {
    for (bool context : {true, false}) {
      const auto p = RmpgParams<double>::random(parse_descriptor(text), 6, 4, rng);
      std::vector<Tensor<double>> in{rng.uniform_tensor<double>({6, 4}, -1, 1)};
      p.visit([&](const std::string&, const Tensor<double>& t) { in.push_back(t); });
      const auto w = rng.uniform_tensor<double>({6, 4}, -1, 1);
      const auto r = check::compare_gradients(in, [&](Tape<double>& tape, std::span<const Var> v) {
        const Var out = rmpg_forward(tape, v[0], bind_vars(p, v.subspan(1)), {context});
        return ops::sum(tape, ops::mul(tape, out, tape.input(w)));
      });
      EXPECT_LT(r.max_rel_error, 1e-6) << text << " context " << context;
    }
  }
}

TEST(Iterate, ZeroRepeatsIsIdentityAndStagesChain) {
  Rng rng(10);
  const auto d = parse_descriptor("[2]");
  const auto F = rng.uniform_tensor<double>({3, 4}, -1, 1);
  EXPECT_EQ(rmpg_iterate(F, RmpgStack<double>{}), F);
  const auto stack = RmpgStack<double>::random(d, 3, 4, 2, rng);
  const auto chained = rmpg_forward(rmpg_forward(F, stack.stages[0]), stack.stages[1]);
  EXPECT_LT(max_abs_diff(rmpg_iterate(F, stack), chained), 1e-14);
}

TEST(Params, NamesFollowAllocationOrder) {
  Rng rng(11);
  const auto p = RmpgParams<float>::random(parse_descriptor("[2,2]"), 4, 8, rng);
  std::vector<std::string> names;
  p.visit([&](const std::string& n, const Tensor<float>&) { names.push_back(n); });
  EXPECT_EQ(names, (std::vector<std::string>{"project_in/w", "project_in/b", "node/w", "node/b", "node0/w", "node0/b",
                                             "node1/w", "node1/b"}));
  EXPECT_EQ(p.parameter_count(), (8u * 8u + 8u) * 2u + (4u * 4u + 4u) * 2u);
}

TEST(Params, GlorotBoundsAndZeroBias) {
  Rng rng(12);
  const auto m = AffineMap<double>::random(10, 6, rng);
  const double limit = std::sqrt(6.0 / 16.0);
  for (double w : m.weight.data()) EXPECT_LE(std::abs(w), limit);
  for (double b : m.bias.data()) EXPECT_EQ(b, 0.0);
}

TEST(Params, SeededInitialisationIsDeterministic) {
  const auto d = parse_descriptor("[3,2]");
  Rng a(13), b(13);
  EXPECT_EQ(RmpgParams<float>::random(d, 4, 6, a).project_in.weight,
            RmpgParams<float>::random(d, 4, 6, b).project_in.weight);
}
