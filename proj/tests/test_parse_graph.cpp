#include <gtest/gtest.h>

#include <cmath>
#include <string>

#include "rmpg/parse_graph.hpp"
#include "rmpg/random.hpp"

using namespace rmpg;
using namespace rmpg::pg;

namespace {

Model two_level() {
  // root with two leaf children, 2 states each
  std::vector<PgNode> nodes(3);
  nodes[0] = {"body", std::nullopt, 2, {}, {}};
  nodes[1] = {"arm", 0, 2, {0.0, 1.0}, {0.5, 0.0, 0.0, 0.2}};
  nodes[2] = {"leg", 0, 2, {0.3, 0.0}, {0.0, 0.0, 2.0, 0.0}};
  return Model(std::move(nodes));
}

}  // namespace

TEST(ParseGraph, SingleLeafTakesArgmax) {
  const Model m({PgNode{"only", std::nullopt, 4, {0.1, 0.7, -2.0, 0.3}, {}}});
  const auto r = infer(m);
  EXPECT_EQ(r.assignment, (Assignment{1}));
  EXPECT_DOUBLE_EQ(r.score, 0.7);
}

TEST(ParseGraph, TiesResolveToLowestState) {
  const Model m({PgNode{"only", std::nullopt, 3, {0.5, 0.5, 0.5}, {}}});
  EXPECT_EQ(infer(m).assignment, (Assignment{0}));
  EXPECT_EQ(map_brute_force(m).assignment, (Assignment{0}));
}

TEST(ParseGraph, HandBuiltTreeMessages) {
  const Model m = two_level();
  const auto r = infer(m);
  // up(root)(0) = max(0.5+0, 0+1) + max(0+0.3, 0+0) = 1.3
  // up(root)(1) = max(0+0, 0.2+1) + max(2+0.3, 0+0) = 3.5
  EXPECT_DOUBLE_EQ(r.up[0][0], 1.3);
  EXPECT_DOUBLE_EQ(r.up[0][1], 3.5);
  EXPECT_EQ(r.assignment, (Assignment{1, 1, 0}));
  EXPECT_DOUBLE_EQ(r.score, 3.5);
  EXPECT_DOUBLE_EQ(map_brute_force(m).score, 3.5);
}

TEST(ParseGraph, ContextShiftsLaterSibling) {
  std::vector<PgNode> nodes(3);
  nodes[0] = {"body", std::nullopt, 1, {}, {}};
  nodes[1] = {"a", 0, 2, {1.0, 0.0}, {0.0, 0.0}};
  nodes[2] = {"b", 0, 2, {1.0, 0.0}, {0.0, 0.0}};
  // a = 0 penalises b = 0 strongly.
  const Model m(std::move(nodes), {SiblingTerm{1, 2, {-5.0, 0.0, 0.0, 0.0}}});
  const auto r = infer(m);
  EXPECT_EQ(r.assignment, (Assignment{0, 0, 1}));
  EXPECT_DOUBLE_EQ(r.score, score(m, r.assignment));
}

// Property: without context the two passes are exact MAP inference.
TEST(ParseGraph, MatchesBruteForceWithoutContext) {
  Rng rng(2024);
  for (int trial = 0; trial < 100; ++trial) {
    const Model m = random_model(rng);
    const auto r = infer(m);
    const auto b = map_brute_force(m);
    EXPECT_EQ(r.score, b.score) << "trial " << trial;
    EXPECT_EQ(r.score, score(m, r.assignment));
  }
}

// Property: with context the two passes give a feasible lower bound.
TEST(ParseGraph, NeverBeatsBruteForceWithContext) {
  Rng rng(77);
  RandomModelOptions opt;
  opt.context = true;
  for (int trial = 0; trial < 100; ++trial) {
    const Model m = random_model(rng, opt);
    EXPECT_LE(infer(m).score, map_brute_force(m).score) << "trial " << trial;
  }
}

TEST(ParseGraph, ProbabilitiesSumToOne) {
  Rng rng(5);
  RandomModelOptions opt;
  opt.context = true;
  for (int trial = 0; trial < 20; ++trial) {
    const Model m = random_model(rng, opt);
    for (double temperature : {0.5, 1.0, 3.0}) EXPECT_NEAR(total_probability(m, temperature), 1.0, 1e-9);
  }
  EXPECT_THROW(log_partition_function(two_level(), 0.0), ContractError);
}

TEST(ParseGraph, PartitionFunctionByHand) {
  const Model m({PgNode{"x", std::nullopt, 2, {0.0, std::log(3.0)}, {}}});
  EXPECT_NEAR(partition_function(m), 4.0, 1e-12);
  EXPECT_NEAR(probability(m, {1}, log_partition_function(m)), 0.75, 1e-12);
}

TEST(ParseGraph, CapacityBoundsEnumeration) {
  const Model m = two_level();
  EXPECT_THROW(map_brute_force(m, 7), CapacityError);
  EXPECT_NO_THROW(map_brute_force(m, 8));
}

TEST(ParseGraph, ScoreRejectsBadAssignments) {
  const Model m = two_level();
  EXPECT_THROW(score(m, {0, 0}), ContractError);
  EXPECT_THROW(score(m, {0, 2, 0}), ContractError);
}

TEST(ParseGraph, ModelContractViolations) {
  EXPECT_THROW(Model({}), ContractError);
  EXPECT_THROW(Model({PgNode{"r", std::nullopt, 2, {1.0}, {}}}), ContractError);
  std::vector<PgNode> bad_order(2);
  bad_order[0] = {"r", std::nullopt, 1, {}, {}};
  bad_order[1] = {"c", 1, 1, {0.0}, {0.0}};
  EXPECT_THROW(Model{bad_order}, ContractError);
  auto siblings = two_level();
  std::vector<PgNode> nodes{siblings.node(0), siblings.node(1), siblings.node(2)};
  EXPECT_THROW(Model(nodes, {SiblingTerm{2, 1, {0, 0, 0, 0}}}), ContractError);
}

TEST(ParseGraphJson, ParsesNestedTables) {
  const Model m = parse_model(R"({
    "nodes": [ {"name": "body", "states": 2},
               {"name": "arm", "parent": 0, "states": 2, "pairwise": [[0.5, 0], [0, 0.2]], "leaf": [0, 1]},
               {"name": "leg", "parent": 0, "states": 2, "pairwise": [[0, 0], [2, 0]], "leaf": [0.3, 0]} ],
    "context": [ {"nodes": [1, 2], "table": [[0, 0], [0, 0]]} ]
  })");
  EXPECT_EQ(m.size(), 3u);
  EXPECT_EQ(m.context().size(), 1u);
  EXPECT_EQ(infer(m).assignment, infer(two_level()).assignment);
}

TEST(ParseGraphJson, RejectsMalformedDocuments) {
  for (const char* bad : {"{", "[]", R"({"nodes": [], "extra": 1})", R"({"nodes": [{"states": 2, "colour": 1}]})",
                          R"({"nodes": [{"states": 2, "leaf": [1]}]})", R"({"nodes": [{"states": "two"}]})",
                          R"({"nodes": [{"states": 1, "leaf": ["x"]}]})"}) {
    EXPECT_THROW(parse_model(bad), ParseError) << bad;
  }
  EXPECT_THROW(load_model("/nonexistent/model.json"), ParseError);
}
