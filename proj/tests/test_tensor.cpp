#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "rmpg/check/finite_difference.hpp"
#include "rmpg/ops.hpp"
#include "rmpg/random.hpp"
#include "rmpg/tape.hpp"
#include "rmpg/tensor.hpp"

using namespace rmpg;

namespace {

Tensor<double> naive_matmul(const Tensor<double>& a, const Tensor<double>& b) {
  Tensor<double> out({a.rows(), b.cols()});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += a.at(i, k) * b.at(k, j);
      out[i * b.cols() + j] = s;
    }
  return out;
}

double grad_error(std::vector<Tensor<double>> inputs, const check::LossBuilder& f) {
  return check::compare_gradients(std::move(inputs), f).max_rel_error;
}

}  // namespace

TEST(Tensor, RejectsEmptyAndZeroExtents) {
  EXPECT_THROW(Tensor<float>(Shape{}), DimensionError);
  EXPECT_THROW(Tensor<float>(Shape{3, 0}), DimensionError);
  EXPECT_THROW(Tensor<float>(Shape{2, 2}, std::vector<float>{1, 2, 3}), DimensionError);
}

TEST(Tensor, RowMajorLayout) {
  auto m = Tensor<double>::matrix(2, 3, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(m.at(1, 0), 4.0);
  EXPECT_EQ(m.at(0, 2), 3.0);
  EXPECT_EQ(m.reshaped({3, 2}).at(1, 0), 3.0);
  EXPECT_THROW(m.reshaped({4, 2}), DimensionError);
}

TEST(Ops, MatmulMatchesNaiveLoop) {
  Rng rng(1);
  const auto a = rng.uniform_tensor<double>({7, 5}, -1, 1);
  const auto b = rng.uniform_tensor<double>({5, 4}, -1, 1);
  Tape<double> tape;
  const auto out = tape.value(ops::matmul(tape, tape.input(a), tape.input(b)));
  EXPECT_LT(max_abs_diff(out, naive_matmul(a, b)), 1e-13);
  EXPECT_EQ(tape.counter().mul_adds, 7u * 5u * 4u);
}

TEST(Ops, MatmulRejectsMismatch) {
  Tape<double> tape;
  EXPECT_THROW(ops::matmul(tape, tape.input(Tensor<double>({2, 3})), tape.input(Tensor<double>({2, 3}))),
               DimensionError);
}

TEST(Ops, SoftmaxRowsSumToOneAndSurviveLargeLogits) {
  Tape<double> tape;
  const auto m = Tensor<double>::matrix(2, 3, {1000, 1001, 1002, -5, 0, 5});
  const auto y = tape.value(ops::softmax_rows(tape, tape.input(m)));
  for (std::size_t r = 0; r < 2; ++r) EXPECT_NEAR(y.at(r, 0) + y.at(r, 1) + y.at(r, 2), 1.0, 1e-15);
  EXPECT_NEAR(y.at(0, 2), 1.0 / (1.0 + std::exp(-1.0) + std::exp(-2.0)), 1e-15);
  EXPECT_EQ(tape.counter().exp_evals, 6u);
}

TEST(Ops, FusedAttentionMatchesPrimitiveChain) {
  Rng rng(2);
  for (std::size_t n : {1u, 5u, 64u, 65u, 130u}) {
    const auto x = rng.uniform_tensor<double>({n, 3}, -2, 2);
    Tape<double> tape;
    const Var v = tape.input(x);
    const auto& fused = tape.value(ops::self_attention(tape, v, 0.4));
    const Var s = ops::scale(tape, ops::matmul(tape, v, ops::transpose(tape, v)), 0.4);
    const auto& chain = tape.value(ops::matmul(tape, ops::softmax_rows(tape, s), v));
    EXPECT_LT(max_abs_diff(fused, chain), 1e-12) << "n = " << n;
  }
}

TEST(Ops, FusedAttentionCountsLikeTheChain) {
  Rng rng(3);
  const auto x = rng.uniform_tensor<double>({9, 4}, -1, 1);
  Tape<double> a, b;
  ops::self_attention(a, a.input(x), 0.5);
  const Var v = b.input(x);
  ops::matmul(b, ops::softmax_rows(b, ops::matmul(b, v, ops::transpose(b, v))), v);
  EXPECT_EQ(a.counter().mul_adds, b.counter().mul_adds);
  EXPECT_EQ(a.counter().exp_evals, b.counter().exp_evals);
}

TEST(Gradients, MatmulTransposeScale) {
  Rng rng(4);
  EXPECT_LT(grad_error({rng.uniform_tensor<double>({3, 4}, -1, 1), rng.uniform_tensor<double>({3, 4}, -1, 1)},
                       [](Tape<double>& t, std::span<const Var> v) {
                         const Var m = ops::matmul(t, v[0], ops::transpose(t, v[1]));
                         return ops::sum(t, ops::mul(t, m, ops::scale(t, m, 0.5)));
                       }),
            1e-7);
}

TEST(Gradients, Softmax) {
  Rng rng(5);
  const auto w = rng.uniform_tensor<double>({4, 6}, -1, 1);
  EXPECT_LT(grad_error({rng.uniform_tensor<double>({4, 6}, -2, 2)},
                       [&](Tape<double>& t, std::span<const Var> v) {
                         return ops::sum(t, ops::mul(t, ops::softmax_rows(t, v[0]), t.input(w)));
                       }),
            1e-7);
}

TEST(Gradients, FusedAttentionAcrossBlocks) {
  Rng rng(6);
  const auto w = rng.uniform_tensor<double>({70, 3}, -1, 1);
  EXPECT_LT(grad_error({rng.uniform_tensor<double>({70, 3}, -1, 1)},
                       [&](Tape<double>& t, std::span<const Var> v) {
                         return ops::sum(t, ops::mul(t, ops::self_attention(t, v[0], 0.6), t.input(w)));
                       }),
            1e-6);
}

TEST(Gradients, AffineReluMse) {
  Rng rng(7);
  const auto target = rng.uniform_tensor<double>({5, 2}, 0, 1);
  EXPECT_LT(grad_error({rng.uniform_tensor<double>({5, 3}, -1, 1), rng.uniform_tensor<double>({3, 2}, -1, 1),
                        rng.uniform_tensor<double>({2}, -1, 1)},
                       [&](Tape<double>& t, std::span<const Var> v) {
                         return ops::column_mse_sum(t, ops::relu(t, ops::affine_channels(t, v[0], v[1], v[2])), target);
                       }),
            1e-6);
}

TEST(Gradients, ConcatSliceReshape) {
  Rng rng(8);
  const auto w = rng.uniform_tensor<double>({4, 5}, -1, 1);
  EXPECT_LT(grad_error({rng.uniform_tensor<double>({2, 5}, -1, 1), rng.uniform_tensor<double>({4, 5}, -1, 1)},
                       [&](Tape<double>& t, std::span<const Var> v) {
                         const Var rows = ops::concat_rows(t, {ops::slice_rows(t, v[1], 1, 2), v[0]});
                         const Var cols = ops::concat_cols(t, {ops::slice_cols(t, ops::reshape(t, v[1], {5, 4}), 1, 2),
                                                               ops::slice_cols(t, ops::reshape(t, v[0], {5, 2}), 0, 2)});
                         return ops::add(t, ops::sum(t, ops::mul(t, rows, t.input(w))),
                                         ops::sum(t, ops::mul(t, cols, cols)));
                       }),
            1e-7);
}

TEST(Gradients, Im2colAndUpsample) {
  Rng rng(9);
  const auto w = rng.uniform_tensor<double>({16, 18}, -1, 1);
  for (std::size_t stride : {1u, 2u}) {
    EXPECT_LT(grad_error({rng.uniform_tensor<double>({16, 2}, -1, 1)},
                         [&](Tape<double>& t, std::span<const Var> v) {
                           Var cols = ops::im2col3x3(t, v[0], 4, 4, stride);
                           if (stride == 2) cols = ops::upsample2x(t, cols, 2, 2);
                           return ops::sum(t, ops::mul(t, cols, t.input(w)));
                         }),
              1e-7);
  }
}

TEST(Ops, Im2colGathersPaddedNeighbourhoods) {
  // 3x3 single-channel map with values 1..9; the centre patch is the map itself.
  Tape<double> tape;
  const auto m = Tensor<double>({9, 1}, std::vector<double>{1, 2, 3, 4, 5, 6, 7, 8, 9});
  const auto cols = tape.value(ops::im2col3x3(tape, tape.input(m), 3, 3, 1));
  ASSERT_EQ(cols.shape(), (Shape{9, 9}));
  for (std::size_t k = 0; k < 9; ++k) EXPECT_EQ(cols.at(4, k), static_cast<double>(k + 1));
  // corner (0,0): only the lower-right 2x2 of the window is inside
  EXPECT_EQ(cols.at(0, 0), 0.0);
  EXPECT_EQ(cols.at(0, 4), 1.0);
  EXPECT_EQ(cols.at(0, 8), 5.0);
}

TEST(Tape, SecondBackwardIsRejected) {
  Tape<double> tape;
  const Var x = tape.parameter(Tensor<double>({2}, 1.0));
  const Var l = ops::sum(tape, x);
  tape.backward(l);
  EXPECT_THROW(tape.backward(l), ContractError);
}

TEST(Tape, NonScalarLossIsRejected) {
  Tape<double> tape;
  const Var x = tape.parameter(Tensor<double>({2}, 1.0));
  EXPECT_THROW(tape.backward(x), ContractError);
}

TEST(Tape, ForeignVariablesAreRejected) {
  Tape<double> a, b;
  const Var x = a.input(Tensor<double>({1}, 1.0));
  EXPECT_THROW(b.value(x), LookupError);
}

TEST(Tape, NonFiniteValuesRaise) {
  Tape<double> tape;
  EXPECT_THROW(tape.input(Tensor<double>({1}, std::nan(""))), NumericError);
  const Var big = tape.input(Tensor<double>({1}, 1e300));
  EXPECT_THROW(ops::mul(tape, big, big), NumericError);
}

TEST(Tape, GradientsAccumulateOverSharedUses) {
  Tape<double> tape;
  const Var x = tape.parameter(Tensor<double>({1}, 3.0));
  tape.backward(ops::sum(tape, ops::add(tape, ops::mul(tape, x, x), x)));
  EXPECT_DOUBLE_EQ(tape.grad(x)[0], 7.0);
}
