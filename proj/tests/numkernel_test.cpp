// Copyright (c) 2026 The depthlab Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//    http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
// ============================================================================
#include <gtest/gtest.h>

#include <cmath>

#include "depthlab/gradcheck.hpp"
#include "depthlab/graph.hpp"
#include "depthlab/rng.hpp"
#include "depthlab/tensor.hpp"

namespace depthlab {
namespace {

Tensor naive_matmul(const Tensor& a, const Tensor& b) {
  Tensor c(a.rows(), b.cols());
  for (Index i = 0; i < a.rows(); ++i)
    for (Index j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (Index p = 0; p < a.cols(); ++p) s += a(i, p) * b(p, j);
      c(i, j) = s;
    }
  return c;
}

TEST(Matmul, IdentityLeavesOperandUnchanged) {
  Rng rng(1);
  Tensor b = gaussian(rng, 3, 5, 0.0, 1.0);
  Tensor eye = Tensor::Identity(3, 3);
  EXPECT_TRUE(bitwise_equal(matmul(eye, b), b));
}

TEST(Matmul, HandComputed) {
  Tensor a(2, 2), b(2, 1);
  a << 1, 2, 3, 4;
  b << 0, 1;
  Tensor c = matmul(a, b);
  EXPECT_EQ(c(0, 0), 2.0);
  EXPECT_EQ(c(1, 0), 4.0);
}

TEST(Matmul, MatchesNaiveOracleBitwise) {
  Rng rng(7);
  for (int rep = 0; rep < 20; ++rep) {
    Tensor a = gaussian(rng, 8, 8, 0.0, 1.0);
    Tensor b = gaussian(rng, 8, 8, 0.0, 1.0);
    EXPECT_TRUE(bitwise_equal(matmul(a, b), naive_matmul(a, b)));
  }
  Tensor a = gaussian(rng, 5, 13, 0.0, 1.0);
  Tensor b = gaussian(rng, 13, 7, 0.0, 1.0);
  EXPECT_TRUE(bitwise_equal(matmul(a, b), naive_matmul(a, b)));
}

TEST(Matmul, ShapeMismatchThrows) {
  EXPECT_THROW(matmul(Tensor(2, 3), Tensor(2, 3)), DimensionError);
}

TEST(Softmax, SymmetricRowIsUniform) {
  Tensor x = Tensor::Zero(1, 3);
  Tensor y = softmax_rows(x);
  for (Index j = 0; j < 3; ++j) EXPECT_NEAR(y(0, j), 1.0 / 3.0, 1e-15);
}

TEST(Softmax, LargeLogitsStayFinite) {
  Tensor x(1, 2);
  x << 1000.0, 0.0;
  Tensor y = softmax_rows(x);
  EXPECT_TRUE(y.allFinite());
  EXPECT_EQ(y(0, 0), 1.0);
  EXPECT_GE(y(0, 1), 0.0);
}

TEST(Softmax, MatchesHighPrecisionValues) {
  Tensor x(1, 3);
  x << 1.0, 2.0, 3.0;
  Tensor y = softmax_rows(x);
  // 40-digit reference evaluation.
  EXPECT_NEAR(y(0, 0), 0.0900305731703804579980221, 1e-12);
  EXPECT_NEAR(y(0, 1), 0.2447284710547976524729596, 1e-12);
  EXPECT_NEAR(y(0, 2), 0.6652409557748218895290183, 1e-12);
}

TEST(Softmax, MaskedEntriesAreZeroAndRowsSumToOne) {
  Rng rng(3);
  Tensor x = gaussian(rng, 6, 6, 0.0, 3.0);
  Mask m = causal_mask(6);
  Tensor y = softmax_rows(x, &m);
  for (Index i = 0; i < 6; ++i) {
    EXPECT_NEAR(y.row(i).sum(), 1.0, 1e-12);
    for (Index j = i + 1; j < 6; ++j) EXPECT_EQ(y(i, j), 0.0);
  }
}

TEST(Softmax, ShiftInvariant) {
  Rng rng(4);
  Tensor x = gaussian(rng, 4, 5, 0.0, 1.0);
  Tensor shifted = x;
  for (Index i = 0; i < 4; ++i) shifted.row(i).array() += 10.0 * static_cast<double>(i + 1);
  EXPECT_LT((softmax_rows(x) - softmax_rows(shifted)).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(Softmax, FullyMaskedRowThrows) {
  Tensor x = Tensor::Zero(2, 2);
  Mask m(2, 2);
  m << true, false, false, false;
  EXPECT_THROW(softmax_rows(x, &m), DegenerateRowError);
}

TEST(Philox, KnownAnswerVectors) {
  auto z = philox4x32({0, 0, 0, 0}, {0, 0});
  EXPECT_EQ(z, (std::array<std::uint32_t, 4>{0x6627e8d5u, 0xe169c58du, 0xbc57ac4cu, 0x9b00dbd8u}));
  auto f = philox4x32({0xffffffffu, 0xffffffffu, 0xffffffffu, 0xffffffffu}, {0xffffffffu, 0xffffffffu});
  EXPECT_EQ(f, (std::array<std::uint32_t, 4>{0x408f276du, 0x41c83b0eu, 0xa20bc7c6u, 0x6d5451fdu}));
  auto p = philox4x32({0x243f6a88u, 0x85a308d3u, 0x13198a2eu, 0x03707344u}, {0xa4093822u, 0x299f31d0u});
  EXPECT_EQ(p, (std::array<std::uint32_t, 4>{0xd16cfe09u, 0x94fdccebu, 0x5001e420u, 0x24126ea1u}));
}

TEST(Rng, SameSeedSameStream) {
  Rng a(42), b(42);
  Tensor x = gaussian(a, 16, 16, 0.0, 1.0);
  Tensor y = gaussian(b, 16, 16, 0.0, 1.0);
  EXPECT_TRUE(bitwise_equal(x, y));
}

TEST(Rng, DerivedStreamsDiffer) {
  Rng base(42);
  EXPECT_NE(base.derive({1}).next_u64(), base.derive({2}).next_u64());
  EXPECT_EQ(base.derive({1, 5}).next_u64(), base.derive({1, 5}).next_u64());
}

TEST(Rng, UniformInUnitInterval) {
  Rng r(9);
  for (int i = 0; i < 10000; ++i) {
    const double u = r.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
  }
}

TEST(Gaussian, ZeroStdIsConstant) {
  Rng r(1);
  Tensor t = gaussian(r, 4, 4, 2.5, 0.0);
  EXPECT_TRUE((t.array() == 2.5).all());
}

TEST(Gaussian, UnitVarianceOverMillionSamples) {
  Rng r(11);
  Tensor t = gaussian(r, 1000, 1000, 0.0, 1.0);
  const double m = t.mean();
  const double var = (t.array() - m).square().sum() / static_cast<double>(t.size());
  EXPECT_NEAR(var, 1.0, 0.01);
}

TEST(Gaussian, NegativeStdThrows) {
  Rng r(1);
  EXPECT_THROW(gaussian(r, 2, 2, 0.0, -1.0), DomainError);
}

TEST(Backward, SumGivesOnes) {
  Rng r(2);
  Graph<double> g;
  auto w = g.leaf(gaussian(r, 3, 4, 0.0, 1.0));
  g.backward(sum(w));
  EXPECT_TRUE((g.grad(w).array() == 1.0).all());
}

TEST(Backward, SquaredNormClosedForm) {
  Rng r(5);
  Tensor wv = gaussian(r, 4, 3, 0.0, 1.0);
  Tensor xv = gaussian(r, 3, 1, 0.0, 1.0);
  Graph<double> g;
  auto w = g.leaf(wv);
  auto x = g.constant(xv);
  auto y = matmul(w, x);
  g.backward(sum(mul(y, y)));
  Tensor expected = 2.0 * (wv * xv) * xv.transpose();
  EXPECT_LT((g.grad(w) - expected).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Backward, NonScalarLossThrows) {
  Graph<double> g;
  auto w = g.leaf(Tensor::Ones(2, 2));
  EXPECT_THROW(g.backward(w), ContractError);
}

TEST(FiniteDiff, IdentityCoordinateIsExact) {
  Tensor theta(1, 3);
  theta << 0.0, -1.2, 2.0;
  Tensor c = Tensor::Zero(1, 3);
  c(0, 0) = 1.0;
  LossBuilder<double> first = [&](Graph<double>&, Var<double> t) { return dot_const(t, c); };
  EXPECT_EQ(finite_diff_check(first, theta, 0x1p-20), 0.0);
}

TEST(FiniteDiff, QuadraticIsAccurate) {
  Tensor theta(1, 4);
  theta << 0.5, -1.0, 2.0, 3.0;
  LossBuilder<double> f = [](Graph<double>&, Var<double> t) { return sum(mul(t, t)); };
  EXPECT_LT(finite_diff_check(f, theta, 1e-4), 1e-8);
}

// Two-layer composite through every differentiable op family.
template <typename S>
Var<S> composite(Graph<S>& g, Var<S> w1, const TensorT<S>& x, const TensorT<S>& w2, const TensorT<S>& gain) {
  auto h = matmul(g.constant(x), w1);
  auto n = rms_norm(h, g.constant(gain), S(1e-5));
  auto a = swiglu(n, h);
  auto o = matmul(a, g.constant(w2));
  std::vector<int> targets{0, 2, 1, 3, 2};
  return cross_entropy(o, std::span<const int>(targets));
}

TEST(FiniteDiff, RandomCompositeInLongDouble) {
  Rng r(21);
  using LD = long double;
  TensorT<LD> x = gaussian(r, 5, 6, 0.0, 1.0).cast<LD>();
  TensorT<LD> w1 = gaussian(r, 6, 8, 0.0, 0.5).cast<LD>();
  TensorT<LD> w2 = gaussian(r, 8, 4, 0.0, 0.5).cast<LD>();
  TensorT<LD> gain = gaussian(r, 1, 8, 1.0, 0.2).cast<LD>();
  LossBuilder<LD> f = [&](Graph<LD>& g, Var<LD> w) { return composite(g, w, x, w2, gain); };
  EXPECT_LT(finite_diff_check(f, w1, LD(1e-6)), 1e-5L);
}

template <typename S>
void expect_op_gradient(const LossBuilder<S>& f, const TensorT<S>& theta) {
  EXPECT_LT(finite_diff_check(f, theta, S(1e-6)), 1e-5L);
}

TEST(FiniteDiff, AttentionRopeAndRouting) {
  using LD = long double;
  Rng r(33);
  // Two sequences of length 3, two query heads sharing one KV head.
  AttentionLayout lay{2, 1, 4, 2, 3, 3, 0};
  TensorT<LD> q0 = gaussian(r, 6, 8, 0.0, 1.0).cast<LD>();
  TensorT<LD> k0 = gaussian(r, 6, 4, 0.0, 1.0).cast<LD>();
  TensorT<LD> v0 = gaussian(r, 6, 4, 0.0, 1.0).cast<LD>();
  TensorT<LD> c = gaussian(r, 6, 8, 0.0, 1.0).cast<LD>();
  std::vector<Index> pos{0, 1, 2, 0, 1, 2};
  LossBuilder<LD> through_q = [&](Graph<LD>& g, Var<LD> q) {
    auto qr = rope(q, Index{4}, std::span<const Index>(pos), LD(10000));
    auto kr = rope(g.constant(k0), Index{4}, std::span<const Index>(pos), LD(10000));
    return dot_const(attention(qr, kr, g.constant(v0), lay), c);
  };
  expect_op_gradient(through_q, q0);
  LossBuilder<LD> through_k = [&](Graph<LD>& g, Var<LD> k) {
    return dot_const(attention(g.constant(q0), k, g.constant(v0), lay), c);
  };
  expect_op_gradient(through_k, k0);
  LossBuilder<LD> through_v = [&](Graph<LD>& g, Var<LD> v) {
    return dot_const(attention(g.constant(q0), g.constant(k0), v, lay), c);
  };
  expect_op_gradient(through_v, v0);

  TensorT<LD> logits0 = gaussian(r, 5, 4, 0.0, 1.0).cast<LD>();
  TensorT<LD> c2 = gaussian(r, 5, 4, 0.0, 1.0).cast<LD>();
  LossBuilder<LD> routing = [&](Graph<LD>&, Var<LD> logits) {
    auto p = softmax_rows(logits);
    auto gates = topk_gates(p, Index{2});
    auto lse = logsumexp_rows(logits);
    return add(dot_const(gates, c2), mean(mul(lse, lse)));
  };
  expect_op_gradient(routing, logits0);
}

TEST(FiniteDiff, GatherScatterScaleRows) {
  using LD = long double;
  Rng r(34);
  TensorT<LD> a0 = gaussian(r, 5, 3, 0.0, 1.0).cast<LD>();
  TensorT<LD> w0 = gaussian(r, 5, 1, 0.0, 1.0).cast<LD>();
  TensorT<LD> c = gaussian(r, 5, 3, 0.0, 1.0).cast<LD>();
  std::vector<Index> rows{4, 1, 3};
  LossBuilder<LD> f = [&](Graph<LD>& g, Var<LD> a) {
    auto gathered = gather_rows(a, std::span<const Index>(rows));
    auto scaled = scale_rows(gathered, gather_rows(g.constant(w0), std::span<const Index>(rows)));
    auto back = scatter_rows(scaled, std::span<const Index>(rows), Index{5});
    auto both = add(back, scale_rows(a, g.constant(w0)));
    return add(dot_const(both, c), sum(mean_rows(stack_rows(a, a))));
  };
  expect_op_gradient(f, a0);
  LossBuilder<LD> fw = [&](Graph<LD>& g, Var<LD> w) {
    return dot_const(scale_rows(g.constant(a0), w), c);
  };
  expect_op_gradient(fw, w0);
}

}  // namespace
}  // namespace depthlab
