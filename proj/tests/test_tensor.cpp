#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "convt/error.hpp"
#include "convt/gradcheck.hpp"
#include "convt/graph.hpp"
#include "convt/ops.hpp"
#include "convt/rng.hpp"

using namespace convt;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

// Direct six-loop cross-correlation.
Tensor naive_conv(const Tensor& x, const Tensor& k, std::size_t stride, std::size_t pad) {
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t F = k.dim(0), kh = k.dim(2), kw = k.dim(3);
  const std::size_t Ho = (H + 2 * pad - kh) / stride + 1, Wo = (W + 2 * pad - kw) / stride + 1;
  Tensor out(Shape{B, F, Ho, Wo});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t f = 0; f < F; ++f)
      for (std::size_t oy = 0; oy < Ho; ++oy)
        for (std::size_t ox = 0; ox < Wo; ++ox) {
          double acc = 0.0;
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < kh; ++i)
              for (std::size_t j = 0; j < kw; ++j) {
                const long y = static_cast<long>(oy * stride + i) - static_cast<long>(pad);
                const long xx = static_cast<long>(ox * stride + j) - static_cast<long>(pad);
                if (y < 0 || xx < 0 || y >= static_cast<long>(H) || xx >= static_cast<long>(W)) continue;
                acc += x[((b * C + c) * H + y) * W + xx] * k[((f * C + c) * kh + i) * kw + j];
              }
          out[((b * F + f) * Ho + oy) * Wo + ox] = acc;
        }
  return out;
}

}  // namespace

TEST(Tensor, ShapeAndDataAgree) {
  Tensor t(Shape{2, 3, 4}, 1.5);
  EXPECT_EQ(t.size(), 24u);
  EXPECT_EQ(t.dim(-1), 4u);
  EXPECT_THROW(Tensor(Shape{2, 3}, std::vector<double>(5)), DimensionError);
  EXPECT_THROW(Tensor(Shape{2, 0}), DimensionError);
  EXPECT_THROW((void)t.dim(3), DimensionError);
}

TEST(Tensor, ReshapeKeepsValues) {
  Tensor t(Shape{2, 3}, {1, 2, 3, 4, 5, 6});
  const Tensor r = t.reshaped({3, 2});
  EXPECT_EQ(r.shape(), (Shape{3, 2}));
  EXPECT_EQ(r[5], 6.0);
  EXPECT_THROW((void)t.reshaped({4, 2}), DimensionError);
}

TEST(Matmul, IdentityLeavesMatrix) {
  Graph g(false);
  const Tensor m(Shape{2, 2}, {3, -1, 0.5, 7});
  const Var out = matmul(g, g.constant(Tensor(Shape{2, 2}, {1, 0, 0, 1})), g.constant(m));
  EXPECT_EQ(g.value(out), m);
}

TEST(Matmul, HandComputedProduct) {
  Graph g(false);
  const Var out = matmul(g, g.constant(Tensor(Shape{2, 2}, {1, 2, 3, 4})), g.constant(Tensor(Shape{2, 1}, {1, 1})));
  EXPECT_EQ(g.value(out), Tensor(Shape{2, 1}, {3, 7}));
}

TEST(Matmul, InnerMismatchNamesBothShapes) {
  Graph g(false);
  try {
    matmul(g, g.constant(Tensor(Shape{2, 3})), g.constant(Tensor(Shape{2, 3})));
    FAIL() << "expected a dimension error";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2,3] x [2,3]"), std::string::npos) << msg;
  }
}

TEST(Matmul, BatchBroadcast) {
  Rng rng(4);
  Graph g(false);
  const Tensor a = random_tensor({3, 2, 4}, rng), b = random_tensor({4, 5}, rng);
  const Tensor& out = g.value(matmul(g, g.constant(a), g.constant(b)));
  ASSERT_EQ(out.shape(), (Shape{3, 2, 5}));
  for (std::size_t n = 0; n < 3; ++n)
    for (std::size_t i = 0; i < 2; ++i)
      for (std::size_t j = 0; j < 5; ++j) {
        double acc = 0;
        for (std::size_t k = 0; k < 4; ++k) acc += a[(n * 2 + i) * 4 + k] * b[k * 5 + j];
        EXPECT_NEAR(out[(n * 2 + i) * 5 + j], acc, 1e-14);
      }
}

TEST(Matmul, IdentityAssociativityIsBitwise) {
  // Small integers keep every product and sum exactly representable.
  Rng rng(9);
  Tensor a(Shape{3, 4}), b(Shape{4, 2}), eye(Shape{4, 4});
  for (double& v : a.values()) v = static_cast<double>(rng.below(17)) - 8.0;
  for (double& v : b.values()) v = static_cast<double>(rng.below(17)) - 8.0;
  for (std::size_t i = 0; i < 4; ++i) eye[i * 4 + i] = 1.0;
  Graph g(false);
  const Var A = g.constant(a), B = g.constant(b), I = g.constant(eye);
  const Tensor& left = g.value(matmul(g, matmul(g, A, I), B));
  const Tensor& right = g.value(matmul(g, A, matmul(g, I, B)));
  const Tensor& plain = g.value(matmul(g, A, B));
  EXPECT_EQ(left, plain);
  EXPECT_EQ(right, plain);
}

TEST(Conv2d, UnitKernelSumsChannels) {
  Rng rng(1);
  const Tensor x = random_tensor({1, 3, 4, 5}, rng);
  Graph g(false);
  const Tensor& out = g.value(conv2d(g, g.constant(x), g.constant(Tensor(Shape{1, 3, 1, 1}, 1.0)), std::nullopt, {}));
  ASSERT_EQ(out.shape(), (Shape{1, 1, 4, 5}));
  for (std::size_t i = 0; i < 20; ++i) EXPECT_NEAR(out[i], x[i] + x[20 + i] + x[40 + i], 1e-15);
}

TEST(Conv2d, OnesKernelOnOnesInput) {
  Graph g(false);
  const Tensor& out = g.value(conv2d(g, g.constant(Tensor(Shape{1, 1, 5, 5}, 1.0)),
                                     g.constant(Tensor(Shape{1, 1, 3, 3}, 1.0)), std::nullopt, {}));
  EXPECT_EQ(out, Tensor(Shape{1, 1, 3, 3}, 9.0));
}

TEST(Conv2d, StrideTwoOnFourByFour) {
  Graph g(false);
  const Tensor& out = g.value(conv2d(g, g.constant(Tensor(Shape{1, 1, 4, 4}, 1.0)),
                                     g.constant(Tensor(Shape{2, 1, 3, 3}, 1.0)), std::nullopt, {2, 0, 0}));
  EXPECT_EQ(out.shape(), (Shape{1, 2, 1, 1}));
}

TEST(Conv2d, KernelLargerThanPaddedInputThrows) {
  Graph g(false);
  EXPECT_THROW(conv2d(g, g.constant(Tensor(Shape{1, 1, 2, 2})), g.constant(Tensor(Shape{1, 1, 5, 5})), std::nullopt,
                      {1, 1, 1}),
               DimensionError);
  EXPECT_THROW((void)conv_output_size(4, 3, 0, 0), ConfigError);
}

TEST(Conv2d, OutputSizeFollowsFloorFormula) {
  for (std::size_t h = 1; h <= 12; ++h)
    for (std::size_t k = 1; k <= 5; ++k)
      for (std::size_t s = 1; s <= 3; ++s)
        for (std::size_t p = 0; p <= 2; ++p) {
          if (h + 2 * p < k) {
            EXPECT_THROW((void)conv_output_size(h, k, s, p), DimensionError);
            continue;
          }
          // Count window positions directly.
          std::size_t count = 0;
          for (std::size_t start = 0; start + k <= h + 2 * p; start += s) ++count;
          EXPECT_EQ(conv_output_size(h, k, s, p), count) << h << ' ' << k << ' ' << s << ' ' << p;
        }
}

TEST(Conv2d, MatchesDirectLoops) {
  Rng rng(2);
  for (std::size_t stride : {1u, 2u}) {
    for (std::size_t pad : {0u, 1u}) {
      const Tensor x = random_tensor({2, 3, 7, 6}, rng), k = random_tensor({4, 3, 3, 3}, rng);
      Graph g(false);
      const Tensor& out = g.value(conv2d(g, g.constant(x), g.constant(k), std::nullopt, {stride, pad, pad}));
      EXPECT_LT(max_abs_diff(out, naive_conv(x, k, stride, pad)), 1e-13);
    }
  }
}

TEST(Conv2d, ChannelsLastAgreesWithReference) {
  Rng rng(3);
  const Tensor x = random_tensor({2, 3, 7, 6}, rng), k = random_tensor({4, 3, 3, 2}, rng), b = random_tensor({4}, rng);
  Graph g;
  const Var xv = g.input(x), kv = g.input(k), bv = g.input(b);
  const Var ref = conv2d(g, xv, kv, bv, {2, 1, 0});
  const Var cl = permute(g, conv2d_channels_last(g, permute(g, xv, {0, 2, 3, 1}), kv, bv, {2, 1, 0}), {0, 3, 1, 2});
  EXPECT_LT(max_abs_diff(g.value(ref), g.value(cl)), 1e-13);
  Rng wr(5);
  const Var w = g.constant(random_tensor(g.value(ref).shape(), wr));
  g.backward(sum(g, add(g, mul(g, ref, w), mul(g, scale(g, cl, -1.0), w))));
  // d/dx of (ref - cl) . w vanishes when both kernels agree.
  for (Var v : {xv, kv, bv}) {
    const Tensor grad = g.grad(v);
    for (double d : grad.values()) EXPECT_NEAR(d, 0.0, 1e-12);
  }
}

TEST(LayerNorm, ConstantRowGivesZeros) {
  Graph g(false);
  const Tensor& out = g.value(layer_norm(g, g.constant(Tensor(Shape{1, 4}, 3.0)), g.constant(Tensor(Shape{4}, 1.0)),
                                         g.constant(Tensor(Shape{4}, 0.0))));
  for (double v : out.values()) EXPECT_EQ(v, 0.0);
}

TEST(LayerNorm, TwoElementRow) {
  Graph g(false);
  const Tensor& out = g.value(layer_norm(g, g.constant(Tensor(Shape{1, 2}, {1, 3})),
                                         g.constant(Tensor(Shape{2}, 1.0)), g.constant(Tensor(Shape{2}, 0.0)), 1e-12));
  EXPECT_NEAR(out[0], -1.0, 1e-10);
  EXPECT_NEAR(out[1], 1.0, 1e-10);
}

TEST(LayerNorm, ZeroGammaGivesBeta) {
  Rng rng(6);
  Graph g(false);
  const Tensor beta = random_tensor({5}, rng);
  const Tensor& out = g.value(layer_norm(g, g.constant(random_tensor({3, 5}, rng)), g.constant(Tensor(Shape{5}, 0.0)),
                                         g.constant(beta)));
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(out[r * 5 + i], beta[i]);
}

TEST(LayerNorm, RowsAreStandardized) {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    Graph g(false);
    const Tensor& out = g.value(layer_norm(g, g.constant(random_tensor({4, 16}, rng, -10, 10)),
                                           g.constant(Tensor(Shape{16}, 1.0)), g.constant(Tensor(Shape{16}, 0.0))));
    for (std::size_t r = 0; r < 4; ++r) {
      double mu = 0, var = 0;
      for (std::size_t i = 0; i < 16; ++i) mu += out[r * 16 + i] / 16;
      for (std::size_t i = 0; i < 16; ++i) var += (out[r * 16 + i] - mu) * (out[r * 16 + i] - mu) / 16;
      EXPECT_LT(std::abs(mu), 1e-6);
      EXPECT_NEAR(var, 1.0, 1e-3);
    }
  }
}

TEST(LayerNorm, RejectsBadArguments) {
  Graph g(false);
  EXPECT_THROW(layer_norm(g, g.constant(Tensor(Shape{2, 3})), g.constant(Tensor(Shape{3}, 1.0)),
                          g.constant(Tensor(Shape{3})), 0.0),
               ConfigError);
  EXPECT_THROW(layer_norm(g, g.constant(Tensor(Shape{2, 3})), g.constant(Tensor(Shape{4}, 1.0)),
                          g.constant(Tensor(Shape{4}))),
               DimensionError);
}

TEST(Softmax, UniformInput) {
  Graph g(false);
  const Tensor& out = g.value(softmax(g, g.constant(Tensor(Shape{1, 4}, 2.5)), -1));
  for (double v : out.values()) EXPECT_NEAR(v, 0.25, 1e-15);
}

TEST(Softmax, LnTwoCase) {
  Graph g(false);
  const Tensor& out = g.value(softmax(g, g.constant(Tensor(Shape{2}, {0.0, std::numbers::ln2})), 0));
  EXPECT_NEAR(out[0], 1.0 / 3.0, 1e-15);
  EXPECT_NEAR(out[1], 2.0 / 3.0, 1e-15);
}

TEST(Softmax, ShiftInvariance) {
  Rng rng(8);
  const Tensor x = random_tensor({3, 6}, rng);
  Tensor shifted = x;
  for (double& v : shifted.values()) v += 123.0;
  Graph g(false);
  const Tensor a = g.value(softmax(g, g.constant(x), 1));
  const Tensor b = g.value(softmax(g, g.constant(shifted), 1));
  EXPECT_LT(max_abs_diff(a, b), 1e-14);
}

TEST(Softmax, RowsAreDistributions) {
  Rng rng(10);
  for (int trial = 0; trial < 50; ++trial) {
    for (int axis : {0, 1, 2}) {
      Graph g(false);
      const Tensor x = random_tensor({3, 4, 5}, rng, -50, 50);
      const Tensor& out = g.value(softmax(g, g.constant(x), axis));
      const Shape& s = x.shape();
      std::size_t outer = 1, inner = 1;
      for (int i = 0; i < axis; ++i) outer *= s[static_cast<std::size_t>(i)];
      for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < 3; ++i) inner *= s[i];
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t in = 0; in < inner; ++in) {
          double acc = 0;
          for (std::size_t a = 0; a < s[static_cast<std::size_t>(axis)]; ++a) {
            const double p = out[(o * s[static_cast<std::size_t>(axis)] + a) * inner + in];
            EXPECT_GE(p, 0.0);
            acc += p;
          }
          EXPECT_NEAR(acc, 1.0, 1e-6);
        }
    }
  }
}

TEST(Gelu, MatchesErfDefinition) {
  Graph g(false);
  const Tensor x(Shape{5}, {-3, -0.5, 0, 0.7, 2});
  const Tensor& out = g.value(gelu(g, g.constant(x)));
  for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(out[i], 0.5 * x[i] * (1 + std::erf(x[i] / std::sqrt(2.0))), 1e-15);
}

TEST(Backward, SumGivesOnes) {
  Graph g;
  const Var x = g.input(Tensor(Shape{2, 3}, {1, 2, 3, 4, 5, 6}));
  g.backward(sum(g, x));
  EXPECT_EQ(g.grad(x), Tensor(Shape{2, 3}, 1.0));
}

TEST(Backward, SquareGivesTwiceInput) {
  Graph g;
  const Tensor xv(Shape{4}, {-1, 0.5, 2, 3});
  const Var x = g.input(xv);
  g.backward(sum(g, mul(g, x, x)));
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(g.grad(x)[i], 2 * xv[i]);
}

TEST(Backward, NonScalarLossIsContractError) {
  Graph g;
  const Var x = g.input(Tensor(Shape{2}, 1.0));
  EXPECT_THROW(g.backward(scale(g, x, 2.0)), ContractError);
}

TEST(Backward, UnusedParameterGetsZeros) {
  Parameter used{"used", Tensor(Shape{3}, 2.0)}, unused{"unused", Tensor(Shape{2, 2}, 5.0)};
  Graph g;
  const Var u = g.parameter(used);
  g.parameter(unused);
  g.backward(sum(g, u));
  const Gradients grads = g.parameter_gradients();
  EXPECT_EQ(grads.at(used), Tensor(Shape{3}, 1.0));
  EXPECT_EQ(grads.at(unused), Tensor(Shape{2, 2}, 0.0));
}

TEST(Backward, SharedParameterAccumulates) {
  Parameter p{"p", Tensor(Shape{2}, {1.0, 2.0})};
  Graph g;
  const Var a = g.parameter(p), b = g.parameter(p);
  g.backward(sum(g, mul(g, a, b)));
  EXPECT_EQ(g.parameter_gradients().at(p), Tensor(Shape{2}, {2.0, 4.0}));
}

TEST(Backward, VisitsEachNodeOnce) {
  Graph g;
  const Var x = g.input(Tensor(Shape{3}, 1.0));
  const Var y = mul(g, x, x);
  const Var z = add(g, y, x);
  const Var loss = sum(g, add(g, z, y));
  g.backward(loss);
  // Four recorded ops; the leaf is not an op.
  EXPECT_EQ(g.nodes_visited(), 4u);
  EXPECT_THROW(g.backward(loss), ContractError);
  for (Var v : {y, z, loss}) {
    for (int in : g.inputs(v)) EXPECT_LT(in, v.id());
  }
}

TEST(Backward, NonFiniteValueIsAnError) {
  Graph g;
  const Var x = g.input(Tensor(Shape{2}, {1e308, 1e308}));
  EXPECT_THROW(scale(g, x, 10.0), NumericError);
}

TEST(FiniteDiff, QuadraticIsAccurate) {
  Tensor p(Shape{3}, {0.3, -1.2, 2.0});
  Tensor* params[] = {&p};
  auto f = [&] { return 1.5 * p[0] * p[0] + p[1] * p[1] * 0.5 - 3 * p[2] * p[2]; };
  const Tensor analytic[] = {Tensor(Shape{3}, {3 * p[0], p[1], -6 * p[2]})};
  const auto r = finite_diff_check(f, params, analytic, {});
  EXPECT_LT(r.max_relative_error, 1e-8);
  EXPECT_TRUE(r.passed);
  EXPECT_EQ(p, Tensor(Shape{3}, {0.3, -1.2, 2.0}));
}

TEST(FiniteDiff, ConstantFunctionPasses) {
  Tensor p(Shape{4}, 1.0);
  Tensor* params[] = {&p};
  const Tensor analytic[] = {Tensor(Shape{4}, 0.0)};
  const auto r = finite_diff_check([] { return 7.0; }, params, analytic, {});
  EXPECT_TRUE(r.passed);
  EXPECT_EQ(r.max_relative_error, 0.0);
}

TEST(FiniteDiff, NonFiniteFunctionThrows) {
  Tensor p(Shape{1}, 0.0);
  Tensor* params[] = {&p};
  const Tensor analytic[] = {Tensor(Shape{1}, 0.0)};
  EXPECT_THROW(finite_diff_check([] { return std::nan(""); }, params, analytic, {}), NumericError);
}

TEST(FiniteDiff, DetectsWrongGradient) {
  Tensor p(Shape{2}, {1.0, 2.0});
  Tensor* params[] = {&p};
  const Tensor analytic[] = {Tensor(Shape{2}, {2.0, 4.5})};
  const auto r = finite_diff_check([&] { return p[0] * p[0] + p[1] * p[1]; }, params, analytic, {});
  EXPECT_FALSE(r.passed);
  EXPECT_EQ(r.worst_index, 1u);
}
