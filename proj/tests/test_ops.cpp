// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "roadformer/nn.hpp"
#include "roadformer/ops.hpp"
#include "support.hpp"

using namespace roadformer;
using roadformer::testing::gradcheck;
using roadformer::testing::project;
using roadformer::testing::random_tensor;

namespace {
constexpr double kTol = 1e-4;
}

TEST(Tensor, ShapeAndValueValidation) {
  EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5)), InputError);
  Tensor t({2, 3}, 1.5);
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_EQ(t.dim(-1), 3);
  EXPECT_THROW((void)t.item(), InputError);
  EXPECT_THROW(t.backward(), InputError);
}

TEST(Tensor, NoGradGuardSkipsGraph) {
  Tensor a = Tensor::parameter({2}, {1.0, 2.0});
  {
    NoGradGuard g;
    EXPECT_FALSE(add(a, a).requires_grad());
  }
  EXPECT_TRUE(add(a, a).requires_grad());
}

TEST(Tensor, GradientAccumulatesThroughSharedInputs) {
  Tensor a = Tensor::parameter({1}, {3.0});
  Tensor y = mul(a, a);  // a^2
  sum(add(y, a)).backward();
  EXPECT_DOUBLE_EQ(a.grad()[0], 2 * 3.0 + 1.0);
}

TEST(Ops, ElementwiseGradients) {
  Rng rng(1);
  Tensor a = random_tensor(rng, {3, 4}), b = random_tensor(rng, {3, 4});
  Tensor s = random_tensor(rng, {1});
  EXPECT_LT(gradcheck([&] { return project(add(a, b)); }, {a, b}).max_rel, kTol);
  EXPECT_LT(gradcheck([&] { return project(sub(a, b)); }, {a, b}).max_rel, kTol);
  EXPECT_LT(gradcheck([&] { return project(mul(a, b)); }, {a, b}).max_rel, kTol);
  EXPECT_LT(gradcheck([&] { return project(scale(a, -2.5)); }, {a}).max_rel, kTol);
  EXPECT_LT(gradcheck([&] { return project(scale_by(a, s)); }, {a, s}).max_rel, kTol);
  EXPECT_LT(gradcheck([&] { return project(gelu(a)); }, {a}).max_rel, kTol);
  EXPECT_LT(gradcheck([&] { return project(sigmoid(a)); }, {a}).max_rel, kTol);
}

TEST(Ops, GeluMatchesErfDefinition) {
  Tensor a({5}, {-3.0, -0.5, 0.0, 0.7, 2.0});
  Tensor y = gelu(a);
  for (std::size_t i = 0; i < 5; ++i) {
    const double x = a[i];
    EXPECT_NEAR(y[i], 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))), 1e-12);
  }
}

TEST(Ops, ShapeOpGradients) {
  Rng rng(2);
  Tensor a = random_tensor(rng, {3, 4}), b = random_tensor(rng, {2, 4}), c = random_tensor(rng, {3, 2});
  EXPECT_LT(gradcheck([&] { return project(transpose(a)); }, {a}).max_rel, kTol);
  EXPECT_LT(gradcheck([&] { return project(reshape(a, {2, 6})); }, {a}).max_rel, kTol);
  EXPECT_LT(gradcheck([&] { return project(concat_rows({a, b})); }, {a, b}).max_rel, kTol);
  EXPECT_LT(gradcheck([&] { return project(concat_cols({a, c})); }, {a, c}).max_rel, kTol);
  EXPECT_LT(gradcheck([&] { return project(slice_rows(a, 1, 3)); }, {a}).max_rel, kTol);
  EXPECT_LT(gradcheck([&] { return project(slice_cols(a, 1, 3)); }, {a}).max_rel, kTol);
}

TEST(Ops, MatmulVariantsMatchLoops) {
  Rng rng(3);
  Tensor a = random_tensor(rng, {3, 4}), b = random_tensor(rng, {4, 2});
  Tensor c = matmul(a, b);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 2; ++j) {
      double s = 0.0;
      for (int k = 0; k < 4; ++k) s += a[i * 4 + k] * b[k * 2 + j];
      EXPECT_NEAR(c[i * 2 + j], s, 1e-14);
    }
  Tensor ct = matmul(transpose(a), transpose(b), true, true);
  for (std::size_t i = 0; i < c.numel(); ++i) EXPECT_NEAR(ct[i], c[i], 1e-14);
  Tensor at = random_tensor(rng, {4, 3}), bt = random_tensor(rng, {2, 4});
  for (bool ta : {false, true})
    for (bool tb : {false, true}) {
      Tensor x = ta ? at : a, y = tb ? bt : b;
      EXPECT_LT(gradcheck([&] { return project(matmul(x, y, ta, tb)); }, {x, y}).max_rel, kTol);
    }
}

TEST(Ops, BroadcastGradients) {
  Rng rng(4);
  Tensor a = random_tensor(rng, {3, 4}), r = random_tensor(rng, {4}), c = random_tensor(rng, {3});
  EXPECT_LT(gradcheck([&] { return project(add_row_vector(a, r)); }, {a, r}).max_rel, kTol);
  EXPECT_LT(gradcheck([&] { return project(mul_row_vector(a, r)); }, {a, r}).max_rel, kTol);
  EXPECT_LT(gradcheck([&] { return project(add_col_vector(a, c)); }, {a, c}).max_rel, kTol);
  EXPECT_LT(gradcheck([&] { return project(mul_col_vector(a, c)); }, {a, c}).max_rel, kTol);
}

TEST(Ops, ReductionAndNormalizationGradients) {
  Rng rng(5);
  Tensor a = random_tensor(rng, {3, 5}), m = random_tensor(rng, {2, 2, 3});
  EXPECT_LT(gradcheck([&] { return sum(a); }, {a}).max_rel, kTol);
  EXPECT_LT(gradcheck([&] { return project(mean_cols(m)); }, {m}).max_rel, kTol);
  EXPECT_LT(gradcheck([&] { return project(softmax_rows(a)); }, {a}).max_rel, kTol);
  EXPECT_LT(gradcheck([&] { return project(normalize_rows(a)); }, {a}).max_rel, kTol);
}

TEST(Ops, SoftmaxHandlesNegativeInfinity) {
  constexpr double ninf = -std::numeric_limits<double>::infinity();
  Tensor a({2, 3}, {0.0, ninf, 1.0, ninf, ninf, ninf});
  Tensor y = softmax_rows(a);
  EXPECT_DOUBLE_EQ(y[1], 0.0);
  EXPECT_NEAR(y[0] + y[2], 1.0, 1e-15);
  EXPECT_NEAR(y[2] / y[0], std::exp(1.0), 1e-12);
  for (int j = 3; j < 6; ++j) EXPECT_EQ(y[j], 0.0);
}

TEST(Ops, NormalizeRowsStandardizes) {
  Rng rng(6);
  Tensor a = random_tensor(rng, {2, 50}, 3.0);
  Tensor y = normalize_rows(a, 0.0);
  for (int i = 0; i < 2; ++i) {
    double mean = 0.0, var = 0.0;
    for (int j = 0; j < 50; ++j) mean += y[i * 50 + j];
    mean /= 50;
    for (int j = 0; j < 50; ++j) var += (y[i * 50 + j] - mean) * (y[i * 50 + j] - mean);
    EXPECT_NEAR(mean, 0.0, 1e-12);
    EXPECT_NEAR(var / 50, 1.0, 1e-12);
  }
}

TEST(Ops, Conv2dMatchesLoopOracle) {
  Rng rng(7);
  Tensor x = random_tensor(rng, {2, 5, 6}), w = random_tensor(rng, {3, 2, 3, 3}), b = random_tensor(rng, {3});
  const int stride = 2, pad = 1;
  Tensor y = conv2d(x, w, b, stride, pad);
  const int ho = (5 + 2 * pad - 3) / stride + 1, wo = (6 + 2 * pad - 3) / stride + 1;
  ASSERT_EQ(y.shape(), (Shape{3, ho, wo}));
  for (int o = 0; o < 3; ++o)
    for (int oy = 0; oy < ho; ++oy)
      for (int ox = 0; ox < wo; ++ox) {
        double s = b[o];
        for (int c = 0; c < 2; ++c)
          for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx) {
              const int iy = oy * stride - pad + ky, ix = ox * stride - pad + kx;
              if (iy < 0 || iy >= 5 || ix < 0 || ix >= 6) continue;
              s += w[((o * 2 + c) * 3 + ky) * 3 + kx] * x[(c * 5 + iy) * 6 + ix];
            }
        EXPECT_NEAR(y[(o * ho + oy) * wo + ox], s, 1e-13);
      }
  EXPECT_LT(gradcheck([&] { return project(conv2d(x, w, b, stride, pad)); }, {x, w, b}).max_rel, kTol);
}

TEST(Ops, DepthwiseConvMatchesLoopOracle) {
  Rng rng(8);
  Tensor x = random_tensor(rng, {2, 4, 5}), w = random_tensor(rng, {2, 3, 3}), b = random_tensor(rng, {2});
  Tensor y = depthwise_conv2d(x, w, b);
  ASSERT_EQ(y.shape(), x.shape());
  for (int c = 0; c < 2; ++c)
    for (int yy = 0; yy < 4; ++yy)
      for (int xx = 0; xx < 5; ++xx) {
        double s = b[c];
        for (int ky = 0; ky < 3; ++ky)
          for (int kx = 0; kx < 3; ++kx) {
            const int iy = yy - 1 + ky, ix = xx - 1 + kx;
            if (iy < 0 || iy >= 4 || ix < 0 || ix >= 5) continue;
            s += w[(c * 3 + ky) * 3 + kx] * x[(c * 4 + iy) * 5 + ix];
          }
        EXPECT_NEAR(y[(c * 4 + yy) * 5 + xx], s, 1e-13);
      }
  EXPECT_LT(gradcheck([&] { return project(depthwise_conv2d(x, w, b)); }, {x, w, b}).max_rel, kTol);
}

TEST(Ops, UpsampleBilinear) {
  Tensor x({1, 1, 2}, {0.0, 1.0});
  Tensor y = upsample_bilinear(x, 1, 4);
  // half-pixel centres: outputs at input coords -0.25, 0.25, 0.75, 1.25 (clamped)
  EXPECT_NEAR(y[0], 0.0, 1e-15);
  EXPECT_NEAR(y[1], 0.25, 1e-15);
  EXPECT_NEAR(y[2], 0.75, 1e-15);
  EXPECT_NEAR(y[3], 1.0, 1e-15);
  Rng rng(9);
  Tensor z = random_tensor(rng, {2, 3, 2});
  EXPECT_LT(gradcheck([&] { return project(upsample_bilinear(z, 7, 5)); }, {z}).max_rel, kTol);
  Tensor same = upsample_bilinear(z, 3, 2);
  for (std::size_t i = 0; i < z.numel(); ++i) EXPECT_DOUBLE_EQ(same[i], z[i]);
}

TEST(Nn, ParamStoreIsDeterministicAndRejectsDuplicates) {
  ParamStore a(5), b(5);
  Tensor ta = a.create("w", {3, 3}, ParamGroup::kHead, Init::xavier(3, 3));
  Tensor tb = b.create("w", {3, 3}, ParamGroup::kHead, Init::xavier(3, 3));
  EXPECT_EQ(ta.vec(), tb.vec());
  EXPECT_THROW(a.create("w", {1}, ParamGroup::kHead, Init::zeros()), ConfigError);
  EXPECT_FALSE(a.find("missing").defined());
  EXPECT_EQ(a.parameter_count(), 9u);
}

TEST(Nn, LayerGradients) {
  ParamStore store(10);
  Rng rng(11);
  Linear lin = Linear::create(store, "lin", 4, 3, ParamGroup::kHead);
  PointwiseConv pw = PointwiseConv::create(store, "pw", 3, 2, ParamGroup::kHead);
  LayerNorm ln = LayerNorm::create(store, "ln", 4, ParamGroup::kHead);
  ChannelNorm cn = ChannelNorm::create(store, "cn", 3, ParamGroup::kHead);
  for (auto* t : {&ln.gamma, &ln.beta, &cn.gamma, &cn.beta})
    for (auto& v : t->values_mut()) v += 0.3 * rng.uniform(-1, 1);
  Tensor x = random_tensor(rng, {5, 4}), m = random_tensor(rng, {3, 2, 3});
  EXPECT_LT(gradcheck([&] { return project(lin(x)); }, {x, lin.weight, lin.bias}).max_rel, kTol);
  EXPECT_LT(gradcheck([&] { return project(pw(m)); }, {m, pw.weight, pw.bias}).max_rel, kTol);
  EXPECT_LT(gradcheck([&] { return project(ln(x)); }, {x, ln.gamma, ln.beta}).max_rel, kTol);
  EXPECT_LT(gradcheck([&] { return project(cn(m)); }, {m, cn.gamma, cn.beta}).max_rel, kTol);
}
