// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include "roadformer/backbone.hpp"
#include "support.hpp"

using namespace roadformer;
using roadformer::testing::gradcheck;
using roadformer::testing::project;
using roadformer::testing::random_tensor;

namespace {

BackboneConfig tiny() {
  BackboneConfig c;
  c.stem_channels = 4;
  c.channels = {4, 4, 8, 8};
  c.blocks = {1, 1, 1, 1};
  return c;
}

ImageTensor random_image(Rng& rng, int h, int w) { return {random_tensor(rng, {3, h, w})}; }

}  // namespace

TEST(Backbone, SameSeedGivesIdenticalParameters) {
  const auto a = build_backbone(BackboneConfig{}, 42);
  const auto b = build_backbone(BackboneConfig{}, 42);
  const auto c = build_backbone(BackboneConfig{}, 43);
  ASSERT_EQ(a.store.parameters().size(), b.store.parameters().size());
  bool any_diff = false;
  for (std::size_t i = 0; i < a.store.parameters().size(); ++i) {
    EXPECT_EQ(a.store.parameters()[i].name, b.store.parameters()[i].name);
    EXPECT_EQ(a.store.parameters()[i].tensor.vec(), b.store.parameters()[i].tensor.vec());
    any_diff = any_diff || a.store.parameters()[i].tensor.vec() != c.store.parameters()[i].tensor.vec();
  }
  EXPECT_TRUE(any_diff);
}

TEST(Backbone, StageWidthsFollowSchedule) {
  const auto b = build_backbone(BackboneConfig{}, 1);
  Rng rng(2);
  const auto f = b.net.forward(random_image(rng, 64, 96));
  ASSERT_EQ(f.size(), 4);
  const int expect_c[] = {16, 32, 64, 128};
  const int expect_h[] = {16, 8, 4, 2}, expect_w[] = {24, 12, 6, 3};
  for (int i = 0; i < 4; ++i) {
    EXPECT_EQ(f.levels[static_cast<std::size_t>(i)].shape(), (Shape{expect_c[i], expect_h[i], expect_w[i]}));
    EXPECT_EQ(f.strides[static_cast<std::size_t>(i)], 1 << (i + 2));
    EXPECT_EQ(level_stride(i), 1 << (i + 2));
  }
}

TEST(Backbone, ConfigValidation) {
  BackboneConfig c;
  c.blocks = {1, 1, 1};
  EXPECT_THROW(build_backbone(c, 0), ConfigError);
  BackboneConfig d;
  d.channels = {16, 32, 64, 130};
  EXPECT_NO_THROW(build_backbone(d, 0));
  EXPECT_THROW(build_backbone(d, 0, 4), ConfigError);
  BackboneConfig e;
  e.channels = {32, 16, 64, 128};
  EXPECT_THROW(build_backbone(e, 0), ConfigError);
}

TEST(Backbone, RejectsIndivisibleInput) {
  const auto b = build_backbone(tiny(), 0);
  Rng rng(3);
  EXPECT_THROW(b.net.forward(random_image(rng, 48, 70)), InputError);
  EXPECT_THROW(b.net.forward({random_tensor(rng, {1, 32, 32})}), InputError);
}

TEST(Backbone, ZeroImageGivesZeroStem) {
  const auto b = build_backbone(BackboneConfig{}, 7);
  const Tensor z({3, 32, 32}, 0.0);
  const Tensor s = b.net.stem(z);
  EXPECT_EQ(s.shape(), (Shape{16, 8, 8}));
  for (double v : s.values()) EXPECT_EQ(v, 0.0);
}

TEST(Backbone, ParameterPerturbationChangesOutput) {
  auto b = build_backbone(tiny(), 4);
  Rng rng(5);
  const auto img = random_image(rng, 32, 32);
  NoGradGuard g;
  const auto before = b.net.forward(img).levels.back().vec();
  Tensor w = b.store.find("backbone.stage1.block0.expand.weight");
  ASSERT_TRUE(w.defined());
  w.values_mut()[0] += 1e-4;
  const auto after = b.net.forward(img).levels.back().vec();
  double diff = 0.0;
  for (std::size_t i = 0; i < before.size(); ++i) diff += std::abs(after[i] - before[i]);
  EXPECT_GT(diff, 0.0);
}

TEST(Backbone, GradientsMatchFiniteDifferences) {
  auto b = build_backbone(tiny(), 6);
  Rng rng(7);
  ImageTensor img = random_image(rng, 32, 32);
  std::vector<Tensor> inputs{img.values};
  std::vector<std::string> labels{"image"};
  for (const auto& p : b.store.parameters()) {
    Tensor t = p.tensor;
    // perturb affines off their trivial init so every path is exercised
    if (p.name.find("gamma") != std::string::npos || p.name.find("beta") != std::string::npos ||
        p.name.find("bias") != std::string::npos)
      for (auto& v : t.values_mut()) v += 0.2 * rng.uniform(-1, 1);
    inputs.push_back(t);
    labels.push_back(p.name);
  }
  auto f = [&] {
    const auto out = b.net.forward(img);
    Tensor s = project(out.levels[0], 1);
    for (int i = 1; i < out.size(); ++i) s = add(s, project(out.levels[static_cast<std::size_t>(i)], 1 + i));
    return s;
  };
  const auto r = gradcheck(f, inputs, labels);
  EXPECT_LT(r.max_rel, 1e-4) << "worst: " << r.worst;
}

TEST(Backbone, ResidualBlockGradient) {
  ParamStore store(8);
  auto blk = ResidualBlock::create(store, "blk", 6, ParamGroup::kBackbone);
  Rng rng(9);
  Tensor x = random_tensor(rng, {6, 4, 5});
  const auto r = gradcheck([&] { return project(blk(x)); },
                           {x, blk.norm.gamma, blk.dw_weight, blk.dw_bias, blk.expand.weight, blk.project.weight});
  EXPECT_LT(r.max_rel, 1e-4) << r.worst;
}

TEST(Backbone, DuplexEncodersAreIndependent) {
  ParamStore store(10);
  const auto rgb = Backbone::create(store, "rgb", tiny());
  const auto nrm = Backbone::create(store, "normal", tiny());
  Rng rng(11);
  const auto img = random_image(rng, 32, 32);
  NoGradGuard g;
  const auto before = nrm.forward(img).levels.back().vec();
  for (const auto& p : store.parameters())
    if (p.name.rfind("rgb.", 0) == 0) {
      Tensor t = p.tensor;
      for (auto& v : t.values_mut()) v += 0.5;
    }
  EXPECT_EQ(nrm.forward(img).levels.back().vec(), before);
  for (const auto& p : store.parameters()) EXPECT_EQ(p.group, ParamGroup::kBackbone);
}
