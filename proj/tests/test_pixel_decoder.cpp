// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include "roadformer/pixel_decoder.hpp"
#include "support.hpp"

using namespace roadformer;
using roadformer::testing::gradcheck;
using roadformer::testing::project;
using roadformer::testing::random_tensor;

namespace {

MultiScaleFeatures pyramid(Rng& rng, const std::vector<int>& channels, int h, int w) {
  MultiScaleFeatures f;
  for (std::size_t i = 0; i < channels.size(); ++i) {
    const int s = level_stride(static_cast<int>(i));
    f.levels.push_back(random_tensor(rng, {channels[i], h / s, w / s}));
    f.strides.push_back(s);
  }
  return f;
}

PixelDecoderConfig small_config() {
  PixelDecoderConfig c;
  c.dim = 8;
  c.layers = 1;
  c.heads = 2;
  c.points = 2;
  c.ffn_dim = 8;
  return c;
}

/// Moves every sampling location off the pixel-centre lattice so bilinear
/// kinks do not sit under the finite-difference stencil.
void jitter_offsets(DeformLayer& layer, Rng& rng) {
  for (auto& v : layer.offset_proj.bias.values_mut()) v += rng.uniform(0.1, 0.4);
  for (auto& v : layer.offset_proj.weight.values_mut()) v = 0.05 * rng.uniform(-1, 1);
  for (auto& v : layer.weight_proj.weight.values_mut()) v = 0.3 * rng.uniform(-1, 1);
}

}  // namespace

TEST(ReduceChannels, MapsEveryLevelToC) {
  Rng rng(1);
  ParamStore store(0);
  const std::vector<int> in{32, 64, 128, 256};
  const auto r = ChannelReducer::create(store, "reduce", in, 64);
  const auto f = pyramid(rng, in, 64, 96);
  const auto out = reduce_channels(f, r);
  for (int i = 0; i < 4; ++i) {
    EXPECT_EQ(out.channels(i), 64);
    EXPECT_EQ(out.levels[static_cast<std::size_t>(i)].dim(1), f.levels[static_cast<std::size_t>(i)].dim(1));
    EXPECT_EQ(out.levels[static_cast<std::size_t>(i)].dim(2), f.levels[static_cast<std::size_t>(i)].dim(2));
  }
  MultiScaleFeatures wrong = f;
  wrong.levels[1] = random_tensor(rng, {63, 8, 12});
  EXPECT_THROW(reduce_channels(wrong, r), InputError);
}

TEST(ReduceChannels, IdentityConvIsIdentity) {
  Rng rng(2);
  ParamStore store(0);
  auto r = ChannelReducer::create(store, "reduce", {6}, 6);
  fill(r.convs[0].weight, 0.0);
  for (int i = 0; i < 6; ++i) r.convs[0].weight.values_mut()[i * 6 + i] = 1.0;
  MultiScaleFeatures f;
  f.levels = {random_tensor(rng, {6, 3, 4})};
  f.strides = {4};
  EXPECT_EQ(reduce_channels(f, r).levels[0].vec(), f.levels[0].vec());
}

TEST(DeformAttnSample, PixelCentreMidpointAndOutside) {
  // 2 channels, 2x3 map
  const Tensor map({2, 2, 3}, std::vector<double>{1, 2, 3, 4, 5, 6, 10, 20, 30, 40, 50, 60});
  const Tensor none({1, 2}, 0.0);
  // centre of pixel (y=1, x=2)
  auto s = deform_attn_sample(map, 2.5 / 3.0, 1.5 / 2.0, none);
  EXPECT_NEAR(s.values()[0], 6.0, 1e-12);
  EXPECT_NEAR(s.values()[1], 60.0, 1e-12);
  // half a pixel right of (0,0) centre: midpoint of (0,0) and (0,1)
  s = deform_attn_sample(map, 0.5 / 3.0, 0.5 / 2.0, Tensor({1, 2}, std::vector<double>{0.5, 0.0}));
  EXPECT_NEAR(s.values()[0], 1.5, 1e-12);
  EXPECT_NEAR(s.values()[1], 15.0, 1e-12);
  // two pixels beyond the right edge
  s = deform_attn_sample(map, 2.5 / 3.0, 0.5 / 2.0, Tensor({1, 2}, std::vector<double>{2.0, 0.0}));
  EXPECT_EQ(s.values()[0], 0.0);
  EXPECT_EQ(s.values()[1], 0.0);
}

TEST(DeformAttnSample, MidpointWithZeroNeighbours) {
  Tensor map({1, 1, 4}, std::vector<double>{0, 3, 7, 0});
  const auto s = deform_attn_sample(map, 2.0 / 4.0, 0.5, Tensor({1, 2}, 0.0));
  EXPECT_NEAR(s.values()[0], 5.0, 1e-12);
}

TEST(DeformAttnSample, Gradients) {
  Rng rng(3);
  const Tensor map = random_tensor(rng, {3, 4, 5});
  Tensor offsets({6, 2}, 0.0);
  for (auto& v : offsets.values_mut()) v = rng.uniform(-1.7, 1.7) + 0.13;
  const auto r = gradcheck([&] { return project(deform_attn_sample(map, 0.41, 0.57, offsets)); }, {map, offsets},
                           {"value", "offsets"});
  EXPECT_LT(r.max_rel, 1e-3) << r.worst;
}

TEST(MsDeformAttn, Gradients) {
  Rng rng(4);
  const std::vector<LevelShape> shapes{{3, 4, 0}, {2, 2, 12}};
  const int heads = 2, points = 2, c = 4, q = 3, nl = 2;
  const Tensor value = random_tensor(rng, {16, c});
  Tensor loc({q, heads * nl * points * 2}, 0.0);
  for (auto& v : loc.values_mut()) v = rng.uniform(0.05, 0.95);
  const Tensor w = random_tensor(rng, {q, heads * nl * points});
  const auto r = gradcheck([&] { return project(ms_deform_attn(value, shapes, heads, points, loc, w)); },
                           {value, loc, w}, {"value", "locations", "weights"});
  EXPECT_LT(r.max_rel, 1e-3) << r.worst;
}

TEST(PixelDecoder, ShapeContract) {
  Rng rng(5);
  ParamStore store(0);
  PixelDecoderConfig cfg;
  const auto pd = PixelDecoder::create(store, "pd", cfg);
  const auto f = pyramid(rng, {64, 64, 64, 64}, 64, 96);
  const auto out = pd(f);
  ASSERT_EQ(out.refined.size(), 3u);
  const Shape expect[] = {{64, 8, 12}, {64, 4, 6}, {64, 2, 3}};
  for (int i = 0; i < 3; ++i) {
    EXPECT_EQ(out.refined[static_cast<std::size_t>(i)].shape(), expect[i]);
    EXPECT_EQ(out.strides[static_cast<std::size_t>(i)], 8 << i);
  }
  EXPECT_EQ(out.embedding.shape(), (Shape{64, 16, 24}));
  EXPECT_EQ(out.embedding_stride, 4);
}

TEST(PixelDecoder, AttentionWeightsPerHeadSumToOne) {
  Rng rng(6);
  ParamStore store(0);
  auto layer = DeformLayer::create(store, "l", small_config());
  jitter_offsets(layer, rng);
  const Tensor query = random_tensor(rng, {5, 8});
  const Tensor a = layer.attention_weights(query);
  const int per_head = layer.levels * layer.points;
  for (int i = 0; i < 5; ++i)
    for (int h = 0; h < layer.heads; ++h) {
      double s = 0.0;
      for (int j = 0; j < per_head; ++j) s += a.values()[static_cast<std::size_t>(i) * a.dim(1) + h * per_head + j];
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
}

TEST(PixelDecoder, InitialWeightsAreUniform) {
  Rng rng(7);
  ParamStore store(0);
  const auto layer = DeformLayer::create(store, "l", small_config());
  const Tensor a = layer.attention_weights(random_tensor(rng, {3, 8}));
  for (double v : a.values()) EXPECT_DOUBLE_EQ(v, 1.0 / (layer.levels * layer.points));
}

TEST(PixelDecoder, ZeroLayersPassReducedInputsThrough) {
  Rng rng(8);
  ParamStore store(0);
  auto cfg = small_config();
  cfg.layers = 0;
  const auto pd = PixelDecoder::create(store, "pd", cfg);
  const auto f = pyramid(rng, {8, 8, 8, 8}, 64, 96);
  const auto out = pd(f);
  for (int i = 0; i < 3; ++i) EXPECT_EQ(out.refined[static_cast<std::size_t>(i)].vec(), f.levels[static_cast<std::size_t>(i + 1)].vec());
  EXPECT_EQ(out.embedding.shape(), (Shape{8, 16, 24}));
}

TEST(PixelDecoder, LayerGradients) {
  Rng rng(9);
  ParamStore store(0);
  auto layer = DeformLayer::create(store, "l", small_config());
  jitter_offsets(layer, rng);
  const std::vector<LevelShape> shapes{{2, 3, 0}, {1, 2, 6}, {1, 1, 8}};
  const Tensor src = random_tensor(rng, {9, 8}), pos = random_tensor(rng, {9, 8}, 0.1);
  std::vector<double> ref;
  for (const auto& s : shapes)
    for (int y = 0; y < s.height; ++y)
      for (int x = 0; x < s.width; ++x) {
        ref.push_back((x + 0.5) / s.width);
        ref.push_back((y + 0.5) / s.height);
      }
  const Tensor reference({9, 2}, ref);
  std::vector<Tensor> inputs{src};
  std::vector<std::string> labels{"src"};
  for (const auto& p : store.parameters()) {
    inputs.push_back(p.tensor);
    labels.push_back(p.name);
  }
  const auto r = gradcheck([&] { return project(layer(src, pos, reference, shapes)); }, inputs, labels);
  EXPECT_LT(r.max_rel, 1e-3) << r.worst;
}

TEST(PixelDecoder, Deterministic) {
  Rng rng(10);
  const auto f = pyramid(rng, {8, 8, 8, 8}, 64, 96);
  ParamStore s1(3), s2(3);
  const auto a = PixelDecoder::create(s1, "pd", small_config());
  const auto b = PixelDecoder::create(s2, "pd", small_config());
  const auto oa = a(f), ob = b(f);
  EXPECT_EQ(oa.embedding.vec(), ob.embedding.vec());
  for (int i = 0; i < 3; ++i) EXPECT_EQ(oa.refined[static_cast<std::size_t>(i)].vec(), ob.refined[static_cast<std::size_t>(i)].vec());
}

TEST(PixelDecoder, ConfigErrors) {
  ParamStore store(0);
  auto cfg = small_config();
  cfg.heads = 3;
  EXPECT_THROW(PixelDecoder::create(store, "pd", cfg), ConfigError);
  cfg = small_config();
  cfg.points = 0;
  EXPECT_THROW(PixelDecoder::create(store, "pd", cfg), ConfigError);
  EXPECT_THROW(sine_position_encoding(2, 2, 6), ConfigError);
}

TEST(PixelDecoder, RejectsShortPyramid) {
  Rng rng(11);
  ParamStore store(0);
  const auto pd = PixelDecoder::create(store, "pd", small_config());
  auto f = pyramid(rng, {8, 8, 8}, 64, 96);
  EXPECT_THROW(pd(f), InputError);
}
