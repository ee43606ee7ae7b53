// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <limits>

#include "oracles.hpp"
#include "roadformer/transformer_decoder.hpp"
#include "support.hpp"

using namespace roadformer;
using roadformer::testing::gradcheck;
using roadformer::testing::project;
using roadformer::testing::random_tensor;

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

TransformerDecoderConfig small_config(int layers = 3) {
  TransformerDecoderConfig c;
  c.num_queries = 3;
  c.layers = layers;
  c.dim = 8;
  c.heads = 2;
  c.ffn_dim = 8;
  c.num_classes = 2;
  return c;
}

void randomize(Tensor t, Rng& rng, double scale = 1.0) {
  for (auto& v : t.values_mut()) v = scale * rng.uniform(-1.0, 1.0);
}

PixelDecoderOutput random_pdec(Rng& rng, int c, int h, int w) {
  PixelDecoderOutput p;
  for (int s = 8; s <= 32; s *= 2) {
    p.refined.push_back(random_tensor(rng, {c, h / s, w / s}));
    p.strides.push_back(s);
  }
  p.embedding = random_tensor(rng, {c, h / 4, w / 4});
  return p;
}

}  // namespace

TEST(MaskedCrossAttention, MatchesLoopOracle) {
  Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const int n = 1 + static_cast<int>(rng.below(4)), c = 1 + static_cast<int>(rng.below(4));
    const int h = 1 + static_cast<int>(rng.below(3)), w = 1 + static_cast<int>(rng.below(3)), p = h * w;
    ParamStore store(trial);
    const CrossAttentionParams cp{Linear::create(store, "q", c, c, ParamGroup::kHead),
                                  Linear::create(store, "k", c, c, ParamGroup::kHead),
                                  Linear::create(store, "v", c, c, ParamGroup::kHead)};
    for (const auto& np : store.parameters()) randomize(np.tensor, rng);
    const Tensor x = random_tensor(rng, {n, c}), feat = random_tensor(rng, {c, h, w});
    std::vector<double> m(static_cast<std::size_t>(n) * p);
    for (auto& v : m) v = rng.uniform(0, 1) < 0.3 ? kNegInf : 0.0;
    const AttentionMask mask{Tensor({n, p}, m), 8};
    const Tensor out = masked_cross_attention(x, feat, mask, cp);
    const auto expect = oracle::masked_cross_attention(x.vec(), feat.vec(), m, n, c, p, cp.f_q.weight.vec(),
                                                       cp.f_q.bias.vec(), cp.f_k.weight.vec(), cp.f_k.bias.vec(),
                                                       cp.f_v.weight.vec(), cp.f_v.bias.vec());
    for (std::size_t i = 0; i < expect.size(); ++i) EXPECT_NEAR(out.values()[i], expect[i], 1e-10);
  }
}

TEST(MaskedCrossAttention, SingleVisiblePositionSelectsItsValue) {
  Rng rng(2);
  ParamStore store(0);
  const CrossAttentionParams cp{Linear::create(store, "q", 4, 4, ParamGroup::kHead),
                                Linear::create(store, "k", 4, 4, ParamGroup::kHead),
                                Linear::create(store, "v", 4, 4, ParamGroup::kHead)};
  const Tensor x = random_tensor(rng, {2, 4}), feat = random_tensor(rng, {4, 2, 3});
  std::vector<double> m(12, kNegInf);
  m[4] = 0.0;      // query 0 sees position 4
  m[6 + 1] = 0.0;  // query 1 sees position 1
  const Tensor out = masked_cross_attention(x, feat, {Tensor({2, 6}, m), 8}, cp);
  const Tensor v = cp.f_v(to_tokens(feat));
  for (int ch = 0; ch < 4; ++ch) {
    EXPECT_NEAR(out.values()[ch], v.values()[4 * 4 + ch] + x.values()[ch], 1e-12);
    EXPECT_NEAR(out.values()[4 + ch], v.values()[1 * 4 + ch] + x.values()[4 + ch], 1e-12);
  }
}

TEST(MaskedCrossAttention, ZeroMaskIsPlainAttention) {
  Rng rng(3);
  ParamStore store(0);
  const CrossAttentionParams cp{Linear::create(store, "q", 4, 4, ParamGroup::kHead),
                                Linear::create(store, "k", 4, 4, ParamGroup::kHead),
                                Linear::create(store, "v", 4, 4, ParamGroup::kHead)};
  const Tensor x = random_tensor(rng, {2, 4}), feat = random_tensor(rng, {4, 2, 2});
  const Tensor out = masked_cross_attention(x, feat, {Tensor({2, 4}, 0.0), 8}, cp);
  const Tensor tok = to_tokens(feat);
  const Tensor ref = add(matmul(softmax_rows(matmul(cp.f_q(x), cp.f_k(tok), false, true)), cp.f_v(tok)), x);
  EXPECT_EQ(out.vec(), ref.vec());
}

TEST(MaskedCrossAttention, ShapeMismatch) {
  ParamStore store(0);
  const CrossAttentionParams cp{Linear::create(store, "q", 4, 4, ParamGroup::kHead),
                                Linear::create(store, "k", 4, 4, ParamGroup::kHead),
                                Linear::create(store, "v", 4, 4, ParamGroup::kHead)};
  EXPECT_THROW(masked_cross_attention(Tensor({2, 4}, 0.0), Tensor({4, 2, 2}, 0.0), {Tensor({2, 5}, 0.0), 8}, cp),
               InputError);
  EXPECT_THROW(masked_cross_attention(Tensor({2, 3}, 0.0), Tensor({4, 2, 2}, 0.0), {Tensor({2, 4}, 0.0), 8}, cp),
               InputError);
}

TEST(DecoderLayer, ZeroedOutputProjectionsGiveIdentity) {
  Rng rng(4);
  ParamStore store(0);
  auto layer = DecoderLayer::create(store, "l", small_config());
  for (const auto& p : store.parameters()) randomize(p.tensor, rng);
  layer.zero_output_projections();
  const Tensor x = random_tensor(rng, {3, 8}), feat = random_tensor(rng, {8, 2, 3});
  const Tensor out = layer(x, feat, {Tensor({3, 6}, 0.0), 8});
  EXPECT_EQ(out.shape(), (Shape{3, 8}));
  EXPECT_EQ(out.vec(), x.vec());
}

TEST(DecoderLayer, Gradients) {
  Rng rng(5);
  ParamStore store(0);
  auto layer = DecoderLayer::create(store, "l", small_config());
  for (const auto& p : store.parameters()) randomize(p.tensor, rng, 0.5);
  const Tensor x = random_tensor(rng, {3, 8}), feat = random_tensor(rng, {8, 2, 2});
  std::vector<double> m(12, 0.0);
  m[1] = m[6] = kNegInf;
  const AttentionMask mask{Tensor({3, 4}, m), 8};
  std::vector<Tensor> inputs{x, feat};
  std::vector<std::string> labels{"x", "feat"};
  for (const auto& p : store.parameters()) {
    inputs.push_back(p.tensor);
    labels.push_back(p.name);
  }
  const auto r = gradcheck([&] { return project(layer(x, feat, mask)); }, inputs, labels);
  EXPECT_LT(r.max_rel, 1e-4) << r.worst;
}

TEST(PredictHeads, ShapesAndZeroEmbedding) {
  Rng rng(6);
  ParamStore store(0);
  TransformerDecoderConfig cfg;
  cfg.num_queries = 20;
  cfg.num_classes = 3;
  auto heads = PredictionHeads::create(store, "h", cfg);
  const Tensor x = random_tensor(rng, {20, 64}), e = random_tensor(rng, {64, 4, 6});
  const auto pred = predict_heads(x, e, heads);
  EXPECT_EQ(pred.class_logits.shape(), (Shape{20, 4}));
  EXPECT_EQ(pred.mask_logits.shape(), (Shape{20, 4, 6}));
  // zero mask embedding for every query
  fill(heads.mask_fc3.weight, 0.0);
  const auto zero = predict_heads(x, e, heads);
  for (double v : zero.mask_logits.values()) EXPECT_EQ(sigmoid(v), 0.5);
  EXPECT_THROW(predict_heads(x, random_tensor(rng, {32, 4, 6}), heads), InputError);
}

TEST(PredictHeads, MaskLogitsAreLinearInEmbedding) {
  Rng rng(7);
  ParamStore store(0);
  auto heads = PredictionHeads::create(store, "h", small_config());
  const Tensor x = random_tensor(rng, {3, 8}), e = random_tensor(rng, {8, 2, 3});
  const auto a = predict_heads(x, e, heads), b = predict_heads(x, scale(e, 2.0), heads);
  for (std::size_t i = 0; i < a.mask_logits.numel(); ++i)
    EXPECT_NEAR(b.mask_logits.values()[i], 2.0 * a.mask_logits.values()[i], 1e-12);
  EXPECT_EQ(a.class_logits.vec(), b.class_logits.vec());
}

TEST(AttentionMask, ThresholdRules) {
  PredictionSet ones{Tensor({2, 3}, 0.0), Tensor({2, 2, 2}, 50.0)};
  const auto mo = make_attention_mask(ones, 2, 2);
  for (double v : mo.values.values()) EXPECT_EQ(v, 0.0);
  PredictionSet zeros{Tensor({2, 3}, 0.0), Tensor({2, 2, 2}, -50.0)};
  const auto mz = make_attention_mask(zeros, 2, 2);
  for (double v : mz.values.values()) EXPECT_EQ(v, 0.0);
  // checkerboard at the same scale
  std::vector<double> logits(16);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) logits[y * 4 + x] = (x + y) % 2 == 0 ? 2.0 : -2.0;
  PredictionSet cb{Tensor({1, 3}, 0.0), Tensor({1, 4, 4}, logits)};
  const auto m = make_attention_mask(cb, 4, 4);
  for (int i = 0; i < 16; ++i) EXPECT_EQ(m.values.values()[i], sigmoid(logits[i]) >= 0.5 ? 0.0 : kNegInf);
}

TEST(AttentionMask, ForStrideResizes) {
  PredictionSet p{Tensor({1, 3}, 0.0), Tensor({1, 16, 24}, 1.0)};
  const auto m = make_attention_mask_for_stride(p, 32);
  EXPECT_EQ(m.values.shape(), (Shape{1, 2 * 3}));
  EXPECT_EQ(m.source_stride, 32);
}

TEST(Decode, ScaleOrderCyclesCoarseToFine) {
  const int expected_stride[] = {32, 16, 8, 32, 16, 8};
  const int strides[] = {8, 16, 32};
  for (int l = 1; l <= 6; ++l) EXPECT_EQ(strides[TransformerDecoder::scale_for_layer(l, 3)], expected_stride[l - 1]);
}

TEST(Decode, LayerCountAndErrors) {
  Rng rng(8);
  ParamStore store(0);
  const auto d0 = TransformerDecoder::create(store, "d0", small_config(0));
  const auto pdec = random_pdec(rng, 8, 64, 96);
  EXPECT_EQ(d0.decode(pdec).size(), 1u);
  const auto d6 = TransformerDecoder::create(store, "d6", small_config(6));
  const auto preds = d6.decode(pdec);
  ASSERT_EQ(preds.size(), 7u);
  for (const auto& p : preds) {
    EXPECT_EQ(p.class_logits.shape(), (Shape{3, 3}));
    EXPECT_EQ(p.mask_logits.shape(), (Shape{3, 16, 24}));
  }
  EXPECT_THROW(TransformerDecoder::create(store, "bad", small_config(4)), ConfigError);
}

TEST(Decode, IdentityLayersRepeatInitialPrediction) {
  Rng rng(9);
  ParamStore store(0);
  auto d = TransformerDecoder::create(store, "d", small_config(3));
  for (auto& l : d.layers()) l.zero_output_projections();
  const auto preds = d.decode(random_pdec(rng, 8, 64, 96));
  for (std::size_t i = 1; i < preds.size(); ++i) {
    EXPECT_EQ(preds[i].class_logits.vec(), preds[0].class_logits.vec());
    EXPECT_EQ(preds[i].mask_logits.vec(), preds[0].mask_logits.vec());
  }
}

TEST(Decode, EndToEndGradients) {
  Rng rng(10);
  ParamStore store(0);
  auto cfg = small_config(3);
  auto d = TransformerDecoder::create(store, "d", cfg);
  for (const auto& p : store.parameters()) randomize(p.tensor, rng, 0.5);
  const auto pdec = random_pdec(rng, 8, 32, 32);
  std::vector<Tensor> inputs{pdec.embedding, pdec.refined[0]};
  std::vector<std::string> labels{"E", "F8"};
  for (const auto& p : store.parameters()) {
    inputs.push_back(p.tensor);
    labels.push_back(p.name);
  }
  auto f = [&] {
    const auto preds = d.decode(pdec);
    Tensor s = project(preds.back().class_logits, 1);
    for (std::size_t i = 0; i < preds.size(); ++i) s = add(s, project(preds[i].mask_logits, 2 + i));
    return s;
  };
  const auto r = gradcheck(f, inputs, labels);
  EXPECT_LT(r.max_rel, 1e-3) << r.worst;
}

TEST(SemanticInference, OneQueryLabelsEverything) {
  PredictionSet p{Tensor({1, 3}, std::vector<double>{-40.0, 40.0, -40.0}), Tensor({1, 2, 3}, 40.0)};
  const auto r = semantic_inference(p);
  for (auto v : r.labels.data) EXPECT_EQ(v, 1);
}

TEST(SemanticInference, TiesGoToLowerIndex) {
  // two queries, each wholly one class, identical masks: equal scores
  PredictionSet p{Tensor({2, 3}, std::vector<double>{30.0, -30.0, -30.0, -30.0, 30.0, -30.0}), Tensor({2, 1, 2}, 3.0)};
  const auto r = semantic_inference(p);
  for (auto v : r.labels.data) EXPECT_EQ(v, 0);
}

TEST(SemanticInference, MatchesLoopOracleAndInvariance) {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const int n = 3, k = 2, h = 2, w = 2;
    const Tensor cls = random_tensor(rng, {n, k + 1}, 3.0), masks = random_tensor(rng, {n, h, w}, 3.0);
    const auto r = semantic_inference({cls, masks});
    std::vector<double> shifted = cls.vec();
    for (int q = 0; q < n; ++q) {
      const double c = rng.uniform(-5, 5);
      for (int j = 0; j <= k; ++j) shifted[q * (k + 1) + j] += c;
    }
    const auto r2 = semantic_inference({Tensor({n, k + 1}, shifted), masks});
    for (int pix = 0; pix < h * w; ++pix) {
      double s[k] = {0.0, 0.0};
      for (int q = 0; q < n; ++q) {
        const auto pr = oracle::softmax(&cls.vec()[q * (k + 1)], k + 1);
        for (int c = 0; c < k; ++c) s[c] += pr[c] * oracle::sigm(masks.values()[q * h * w + pix]);
      }
      const int expect = s[1] > s[0] ? 1 : 0;
      EXPECT_EQ(r.labels.data[pix], expect);
      EXPECT_EQ(r2.labels.data[pix], expect);
      EXPECT_NEAR(r.probabilities.data[pix], s[0] / (s[0] + s[1]), 1e-12);
    }
  }
}

TEST(SemanticInference, UpsamplesToRequestedSize) {
  Rng rng(12);
  PredictionSet p{random_tensor(rng, {2, 4}), random_tensor(rng, {2, 4, 6})};
  const auto r = semantic_inference(p, 16, 24);
  EXPECT_EQ(r.labels.height, 16);
  EXPECT_EQ(r.labels.width, 24);
  EXPECT_EQ(r.probabilities.channels, 3);
}
