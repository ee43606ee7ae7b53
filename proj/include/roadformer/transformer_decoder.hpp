// SPDX-License-Identifier: Apache-2.0
//
// Query decoder: N learned queries refined by masked cross-attention over the
// refined pyramid, query self-attention and a feed-forward network, with
// class and mask predictions after every layer.
//
//   X^C_l = Softmax(M_{l-1} + Q K^T) V + X_{l-1}
//
// The cross-attention is single-head and unscaled. Self-attention and the
// FFN are pre-normalized residual branches, so zeroing f_V, the self-attention
// output projection and the second FFN linear makes a layer the exact identity.
#pragma once

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "roadformer/grid.hpp"
#include "roadformer/nn.hpp"
#include "roadformer/pixel_decoder.hpp"

namespace roadformer {

struct TransformerDecoderConfig {
  int num_queries = 20;
  int layers = 6;
  int dim = 64;
  int heads = 4;
  int ffn_dim = 128;
  int num_classes = 3;  // K, excluding "no object"

  void validate(int scales) const {
    if (num_queries < 1 || dim < 1 || ffn_dim < 1 || num_classes < 1 || layers < 0)
      throw ConfigError("decoder: sizes must be positive");
    if (heads < 1 || dim % heads != 0)
      throw ConfigError("decoder: dim " + std::to_string(dim) + " not divisible by " + std::to_string(heads) + " heads");
    if (scales < 1 || layers % scales != 0)
      throw ConfigError("decoder: layers (" + std::to_string(layers) + ") must be a multiple of the scale count (" +
                        std::to_string(scales) + ")");
  }
};

struct QuerySet {
  Tensor features;  // [N, C]
  int layer_index = 0;
};

struct AttentionMask {
  Tensor values;  // [N, P], entries 0 or -inf; never requires grad
  int source_stride = 0;
};

struct PredictionSet {
  Tensor class_logits;  // [N, K + 1], last column is "no object"
  Tensor mask_logits;   // [N, H/4, W/4]

  int num_queries() const { return class_logits.dim(0); }
  int num_classes() const { return class_logits.dim(1) - 1; }
};

struct CrossAttentionParams {
  Linear f_q;
  Linear f_k;
  Linear f_v;
};

/// Flattens a [C, h, w] map into [h*w, C] tokens.
inline Tensor to_tokens(const Tensor& map) {
  detail::require_rank(map, 3, "to_tokens");
  return transpose(reshape(map, {map.dim(0), map.dim(1) * map.dim(2)}));
}

inline Tensor masked_cross_attention(const Tensor& x_prev, const Tensor& feat, const AttentionMask& mask,
                                     const CrossAttentionParams& p) {
  if (feat.rank() != 3 || x_prev.rank() != 2 || feat.dim(0) != x_prev.dim(1))
    throw InputError("masked_cross_attention: queries " + shape_str(x_prev.shape()) + " and features " +
                     shape_str(feat.shape()) + " disagree on channels");
  const int positions = feat.dim(1) * feat.dim(2);
  if (mask.values.rank() != 2 || mask.values.dim(0) != x_prev.dim(0) || mask.values.dim(1) != positions)
    throw InputError("masked_cross_attention: mask " + shape_str(mask.values.shape()) + " does not match " +
                     std::to_string(x_prev.dim(0)) + " queries x " + std::to_string(positions) + " positions");
  Tensor tokens = to_tokens(feat);
  Tensor logits = add(mask.values, matmul(p.f_q(x_prev), p.f_k(tokens), false, true));
  return add(matmul(softmax_rows(logits), p.f_v(tokens)), x_prev);
}

/// Scaled multi-head self-attention over queries, without output projection.
inline Tensor multi_head_self_attention(const Tensor& x, const Linear& wq, const Linear& wk, const Linear& wv, int heads) {
  const int c = x.dim(1), dh = c / heads;
  Tensor q = wq(x), k = wk(x), v = wv(x);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Tensor> parts;
  for (int h = 0; h < heads; ++h) {
    Tensor qh = slice_cols(q, h * dh, (h + 1) * dh);
    Tensor kh = slice_cols(k, h * dh, (h + 1) * dh);
    Tensor vh = slice_cols(v, h * dh, (h + 1) * dh);
    parts.push_back(matmul(softmax_rows(scale(matmul(qh, kh, false, true), inv_sqrt)), vh));
  }
  return concat_cols(parts);
}

struct DecoderLayer {
  int heads = 1;
  CrossAttentionParams cross;
  LayerNorm sa_norm;
  Linear sa_q;
  Linear sa_k;
  Linear sa_v;
  Linear sa_out;
  LayerNorm ffn_norm;
  Linear ffn1;
  Linear ffn2;

  static DecoderLayer create(ParamStore& store, const std::string& name, const TransformerDecoderConfig& cfg) {
    DecoderLayer d;
    const int c = cfg.dim;
    const auto g = ParamGroup::kHead;
    d.heads = cfg.heads;
    d.cross = {Linear::create(store, name + ".cross.f_q", c, c, g), Linear::create(store, name + ".cross.f_k", c, c, g),
               Linear::create(store, name + ".cross.f_v", c, c, g)};
    d.sa_norm = LayerNorm::create(store, name + ".self.norm", c, g);
    d.sa_q = Linear::create(store, name + ".self.q", c, c, g);
    d.sa_k = Linear::create(store, name + ".self.k", c, c, g);
    d.sa_v = Linear::create(store, name + ".self.v", c, c, g);
    d.sa_out = Linear::create(store, name + ".self.out", c, c, g);
    d.ffn_norm = LayerNorm::create(store, name + ".ffn.norm", c, g);
    d.ffn1 = Linear::create(store, name + ".ffn.fc1", c, cfg.ffn_dim, g);
    d.ffn2 = Linear::create(store, name + ".ffn.fc2", cfg.ffn_dim, c, g);
    return d;
  }

  /// Zeroes f_V, the self-attention output projection and the second FFN linear.
  void zero_output_projections() {
    for (Tensor* t : {&cross.f_v.weight, &cross.f_v.bias, &sa_out.weight, &sa_out.bias, &ffn2.weight, &ffn2.bias})
      fill(*t, 0.0);
  }

  Tensor operator()(const Tensor& x_prev, const Tensor& feat, const AttentionMask& mask) const {
    Tensor x = masked_cross_attention(x_prev, feat, mask, cross);
    x = add(x, sa_out(multi_head_self_attention(sa_norm(x), sa_q, sa_k, sa_v, heads)));
    return add(x, ffn2(gelu(ffn1(ffn_norm(x)))));
  }
};

inline QuerySet decoder_layer(const QuerySet& x_prev, const Tensor& feat, const AttentionMask& mask,
                              const DecoderLayer& params) {
  return {params(x_prev.features, feat, mask), x_prev.layer_index + 1};
}

struct PredictionHeads {
  LayerNorm norm;
  Linear class_embed;
  Linear mask_fc1;
  Linear mask_fc2;
  Linear mask_fc3;

  static PredictionHeads create(ParamStore& store, const std::string& name, const TransformerDecoderConfig& cfg) {
    const int c = cfg.dim;
    const auto g = ParamGroup::kHead;
    return {LayerNorm::create(store, name + ".norm", c, g),
            Linear::create(store, name + ".class", c, cfg.num_classes + 1, g),
            Linear::create(store, name + ".mask.fc1", c, c, g), Linear::create(store, name + ".mask.fc2", c, c, g),
            Linear::create(store, name + ".mask.fc3", c, c, g)};
  }

  Tensor mask_embedding(const Tensor& xn) const { return mask_fc3(gelu(mask_fc2(gelu(mask_fc1(xn))))); }
};

/// Class logits from Linear(X) and mask logits as the dot product of the
/// query's mask embedding with every pixel of E ([C, h, w]).
inline PredictionSet predict_heads(const Tensor& x, const Tensor& embedding, const PredictionHeads& heads) {
  detail::require_rank(embedding, 3, "predict_heads");
  if (embedding.dim(0) != heads.mask_fc3.weight.dim(0))
    throw InputError("predict_heads: embedding has " + std::to_string(embedding.dim(0)) + " channels, expected " +
                     std::to_string(heads.mask_fc3.weight.dim(0)));
  const int c = embedding.dim(0), h = embedding.dim(1), w = embedding.dim(2);
  Tensor xn = heads.norm(x);
  Tensor masks = matmul(heads.mask_embedding(xn), reshape(embedding, {c, h * w}));
  return {heads.class_embed(xn), reshape(masks, {x.dim(0), h, w})};
}

/// Thresholds the previous prediction, resized to target_h x target_w:
/// 0 where probability >= 0.5, -inf elsewhere; all -inf rows become all 0.
inline AttentionMask make_attention_mask(const PredictionSet& pred, int target_h, int target_w, int target_stride = 0) {
  const int n = pred.mask_logits.dim(0), h = pred.mask_logits.dim(1), w = pred.mask_logits.dim(2);
  std::vector<double> prob(pred.mask_logits.numel());
  for (std::size_t i = 0; i < prob.size(); ++i) prob[i] = sigmoid(pred.mask_logits[i]);
  const auto resized = resize_bilinear(prob, n, h, w, target_h, target_w);
  const std::size_t p = static_cast<std::size_t>(target_h) * target_w;
  std::vector<double> m(resized.size());
  constexpr double neg_inf = -std::numeric_limits<double>::infinity();
  for (int q = 0; q < n; ++q) {
    bool any_visible = false;
    for (std::size_t j = 0; j < p; ++j) {
      const bool visible = resized[q * p + j] >= 0.5;
      m[q * p + j] = visible ? 0.0 : neg_inf;
      any_visible = any_visible || visible;
    }
    if (!any_visible) std::fill(m.begin() + static_cast<std::ptrdiff_t>(q * p),
                                m.begin() + static_cast<std::ptrdiff_t>((q + 1) * p), 0.0);
  }
  return {Tensor({n, static_cast<int>(p)}, std::move(m)), target_stride};
}

/// Same, with the target size derived from strides relative to the mask logits.
inline AttentionMask make_attention_mask_for_stride(const PredictionSet& pred, int target_stride, int mask_stride = 4) {
  const int h = pred.mask_logits.dim(1) * mask_stride / target_stride;
  const int w = pred.mask_logits.dim(2) * mask_stride / target_stride;
  if (h < 1 || w < 1) throw InputError("make_attention_mask: target stride too coarse");
  return make_attention_mask(pred, h, w, target_stride);
}

class TransformerDecoder {
 public:
  static TransformerDecoder create(ParamStore& store, const std::string& name, const TransformerDecoderConfig& cfg,
                                   int scales = 3) {
    cfg.validate(scales);
    TransformerDecoder d;
    d.cfg_ = cfg;
    d.queries_ = store.create(name + ".queries", {cfg.num_queries, cfg.dim}, ParamGroup::kHead, Init::normal(1.0));
    for (int i = 0; i < cfg.layers; ++i) d.layers_.push_back(DecoderLayer::create(store, name + ".layer" + std::to_string(i), cfg));
    d.heads_ = PredictionHeads::create(store, name + ".heads", cfg);
    return d;
  }

  const TransformerDecoderConfig& config() const { return cfg_; }
  const Tensor& queries() const { return queries_; }
  std::vector<DecoderLayer>& layers() { return layers_; }
  const std::vector<DecoderLayer>& layers() const { return layers_; }
  const PredictionHeads& heads() const { return heads_; }
  PredictionHeads& heads() { return heads_; }

  /// Index into `refined` (finest first) consumed by layer l in [1, L]:
  /// coarse to fine, cycling.
  static int scale_for_layer(int l, int scales) { return scales - 1 - (l - 1) % scales; }

  /// Returns L + 1 predictions: from X_0, then after every layer.
  std::vector<PredictionSet> decode(const QuerySet& x0, const PixelDecoderOutput& pdec) const {
    const int n = static_cast<int>(pdec.refined.size());
    cfg_.validate(n);
    std::vector<PredictionSet> out;
    out.push_back(predict_heads(x0.features, pdec.embedding, heads_));
    QuerySet x = x0;
    for (int l = 1; l <= cfg_.layers; ++l) {
      const int s = scale_for_layer(l, n);
      const Tensor& feat = pdec.refined[static_cast<std::size_t>(s)];
      const AttentionMask mask = make_attention_mask(out.back(), feat.dim(1), feat.dim(2), pdec.strides[static_cast<std::size_t>(s)]);
      x = decoder_layer(x, feat, mask, layers_[static_cast<std::size_t>(l - 1)]);
      out.push_back(predict_heads(x.features, pdec.embedding, heads_));
    }
    return out;
  }

  std::vector<PredictionSet> decode(const PixelDecoderOutput& pdec) const { return decode({queries_, 0}, pdec); }

 private:
  TransformerDecoderConfig cfg_;
  Tensor queries_;
  std::vector<DecoderLayer> layers_;
  PredictionHeads heads_;
};

/// Per-class scores s(c) = sum_q softmax(cls_q)[c] * sigmoid(mask_q), with the
/// no-object column dropped: K channels at the mask resolution.
inline Grid<double> semantic_scores(const PredictionSet& pred) {
  const int n = pred.num_queries(), k = pred.num_classes();
  const int h = pred.mask_logits.dim(1), w = pred.mask_logits.dim(2);
  const std::size_t p = static_cast<std::size_t>(h) * w;
  Grid<double> s(h, w, k, 0.0);
  std::vector<double> cls(static_cast<std::size_t>(k) + 1);
  for (int q = 0; q < n; ++q) {
    double mx = -std::numeric_limits<double>::infinity(), z = 0.0;
    for (int c = 0; c <= k; ++c) mx = std::max(mx, pred.class_logits[static_cast<std::size_t>(q) * (k + 1) + c]);
    for (int c = 0; c <= k; ++c) z += cls[static_cast<std::size_t>(c)] = std::exp(pred.class_logits[static_cast<std::size_t>(q) * (k + 1) + c] - mx);
    for (int c = 0; c < k; ++c) {
      const double pc = cls[static_cast<std::size_t>(c)] / z;
      double* dst = s.data.data() + static_cast<std::size_t>(c) * p;
      for (std::size_t j = 0; j < p; ++j) dst[j] += pc * sigmoid(pred.mask_logits[q * p + j]);
    }
  }
  return s;
}

struct SemanticResult {
  LabelMap labels;            // argmax over K classes, ties to the lower index
  Grid<double> probabilities;  // K channels, scores normalized per pixel
};

/// Argmax of the class scores. With out_h/out_w > 0 the scores are first
/// bilinearly upsampled to that size.
inline SemanticResult semantic_inference(const PredictionSet& pred, int out_h = -1, int out_w = -1) {
  Grid<double> s = semantic_scores(pred);
  if (out_h > 0 && out_w > 0 && (out_h != s.height || out_w != s.width)) {
    Grid<double> up(out_h, out_w, s.channels);
    up.data = resize_bilinear(s.data, s.channels, s.height, s.width, out_h, out_w);
    s = std::move(up);
  }
  SemanticResult r{LabelMap(s.height, s.width), Grid<double>(s.height, s.width, s.channels)};
  for (int y = 0; y < s.height; ++y)
    for (int x = 0; x < s.width; ++x) {
      int best = 0;
      double total = 0.0;
      for (int c = 0; c < s.channels; ++c) {
        total += s.at(y, x, c);
        if (s.at(y, x, c) > s.at(y, x, best)) best = c;
      }
      r.labels.at(y, x) = static_cast<std::uint8_t>(best);
      for (int c = 0; c < s.channels; ++c) r.probabilities.at(y, x, c) = total > 0.0 ? s.at(y, x, c) / total : 0.0;
    }
  return r;
}

}  // namespace roadformer
