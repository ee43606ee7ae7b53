// SPDX-License-Identifier: Apache-2.0
//
// Pixel decoder: 1x1 channel reduction of the fused pyramid, a stack of
// multi-scale deformable attention layers over the three coarsest levels
// (strides 8/16/32), and the stride-4 per-pixel embedding E.
#pragma once

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "roadformer/backbone.hpp"
#include "roadformer/nn.hpp"

namespace roadformer {

struct LevelShape {
  int height;
  int width;
  int start;  // first token row of this level in the flattened value matrix
};

namespace detail {

/// Bilinear taps at a normalized location with zero padding outside the
/// map (pixel centres at (i + 0.5) / size). Derivatives are with respect to
/// the normalized coordinates.
struct BilinearTaps {
  int index[4];
  double weight[4];
  double dx[4];
  double dy[4];
};

inline BilinearTaps bilinear_taps(double x, double y, int h, int w) {
  BilinearTaps t{};
  const double px = x * w - 0.5, py = y * h - 0.5;
  const double fx = std::floor(px), fy = std::floor(py);
  const int x0 = static_cast<int>(fx), y0 = static_cast<int>(fy);
  const double lx = px - fx, ly = py - fy;
  const int xs[4] = {x0, x0 + 1, x0, x0 + 1};
  const int ys[4] = {y0, y0, y0 + 1, y0 + 1};
  const double wx[4] = {1 - lx, lx, 1 - lx, lx};
  const double wy[4] = {1 - ly, 1 - ly, ly, ly};
  const double dwx[4] = {-1, 1, -1, 1};
  const double dwy[4] = {-1, -1, 1, 1};
  for (int k = 0; k < 4; ++k) {
    const bool inside = xs[k] >= 0 && xs[k] < w && ys[k] >= 0 && ys[k] < h;
    t.index[k] = inside ? ys[k] * w + xs[k] : -1;
    t.weight[k] = inside ? wx[k] * wy[k] : 0.0;
    t.dx[k] = inside ? dwx[k] * wy[k] * w : 0.0;
    t.dy[k] = inside ? wx[k] * dwy[k] * h : 0.0;
  }
  return t;
}

}  // namespace detail

/// Bilinear samples of a token-major [h*w, C] map at normalized (x, y)
/// locations [P, 2]. Differentiable in both arguments.
inline Tensor sample_points(const Tensor& value, int h, int w, const Tensor& locations) {
  detail::require(value.rank() == 2 && value.dim(0) == h * w, "sample_points: value must be [h*w, C]");
  detail::require(locations.rank() == 2 && locations.dim(1) == 2, "sample_points: locations must be [P, 2]");
  const int c = value.dim(1), p = locations.dim(0);
  std::vector<double> out(static_cast<std::size_t>(p) * c, 0.0);
  for (int i = 0; i < p; ++i) {
    const auto t = detail::bilinear_taps(locations[2 * i], locations[2 * i + 1], h, w);
    for (int k = 0; k < 4; ++k) {
      if (t.index[k] < 0) continue;
      const double* v = value.vec().data() + static_cast<std::size_t>(t.index[k]) * c;
      for (int ch = 0; ch < c; ++ch) out[static_cast<std::size_t>(i) * c + ch] += t.weight[k] * v[ch];
    }
  }
  return detail::make_result({p, c}, std::move(out), {value, locations}, [value, locations, h, w, c, p](detail::Node& n) {
    double* gv = detail::grad_of(value);
    double* gl = detail::grad_of(locations);
    for (int i = 0; i < p; ++i) {
      const auto t = detail::bilinear_taps(locations[2 * i], locations[2 * i + 1], h, w);
      const double* g = n.grad.data() + static_cast<std::size_t>(i) * c;
      for (int k = 0; k < 4; ++k) {
        if (t.index[k] < 0) continue;
        const std::size_t row = static_cast<std::size_t>(t.index[k]) * c;
        double dot = 0.0;
        for (int ch = 0; ch < c; ++ch) {
          if (gv) gv[row + ch] += t.weight[k] * g[ch];
          dot += g[ch] * value[row + ch];
        }
        if (gl) {
          gl[2 * i] += dot * t.dx[k];
          gl[2 * i + 1] += dot * t.dy[k];
        }
      }
    }
  });
}

/// Samples a [C, H, W] map at `ref` (normalized) displaced by `offsets`
/// ([P, 2], in pixels of this map). Returns [P, C].
inline Tensor deform_attn_sample(const Tensor& value_map, double ref_x, double ref_y, const Tensor& offsets) {
  detail::require_rank(value_map, 3, "deform_attn_sample");
  const int c = value_map.dim(0), h = value_map.dim(1), w = value_map.dim(2);
  Tensor tokens = transpose(reshape(value_map, {c, h * w}));
  Tensor per_pixel({2}, {1.0 / w, 1.0 / h});
  Tensor ref({2}, {ref_x, ref_y});
  return sample_points(tokens, h, w, add_row_vector(mul_row_vector(offsets, per_pixel), ref));
}

/// Multi-scale deformable attention core. `value` is token-major [sum P_l, C]
/// with C split evenly over `heads`; `locations` is [Q, heads*L*points*2]
/// (normalized x, y) and `weights` is [Q, heads*L*points], both ordered
/// head-major, then level, then point. Returns [Q, C].
inline Tensor ms_deform_attn(const Tensor& value, const std::vector<LevelShape>& levels, int heads, int points,
                             const Tensor& locations, const Tensor& weights) {
  const int c = value.dim(1), q = locations.dim(0), nl = static_cast<int>(levels.size());
  detail::require(c % heads == 0, "ms_deform_attn: channels not divisible by heads");
  detail::require(locations.dim(1) == heads * nl * points * 2 && weights.dim(1) == heads * nl * points &&
                      weights.dim(0) == q,
                  "ms_deform_attn: sampling tensor shape mismatch");
  const int dh = c / heads;
  std::vector<double> out(static_cast<std::size_t>(q) * c, 0.0);
  for (int qi = 0; qi < q; ++qi)
    for (int hd = 0; hd < heads; ++hd)
      for (int l = 0; l < nl; ++l) {
        const LevelShape& ls = levels[static_cast<std::size_t>(l)];
        for (int pt = 0; pt < points; ++pt) {
          const int s = (hd * nl + l) * points + pt;
          const double a = weights[static_cast<std::size_t>(qi) * weights.dim(1) + s];
          const double* loc = locations.vec().data() + static_cast<std::size_t>(qi) * locations.dim(1) + 2 * s;
          const auto t = detail::bilinear_taps(loc[0], loc[1], ls.height, ls.width);
          double* o = out.data() + static_cast<std::size_t>(qi) * c + hd * dh;
          for (int k = 0; k < 4; ++k) {
            if (t.index[k] < 0) continue;
            const double* v = value.vec().data() + static_cast<std::size_t>(ls.start + t.index[k]) * c + hd * dh;
            const double f = a * t.weight[k];
            for (int d = 0; d < dh; ++d) o[d] += f * v[d];
          }
        }
      }
  return detail::make_result(
      {q, c}, std::move(out), {value, locations, weights},
      [value, locations, weights, levels, heads, points, c, q, nl, dh](detail::Node& n) {
        double* gv = detail::grad_of(value);
        double* gl = detail::grad_of(locations);
        double* gw = detail::grad_of(weights);
        for (int qi = 0; qi < q; ++qi)
          for (int hd = 0; hd < heads; ++hd)
            for (int l = 0; l < nl; ++l) {
              const LevelShape& ls = levels[static_cast<std::size_t>(l)];
              for (int pt = 0; pt < points; ++pt) {
                const int s = (hd * nl + l) * points + pt;
                const std::size_t wi = static_cast<std::size_t>(qi) * weights.dim(1) + s;
                const std::size_t li = static_cast<std::size_t>(qi) * locations.dim(1) + 2 * s;
                const double a = weights[wi];
                const auto t = detail::bilinear_taps(locations[li], locations[li + 1], ls.height, ls.width);
                const double* g = n.grad.data() + static_cast<std::size_t>(qi) * c + hd * dh;
                double gx = 0.0, gy = 0.0, ga = 0.0;
                for (int k = 0; k < 4; ++k) {
                  if (t.index[k] < 0) continue;
                  const std::size_t row = static_cast<std::size_t>(ls.start + t.index[k]) * c + hd * dh;
                  double dot = 0.0;
                  for (int d = 0; d < dh; ++d) {
                    dot += g[d] * value[row + d];
                    if (gv) gv[row + d] += a * t.weight[k] * g[d];
                  }
                  ga += t.weight[k] * dot;
                  gx += a * t.dx[k] * dot;
                  gy += a * t.dy[k] * dot;
                }
                if (gw) gw[wi] += ga;
                if (gl) {
                  gl[li] += gx;
                  gl[li + 1] += gy;
                }
              }
            }
      });
}

/// Fixed 2-D sine position encoding for an h x w grid: [h*w, C], first half
/// of the channels encodes y, second half x.
inline Tensor sine_position_encoding(int h, int w, int channels) {
  if (channels % 4 != 0) throw ConfigError("position encoding needs channels divisible by 4");
  const int half = channels / 2;
  std::vector<double> out(static_cast<std::size_t>(h) * w * channels);
  constexpr double two_pi = 2.0 * std::numbers::pi;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double ye = (y + 1.0) / h * two_pi, xe = (x + 1.0) / w * two_pi;
      double* o = out.data() + (static_cast<std::size_t>(y) * w + x) * channels;
      for (int i = 0; i < half; ++i) {
        const double freq = std::pow(10000.0, 2.0 * (i / 2) / half);
        o[i] = (i % 2 == 0) ? std::sin(ye / freq) : std::cos(ye / freq);
        o[half + i] = (i % 2 == 0) ? std::sin(xe / freq) : std::cos(xe / freq);
      }
    }
  return Tensor({h * w, channels}, std::move(out));
}

struct PixelDecoderConfig {
  int dim = 64;
  int layers = 3;
  int heads = 4;
  int points = 4;
  int ffn_dim = 128;
  int attention_levels = 3;

  void validate() const {
    if (dim <= 0 || dim % heads != 0) throw ConfigError("pixel_decoder: dim " + std::to_string(dim) +
                                                        " not divisible by " + std::to_string(heads) + " heads");
    if (dim % 4 != 0) throw ConfigError("pixel_decoder: dim must be divisible by 4");
    if (layers < 0 || points < 1 || ffn_dim < 1 || attention_levels < 1)
      throw ConfigError("pixel_decoder: invalid layer/point/ffn configuration");
  }
};

/// One deformable encoder layer with post-norm residual sublayers.
struct DeformLayer {
  int heads = 0;
  int levels = 0;
  int points = 0;
  Linear value_proj;
  Linear offset_proj;
  Linear weight_proj;
  Linear out_proj;
  LayerNorm norm1;
  Linear ffn1;
  Linear ffn2;
  LayerNorm norm2;

  static DeformLayer create(ParamStore& store, const std::string& name, const PixelDecoderConfig& cfg) {
    DeformLayer d;
    d.heads = cfg.heads;
    d.levels = cfg.attention_levels;
    d.points = cfg.points;
    const int c = cfg.dim, samples = cfg.heads * cfg.attention_levels * cfg.points;
    d.value_proj = Linear::create(store, name + ".value_proj", c, c, ParamGroup::kHead);
    d.offset_proj = {store.create(name + ".offset_proj.weight", {2 * samples, c}, ParamGroup::kHead, Init::zeros()),
                     store.create(name + ".offset_proj.bias", {2 * samples}, ParamGroup::kHead, Init::zeros())};
    // Start head h sampling along direction 2*pi*h/heads, point p at radius p + 1.
    auto bias = d.offset_proj.bias.values_mut();
    for (int h = 0; h < cfg.heads; ++h) {
      const double theta = 2.0 * std::numbers::pi * h / cfg.heads;
      double dx = std::cos(theta), dy = std::sin(theta);
      const double m = std::max(std::abs(dx), std::abs(dy));
      dx /= m;
      dy /= m;
      for (int l = 0; l < cfg.attention_levels; ++l)
        for (int p = 0; p < cfg.points; ++p) {
          const int s = (h * cfg.attention_levels + l) * cfg.points + p;
          bias[static_cast<std::size_t>(2 * s)] = dx * (p + 1);
          bias[static_cast<std::size_t>(2 * s + 1)] = dy * (p + 1);
        }
    }
    d.weight_proj = {store.create(name + ".weight_proj.weight", {samples, c}, ParamGroup::kHead, Init::zeros()),
                     store.create(name + ".weight_proj.bias", {samples}, ParamGroup::kHead, Init::zeros())};
    d.out_proj = Linear::create(store, name + ".out_proj", c, c, ParamGroup::kHead);
    d.norm1 = LayerNorm::create(store, name + ".norm1", c, ParamGroup::kHead);
    d.ffn1 = Linear::create(store, name + ".ffn1", c, cfg.ffn_dim, ParamGroup::kHead);
    d.ffn2 = Linear::create(store, name + ".ffn2", cfg.ffn_dim, c, ParamGroup::kHead);
    d.norm2 = LayerNorm::create(store, name + ".norm2", c, ParamGroup::kHead);
    return d;
  }

  /// Softmax-normalized sampling weights [Q, heads*levels*points]; each
  /// head's block of levels*points entries sums to one.
  Tensor attention_weights(const Tensor& query) const {
    const int q = query.dim(0), per_head = levels * points;
    return reshape(softmax_rows(reshape(weight_proj(query), {q * heads, per_head})), {q, heads * per_head});
  }

  /// Normalized sampling locations [Q, heads*levels*points*2].
  Tensor sampling_locations(const Tensor& query, const Tensor& reference, const std::vector<LevelShape>& shapes) const {
    const int q = query.dim(0), cols = heads * levels * points * 2;
    std::vector<double> per_pixel(static_cast<std::size_t>(cols));
    for (int h = 0; h < heads; ++h)
      for (int l = 0; l < levels; ++l)
        for (int p = 0; p < points; ++p) {
          const int s = (h * levels + l) * points + p;
          per_pixel[static_cast<std::size_t>(2 * s)] = 1.0 / shapes[static_cast<std::size_t>(l)].width;
          per_pixel[static_cast<std::size_t>(2 * s + 1)] = 1.0 / shapes[static_cast<std::size_t>(l)].height;
        }
    std::vector<double> ref(static_cast<std::size_t>(q) * cols);
    for (int i = 0; i < q; ++i)
      for (int s = 0; s < cols / 2; ++s) {
        ref[static_cast<std::size_t>(i) * cols + 2 * s] = reference[2 * static_cast<std::size_t>(i)];
        ref[static_cast<std::size_t>(i) * cols + 2 * s + 1] = reference[2 * static_cast<std::size_t>(i) + 1];
      }
    Tensor scaled = mul_row_vector(offset_proj(query), Tensor({cols}, std::move(per_pixel)));
    return add(scaled, Tensor({q, cols}, std::move(ref)));
  }

  /// src, pos: [Q, C]; reference: [Q, 2] normalized token centres.
  Tensor operator()(const Tensor& src, const Tensor& pos, const Tensor& reference,
                    const std::vector<LevelShape>& shapes) const {
    Tensor query = add(src, pos);
    Tensor attended = ms_deform_attn(value_proj(src), shapes, heads, points,
                                     sampling_locations(query, reference, shapes), attention_weights(query));
    Tensor x = norm1(add(src, out_proj(attended)));
    return norm2(add(x, ffn2(gelu(ffn1(x)))));
  }
};

struct PixelDecoderOutput {
  std::vector<Tensor> refined;  // F^P, finest first: strides 8, 16, 32
  std::vector<int> strides;
  Tensor embedding;  // E: [C, H/4, W/4]
  int embedding_stride = 4;
};

/// Per-level 1x1 convolutions mapping every fused level to `dim` channels.
struct ChannelReducer {
  std::vector<PointwiseConv> convs;

  static ChannelReducer create(ParamStore& store, const std::string& name, const std::vector<int>& in_channels, int dim) {
    ChannelReducer r;
    for (std::size_t i = 0; i < in_channels.size(); ++i)
      r.convs.push_back(PointwiseConv::create(store, name + ".level" + std::to_string(i + 1), in_channels[i], dim,
                                              ParamGroup::kHead));
    return r;
  }

  MultiScaleFeatures operator()(const MultiScaleFeatures& fused) const {
    if (fused.size() != static_cast<int>(convs.size()))
      throw InputError("reduce_channels: expected " + std::to_string(convs.size()) + " levels");
    MultiScaleFeatures out;
    for (std::size_t i = 0; i < convs.size(); ++i) {
      if (fused.levels[i].dim(0) != convs[i].in_channels())
        throw InputError("reduce_channels: level " + std::to_string(i + 1) + " has " +
                         std::to_string(fused.levels[i].dim(0)) + " channels, expected " +
                         std::to_string(convs[i].in_channels()));
      out.levels.push_back(convs[i](fused.levels[i]));
      out.strides.push_back(fused.strides[i]);
    }
    return out;
  }
};

inline MultiScaleFeatures reduce_channels(const MultiScaleFeatures& fused, const ChannelReducer& reducer) {
  return reducer(fused);
}

class PixelDecoder {
 public:
  static PixelDecoder create(ParamStore& store, const std::string& name, const PixelDecoderConfig& cfg) {
    cfg.validate();
    PixelDecoder p;
    p.cfg_ = cfg;
    p.level_embed_ = store.create(name + ".level_embed", {cfg.attention_levels, cfg.dim}, ParamGroup::kHead,
                                  Init::normal(0.1));
    for (int i = 0; i < cfg.layers; ++i) p.layers_.push_back(DeformLayer::create(store, name + ".layer" + std::to_string(i), cfg));
    p.mask_feature_ = PointwiseConv::create(store, name + ".mask_feature", cfg.dim, cfg.dim, ParamGroup::kHead);
    return p;
  }

  const PixelDecoderConfig& config() const { return cfg_; }
  const std::vector<DeformLayer>& layers() const { return layers_; }

  /// `reduced`: k >= attention_levels + 1 levels, all with `dim` channels.
  PixelDecoderOutput operator()(const MultiScaleFeatures& reduced) const {
    const int k = reduced.size(), na = cfg_.attention_levels;
    if (k < na + 1) throw InputError("pixel_decoder: need at least " + std::to_string(na + 1) + " levels");
    for (const auto& l : reduced.levels)
      if (l.dim(0) != cfg_.dim) throw InputError("pixel_decoder: level has " + std::to_string(l.dim(0)) +
                                                 " channels, expected " + std::to_string(cfg_.dim));
    const int c = cfg_.dim;
    std::vector<LevelShape> shapes;
    std::vector<Tensor> src_parts, pos_parts;
    std::vector<double> reference;
    int start = 0;
    for (int l = 0; l < na; ++l) {
      const Tensor& m = reduced.levels[static_cast<std::size_t>(k - na + l)];
      const int h = m.dim(1), w = m.dim(2);
      shapes.push_back({h, w, start});
      start += h * w;
      src_parts.push_back(transpose(reshape(m, {c, h * w})));
      pos_parts.push_back(add_row_vector(sine_position_encoding(h, w, c), reshape(slice_rows(level_embed_, l, l + 1), {c})));
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          reference.push_back((x + 0.5) / w);
          reference.push_back((y + 0.5) / h);
        }
    }
    Tensor src = concat_rows(src_parts);
    Tensor pos = concat_rows(pos_parts);
    Tensor ref({start, 2}, std::move(reference));
    for (const auto& layer : layers_) src = layer(src, pos, ref, shapes);

    PixelDecoderOutput out;
    for (int l = 0; l < na; ++l) {
      const auto& s = shapes[static_cast<std::size_t>(l)];
      out.refined.push_back(reshape(transpose(slice_rows(src, s.start, s.start + s.height * s.width)), {c, s.height, s.width}));
      out.strides.push_back(reduced.strides[static_cast<std::size_t>(k - na + l)]);
    }
    const Tensor& fine = reduced.levels[static_cast<std::size_t>(k - na - 1)];
    out.embedding = mask_feature_(add(fine, upsample_bilinear(out.refined[0], fine.dim(1), fine.dim(2))));
    out.embedding_stride = reduced.strides[static_cast<std::size_t>(k - na - 1)];
    return out;
  }

 private:
  PixelDecoderConfig cfg_;
  Tensor level_embed_;
  std::vector<DeformLayer> layers_;
  PointwiseConv mask_feature_;
};

}  // namespace roadformer
