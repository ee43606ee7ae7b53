// SPDX-License-Identifier: Apache-2.0
//
// Heterogeneous feature synergy block: per-scale fusion of the RGB and
// normal pyramids.
//
//   fusion (HFFM):        F^H = Norm(Softmax(F^C F^C^T) * kappa * F^C + F^C)
//   recalibration (FFRM): F^F = Conv1x1(F^H + sigmoid(Conv1x1(mean(F^H))) (.) F^H)
//
// F^C is the [2C, P] channel stack of the two modalities. Attention is over
// channels, so its cost is linear in the number of pixels.
#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "roadformer/backbone.hpp"
#include "roadformer/nn.hpp"

namespace roadformer {

enum class FusionMode { kConcat, kSeb, kHffm, kFfrm, kHffmFfrm };

inline std::string to_string(FusionMode m) {
  switch (m) {
    case FusionMode::kConcat: return "concat";
    case FusionMode::kSeb: return "seb";
    case FusionMode::kHffm: return "hffm";
    case FusionMode::kFfrm: return "ffrm";
    case FusionMode::kHffmFfrm: return "hffm+ffrm";
  }
  return "?";
}

inline FusionMode parse_fusion_mode(const std::string& s) {
  for (auto m : {FusionMode::kConcat, FusionMode::kSeb, FusionMode::kHffm, FusionMode::kFfrm, FusionMode::kHffmFfrm})
    if (to_string(m) == s) return m;
  throw ConfigError("unknown fusion mode '" + s + "' (expected concat, seb, hffm, ffrm or hffm+ffrm)");
}

struct HffmParams {
  Tensor kappa;  // [1], starts at 0
  ChannelNorm norm;

  static HffmParams create(ParamStore& store, const std::string& name, int fused_channels) {
    return {store.create(name + ".kappa", {1}, ParamGroup::kHead, Init::zeros()),
            ChannelNorm::create(store, name + ".norm", fused_channels, ParamGroup::kHead)};
  }
};

struct FfrmParams {
  PointwiseConv gate_conv;
  PointwiseConv out_conv;

  static FfrmParams create(ParamStore& store, const std::string& name, int fused_channels) {
    return {PointwiseConv::create(store, name + ".gate", fused_channels, fused_channels, ParamGroup::kHead),
            PointwiseConv::create(store, name + ".out", fused_channels, fused_channels, ParamGroup::kHead)};
  }
};

/// Classic squeeze-and-excitation with a reduction ratio, for the ablation.
struct SebParams {
  PointwiseConv reduce;
  PointwiseConv expand;

  static SebParams create(ParamStore& store, const std::string& name, int channels, int ratio = 16) {
    const int hidden = std::max(1, channels / ratio);
    return {PointwiseConv::create(store, name + ".reduce", channels, hidden, ParamGroup::kHead),
            PointwiseConv::create(store, name + ".expand", hidden, channels, ParamGroup::kHead)};
  }
};

/// Stacks F^R over F^N and flattens space: [2C, P].
inline Tensor concat_features(const Tensor& fr, const Tensor& fn) {
  if (fr.rank() != 3 || fn.rank() != 3 || fr.shape() != fn.shape())
    throw InputError("hfsb: modality features must share shape, got " + shape_str(fr.shape()) + " and " +
                     shape_str(fn.shape()));
  const int c = fr.dim(0), p = fr.dim(1) * fr.dim(2);
  return concat_rows({reshape(fr, {c, p}), reshape(fn, {c, p})});
}

/// Channel affinity Softmax(F F^T), rows normalized.
inline Tensor channel_affinity(const Tensor& fc) { return softmax_rows(matmul(fc, fc, false, true)); }

inline Tensor hffm_forward(const Tensor& fr, const Tensor& fn, const HffmParams& params) {
  Tensor fc = concat_features(fr, fn);
  Tensor attended = matmul(channel_affinity(fc), fc);
  Tensor out = params.norm(add(scale_by(attended, params.kappa), fc));
  return reshape(out, {2 * fr.dim(0), fr.dim(1), fr.dim(2)});
}

/// Per-channel spatial mean z of a [C, H, W] map.
inline Tensor channel_means(const Tensor& fh) { return mean_cols(fh); }

inline Tensor ffrm_forward(const Tensor& fh, const FfrmParams& params) {
  const int c = fh.dim(0);
  if (params.gate_conv.in_channels() != c)
    throw ConfigError("ffrm: parameters expect " + std::to_string(params.gate_conv.in_channels()) +
                      " channels, input has " + std::to_string(c));
  Tensor z = reshape(channel_means(fh), {c, 1});
  Tensor gate = reshape(sigmoid(params.gate_conv(z)), {c});
  return params.out_conv(add(fh, mul_col_vector(fh, gate)));
}

inline Tensor seb_forward(const Tensor& x, const SebParams& params) {
  const int c = x.dim(0);
  Tensor z = reshape(mean_cols(x), {c, 1});
  Tensor gate = reshape(sigmoid(params.expand(relu(params.reduce(z)))), {c});
  return mul_col_vector(x, gate);
}

/// Fusion for one pyramid level under a given ablation mode.
struct FusionLevel {
  FusionMode mode = FusionMode::kHffmFfrm;
  HffmParams hffm;
  FfrmParams ffrm;
  SebParams seb;

  static FusionLevel create(ParamStore& store, const std::string& name, FusionMode mode, int channels) {
    FusionLevel f;
    f.mode = mode;
    const int fused = 2 * channels;
    if (mode == FusionMode::kHffm || mode == FusionMode::kHffmFfrm) f.hffm = HffmParams::create(store, name + ".hffm", fused);
    if (mode == FusionMode::kFfrm || mode == FusionMode::kHffmFfrm) f.ffrm = FfrmParams::create(store, name + ".ffrm", fused);
    if (mode == FusionMode::kSeb) f.seb = SebParams::create(store, name + ".seb", fused);
    return f;
  }

  Tensor operator()(const Tensor& fr, const Tensor& fn) const {
    const Shape fused_shape{2 * fr.dim(0), fr.dim(1), fr.dim(2)};
    switch (mode) {
      case FusionMode::kConcat:
        return reshape(concat_features(fr, fn), fused_shape);
      case FusionMode::kSeb:
        return seb_forward(reshape(concat_features(fr, fn), fused_shape), seb);
      case FusionMode::kHffm:
        return hffm_forward(fr, fn, hffm);
      case FusionMode::kFfrm:
        return ffrm_forward(reshape(concat_features(fr, fn), fused_shape), ffrm);
      case FusionMode::kHffmFfrm:
        return ffrm_forward(hffm_forward(fr, fn, hffm), ffrm);
    }
    throw ConfigError("invalid fusion mode");
  }
};

struct Hfsb {
  std::vector<FusionLevel> levels;

  static Hfsb create(ParamStore& store, const std::string& name, FusionMode mode, const std::vector<int>& channels) {
    Hfsb h;
    for (std::size_t i = 0; i < channels.size(); ++i)
      h.levels.push_back(FusionLevel::create(store, name + ".level" + std::to_string(i + 1), mode, channels[i]));
    return h;
  }

  MultiScaleFeatures operator()(const MultiScaleFeatures& rgb, const MultiScaleFeatures& normal) const {
    if (rgb.size() != normal.size() || rgb.size() != static_cast<int>(levels.size()))
      throw InputError("hfsb: level count mismatch (" + std::to_string(rgb.size()) + " rgb, " +
                       std::to_string(normal.size()) + " normal, " + std::to_string(levels.size()) + " fusion)");
    MultiScaleFeatures out;
    for (std::size_t i = 0; i < levels.size(); ++i) {
      out.levels.push_back(levels[i](rgb.levels[i], normal.levels[i]));
      out.strides.push_back(rgb.strides[i]);
    }
    return out;
  }
};

}  // namespace roadformer
