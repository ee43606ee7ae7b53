// SPDX-License-Identifier: Apache-2.0
//
// Desk-scale convolutional encoder emitting a k-level pyramid with level i at
// stride 2^(i+1). Two independently parameterized instances form the duplex
// encoder (one for RGB, one for the normal image).
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "roadformer/grid.hpp"
#include "roadformer/nn.hpp"

namespace roadformer {

struct BackboneConfig {
  int stem_channels = 16;
  std::vector<int> channels{16, 32, 64, 128};
  std::vector<int> blocks{1, 1, 2, 1};

  int levels() const { return static_cast<int>(channels.size()); }
  int max_stride() const { return 1 << (levels() + 1); }

  /// `channel_divisor` is the head count of any downstream attention that
  /// splits these channels.
  void validate(int channel_divisor = 1) const {
    if (channels.empty()) throw ConfigError("backbone: empty channel schedule");
    if (blocks.size() != channels.size())
      throw ConfigError("backbone: blocks_per_stage has " + std::to_string(blocks.size()) + " entries for " +
                        std::to_string(channels.size()) + " stages");
    if (stem_channels <= 0) throw ConfigError("backbone: stem_channels must be positive");
    for (std::size_t i = 0; i < channels.size(); ++i) {
      if (channels[i] <= 0 || blocks[i] <= 0) throw ConfigError("backbone: channels and blocks must be positive");
      if (i > 0 && channels[i] < channels[i - 1]) throw ConfigError("backbone: channels must be non-decreasing");
      if (channel_divisor > 0 && channels[i] % channel_divisor != 0)
        throw ConfigError("backbone: stage width " + std::to_string(channels[i]) + " not divisible by " +
                          std::to_string(channel_divisor) + " attention heads");
    }
  }
};

/// Normalized [3, H, W] network input.
struct ImageTensor {
  Tensor values;

  int height() const { return values.dim(1); }
  int width() const { return values.dim(2); }

  /// `image` is a planar 3-channel grid in [0, 1].
  static ImageTensor from_grid(const Grid<double>& image, double mean, double stddev) {
    std::vector<double> v(image.data.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = (image.data[i] - mean) / stddev;
    return {Tensor({3, image.height, image.width}, std::move(v))};
  }
};

struct MultiScaleFeatures {
  std::vector<Tensor> levels;  // level i: [C_i, H / S_i, W / S_i]
  std::vector<int> strides;

  int size() const { return static_cast<int>(levels.size()); }
  int channels(int i) const { return levels[static_cast<std::size_t>(i)].dim(0); }
};

inline int level_stride(int level_index) { return 1 << (level_index + 2); }

/// Pre-norm residual block: x + W2 gelu(W1 dwconv3x3(norm(x))).
struct ResidualBlock {
  ChannelNorm norm;
  Tensor dw_weight;  // [C, 3, 3]
  Tensor dw_bias;
  PointwiseConv expand;
  PointwiseConv project;

  static ResidualBlock create(ParamStore& store, const std::string& name, int c, ParamGroup group) {
    ResidualBlock b;
    b.norm = ChannelNorm::create(store, name + ".norm", c, group);
    b.dw_weight = store.create(name + ".dw.weight", {c, 3, 3}, group, Init::xavier(9, 9));
    b.dw_bias = store.create(name + ".dw.bias", {c}, group, Init::zeros());
    b.expand = PointwiseConv::create(store, name + ".expand", c, 2 * c, group);
    b.project = PointwiseConv::create(store, name + ".project", 2 * c, c, group);
    return b;
  }

  Tensor operator()(const Tensor& x) const {
    auto y = depthwise_conv2d(norm(x), dw_weight, dw_bias);
    return add(x, project(gelu(expand(y))));
  }
};

class Backbone {
 public:
  static Backbone create(ParamStore& store, const std::string& name, const BackboneConfig& cfg,
                         ParamGroup group = ParamGroup::kBackbone) {
    cfg.validate();
    Backbone b;
    b.cfg_ = cfg;
    const int stem = cfg.stem_channels;
    b.stem_weight_ = store.create(name + ".stem.weight", {stem, 3, 4, 4}, group, Init::xavier(3 * 16, stem));
    b.stem_bias_ = store.create(name + ".stem.bias", {stem}, group, Init::zeros());
    b.stem_norm_ = ChannelNorm::create(store, name + ".stem.norm", stem, group);
    int prev = stem;
    for (int i = 0; i < cfg.levels(); ++i) {
      Stage s;
      const std::string sn = name + ".stage" + std::to_string(i + 1);
      const int c = cfg.channels[static_cast<std::size_t>(i)];
      if (i > 0) {
        s.down_norm = ChannelNorm::create(store, sn + ".down.norm", prev, group);
        s.down_weight = store.create(sn + ".down.weight", {c, prev, 2, 2}, group, Init::xavier(prev * 4, c));
        s.down_bias = store.create(sn + ".down.bias", {c}, group, Init::zeros());
      } else if (prev != c) {
        s.proj = PointwiseConv::create(store, sn + ".proj", prev, c, group);
      }
      for (int j = 0; j < cfg.blocks[static_cast<std::size_t>(i)]; ++j)
        s.blocks.push_back(ResidualBlock::create(store, sn + ".block" + std::to_string(j), c, group));
      b.stages_.push_back(std::move(s));
      prev = c;
    }
    return b;
  }

  const BackboneConfig& config() const { return cfg_; }

  /// Stride-4 patchify convolution before normalization.
  Tensor stem(const Tensor& image) const { return conv2d(image, stem_weight_, stem_bias_, 4, 0); }

  MultiScaleFeatures forward(const ImageTensor& image) const {
    const Tensor& x0 = image.values;
    if (x0.rank() != 3 || x0.dim(0) != 3) throw InputError("backbone: expected [3, H, W] input, got " + shape_str(x0.shape()));
    const int s = cfg_.max_stride();
    if (x0.dim(1) % s != 0 || x0.dim(2) % s != 0)
      throw InputError("backbone: input " + std::to_string(x0.dim(1)) + "x" + std::to_string(x0.dim(2)) +
                       " not divisible by " + std::to_string(s));
    MultiScaleFeatures out;
    Tensor x = stem_norm_(stem(x0));
    for (std::size_t i = 0; i < stages_.size(); ++i) {
      const Stage& st = stages_[i];
      if (i > 0) x = conv2d(st.down_norm(x), st.down_weight, st.down_bias, 2, 0);
      else if (st.proj.weight.defined()) x = st.proj(x);
      for (const auto& blk : st.blocks) x = blk(x);
      out.levels.push_back(x);
      out.strides.push_back(level_stride(static_cast<int>(i)));
    }
    return out;
  }

  const std::vector<ResidualBlock>& blocks(int stage) const { return stages_.at(static_cast<std::size_t>(stage)).blocks; }

 private:
  struct Stage {
    ChannelNorm down_norm;
    Tensor down_weight;
    Tensor down_bias;
    PointwiseConv proj;
    std::vector<ResidualBlock> blocks;
  };

  BackboneConfig cfg_;
  Tensor stem_weight_;
  Tensor stem_bias_;
  ChannelNorm stem_norm_;
  std::vector<Stage> stages_;
};

/// A backbone with its own parameter store, initialized from `seed`.
struct StandaloneBackbone {
  ParamStore store;
  Backbone net;
};

inline StandaloneBackbone build_backbone(const BackboneConfig& cfg, std::uint64_t seed, int channel_divisor = 1) {
  cfg.validate(channel_divisor);
  StandaloneBackbone b{ParamStore(seed), {}};
  b.net = Backbone::create(b.store, "backbone", cfg);
  return b;
}

}  // namespace roadformer
