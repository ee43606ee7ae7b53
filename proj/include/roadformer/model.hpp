// SPDX-License-Identifier: Apache-2.0
//
// Full network: duplex encoder (RGB and normal image), per-scale fusion,
// pixel decoder and query decoder. The RGB-only variant drops the normal
// encoder and the fusion block and reduces the RGB pyramid directly.
#pragma once

#include <string>
#include <vector>

#include "roadformer/backbone.hpp"
#include "roadformer/config.hpp"
#include "roadformer/data.hpp"
#include "roadformer/geometry.hpp"
#include "roadformer/hfsb.hpp"
#include "roadformer/pixel_decoder.hpp"
#include "roadformer/transformer_decoder.hpp"

namespace roadformer {

/// Network inputs derived from one sample.
struct ModelInput {
  ImageTensor rgb;
  ImageTensor normal;  // unused by the RGB-only variant
};

inline ModelInput make_input(const Grid<double>& rgb, const NormalMap& normals, double mean, double stddev) {
  return {ImageTensor::from_grid(rgb, mean, stddev), ImageTensor::from_grid(normals_to_image(normals), mean, stddev)};
}

inline ModelInput make_input(const Sample& s, const Config& cfg) {
  return make_input(s.rgb, s.normals, cfg.input_mean, cfg.input_std);
}

struct ForwardResult {
  MultiScaleFeatures rgb;
  MultiScaleFeatures normal;
  MultiScaleFeatures fused;
  MultiScaleFeatures reduced;
  PixelDecoderOutput pixel;
  std::vector<PredictionSet> predictions;  // initial, then one per decoder layer
};

class RoadFormer {
 public:
  explicit RoadFormer(const Config& cfg) : cfg_(cfg), store_(cfg.seed) {
    cfg_.validate();
    cfg_.backbone.validate(cfg_.pixel_decoder.heads);
    rgb_ = Backbone::create(store_, "encoder.rgb", cfg_.backbone);
    std::vector<int> fused_channels = cfg_.backbone.channels;
    if (cfg_.modality == Modality::kRgbNormal) {
      normal_ = Backbone::create(store_, "encoder.normal", cfg_.backbone);
      hfsb_ = Hfsb::create(store_, "hfsb", cfg_.fusion, cfg_.backbone.channels);
      for (auto& c : fused_channels) c *= 2;
    }
    reducer_ = ChannelReducer::create(store_, "pixel_decoder.reduce", fused_channels, cfg_.pixel_decoder.dim);
    pixel_ = PixelDecoder::create(store_, "pixel_decoder", cfg_.pixel_decoder);
    TransformerDecoderConfig dec = cfg_.decoder;
    dec.num_classes = cfg_.num_classes;
    decoder_ = TransformerDecoder::create(store_, "decoder", dec, cfg_.pixel_decoder.attention_levels);
  }

  RoadFormer(const RoadFormer&) = delete;
  RoadFormer& operator=(const RoadFormer&) = delete;
  RoadFormer(RoadFormer&&) = default;
  RoadFormer& operator=(RoadFormer&&) = default;

  const Config& config() const { return cfg_; }
  ParamStore& parameters() { return store_; }
  const ParamStore& parameters() const { return store_; }
  TransformerDecoder& decoder() { return decoder_; }
  const PixelDecoder& pixel_decoder() const { return pixel_; }

  ForwardResult forward(const ModelInput& in) const {
    ForwardResult r;
    r.rgb = rgb_.forward(in.rgb);
    if (cfg_.modality == Modality::kRgbNormal) {
      if (in.normal.values.shape() != in.rgb.values.shape())
        throw InputError("model: rgb " + shape_str(in.rgb.values.shape()) + " and normal " +
                         shape_str(in.normal.values.shape()) + " inputs differ in shape");
      r.normal = normal_.forward(in.normal);
      r.fused = hfsb_(r.rgb, r.normal);
    } else {
      r.fused = r.rgb;
    }
    r.reduced = reducer_(r.fused);
    r.pixel = pixel_(r.reduced);
    r.predictions = decoder_.decode(r.pixel);
    return r;
  }

  std::vector<PredictionSet> operator()(const ModelInput& in) const { return forward(in).predictions; }

 private:
  Config cfg_;
  ParamStore store_;
  Backbone rgb_;
  Backbone normal_;
  Hfsb hfsb_;
  ChannelReducer reducer_;
  PixelDecoder pixel_;
  TransformerDecoder decoder_;
};

}  // namespace roadformer
