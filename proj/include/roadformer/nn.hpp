// SPDX-License-Identifier: Apache-2.0
//
// Parameter ownership and the small set of layers shared by every module.
#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "roadformer/ops.hpp"

namespace roadformer {

/// Optimizer parameter group. Backbone parameters train at a reduced rate.
enum class ParamGroup { kBackbone, kHead };

struct NamedParameter {
  std::string name;
  Tensor tensor;
  ParamGroup group;
};

/// Deterministic random source used for initialization and data shuffling.
/// Uniform and normal draws are computed here rather than through
/// std::*_distribution so streams are identical across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) { return engine_() % n; }
  std::uint64_t next() { return engine_(); }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

struct Init {
  enum class Kind { kZeros, kConstant, kUniform, kXavier, kNormal } kind = Kind::kZeros;
  double a = 0.0;  // constant value, uniform bound, or normal std
  int fan_in = 0;
  int fan_out = 0;

  static Init zeros() { return {}; }
  static Init constant(double v) { return {Kind::kConstant, v}; }
  static Init ones() { return constant(1.0); }
  static Init uniform(double bound) { return {Kind::kUniform, bound}; }
  static Init normal(double stddev) { return {Kind::kNormal, stddev}; }
  static Init xavier(int fan_in, int fan_out) { return {Kind::kXavier, 0.0, fan_in, fan_out}; }
};

class ParamStore {
 public:
  explicit ParamStore(std::uint64_t seed = 0) : rng_(seed) {}

  Tensor create(const std::string& name, Shape shape, ParamGroup group, Init init) {
    if (index_.count(name)) throw ConfigError("duplicate parameter name: " + name);
    std::vector<double> v(shape_numel(shape), 0.0);
    switch (init.kind) {
      case Init::Kind::kZeros:
        break;
      case Init::Kind::kConstant:
        std::fill(v.begin(), v.end(), init.a);
        break;
      case Init::Kind::kUniform:
        for (auto& x : v) x = rng_.uniform(-init.a, init.a);
        break;
      case Init::Kind::kXavier: {
        const double bound = std::sqrt(6.0 / (init.fan_in + init.fan_out));
        for (auto& x : v) x = rng_.uniform(-bound, bound);
        break;
      }
      case Init::Kind::kNormal:
        for (auto& x : v) x = init.a * rng_.normal();
        break;
    }
    Tensor t = Tensor::parameter(std::move(shape), std::move(v));
    index_[name] = params_.size();
    params_.push_back({name, t, group});
    return t;
  }

  const std::vector<NamedParameter>& parameters() const { return params_; }

  /// Null tensor when absent.
  Tensor find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? Tensor() : params_[it->second].tensor;
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.tensor.numel();
    return n;
  }

 private:
  std::vector<NamedParameter> params_;
  std::map<std::string, std::size_t> index_;
  Rng rng_;
};

/// Token-major affine map: [n, in] -> [n, out].
struct Linear {
  Tensor weight;  // [out, in]
  Tensor bias;    // [out]

  static Linear create(ParamStore& store, const std::string& name, int in, int out, ParamGroup group) {
    return {store.create(name + ".weight", {out, in}, group, Init::xavier(in, out)),
            store.create(name + ".bias", {out}, group, Init::zeros())};
  }

  Tensor operator()(const Tensor& x) const { return add_row_vector(matmul(x, weight, false, true), bias); }
};

/// 1x1 convolution on channel-major maps: [in, H, W] -> [out, H, W].
struct PointwiseConv {
  Tensor weight;  // [out, in]
  Tensor bias;    // [out]

  static PointwiseConv create(ParamStore& store, const std::string& name, int in, int out, ParamGroup group) {
    return {store.create(name + ".weight", {out, in}, group, Init::xavier(in, out)),
            store.create(name + ".bias", {out}, group, Init::zeros())};
  }

  int in_channels() const { return weight.dim(1); }
  int out_channels() const { return weight.dim(0); }

  Tensor operator()(const Tensor& x) const {
    Shape out_shape = x.shape();
    out_shape[0] = out_channels();
    const int cin = x.dim(0);
    const int spatial = static_cast<int>(x.numel() / static_cast<std::size_t>(cin));
    auto y = add_col_vector(matmul(weight, reshape(x, {cin, spatial})), bias);
    return reshape(y, std::move(out_shape));
  }
};

/// Normalizes each token (row) over channels, then applies a per-channel affine.
struct LayerNorm {
  Tensor gamma;
  Tensor beta;

  static LayerNorm create(ParamStore& store, const std::string& name, int channels, ParamGroup group) {
    return {store.create(name + ".gamma", {channels}, group, Init::ones()),
            store.create(name + ".beta", {channels}, group, Init::zeros())};
  }

  Tensor operator()(const Tensor& x) const {
    return add_row_vector(mul_row_vector(normalize_rows(x), gamma), beta);
  }
};

/// Normalizes each channel of a [C, ...] map over its spatial positions, then
/// applies a per-channel affine.
struct ChannelNorm {
  Tensor gamma;
  Tensor beta;

  static ChannelNorm create(ParamStore& store, const std::string& name, int channels, ParamGroup group) {
    return {store.create(name + ".gamma", {channels}, group, Init::ones()),
            store.create(name + ".beta", {channels}, group, Init::zeros())};
  }

  Tensor operator()(const Tensor& x) const {
    return add_col_vector(mul_col_vector(normalize_rows(x), gamma), beta);
  }
};

inline void fill(Tensor& t, double v) {
  for (auto& x : t.values_mut()) x = v;
}

}  // namespace roadformer
