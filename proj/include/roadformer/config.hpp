// SPDX-License-Identifier: Apache-2.0
//
// Run configuration: flat `key = value` text with dotted keys. Every key has a
// default, unknown keys are rejected, and to_text() emits the fully resolved
// set in a fixed order.
#pragma once

#include <cstdint>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "roadformer/backbone.hpp"
#include "roadformer/errors.hpp"
#include "roadformer/hfsb.hpp"
#include "roadformer/losses.hpp"
#include "roadformer/pixel_decoder.hpp"
#include "roadformer/transformer_decoder.hpp"

namespace roadformer {

enum class Modality { kRgb, kRgbNormal };

inline std::string to_string(Modality m) { return m == Modality::kRgb ? "rgb" : "rgb-normal"; }

inline Modality parse_modality(const std::string& s) {
  if (s == "rgb") return Modality::kRgb;
  if (s == "rgb-normal") return Modality::kRgbNormal;
  throw ConfigError("unknown modality '" + s + "' (expected rgb or rgb-normal)");
}

struct OptimConfig {
  double lr = 1e-4;
  double weight_decay = 0.05;
  double backbone_lr_mult = 0.1;
  double poly_power = 0.9;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double grad_clip = 1.0;  // global gradient norm; 0 disables
};

struct TrainConfig {
  int steps = 500;
  int batch_size = 2;
  int eval_every = 0;  // 0 disables periodic validation
  std::string out = "run";
  std::string log;  // defaults to <out>/train.jsonl
};

struct DataConfig {
  std::string root = "data";
  std::string train_split = "train";
  std::string val_split = "val";
  int ignore_id = 255;
};

struct Config {
  std::uint64_t seed = 0;
  int num_classes = 3;
  DataConfig data;
  double input_mean = 0.5;
  double input_std = 0.25;
  Modality modality = Modality::kRgbNormal;
  BackboneConfig backbone;
  FusionMode fusion = FusionMode::kHffmFfrm;
  PixelDecoderConfig pixel_decoder;
  TransformerDecoderConfig decoder;
  LossWeights loss;
  OptimConfig optim;
  TrainConfig train;

  void set(const std::string& key, const std::string& value) { field(key).set(*this, value); }
  std::string get(const std::string& key) const { return field(key).get(*this); }

  static std::vector<std::string> keys() {
    std::vector<std::string> k;
    for (const auto& f : fields()) k.push_back(f.key);
    return k;
  }

  void validate() const {
    backbone.validate();
    pixel_decoder.validate();
    decoder.validate(pixel_decoder.attention_levels);
    loss.validate();
    if (decoder.dim != pixel_decoder.dim)
      throw ConfigError("decoder.dim (" + std::to_string(decoder.dim) + ") must equal pixel_decoder.dim (" +
                        std::to_string(pixel_decoder.dim) + ")");
    if (num_classes < 1 || num_classes > 254) throw ConfigError("num_classes must be in [1, 254]");
    if (backbone.levels() != pixel_decoder.attention_levels + 1)
      throw ConfigError("backbone must have exactly " + std::to_string(pixel_decoder.attention_levels + 1) + " stages");
    if (!(input_std > 0)) throw ConfigError("input.std must be positive");
    if (!(optim.lr >= 0) || optim.weight_decay < 0 || optim.backbone_lr_mult < 0 || optim.grad_clip < 0 ||
        !(optim.beta1 >= 0 && optim.beta1 < 1) || !(optim.beta2 >= 0 && optim.beta2 < 1) || !(optim.eps > 0))
      throw ConfigError("invalid optimizer settings");
    if (train.steps < 0 || train.batch_size < 1 || train.eval_every < 0) throw ConfigError("invalid train settings");
  }

  /// Applies `key = value` lines; '#' starts a comment.
  void apply_text(const std::string& text, const std::string& source = "config") {
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
      const auto first = line.find_first_not_of(" \t\r");
      if (first == std::string::npos) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos)
        throw ConfigError(source + ":" + std::to_string(lineno) + ": expected 'key = value'");
      set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
  }

  /// Applies a single `key=value` override.
  void apply_override(const std::string& kv) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + kv + "' is not key=value");
    set(trim(kv.substr(0, eq)), trim(kv.substr(eq + 1)));
  }

  static Config parse(const std::string& text, const std::string& source = "config") {
    Config c;
    c.apply_text(text, source);
    c.validate();
    return c;
  }

  static Config load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str(), path);
  }

  std::string to_text() const {
    std::string out;
    for (const auto& f : fields()) out += f.key + " = " + f.get(*this) + "\n";
    return out;
  }

 private:
  struct Field {
    std::string key;
    std::function<void(Config&, const std::string&)> set;
    std::function<std::string(const Config&)> get;
  };

  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  }

  static double to_double(const std::string& key, const std::string& v) {
    std::size_t pos = 0;
    double d = 0.0;
    try {
      d = std::stod(v, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos != v.size() || v.empty()) throw ConfigError(key + ": '" + v + "' is not a number");
    return d;
  }

  static long long to_int(const std::string& key, const std::string& v) {
    std::size_t pos = 0;
    long long i = 0;
    try {
      i = std::stoll(v, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos != v.size() || v.empty()) throw ConfigError(key + ": '" + v + "' is not an integer");
    return i;
  }

  static std::string fmt(double d) {
    std::ostringstream s;
    s.precision(17);
    s << d;
    return s.str();
  }

  static std::vector<int> to_list(const std::string& key, const std::string& v) {
    std::vector<int> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(static_cast<int>(to_int(key, trim(item))));
    if (out.empty()) throw ConfigError(key + ": empty list");
    return out;
  }

  static std::string fmt_list(const std::vector<int>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
    return s;
  }

  template <typename Member>
  static Field int_field(std::string key, Member m) {
    return {key, [m, key](Config& c, const std::string& v) { m(c) = static_cast<std::remove_reference_t<decltype(m(c))>>(to_int(key, v)); },
            [m](const Config& c) { return std::to_string(m(const_cast<Config&>(c))); }};
  }

  template <typename Member>
  static Field real_field(std::string key, Member m) {
    return {key, [m, key](Config& c, const std::string& v) { m(c) = to_double(key, v); },
            [m](const Config& c) { return fmt(m(const_cast<Config&>(c))); }};
  }

  template <typename Member>
  static Field string_field(std::string key, Member m) {
    return {key, [m](Config& c, const std::string& v) { m(c) = v; },
            [m](const Config& c) { return m(const_cast<Config&>(c)); }};
  }

  template <typename Member>
  static Field list_field(std::string key, Member m) {
    return {key, [m, key](Config& c, const std::string& v) { m(c) = to_list(key, v); },
            [m](const Config& c) { return fmt_list(m(const_cast<Config&>(c))); }};
  }

  static const std::vector<Field>& fields() {
    static const std::vector<Field> f = {
        {"seed", [](Config& c, const std::string& v) {
           if (!v.empty() && v[0] == '-') throw ConfigError("seed: must be non-negative");
           c.seed = static_cast<std::uint64_t>(to_int("seed", v)); },
         [](const Config& c) { return std::to_string(c.seed); }},
        int_field("num_classes", [](Config& c) -> int& { return c.num_classes; }),
        string_field("data.root", [](Config& c) -> std::string& { return c.data.root; }),
        string_field("data.train_split", [](Config& c) -> std::string& { return c.data.train_split; }),
        string_field("data.val_split", [](Config& c) -> std::string& { return c.data.val_split; }),
        int_field("data.ignore_id", [](Config& c) -> int& { return c.data.ignore_id; }),
        real_field("input.mean", [](Config& c) -> double& { return c.input_mean; }),
        real_field("input.std", [](Config& c) -> double& { return c.input_std; }),
        {"model.modality", [](Config& c, const std::string& v) { c.modality = parse_modality(v); },
         [](const Config& c) { return to_string(c.modality); }},
        int_field("backbone.stem_channels", [](Config& c) -> int& { return c.backbone.stem_channels; }),
        list_field("backbone.channels", [](Config& c) -> std::vector<int>& { return c.backbone.channels; }),
        list_field("backbone.blocks", [](Config& c) -> std::vector<int>& { return c.backbone.blocks; }),
        {"fusion.mode", [](Config& c, const std::string& v) { c.fusion = parse_fusion_mode(v); },
         [](const Config& c) { return to_string(c.fusion); }},
        int_field("pixel_decoder.dim", [](Config& c) -> int& { return c.pixel_decoder.dim; }),
        int_field("pixel_decoder.layers", [](Config& c) -> int& { return c.pixel_decoder.layers; }),
        int_field("pixel_decoder.heads", [](Config& c) -> int& { return c.pixel_decoder.heads; }),
        int_field("pixel_decoder.points", [](Config& c) -> int& { return c.pixel_decoder.points; }),
        int_field("pixel_decoder.ffn_dim", [](Config& c) -> int& { return c.pixel_decoder.ffn_dim; }),
        int_field("decoder.num_queries", [](Config& c) -> int& { return c.decoder.num_queries; }),
        int_field("decoder.layers", [](Config& c) -> int& { return c.decoder.layers; }),
        int_field("decoder.dim", [](Config& c) -> int& { return c.decoder.dim; }),
        int_field("decoder.heads", [](Config& c) -> int& { return c.decoder.heads; }),
        int_field("decoder.ffn_dim", [](Config& c) -> int& { return c.decoder.ffn_dim; }),
        real_field("loss.mask", [](Config& c) -> double& { return c.loss.mask; }),
        real_field("loss.ce", [](Config& c) -> double& { return c.loss.ce; }),
        real_field("loss.dice", [](Config& c) -> double& { return c.loss.dice; }),
        real_field("loss.cls", [](Config& c) -> double& { return c.loss.cls; }),
        real_field("loss.no_object", [](Config& c) -> double& { return c.loss.no_object; }),
        real_field("optim.lr", [](Config& c) -> double& { return c.optim.lr; }),
        real_field("optim.weight_decay", [](Config& c) -> double& { return c.optim.weight_decay; }),
        real_field("optim.backbone_lr_mult", [](Config& c) -> double& { return c.optim.backbone_lr_mult; }),
        real_field("optim.poly_power", [](Config& c) -> double& { return c.optim.poly_power; }),
        real_field("optim.beta1", [](Config& c) -> double& { return c.optim.beta1; }),
        real_field("optim.beta2", [](Config& c) -> double& { return c.optim.beta2; }),
        real_field("optim.eps", [](Config& c) -> double& { return c.optim.eps; }),
        real_field("optim.grad_clip", [](Config& c) -> double& { return c.optim.grad_clip; }),
        int_field("train.steps", [](Config& c) -> int& { return c.train.steps; }),
        int_field("train.batch_size", [](Config& c) -> int& { return c.train.batch_size; }),
        int_field("train.eval_every", [](Config& c) -> int& { return c.train.eval_every; }),
        string_field("train.out", [](Config& c) -> std::string& { return c.train.out; }),
        string_field("train.log", [](Config& c) -> std::string& { return c.train.log; }),
    };
    return f;
  }

  static const Field& field(const std::string& key) {
    for (const auto& f : fields())
      if (f.key == key) return f;
    throw ConfigError("unknown config key '" + key + "'");
  }
};

}  // namespace roadformer
