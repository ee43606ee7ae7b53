// SPDX-License-Identifier: Apache-2.0
//
// Binary checkpoint: magic, format version, resolved config text, step,
// data-order seed, named parameters and AdamW moments. All integers are
// little-endian fixed width and doubles are raw IEEE-754, so the encoding
// of a loaded checkpoint is byte-identical to the original.
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "roadformer/config.hpp"
#include "roadformer/model.hpp"

namespace roadformer {

inline constexpr char kCheckpointMagic[8] = {'R', 'D', 'F', 'M', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct OptimizerState {
  std::int64_t t = 0;  // completed AdamW updates
  std::vector<std::vector<double>> m;  // aligned with ParamStore order; empty before the first update
  std::vector<std::vector<double>> v;
};

struct TrainState {
  std::int64_t step = 0;
  std::uint64_t data_seed = 0;  // batch order is a pure function of (data_seed, step)
  OptimizerState optim;
};

namespace detail {

static_assert(std::endian::native == std::endian::little, "checkpoint encoding assumes a little-endian host");

class Writer {
 public:
  void raw(const void* p, std::size_t n) { out_.append(static_cast<const char*>(p), n); }
  void u8(std::uint8_t v) { raw(&v, 1); }
  void u32(std::uint32_t v) { raw(&v, 4); }
  void i64(std::int64_t v) { raw(&v, 8); }
  void u64(std::uint64_t v) { raw(&v, 8); }
  void str(const std::string& s) {
    u64(s.size());
    raw(s.data(), s.size());
  }
  void doubles(const std::vector<double>& v) {
    u64(v.size());
    raw(v.data(), v.size() * sizeof(double));
  }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  void raw(void* p, std::size_t n) {
    if (n > bytes_.size() - pos_) throw FormatError("checkpoint is truncated");
    std::memcpy(p, bytes_.data() + pos_, n);
    pos_ += n;
  }
  std::uint8_t u8() { std::uint8_t v; raw(&v, 1); return v; }
  std::uint32_t u32() { std::uint32_t v; raw(&v, 4); return v; }
  std::int64_t i64() { std::int64_t v; raw(&v, 8); return v; }
  std::uint64_t u64() { std::uint64_t v; raw(&v, 8); return v; }
  std::string str() {
    const std::uint64_t n = u64();
    if (n > bytes_.size() - pos_) throw FormatError("checkpoint is truncated");
    std::string s(bytes_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  std::vector<double> doubles() {
    const std::uint64_t n = u64();
    if (n > (bytes_.size() - pos_) / sizeof(double)) throw FormatError("checkpoint is truncated");
    std::vector<double> v(n);
    raw(v.data(), n * sizeof(double));
    return v;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode_checkpoint(const RoadFormer& model, const TrainState& state) {
  detail::Writer w;
  w.raw(kCheckpointMagic, sizeof kCheckpointMagic);
  w.u32(kCheckpointVersion);
  w.str(model.config().to_text());
  w.i64(state.step);
  w.u64(state.data_seed);
  const auto& params = model.parameters().parameters();
  w.u64(params.size());
  for (const auto& p : params) {
    w.str(p.name);
    w.u32(static_cast<std::uint32_t>(p.tensor.rank()));
    for (int d : p.tensor.shape()) w.u32(static_cast<std::uint32_t>(d));
    w.doubles(p.tensor.vec());
  }
  const bool has_moments = state.optim.m.size() == params.size();
  w.i64(state.optim.t);
  w.u8(has_moments ? 1 : 0);
  if (has_moments)
    for (std::size_t i = 0; i < params.size(); ++i) {
      w.doubles(state.optim.m[i]);
      w.doubles(state.optim.v[i]);
    }
  return w.take();
}

struct LoadedCheckpoint {
  RoadFormer model;
  TrainState state;
};

inline LoadedCheckpoint decode_checkpoint(const std::string& bytes) {
  detail::Reader r(bytes);
  char magic[sizeof kCheckpointMagic];
  r.raw(magic, sizeof magic);
  if (std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0) throw FormatError("not a checkpoint file");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw FormatError("checkpoint version " + std::to_string(version) + " is not supported (expected version " +
                      std::to_string(kCheckpointVersion) + ")");
  const Config cfg = Config::parse(r.str(), "checkpoint config");
  TrainState state;
  state.step = r.i64();
  state.data_seed = r.u64();
  const std::uint64_t count = r.u64();
  std::map<std::string, std::pair<Shape, std::vector<double>>> stored;
  std::vector<std::string> order;
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name = r.str();
    Shape shape(r.u32());
    for (auto& d : shape) d = static_cast<int>(r.u32());
    auto values = r.doubles();
    order.push_back(name);
    stored[name] = {std::move(shape), std::move(values)};
  }
  LoadedCheckpoint out{RoadFormer(cfg), std::move(state)};
  const auto& params = out.model.parameters().parameters();
  for (const auto& p : params) {
    auto it = stored.find(p.name);
    if (it == stored.end()) throw FormatError("checkpoint is missing parameter '" + p.name + "'");
    if (it->second.first != p.tensor.shape() || it->second.second.size() != p.tensor.numel())
      throw FormatError("checkpoint parameter '" + p.name + "' has shape " + shape_str(it->second.first) +
                        ", model expects " + shape_str(p.tensor.shape()));
    Tensor t = p.tensor;
    std::copy(it->second.second.begin(), it->second.second.end(), t.values_mut().begin());
  }
  if (stored.size() != params.size())
    for (const auto& name : order)
      if (!out.model.parameters().find(name).defined())
        throw FormatError("checkpoint has unknown parameter '" + name + "'");
  out.state.optim.t = r.i64();
  if (r.u8()) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      out.state.optim.m.push_back(r.doubles());
      out.state.optim.v.push_back(r.doubles());
      if (out.state.optim.m.back().size() != params[i].tensor.numel() ||
          out.state.optim.v.back().size() != params[i].tensor.numel())
        throw FormatError("checkpoint optimizer state does not match parameter '" + params[i].name + "'");
    }
  }
  if (!r.done()) throw FormatError("checkpoint has trailing bytes");
  return out;
}

inline void save_checkpoint(const std::string& path, const RoadFormer& model, const TrainState& state) {
  const std::string bytes = encode_checkpoint(model, state);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing checkpoint " + path);
}

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return decode_checkpoint(ss.str());
}

}  // namespace roadformer
