// SPDX-License-Identifier: Apache-2.0
//
// Training, evaluation and prediction on top of RoadFormer: AdamW with
// decoupled weight decay, polynomial learning-rate decay, a reduced rate for
// encoder parameters, and global-norm gradient clipping.
#pragma once

#include <cmath>
#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "roadformer/checkpoint.hpp"
#include "roadformer/data.hpp"
#include "roadformer/losses.hpp"
#include "roadformer/metrics.hpp"
#include "roadformer/model.hpp"

namespace roadformer {

class TrainingError : public Error {
 public:
  using Error::Error;
};

/// lr0 * (1 - t / T)^power, clamped to 0 at and beyond T.
inline double poly_lr(double base, std::int64_t step, std::int64_t total, double power) {
  if (total <= 0 || step >= total) return 0.0;
  return base * std::pow(1.0 - static_cast<double>(step) / static_cast<double>(total), power);
}

inline double group_lr(const OptimConfig& o, ParamGroup g, double lr) {
  return g == ParamGroup::kBackbone ? lr * o.backbone_lr_mult : lr;
}

/// Decoupled weight decay applies to matrices and kernels only (rank >= 2),
/// not to biases, norm affines or scalar gates.
inline bool decays(const NamedParameter& p) { return p.tensor.rank() >= 2; }

/// Global L2 norm of all parameter gradients.
inline double grad_norm(const ParamStore& store) {
  double s = 0.0;
  for (const auto& p : store.parameters())
    for (double g : p.tensor.grad()) s += g * g;
  return std::sqrt(s);
}

inline void adamw_update(ParamStore& store, OptimizerState& st, const OptimConfig& o, double lr) {
  auto& params = store.parameters();
  if (st.m.size() != params.size()) {
    st.m.assign(params.size(), {});
    st.v.assign(params.size(), {});
    for (std::size_t i = 0; i < params.size(); ++i) {
      st.m[i].assign(params[i].tensor.numel(), 0.0);
      st.v[i].assign(params[i].tensor.numel(), 0.0);
    }
  }
  ++st.t;
  const double bc1 = 1.0 - std::pow(o.beta1, static_cast<double>(st.t));
  const double bc2 = 1.0 - std::pow(o.beta2, static_cast<double>(st.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor t = params[i].tensor;
    const auto g = t.grad();
    auto w = t.values_mut();
    const double a = group_lr(o, params[i].group, lr);
    const double wd = decays(params[i]) ? o.weight_decay : 0.0;
    auto& m = st.m[i];
    auto& v = st.v[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = g.empty() ? 0.0 : g[j];
      m[j] = o.beta1 * m[j] + (1.0 - o.beta1) * gj;
      v[j] = o.beta2 * v[j] + (1.0 - o.beta2) * gj * gj;
      w[j] -= a * wd * w[j];
      w[j] -= a * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + o.eps);
    }
  }
}

/// One sample ready for the network and the loss.
struct PreparedSample {
  std::string id;
  ModelInput input;
  GroundTruthSegments gt;
  LabelMap label;
};

inline PreparedSample prepare_sample(const Sample& s, const Config& cfg, std::string id = {}) {
  return {std::move(id), make_input(s, cfg),
          label_to_segments(s.label, cfg.num_classes, static_cast<std::uint8_t>(cfg.data.ignore_id)), s.label};
}

inline std::vector<PreparedSample> load_split(const DatasetManifest& m, const std::string& split, const Config& cfg) {
  const auto& ids = m.split(split);
  if (ids.empty()) throw InputError("split '" + split + "' is empty");
  if (m.num_classes() != cfg.num_classes)
    throw ConfigError("dataset has " + std::to_string(m.num_classes()) + " classes, model expects " +
                      std::to_string(cfg.num_classes));
  std::vector<PreparedSample> out;
  for (const auto& id : ids) out.push_back(prepare_sample(load_sample(m, id), cfg, id));
  return out;
}

/// Indices of the batch consumed at `step`: consecutive slices of a stream of
/// per-epoch permutations, each seeded from (data_seed, epoch).
inline std::vector<int> batch_indices(std::uint64_t data_seed, std::int64_t step, int batch, int n) {
  std::vector<int> out;
  std::vector<int> perm;
  std::int64_t cached_epoch = -1;
  for (int j = 0; j < batch; ++j) {
    const std::int64_t pos = step * batch + j, epoch = pos / n;
    if (epoch != cached_epoch) {
      perm.resize(static_cast<std::size_t>(n));
      for (int i = 0; i < n; ++i) perm[static_cast<std::size_t>(i)] = i;
      Rng rng(data_seed ^ (0x9E3779B97F4A7C15ULL * static_cast<std::uint64_t>(epoch + 1)));
      for (int i = n - 1; i > 0; --i) std::swap(perm[static_cast<std::size_t>(i)], perm[rng.below(static_cast<std::uint64_t>(i) + 1)]);
      cached_epoch = epoch;
    }
    out.push_back(perm[static_cast<std::size_t>(pos % n)]);
  }
  return out;
}

struct StepRecord {
  std::int64_t step = 0;
  double lr = 0.0;
  double loss = 0.0;
  double ce = 0.0;    // summed over decoder outputs, averaged over the batch
  double dice = 0.0;
  double cls = 0.0;
  double grad_norm = 0.0;

  nlohmann::json to_json() const {
    return {{"step", step}, {"lr", lr}, {"loss", loss}, {"loss_ce", ce}, {"loss_dice", dice}, {"loss_cls", cls},
            {"grad_norm", grad_norm}};
  }
};

/// Loss of one sample with gradients recorded.
inline LossResult sample_loss(const RoadFormer& model, const PreparedSample& s) {
  return total_loss(model(s.input), s.gt, model.config().loss);
}

class Trainer {
 public:
  Trainer(RoadFormer model, std::vector<PreparedSample> data, TrainState state = {})
      : model_(std::move(model)), data_(std::move(data)), state_(std::move(state)) {
    if (data_.empty()) throw InputError("trainer: no training samples");
    if (state_.step == 0 && state_.optim.t == 0) state_.data_seed = model_.config().seed;
  }

  explicit Trainer(const Config& cfg, std::vector<PreparedSample> data) : Trainer(RoadFormer(cfg), std::move(data)) {}

  RoadFormer& model() { return model_; }
  const RoadFormer& model() const { return model_; }
  const TrainState& state() const { return state_; }
  const std::vector<PreparedSample>& data() const { return data_; }

  double current_lr() const {
    const auto& c = model_.config();
    return poly_lr(c.optim.lr, state_.step, c.train.steps, c.optim.poly_power);
  }

  /// Forward, backward and one AdamW update on the next batch.
  StepRecord step() {
    const Config& c = model_.config();
    StepRecord rec;
    rec.step = state_.step;
    rec.lr = current_lr();
    ParamStore& store = model_.parameters();
    store.zero_grad();
    const auto idx = batch_indices(state_.data_seed, state_.step, c.train.batch_size, static_cast<int>(data_.size()));
    const double inv = 1.0 / static_cast<double>(idx.size());
    for (int i : idx) {
      const PreparedSample& s = data_[static_cast<std::size_t>(i)];
      const auto preds = model_(s.input);
      for (const auto& p : preds)
        for (const Tensor* t : {&p.class_logits, &p.mask_logits})
          for (double x : t->values())
            if (!std::isfinite(x))
              throw TrainingError("non-finite network output at step " + std::to_string(rec.step) + " (sample " +
                                  s.id + "): " + rec.to_json().dump());
      LossResult l = total_loss(preds, s.gt, c.loss);
      const double v = l.total.item();
      rec.loss += v * inv;
      rec.ce += l.ce_sum() * inv;
      rec.dice += l.dice_sum() * inv;
      rec.cls += l.cls_sum() * inv;
      if (!std::isfinite(v)) {
        throw TrainingError("non-finite loss at step " + std::to_string(rec.step) + " (sample " +
                            data_[static_cast<std::size_t>(i)].id + "): " + rec.to_json().dump());
      }
      scale(l.total, inv).backward();
    }
    rec.grad_norm = grad_norm(store);
    if (!std::isfinite(rec.grad_norm))
      throw TrainingError("non-finite gradient at step " + std::to_string(rec.step) + ": " + rec.to_json().dump());
    if (c.optim.grad_clip > 0 && rec.grad_norm > c.optim.grad_clip) {
      const double f = c.optim.grad_clip / rec.grad_norm;
      for (const auto& p : store.parameters()) {
        Tensor t = p.tensor;
        if (!t.grad().empty())
          for (double& g : t.grad_mut()) g *= f;
      }
    }
    adamw_update(store, state_.optim, c.optim, rec.lr);
    store.zero_grad();
    ++state_.step;
    return rec;
  }

 private:
  RoadFormer model_;
  std::vector<PreparedSample> data_;
  TrainState state_;
};

/// Per-pixel prediction for one input at full input resolution.
inline SemanticResult infer(const RoadFormer& model, const ModelInput& in) {
  NoGradGuard guard;
  const auto preds = model(in);
  return semantic_inference(preds.back(), in.rgb.height(), in.rgb.width());
}

struct EvalResult {
  ConfusionCounts counts;
  MetricsReport report;
  std::vector<MaxFAp> sweeps;  // per class, probability map vs one-vs-rest ground truth

  nlohmann::json to_json(const std::vector<ClassInfo>& classes = default_classes()) const {
    auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
    nlohmann::json j;
    j["miou"] = opt(report.miou);
    for (std::size_t c = 0; c < report.classes.size(); ++c) {
      const auto& m = report.classes[c];
      const std::string name = c < classes.size() ? classes[c].name : "class" + std::to_string(c);
      j["classes"][name] = {{"acc", opt(m.acc)}, {"pre", opt(m.pre)}, {"rec", opt(m.rec)}, {"iou", opt(m.iou)},
                            {"fsc", opt(m.fsc)}, {"maxf", opt(sweeps[c].max_f)}, {"ap", opt(sweeps[c].ap)}};
    }
    return j;
  }

  double iou(int c) const { return report.classes.at(static_cast<std::size_t>(c)).iou.value_or(0.0); }
};

inline EvalResult evaluate(const RoadFormer& model, const std::vector<PreparedSample>& samples) {
  if (samples.empty()) throw InputError("evaluate: no samples");
  const Config& cfg = model.config();
  const int k = cfg.num_classes;
  EvalResult r;
  r.counts = ConfusionCounts(k);
  std::vector<ThresholdSweep> sweeps(static_cast<std::size_t>(k));
  for (const auto& s : samples) {
    const SemanticResult sem = infer(model, s.input);
    r.counts += confusion(sem.labels, s.label, k, cfg.data.ignore_id);
    Mask valid(s.label.height, s.label.width);
    for (std::size_t i = 0; i < valid.data.size(); ++i) valid.data[i] = s.label.data[i] != cfg.data.ignore_id;
    for (int c = 0; c < k; ++c) {
      Grid<double> prob(s.label.height, s.label.width);
      Mask gt(s.label.height, s.label.width);
      for (std::size_t i = 0; i < gt.data.size(); ++i) {
        prob.data[i] = sem.probabilities.data[static_cast<std::size_t>(c) * gt.data.size() + i];
        gt.data[i] = s.label.data[i] == c;
      }
      sweeps[static_cast<std::size_t>(c)] += threshold_sweep(prob, gt, &valid);
    }
  }
  r.report = compute_metrics(r.counts);
  for (const auto& sw : sweeps) r.sweeps.push_back(max_f_and_ap(sw));
  return r;
}

/// Fixed-width text table: one row per class (Acc Pre Rec IoU Fsc MaxF AP, in
/// percent) then mIoU. Classes named in `hidden` are omitted from the rows
/// but still count towards mIoU.
inline std::string format_table(const EvalResult& r, const std::vector<ClassInfo>& classes,
                                const std::vector<std::string>& hidden = {}) {
  auto cell = [](const std::optional<double>& v) {
    char buf[16];
    if (v) std::snprintf(buf, sizeof buf, "%8.2f", 100.0 * *v);
    else std::snprintf(buf, sizeof buf, "%8s", "-");
    return std::string(buf);
  };
  std::string out = "class           Acc     Pre     Rec     IoU     Fsc    MaxF      AP\n";
  for (std::size_t c = 0; c < r.report.classes.size(); ++c) {
    const std::string name = c < classes.size() ? classes[c].name : "class" + std::to_string(c);
    if (std::find(hidden.begin(), hidden.end(), name) != hidden.end()) continue;
    const auto& m = r.report.classes[c];
    char label[16];
    std::snprintf(label, sizeof label, "%-12s", name.c_str());
    out += label + cell(m.acc) + cell(m.pre) + cell(m.rec) + cell(m.iou) + cell(m.fsc) + cell(r.sweeps[c].max_f) +
           cell(r.sweeps[c].ap) + "\n";
  }
  out += "mIoU        " + cell(r.report.miou) + "\n";
  return out;
}

struct RunResult {
  std::vector<StepRecord> history;
  EvalResult train_eval;
  std::optional<EvalResult> val_eval;
};

/// Trains for cfg.train.steps steps. `log` receives one JSON record per step
/// and per periodic evaluation.
inline RunResult train_model(Trainer& trainer, const std::vector<PreparedSample>* val,
                             const std::function<void(const nlohmann::json&)>& log = {}) {
  RunResult out;
  const Config& c = trainer.model().config();
  while (trainer.state().step < c.train.steps) {
    StepRecord r = trainer.step();
    out.history.push_back(r);
    if (log) log(r.to_json());
    if (val && c.train.eval_every > 0 && trainer.state().step % c.train.eval_every == 0) {
      auto e = evaluate(trainer.model(), *val);
      if (log) log({{"step", trainer.state().step}, {"eval", e.to_json()}});
    }
  }
  out.train_eval = evaluate(trainer.model(), trainer.data());
  if (val) out.val_eval = evaluate(trainer.model(), *val);
  return out;
}

// ---------------------------------------------------------------------------
// Prediction outputs

/// Pads a planar grid to (h, w) by edge replication.
template <typename T>
Grid<T> pad_edge(const Grid<T>& g, int h, int w) {
  Grid<T> out(h, w, g.channels);
  for (int c = 0; c < g.channels; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) out.at(y, x, c) = g.at(std::min(y, g.height - 1), std::min(x, g.width - 1), c);
  return out;
}

template <typename T>
Grid<T> crop(const Grid<T>& g, int h, int w) {
  Grid<T> out(h, w, g.channels);
  for (int c = 0; c < g.channels; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) out.at(y, x, c) = g.at(y, x, c);
  return out;
}

/// Runs the model on raw RGB + depth. With `pad`, inputs whose size is not a
/// multiple of the encoder stride are edge-padded and the output cropped back.
inline SemanticResult predict(const RoadFormer& model, const Grid<double>& rgb, const DepthMap& depth,
                              const CameraIntrinsics& intr, bool pad) {
  if (!rgb.same_size(depth.values)) throw InputError("predict: rgb and depth sizes differ");
  const int s = model.config().backbone.max_stride();
  const int h = rgb.height, w = rgb.width;
  int ph = h, pw = w;
  if (h % s != 0 || w % s != 0) {
    if (!pad)
      throw InputError("predict: input " + std::to_string(h) + "x" + std::to_string(w) + " not divisible by " +
                       std::to_string(s) + " (enable padding)");
    ph = (h + s - 1) / s * s;
    pw = (w + s - 1) / s * s;
  }
  const DepthMap d{pad_edge(depth.values, ph, pw), pad_edge(depth.valid, ph, pw)};
  const NormalMap normals = depth_to_normals(d, intr);
  const auto& c = model.config();
  SemanticResult r = infer(model, make_input(pad_edge(rgb, ph, pw), normals, c.input_mean, c.input_std));
  if (ph != h || pw != w) r = {crop(r.labels, h, w), crop(r.probabilities, h, w)};
  return r;
}

/// TP green, FP blue, FN red over a dimmed copy of `rgb` (planar bytes).
/// Foreground is every class except background (0).
inline Grid<std::uint8_t> overlay(const Grid<std::uint8_t>& rgb, const LabelMap& pred, const LabelMap& gt,
                                  int ignore_id = 255) {
  if (!pred.same_size(gt) || !rgb.same_size(gt)) throw InputError("overlay: size mismatch");
  Grid<std::uint8_t> out(gt.height, gt.width, 3);
  for (int y = 0; y < gt.height; ++y)
    for (int x = 0; x < gt.width; ++x) {
      const int g = gt.at(y, x), p = pred.at(y, x);
      Rgb8 color{static_cast<std::uint8_t>(rgb.at(y, x, 0) / 2), static_cast<std::uint8_t>(rgb.at(y, x, 1) / 2),
                 static_cast<std::uint8_t>(rgb.at(y, x, 2) / 2)};
      if (g != ignore_id) {
        if (g != kBackground && p == g) color = {0, 255, 0};
        else if (g != kBackground) color = {255, 0, 0};
        else if (p != kBackground) color = {0, 0, 255};
      }
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = color[static_cast<std::size_t>(c)];
    }
  return out;
}

/// Writes a C-order float64 .npy array.
inline void write_npy(const std::string& path, const std::vector<double>& data, const std::vector<int>& shape) {
  std::string dims;
  for (std::size_t i = 0; i < shape.size(); ++i) dims += std::to_string(shape[i]) + (shape.size() == 1 || i + 1 < shape.size() ? "," : "");
  std::string header = "{'descr': '<f8', 'fortran_order': False, 'shape': (" + dims + "), }";
  const std::size_t total = 10 + header.size() + 1;
  header.append((64 - total % 64) % 64, ' ');
  header += '\n';
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out.write("\x93NUMPY\x01\x00", 8);
  const std::uint16_t len = static_cast<std::uint16_t>(header.size());
  out.put(static_cast<char>(len & 0xff));
  out.put(static_cast<char>(len >> 8));
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(double)));
}

}  // namespace roadformer
