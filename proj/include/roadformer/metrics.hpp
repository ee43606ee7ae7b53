// SPDX-License-Identifier: Apache-2.0
//
// Pixel-level evaluation: one-vs-rest confusion counts, Acc/Pre/Rec/IoU/Fsc,
// mIoU, and a 256-threshold sweep for MaxF and 11-point interpolated AP.
// Ratios with a zero denominator are std::nullopt ("undefined").
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "roadformer/errors.hpp"
#include "roadformer/grid.hpp"

namespace roadformer {

struct ClassCounts {
  std::int64_t tp = 0;
  std::int64_t fp = 0;
  std::int64_t fn = 0;
  std::int64_t tn = 0;

  ClassCounts& operator+=(const ClassCounts& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    tn += o.tn;
    return *this;
  }
  bool operator==(const ClassCounts&) const = default;
};

struct ConfusionCounts {
  std::vector<ClassCounts> classes;
  std::int64_t ignored = 0;
  std::int64_t total = 0;

  ConfusionCounts() = default;
  explicit ConfusionCounts(int num_classes) : classes(static_cast<std::size_t>(num_classes)) {}

  ConfusionCounts& operator+=(const ConfusionCounts& o) {
    if (classes.empty()) classes.resize(o.classes.size());
    if (classes.size() != o.classes.size()) throw InputError("confusion: class count mismatch");
    for (std::size_t c = 0; c < classes.size(); ++c) classes[c] += o.classes[c];
    ignored += o.ignored;
    total += o.total;
    return *this;
  }
};

/// Counts one-vs-rest outcomes per class; pixels whose ground truth is
/// `ignore_id` are excluded entirely.
inline ConfusionCounts confusion(const LabelMap& pred, const LabelMap& gt, int num_classes, int ignore_id = 255) {
  if (!pred.same_size(gt))
    throw InputError("confusion: prediction " + std::to_string(pred.height) + "x" + std::to_string(pred.width) +
                     " vs ground truth " + std::to_string(gt.height) + "x" + std::to_string(gt.width));
  ConfusionCounts out(num_classes);
  out.total = static_cast<std::int64_t>(gt.data.size());
  std::vector<std::int64_t> joint(static_cast<std::size_t>(num_classes) * num_classes, 0);
  std::vector<std::int64_t> gt_count(static_cast<std::size_t>(num_classes), 0);
  std::int64_t valid = 0;
  for (std::size_t i = 0; i < gt.data.size(); ++i) {
    const int g = gt.data[i], p = pred.data[i];
    if (g == ignore_id) {
      ++out.ignored;
      continue;
    }
    if (g >= num_classes) throw InputError("confusion: ground-truth class " + std::to_string(g) + " out of range");
    ++valid;
    ++gt_count[static_cast<std::size_t>(g)];
    if (p < num_classes) ++joint[static_cast<std::size_t>(g) * num_classes + p];
  }
  for (int c = 0; c < num_classes; ++c) {
    ClassCounts& k = out.classes[static_cast<std::size_t>(c)];
    std::int64_t predicted = 0;
    for (int g = 0; g < num_classes; ++g) predicted += joint[static_cast<std::size_t>(g) * num_classes + c];
    k.tp = joint[static_cast<std::size_t>(c) * num_classes + c];
    k.fp = predicted - k.tp;
    k.fn = gt_count[static_cast<std::size_t>(c)] - k.tp;
    k.tn = valid - k.tp - k.fp - k.fn;
  }
  return out;
}

struct ClassMetrics {
  std::optional<double> acc;
  std::optional<double> pre;
  std::optional<double> rec;
  std::optional<double> iou;
  std::optional<double> fsc;
};

namespace detail {

inline std::optional<double> ratio(std::int64_t num, std::int64_t den) {
  if (den == 0) return std::nullopt;
  return static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace detail

inline ClassMetrics class_metrics(const ClassCounts& k) {
  ClassMetrics m;
  m.acc = detail::ratio(k.tp + k.tn, k.tp + k.tn + k.fp + k.fn);
  m.pre = detail::ratio(k.tp, k.tp + k.fp);
  m.rec = detail::ratio(k.tp, k.tp + k.fn);
  m.iou = detail::ratio(k.tp, k.tp + k.fp + k.fn);
  if (m.pre && m.rec) m.fsc = (*m.pre + *m.rec) > 0.0 ? 2.0 * *m.pre * *m.rec / (*m.pre + *m.rec) : 0.0;
  return m;
}

/// Arithmetic mean of the defined values.
inline std::optional<double> miou(const std::vector<std::optional<double>>& ious) {
  double s = 0.0;
  int n = 0;
  for (const auto& v : ious)
    if (v) {
      s += *v;
      ++n;
    }
  if (n == 0) return std::nullopt;
  return s / n;
}

struct MetricsReport {
  std::vector<ClassMetrics> classes;
  std::optional<double> miou;
};

inline MetricsReport compute_metrics(const ConfusionCounts& counts) {
  MetricsReport r;
  std::vector<std::optional<double>> ious;
  for (const auto& k : counts.classes) {
    r.classes.push_back(class_metrics(k));
    ious.push_back(r.classes.back().iou);
  }
  r.miou = miou(ious);
  return r;
}

inline constexpr int kThresholdSteps = 256;

/// Largest i in [0, 255] with i/255 <= p, or -1 when p < 0.
inline int threshold_bin(double p) {
  int i = static_cast<int>(std::floor(p * 255.0));
  i = std::min(std::max(i, -1), 255);
  while (i < 255 && (i + 1) / 255.0 <= p) ++i;
  while (i >= 0 && i / 255.0 > p) --i;
  return i;
}

/// Counts of a binary detector `prob >= i/255` at every threshold index.
struct ThresholdSweep {
  std::array<ClassCounts, kThresholdSteps> counts{};

  ThresholdSweep& operator+=(const ThresholdSweep& o) {
    for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += o.counts[i];
    return *this;
  }
};

inline ThresholdSweep threshold_sweep(const Grid<double>& prob, const Mask& gt, const Mask* valid = nullptr) {
  if (!prob.same_size(gt) || (valid && !valid->same_size(gt)))
    throw InputError("threshold_sweep: probability map and ground truth sizes differ");
  std::array<std::int64_t, kThresholdSteps> pos{}, neg{};
  std::int64_t total_pos = 0, total_neg = 0;
  for (std::size_t i = 0; i < gt.data.size(); ++i) {
    if (valid && !valid->data[i]) continue;
    const int b = threshold_bin(prob.data[i]);
    if (gt.data[i]) {
      ++total_pos;
      if (b >= 0) ++pos[static_cast<std::size_t>(b)];
    } else {
      ++total_neg;
      if (b >= 0) ++neg[static_cast<std::size_t>(b)];
    }
  }
  ThresholdSweep s;
  std::int64_t tp = 0, fp = 0;
  for (int t = kThresholdSteps - 1; t >= 0; --t) {
    tp += pos[static_cast<std::size_t>(t)];
    fp += neg[static_cast<std::size_t>(t)];
    s.counts[static_cast<std::size_t>(t)] = {tp, fp, total_pos - tp, total_neg - fp};
  }
  return s;
}

struct MaxFAp {
  std::optional<double> max_f;
  std::optional<double> ap;
  double best_threshold = 0.0;
};

/// MaxF over the threshold grid and 11-point interpolated AP (precision at
/// recall r is the best precision over thresholds reaching recall >= r).
inline MaxFAp max_f_and_ap(const ThresholdSweep& sweep) {
  MaxFAp r;
  const ClassCounts& any = sweep.counts[0];
  if (any.tp + any.fn == 0) return r;
  for (int t = 0; t < kThresholdSteps; ++t) {
    const auto m = class_metrics(sweep.counts[static_cast<std::size_t>(t)]);
    if (m.fsc && (!r.max_f || *m.fsc > *r.max_f)) {
      r.max_f = m.fsc;
      r.best_threshold = t / 255.0;
    }
  }
  double ap = 0.0;
  for (int level = 0; level <= 10; ++level) {
    double best = 0.0;
    for (const auto& k : sweep.counts) {
      if (k.tp + k.fp == 0 || k.tp * 10 < level * (k.tp + k.fn)) continue;
      best = std::max(best, static_cast<double>(k.tp) / static_cast<double>(k.tp + k.fp));
    }
    ap += best;
  }
  r.ap = ap / 11.0;
  return r;
}

inline MaxFAp max_f_and_ap(const Grid<double>& prob, const Mask& gt, const Mask* valid = nullptr) {
  return max_f_and_ap(threshold_sweep(prob, gt, valid));
}

}  // namespace roadformer
