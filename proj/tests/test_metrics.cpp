// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include "roadformer/metrics.hpp"
#include "roadformer/nn.hpp"

using namespace roadformer;

namespace {

LabelMap random_labels(Rng& rng, int h, int w, int k, bool ignore) {
  LabelMap m(h, w);
  for (auto& v : m.data) v = static_cast<std::uint8_t>(ignore && rng.uniform(0, 1) < 0.1 ? 255 : rng.below(static_cast<std::uint64_t>(k)));
  return m;
}

/// Per-threshold counts by direct comparison prob >= t/255.
std::vector<ClassCounts> sweep_oracle(const Grid<double>& prob, const Mask& gt, const Mask* valid) {
  std::vector<ClassCounts> out(256);
  for (int t = 0; t < 256; ++t)
    for (std::size_t i = 0; i < gt.data.size(); ++i) {
      if (valid && !valid->data[i]) continue;
      const bool on = prob.data[i] >= t / 255.0;
      auto& k = out[static_cast<std::size_t>(t)];
      if (on && gt.data[i]) ++k.tp;
      else if (on) ++k.fp;
      else if (gt.data[i]) ++k.fn;
      else ++k.tn;
    }
  return out;
}

}  // namespace

TEST(Confusion, PerfectAndComplement) {
  Rng rng(1);
  const auto gt = random_labels(rng, 8, 8, 3, false);
  const auto c = confusion(gt, gt, 3);
  for (const auto& k : c.classes) {
    EXPECT_EQ(k.fp, 0);
    EXPECT_EQ(k.fn, 0);
  }
  LabelMap bin(4, 4), comp(4, 4);
  for (std::size_t i = 0; i < 16; ++i) {
    bin.data[i] = static_cast<std::uint8_t>(i % 3 == 0);
    comp.data[i] = static_cast<std::uint8_t>(1 - bin.data[i]);
  }
  const auto d = confusion(comp, bin, 2);
  for (const auto& k : d.classes) {
    EXPECT_EQ(k.tp, 0);
    EXPECT_EQ(k.tn, 0);
  }
  EXPECT_THROW(confusion(LabelMap(2, 3), LabelMap(3, 2), 2), InputError);
}

TEST(Confusion, MatchesDoubleLoop) {
  Rng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    const int h = 1 + static_cast<int>(rng.below(32)), w = 1 + static_cast<int>(rng.below(32));
    const auto gt = random_labels(rng, h, w, 3, true), pred = random_labels(rng, h, w, 3, false);
    const auto c = confusion(pred, gt, 3);
    std::int64_t ignored = 0;
    for (int cls = 0; cls < 3; ++cls) {
      ClassCounts k;
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          if (gt.at(y, x) == 255) continue;
          const bool p = pred.at(y, x) == cls, g = gt.at(y, x) == cls;
          k.tp += p && g;
          k.fp += p && !g;
          k.fn += !p && g;
          k.tn += !p && !g;
        }
      EXPECT_EQ(c.classes[static_cast<std::size_t>(cls)], k);
      EXPECT_EQ(k.tp + k.fp + k.fn + k.tn + c.ignored, static_cast<std::int64_t>(h) * w);
    }
    for (auto v : gt.data) ignored += v == 255;
    EXPECT_EQ(c.ignored, ignored);
    EXPECT_EQ(c.total, static_cast<std::int64_t>(h) * w);
  }
}

TEST(Metrics, HandExample) {
  const auto m = class_metrics({90, 10, 10, 890});
  EXPECT_DOUBLE_EQ(*m.pre, 0.9);
  EXPECT_DOUBLE_EQ(*m.rec, 0.9);
  EXPECT_NEAR(*m.iou, 0.8182, 5e-5);
  EXPECT_DOUBLE_EQ(*m.iou, 90.0 / 110.0);
  EXPECT_NEAR(*m.fsc, 0.9, 1e-15);
  EXPECT_DOUBLE_EQ(*m.acc, 0.98);
}

TEST(Metrics, UndefinedAndPerfect) {
  const auto m = class_metrics({0, 0, 5, 10});
  EXPECT_FALSE(m.pre.has_value());
  EXPECT_FALSE(m.fsc.has_value());
  EXPECT_DOUBLE_EQ(*m.rec, 0.0);
  const auto p = class_metrics({7, 0, 0, 3});
  for (const auto& v : {p.acc, p.pre, p.rec, p.iou, p.fsc}) EXPECT_EQ(*v, 1.0);
}

TEST(Metrics, MiouExamples) {
  EXPECT_DOUBLE_EQ(*miou({1.0, 0.5}), 0.75);
  EXPECT_DOUBLE_EQ(*miou({0.3}), 0.3);
  EXPECT_DOUBLE_EQ(*miou({std::nullopt, 0.8}), 0.8);
  EXPECT_FALSE(miou({std::nullopt}).has_value());
}

TEST(Metrics, ReportInvariants) {
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    const auto gt = random_labels(rng, 16, 16, 3, true);
    auto pred = gt;
    for (auto& v : pred.data)
      if (v == 255 || rng.uniform(0, 1) < 0.4) v = static_cast<std::uint8_t>(rng.below(3));
    const auto r = compute_metrics(confusion(pred, gt, 3));
    for (const auto& m : r.classes) {
      if (!m.iou || !m.fsc) continue;
      EXPECT_NEAR(*m.fsc, 2.0 * *m.iou / (1.0 + *m.iou), 1e-12);
      EXPECT_LE(*m.iou, *m.fsc + 1e-15);
      EXPECT_LE(*m.fsc, 1.0);
      EXPECT_LE(*m.iou, std::min(*m.pre, *m.rec) + 1e-15);
    }
  }
}

TEST(ThresholdSweep, BinBoundaries) {
  EXPECT_EQ(threshold_bin(0.0), 0);
  EXPECT_EQ(threshold_bin(1.0), 255);
  EXPECT_EQ(threshold_bin(-0.1), -1);
  for (int i = 0; i < 256; ++i) EXPECT_EQ(threshold_bin(i / 255.0), i);
}

TEST(ThresholdSweep, MatchesPerThresholdCounting) {
  Rng rng(4);
  for (int trial = 0; trial < 30; ++trial) {
    const int h = 1 + static_cast<int>(rng.below(16)), w = 1 + static_cast<int>(rng.below(16));
    Grid<double> prob(h, w);
    Mask gt(h, w), valid(h, w);
    for (std::size_t i = 0; i < gt.data.size(); ++i) {
      // mix of grid-exact and generic values to exercise both sides of each threshold
      prob.data[i] = rng.uniform(0, 1) < 0.3 ? static_cast<double>(rng.below(256)) / 255.0 : rng.uniform(0, 1);
      gt.data[i] = static_cast<std::uint8_t>(rng.uniform(0, 1) < 0.4);
      valid.data[i] = static_cast<std::uint8_t>(rng.uniform(0, 1) < 0.9);
    }
    const auto s = threshold_sweep(prob, gt, &valid);
    const auto o = sweep_oracle(prob, gt, &valid);
    for (int t = 0; t < 256; ++t) EXPECT_EQ(s.counts[static_cast<std::size_t>(t)], o[static_cast<std::size_t>(t)]) << t;
    for (int t = 1; t < 256; ++t) {
      const auto a = s.counts[static_cast<std::size_t>(t - 1)], b = s.counts[static_cast<std::size_t>(t)];
      EXPECT_LE(b.tp, a.tp);  // recall never increases with the threshold
    }
  }
}

TEST(MaxFAp, PerfectSeparation) {
  Grid<double> prob(4, 4);
  Mask gt(4, 4);
  for (std::size_t i = 0; i < 16; ++i) {
    gt.data[i] = static_cast<std::uint8_t>(i % 2);
    prob.data[i] = gt.data[i];
  }
  const auto r = max_f_and_ap(prob, gt);
  EXPECT_EQ(*r.max_f, 1.0);
  EXPECT_EQ(*r.ap, 1.0);
}

TEST(MaxFAp, ConstantHalfOnHalfPositive) {
  Grid<double> prob(4, 4, 1, 0.5);
  Mask gt(4, 4);
  for (std::size_t i = 0; i < 8; ++i) gt.data[i] = 1;
  const auto r = max_f_and_ap(prob, gt);
  // every threshold that detects anything detects everything: P = 0.5, R = 1
  EXPECT_NEAR(*r.max_f, 2.0 * 0.5 / 1.5, 1e-15);
  EXPECT_NEAR(*r.ap, 0.5, 1e-15);
}

TEST(MaxFAp, AllNegativeIsUndefined) {
  Grid<double> prob(2, 2, 1, 0.7);
  const auto r = max_f_and_ap(prob, Mask(2, 2));
  EXPECT_FALSE(r.max_f.has_value());
  EXPECT_FALSE(r.ap.has_value());
}

TEST(MaxFAp, MatchesBruteForce) {
  Rng rng(5);
  for (int trial = 0; trial < 30; ++trial) {
    Grid<double> prob(16, 16);
    Mask gt(16, 16);
    for (std::size_t i = 0; i < gt.data.size(); ++i) {
      gt.data[i] = static_cast<std::uint8_t>(rng.uniform(0, 1) < 0.3);
      prob.data[i] = std::clamp(0.35 * gt.data[i] + rng.uniform(0, 0.65), 0.0, 1.0);
    }
    const auto o = sweep_oracle(prob, gt, nullptr);
    double best_f = 0.0;
    for (const auto& k : o) {
      if (k.tp + k.fp == 0) continue;
      const double p = static_cast<double>(k.tp) / (k.tp + k.fp), rec = static_cast<double>(k.tp) / (k.tp + k.fn);
      if (p + rec > 0) best_f = std::max(best_f, 2 * p * rec / (p + rec));
    }
    double ap = 0.0;
    for (int level = 0; level <= 10; ++level) {
      double best = 0.0;
      for (const auto& k : o) {
        if (k.tp + k.fp == 0) continue;
        if (static_cast<double>(k.tp) / (k.tp + k.fn) >= level / 10.0)
          best = std::max(best, static_cast<double>(k.tp) / (k.tp + k.fp));
      }
      ap += best;
    }
    const auto r = max_f_and_ap(prob, gt);
    EXPECT_EQ(*r.max_f, best_f);
    EXPECT_EQ(*r.ap, ap / 11.0);
  }
}
