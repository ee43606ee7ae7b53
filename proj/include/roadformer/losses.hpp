// SPDX-License-Identifier: Apache-2.0
//
// Set-prediction objective: bipartite matching of queries to ground-truth
// class segments, then
//
//   L = lambda_mask (lambda_ce L_ce + lambda_dice L_dice) + lambda_cls L_cls
//
// per decoder output, summed over outputs (deep supervision).
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "roadformer/grid.hpp"
#include "roadformer/transformer_decoder.hpp"

namespace roadformer {

inline constexpr double kDiceEpsilon = 1.0;

struct GroundTruthSegments {
  std::vector<int> classes;  // class id per segment, ascending
  std::vector<Mask> masks;   // binary, at the mask-logit resolution
  Mask valid;                // 0 where the ground truth is ignored; empty means all valid

  int size() const { return static_cast<int>(classes.size()); }
  const Mask* valid_mask() const { return valid.data.empty() ? nullptr : &valid; }
};

struct LossWeights {
  double mask = 1.0;
  double ce = 5.0;
  double dice = 5.0;
  double cls = 2.0;
  double no_object = 0.1;

  void validate() const {
    if (mask < 0 || ce < 0 || dice < 0 || cls < 0 || no_object < 0)
      throw ConfigError("loss weights must be non-negative");
    if (mask == 0 && ce == 0 && dice == 0 && cls == 0) throw ConfigError("loss weights are all zero");
  }
};

struct MatchResult {
  std::vector<int> assignment;  // segment index -> query index
  double total_cost = 0.0;
};

/// Downsamples `label` by `factor` with a per-block majority vote (ties go
/// to the lower class id; ignore loses ties) and splits it into one binary
/// mask per present class. Blocks won by ignore are marked invalid.
inline GroundTruthSegments label_to_segments(const LabelMap& label, int num_classes, std::uint8_t ignore_id,
                                             int factor = 4) {
  if (label.height % factor != 0 || label.width % factor != 0)
    throw InputError("label_to_segments: label " + std::to_string(label.height) + "x" + std::to_string(label.width) +
                     " not divisible by " + std::to_string(factor));
  const int h = label.height / factor, w = label.width / factor;
  LabelMap down(h, w);
  Mask valid(h, w);
  std::vector<int> counts(static_cast<std::size_t>(num_classes) + 1);
  for (int by = 0; by < h; ++by)
    for (int bx = 0; bx < w; ++bx) {
      std::fill(counts.begin(), counts.end(), 0);
      for (int y = by * factor; y < (by + 1) * factor; ++y)
        for (int x = bx * factor; x < (bx + 1) * factor; ++x) {
          const int v = label.at(y, x);
          if (v == ignore_id) ++counts[static_cast<std::size_t>(num_classes)];
          else if (v < num_classes) ++counts[static_cast<std::size_t>(v)];
          else throw InputError("label_to_segments: label value " + std::to_string(v) + " out of range");
        }
      const int best = static_cast<int>(std::max_element(counts.begin(), counts.end()) - counts.begin());
      down.at(by, bx) = static_cast<std::uint8_t>(best);
      valid.at(by, bx) = best < num_classes ? 1 : 0;
    }
  GroundTruthSegments gt;
  gt.valid = valid;
  for (int c = 0; c < num_classes; ++c) {
    Mask m(h, w);
    bool present = false;
    for (std::size_t i = 0; i < m.data.size(); ++i)
      if (valid.data[i] && down.data[i] == c) {
        m.data[i] = 1;
        present = true;
      }
    if (present) {
      gt.classes.push_back(c);
      gt.masks.push_back(std::move(m));
    }
  }
  return gt;
}

namespace detail {

inline double bce_term(double x, int g) { return std::max(x, 0.0) - x * g + std::log1p(std::exp(-std::abs(x))); }

inline void require_mask_sizes(std::size_t n, const Mask& gt, const Mask* valid, const char* op) {
  if (gt.data.size() != n || (valid && valid->data.size() != n))
    throw InputError(std::string(op) + ": prediction and mask sizes differ");
}

}  // namespace detail

/// 1 - (2 sum p g + eps) / (sum p + sum g + eps) over valid pixels.
inline double dice_loss(std::span<const double> prob, const Mask& gt, const Mask* valid = nullptr) {
  detail::require_mask_sizes(prob.size(), gt, valid, "dice_loss");
  double inter = 0.0, total = 0.0;
  for (std::size_t i = 0; i < prob.size(); ++i) {
    if (valid && !valid->data[i]) continue;
    inter += prob[i] * gt.data[i];
    total += prob[i] + gt.data[i];
  }
  return 1.0 - (2.0 * inter + kDiceEpsilon) / (total + kDiceEpsilon);
}

/// Mean binary cross-entropy on logits over valid pixels (0 when none are valid).
inline double bce_mask_loss(std::span<const double> logits, const Mask& gt, const Mask* valid = nullptr) {
  detail::require_mask_sizes(logits.size(), gt, valid, "bce_mask_loss");
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (valid && !valid->data[i]) continue;
    s += detail::bce_term(logits[i], gt.data[i]);
    ++n;
  }
  return n ? s / static_cast<double>(n) : 0.0;
}

/// Differentiable dice loss of sigmoid(logits) against `gt`.
inline Tensor dice_loss_logits(const Tensor& logits, const Mask& gt, const Mask* valid = nullptr) {
  detail::require_mask_sizes(logits.numel(), gt, valid, "dice_loss");
  std::vector<double> p(logits.numel());
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = sigmoid(logits[i]);
  const double loss = dice_loss(p, gt, valid);
  double inter = 0.0, total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (valid && !valid->data[i]) continue;
    inter += p[i] * gt.data[i];
    total += p[i] + gt.data[i];
  }
  Mask g = gt;
  Mask v = valid ? *valid : Mask();
  return detail::make_result({1}, {loss}, {logits}, [logits, p = std::move(p), g, v, inter, total](detail::Node& n) {
    double* gl = detail::grad_of(logits);
    const double den = total + kDiceEpsilon, num = 2.0 * inter + kDiceEpsilon;
    for (std::size_t i = 0; i < p.size(); ++i) {
      if (!v.data.empty() && !v.data[i]) continue;
      const double dp = -(2.0 * g.data[i] * den - num) / (den * den);
      gl[i] += n.grad[0] * dp * p[i] * (1.0 - p[i]);
    }
  });
}

/// Differentiable mean binary cross-entropy on logits.
inline Tensor bce_mask_loss_logits(const Tensor& logits, const Mask& gt, const Mask* valid = nullptr) {
  const double loss = bce_mask_loss(logits.values(), gt, valid);
  std::size_t count = 0;
  for (std::size_t i = 0; i < logits.numel(); ++i) count += (!valid || valid->data[i]) ? 1 : 0;
  Mask g = gt;
  Mask v = valid ? *valid : Mask();
  return detail::make_result({1}, {loss}, {logits}, [logits, g, v, count](detail::Node& n) {
    if (count == 0) return;
    double* gl = detail::grad_of(logits);
    for (std::size_t i = 0; i < logits.numel(); ++i) {
      if (!v.data.empty() && !v.data[i]) continue;
      gl[i] += n.grad[0] * (sigmoid(logits[i]) - g.data[i]) / static_cast<double>(count);
    }
  });
}

/// Mean over rows of weight[i] * -log softmax(logits[i])[target[i]].
inline Tensor weighted_cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                                     const std::vector<double>& weights) {
  detail::require_rank(logits, 2, "weighted_cross_entropy");
  const int n = logits.dim(0), k = logits.dim(1);
  detail::require(static_cast<int>(targets.size()) == n && static_cast<int>(weights.size()) == n,
                  "weighted_cross_entropy: target count mismatch");
  std::vector<double> prob(logits.numel());
  double loss = 0.0;
  for (int i = 0; i < n; ++i) {
    const double* x = logits.vec().data() + static_cast<std::size_t>(i) * k;
    double* p = prob.data() + static_cast<std::size_t>(i) * k;
    const double mx = *std::max_element(x, x + k);
    double z = 0.0;
    for (int c = 0; c < k; ++c) z += p[c] = std::exp(x[c] - mx);
    for (int c = 0; c < k; ++c) p[c] /= z;
    const int t = targets[static_cast<std::size_t>(i)];
    loss += weights[static_cast<std::size_t>(i)] * (std::log(z) + mx - x[t]);
  }
  loss /= n;
  return detail::make_result({1}, {loss}, {logits}, [logits, prob = std::move(prob), targets, weights, n, k](detail::Node& node) {
    double* g = detail::grad_of(logits);
    for (int i = 0; i < n; ++i) {
      const double s = node.grad[0] * weights[static_cast<std::size_t>(i)] / n;
      for (int c = 0; c < k; ++c) {
        const std::size_t j = static_cast<std::size_t>(i) * k + c;
        g[j] += s * (prob[j] - (c == targets[static_cast<std::size_t>(i)] ? 1.0 : 0.0));
      }
    }
  });
}

/// Matched queries target their segment's class; the rest target no-object
/// (last column) with weight `no_object_weight`.
inline Tensor classification_loss(const Tensor& class_logits, const MatchResult& match,
                                  const std::vector<int>& segment_classes, double no_object_weight) {
  const int n = class_logits.dim(0), no_object = class_logits.dim(1) - 1;
  std::vector<int> targets(static_cast<std::size_t>(n), no_object);
  std::vector<double> weights(static_cast<std::size_t>(n), no_object_weight);
  for (std::size_t s = 0; s < match.assignment.size(); ++s) {
    const auto q = static_cast<std::size_t>(match.assignment[s]);
    targets[q] = segment_classes[s];
    weights[q] = 1.0;
  }
  return weighted_cross_entropy(class_logits, targets, weights);
}

/// Minimum-cost injective assignment of rows to columns (rows <= cols);
/// `cost` is row-major. Returns the column of every row.
inline std::vector<int> solve_assignment(const std::vector<double>& cost, int rows, int cols) {
  if (rows > cols) throw ConfigError("assignment: more rows (" + std::to_string(rows) + ") than columns (" +
                                     std::to_string(cols) + ")");
  if (rows == 0) return {};
  for (double c : cost)
    if (!std::isfinite(c)) throw InputError("assignment: non-finite cost");
  constexpr double inf = std::numeric_limits<double>::infinity();
  // Shortest augmenting path with potentials; 1-based with a virtual column 0.
  std::vector<double> u(static_cast<std::size_t>(rows) + 1, 0.0), v(static_cast<std::size_t>(cols) + 1, 0.0);
  std::vector<int> owner(static_cast<std::size_t>(cols) + 1, 0), way(static_cast<std::size_t>(cols) + 1, 0);
  for (int i = 1; i <= rows; ++i) {
    owner[0] = i;
    int j0 = 0;
    std::vector<double> minv(static_cast<std::size_t>(cols) + 1, inf);
    std::vector<char> used(static_cast<std::size_t>(cols) + 1, 0);
    do {
      used[static_cast<std::size_t>(j0)] = 1;
      const int i0 = owner[static_cast<std::size_t>(j0)];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= cols; ++j) {
        if (used[static_cast<std::size_t>(j)]) continue;
        const double cur = cost[static_cast<std::size_t>(i0 - 1) * cols + (j - 1)] - u[static_cast<std::size_t>(i0)] -
                           v[static_cast<std::size_t>(j)];
        if (cur < minv[static_cast<std::size_t>(j)]) {
          minv[static_cast<std::size_t>(j)] = cur;
          way[static_cast<std::size_t>(j)] = j0;
        }
        if (minv[static_cast<std::size_t>(j)] < delta) {
          delta = minv[static_cast<std::size_t>(j)];
          j1 = j;
        }
      }
      for (int j = 0; j <= cols; ++j) {
        if (used[static_cast<std::size_t>(j)]) {
          u[static_cast<std::size_t>(owner[static_cast<std::size_t>(j)])] += delta;
          v[static_cast<std::size_t>(j)] -= delta;
        } else {
          minv[static_cast<std::size_t>(j)] -= delta;
        }
      }
      j0 = j1;
    } while (owner[static_cast<std::size_t>(j0)] != 0);
    do {
      const int j1 = way[static_cast<std::size_t>(j0)];
      owner[static_cast<std::size_t>(j0)] = owner[static_cast<std::size_t>(j1)];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> col_of(static_cast<std::size_t>(rows), -1);
  for (int j = 1; j <= cols; ++j)
    if (owner[static_cast<std::size_t>(j)] > 0) col_of[static_cast<std::size_t>(owner[static_cast<std::size_t>(j)] - 1)] = j - 1;
  return col_of;
}

/// Pairwise matching cost [segments, queries], row-major.
inline std::vector<double> matching_costs(const PredictionSet& pred, const GroundTruthSegments& gt, const LossWeights& w) {
  const int n = pred.num_queries(), k1 = pred.class_logits.dim(1), s = gt.size();
  const std::size_t p = pred.mask_logits.numel() / static_cast<std::size_t>(n);
  std::vector<double> probs(static_cast<std::size_t>(n) * k1);
  for (int q = 0; q < n; ++q) {
    const double* x = pred.class_logits.vec().data() + static_cast<std::size_t>(q) * k1;
    const double mx = *std::max_element(x, x + k1);
    double z = 0.0;
    for (int c = 0; c < k1; ++c) z += probs[static_cast<std::size_t>(q) * k1 + c] = std::exp(x[c] - mx);
    for (int c = 0; c < k1; ++c) probs[static_cast<std::size_t>(q) * k1 + c] /= z;
  }
  std::vector<double> cost(static_cast<std::size_t>(s) * n);
  std::vector<double> sig(p);
  for (int q = 0; q < n; ++q) {
    std::span<const double> logits(pred.mask_logits.vec().data() + q * p, p);
    for (std::size_t i = 0; i < p; ++i) sig[i] = sigmoid(logits[i]);
    for (int si = 0; si < s; ++si) {
      const auto& m = gt.masks[static_cast<std::size_t>(si)];
      const double mask_cost = w.ce * bce_mask_loss(logits, m, gt.valid_mask()) + w.dice * dice_loss(sig, m, gt.valid_mask());
      cost[static_cast<std::size_t>(si) * n + q] =
          -w.cls * probs[static_cast<std::size_t>(q) * k1 + gt.classes[static_cast<std::size_t>(si)]] + w.mask * mask_cost;
    }
  }
  return cost;
}

inline MatchResult hungarian_match(const PredictionSet& pred, const GroundTruthSegments& gt, const LossWeights& w) {
  const int n = pred.num_queries(), s = gt.size();
  if (s > n) throw ConfigError("hungarian_match: " + std::to_string(s) + " segments exceed " + std::to_string(n) + " queries");
  const auto cost = matching_costs(pred, gt, w);
  MatchResult r;
  r.assignment = solve_assignment(cost, s, n);
  for (int si = 0; si < s; ++si) r.total_cost += cost[static_cast<std::size_t>(si) * n + r.assignment[static_cast<std::size_t>(si)]];
  return r;
}

struct LayerLoss {
  double ce = 0.0;    // mean over matched pairs
  double dice = 0.0;  // mean over matched pairs
  double cls = 0.0;
  double total = 0.0;
  MatchResult match;
};

struct LossResult {
  Tensor total;
  std::vector<LayerLoss> layers;

  double ce_sum() const { return accumulate(&LayerLoss::ce); }
  double dice_sum() const { return accumulate(&LayerLoss::dice); }
  double cls_sum() const { return accumulate(&LayerLoss::cls); }

 private:
  double accumulate(double LayerLoss::*field) const {
    double s = 0.0;
    for (const auto& l : layers) s += l.*field;
    return s;
  }
};

/// Loss of one prediction set against `gt` under a fixed assignment.
inline Tensor layer_loss(const PredictionSet& pred, const GroundTruthSegments& gt, const LossWeights& w,
                         const MatchResult& match, LayerLoss* breakdown = nullptr) {
  const int n = pred.num_queries();
  const int p = static_cast<int>(pred.mask_logits.numel() / static_cast<std::size_t>(n));
  Tensor cls = classification_loss(pred.class_logits, match, gt.classes, w.no_object);
  Tensor total = scale(cls, w.cls);
  LayerLoss b;
  b.cls = cls.item();
  b.match = match;
  if (gt.size() > 0) {
    Tensor flat = reshape(pred.mask_logits, {n, p});
    std::vector<Tensor> ce_terms, dice_terms;
    for (int s = 0; s < gt.size(); ++s) {
      const int q = match.assignment[static_cast<std::size_t>(s)];
      Tensor row = slice_rows(flat, q, q + 1);
      ce_terms.push_back(bce_mask_loss_logits(row, gt.masks[static_cast<std::size_t>(s)], gt.valid_mask()));
      dice_terms.push_back(dice_loss_logits(row, gt.masks[static_cast<std::size_t>(s)], gt.valid_mask()));
    }
    const double inv = 1.0 / gt.size();
    Tensor ce = scale(sum(concat_rows(ce_terms)), inv);
    Tensor dice = scale(sum(concat_rows(dice_terms)), inv);
    b.ce = ce.item();
    b.dice = dice.item();
    total = add(total, scale(add(scale(ce, w.ce), scale(dice, w.dice)), w.mask));
  }
  b.total = total.item();
  if (breakdown) *breakdown = b;
  return total;
}

/// Matches every prediction set independently and sums the per-set losses.
inline LossResult total_loss(const std::vector<PredictionSet>& preds, const GroundTruthSegments& gt, const LossWeights& w) {
  if (preds.empty()) throw InputError("total_loss: no predictions");
  LossResult r;
  std::vector<Tensor> terms;
  for (const auto& pred : preds) {
    LayerLoss b;
    terms.push_back(layer_loss(pred, gt, w, hungarian_match(pred, gt, w), &b));
    r.layers.push_back(b);
  }
  r.total = sum(concat_rows(terms));
  return r;
}

}  // namespace roadformer
