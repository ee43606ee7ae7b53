// SPDX-License-Identifier: Apache-2.0
//
// Differentiable operations on Tensor. Layout conventions:
//   matrices are row-major [rows, cols];
//   feature maps are channel-major [C, H, W] (equivalently [C, H*W]);
//   token sequences are token-major [tokens, C].
#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "roadformer/tensor.hpp"

namespace roadformer {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;
using MatrixMap = Eigen::Map<RowMatrix>;

namespace detail {

inline void require(bool ok, const std::string& what) {
  if (!ok) throw InputError(what);
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require(a.shape() == b.shape(),
          std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

inline void require_rank(const Tensor& a, int rank, const char* op) {
  require(a.rank() == rank, std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                                shape_str(a.shape()));
}

inline ConstMatrixMap as_matrix(const std::vector<double>& v, int rows, int cols) {
  return ConstMatrixMap(v.data(), rows, cols);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return detail::make_result(a.shape(), std::move(out), {a, b}, [a, b](detail::Node& n) {
    if (double* ga = detail::grad_of(a)) for (std::size_t i = 0; i < n.grad.size(); ++i) ga[i] += n.grad[i];
    if (double* gb = detail::grad_of(b)) for (std::size_t i = 0; i < n.grad.size(); ++i) gb[i] += n.grad[i];
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return detail::make_result(a.shape(), std::move(out), {a, b}, [a, b](detail::Node& n) {
    if (double* ga = detail::grad_of(a)) for (std::size_t i = 0; i < n.grad.size(); ++i) ga[i] += n.grad[i];
    if (double* gb = detail::grad_of(b)) for (std::size_t i = 0; i < n.grad.size(); ++i) gb[i] -= n.grad[i];
  });
}

/// Hadamard product.
inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return detail::make_result(a.shape(), std::move(out), {a, b}, [a, b](detail::Node& n) {
    if (double* ga = detail::grad_of(a)) for (std::size_t i = 0; i < n.grad.size(); ++i) ga[i] += n.grad[i] * b[i];
    if (double* gb = detail::grad_of(b)) for (std::size_t i = 0; i < n.grad.size(); ++i) gb[i] += n.grad[i] * a[i];
  });
}

inline Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * s;
  return detail::make_result(a.shape(), std::move(out), {a}, [a, s](detail::Node& n) {
    double* ga = detail::grad_of(a);
    for (std::size_t i = 0; i < n.grad.size(); ++i) ga[i] += n.grad[i] * s;
  });
}

/// a * s where s is a one-element tensor (e.g. a learnable coefficient).
inline Tensor scale_by(const Tensor& a, const Tensor& s) {
  detail::require(s.numel() == 1, "scale_by: scale must have one element");
  const double sv = s[0];
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * sv;
  return detail::make_result(a.shape(), std::move(out), {a, s}, [a, s, sv](detail::Node& n) {
    if (double* ga = detail::grad_of(a)) for (std::size_t i = 0; i < n.grad.size(); ++i) ga[i] += n.grad[i] * sv;
    if (double* gs = detail::grad_of(s)) {
      double acc = 0.0;
      for (std::size_t i = 0; i < n.grad.size(); ++i) acc += n.grad[i] * a[i];
      gs[0] += acc;
    }
  });
}

inline Tensor relu(const Tensor& a) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] > 0.0 ? a[i] : 0.0;
  return detail::make_result(a.shape(), std::move(out), {a}, [a](detail::Node& n) {
    double* ga = detail::grad_of(a);
    for (std::size_t i = 0; i < n.grad.size(); ++i) if (a[i] > 0.0) ga[i] += n.grad[i];
  });
}

/// Exact (erf) GELU.
inline Tensor gelu(const Tensor& a) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = 0.5 * a[i] * (1.0 + std::erf(a[i] * (1.0 / std::numbers::sqrt2)));
  return detail::make_result(a.shape(), std::move(out), {a}, [a](detail::Node& n) {
    double* ga = detail::grad_of(a);
    constexpr double inv_sqrt_2pi = 0.3989422804014327;
    for (std::size_t i = 0; i < n.grad.size(); ++i) {
      const double x = a[i];
      const double d = 0.5 * (1.0 + std::erf(x * (1.0 / std::numbers::sqrt2))) + x * inv_sqrt_2pi * std::exp(-0.5 * x * x);
      ga[i] += n.grad[i] * d;
    }
  });
}

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline Tensor sigmoid(const Tensor& a) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = sigmoid(a[i]);
  auto y = out;
  return detail::make_result(a.shape(), std::move(out), {a}, [a, y = std::move(y)](detail::Node& n) {
    double* ga = detail::grad_of(a);
    for (std::size_t i = 0; i < n.grad.size(); ++i) ga[i] += n.grad[i] * y[i] * (1.0 - y[i]);
  });
}

// ---------------------------------------------------------------------------
// Shape manipulation

inline Tensor reshape(const Tensor& a, Shape shape) {
  detail::require(shape_numel(shape) == a.numel(),
                  "reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  return detail::make_result(std::move(shape), a.vec(), {a}, [a](detail::Node& n) {
    double* ga = detail::grad_of(a);
    for (std::size_t i = 0; i < n.grad.size(); ++i) ga[i] += n.grad[i];
  });
}

inline Tensor transpose(const Tensor& a) {
  detail::require_rank(a, 2, "transpose");
  const int r = a.dim(0), c = a.dim(1);
  std::vector<double> out(a.numel());
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out[static_cast<std::size_t>(j) * r + i] = a[static_cast<std::size_t>(i) * c + j];
  return detail::make_result({c, r}, std::move(out), {a}, [a, r, c](detail::Node& n) {
    double* ga = detail::grad_of(a);
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) ga[static_cast<std::size_t>(i) * c + j] += n.grad[static_cast<std::size_t>(j) * r + i];
  });
}

/// Concatenates along the leading dimension; trailing dimensions must agree.
inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  detail::require(!parts.empty(), "concat_rows: no inputs");
  Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
  int rows = 0;
  std::vector<double> out;
  for (const auto& p : parts) {
    Shape t(p.shape().begin() + 1, p.shape().end());
    detail::require(t == tail, "concat_rows: trailing shape mismatch " + shape_str(p.shape()));
    rows += p.dim(0);
    out.insert(out.end(), p.vec().begin(), p.vec().end());
  }
  Shape shape{rows};
  shape.insert(shape.end(), tail.begin(), tail.end());
  return detail::make_result(std::move(shape), std::move(out), parts, [parts](detail::Node& n) {
    std::size_t offset = 0;
    for (const auto& p : parts) {
      if (double* gp = detail::grad_of(p))
        for (std::size_t i = 0; i < p.numel(); ++i) gp[i] += n.grad[offset + i];
      offset += p.numel();
    }
  });
}

/// Rows [begin, end) along the leading dimension.
inline Tensor slice_rows(const Tensor& a, int begin, int end) {
  detail::require(0 <= begin && begin <= end && end <= a.dim(0), "slice_rows: bad range");
  const std::size_t stride = a.numel() / static_cast<std::size_t>(a.dim(0));
  Shape shape = a.shape();
  shape[0] = end - begin;
  std::vector<double> out(a.vec().begin() + static_cast<std::ptrdiff_t>(begin * stride),
                          a.vec().begin() + static_cast<std::ptrdiff_t>(end * stride));
  return detail::make_result(std::move(shape), std::move(out), {a}, [a, begin, stride](detail::Node& n) {
    double* ga = detail::grad_of(a) + static_cast<std::size_t>(begin) * stride;
    for (std::size_t i = 0; i < n.grad.size(); ++i) ga[i] += n.grad[i];
  });
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  detail::require(!parts.empty(), "concat_cols: no inputs");
  const int rows = parts[0].dim(0);
  int cols = 0;
  for (const auto& p : parts) {
    detail::require_rank(p, 2, "concat_cols");
    detail::require(p.dim(0) == rows, "concat_cols: row mismatch");
    cols += p.dim(1);
  }
  std::vector<double> out(static_cast<std::size_t>(rows) * cols);
  int c0 = 0;
  for (const auto& p : parts) {
    const int pc = p.dim(1);
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < pc; ++j)
        out[static_cast<std::size_t>(i) * cols + c0 + j] = p[static_cast<std::size_t>(i) * pc + j];
    c0 += pc;
  }
  return detail::make_result({rows, cols}, std::move(out), parts, [parts, rows, cols](detail::Node& n) {
    int c0 = 0;
    for (const auto& p : parts) {
      const int pc = p.dim(1);
      if (double* gp = detail::grad_of(p))
        for (int i = 0; i < rows; ++i)
          for (int j = 0; j < pc; ++j)
            gp[static_cast<std::size_t>(i) * pc + j] += n.grad[static_cast<std::size_t>(i) * cols + c0 + j];
      c0 += pc;
    }
  });
}

inline Tensor slice_cols(const Tensor& a, int begin, int end) {
  detail::require_rank(a, 2, "slice_cols");
  const int rows = a.dim(0), cols = a.dim(1), w = end - begin;
  detail::require(0 <= begin && begin <= end && end <= cols, "slice_cols: bad range");
  std::vector<double> out(static_cast<std::size_t>(rows) * w);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < w; ++j) out[static_cast<std::size_t>(i) * w + j] = a[static_cast<std::size_t>(i) * cols + begin + j];
  return detail::make_result({rows, w}, std::move(out), {a}, [a, rows, cols, begin, w](detail::Node& n) {
    double* ga = detail::grad_of(a);
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < w; ++j) ga[static_cast<std::size_t>(i) * cols + begin + j] += n.grad[static_cast<std::size_t>(i) * w + j];
  });
}

// ---------------------------------------------------------------------------
// Linear algebra and broadcasting

/// op(a) * op(b) where op transposes when the matching flag is set.
inline Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a = false, bool trans_b = false) {
  detail::require_rank(a, 2, "matmul");
  detail::require_rank(b, 2, "matmul");
  const int ar = a.dim(0), ac = a.dim(1), br = b.dim(0), bc = b.dim(1);
  const int m = trans_a ? ac : ar, k = trans_a ? ar : ac;
  const int kb = trans_b ? bc : br, n = trans_b ? br : bc;
  detail::require(k == kb, "matmul: inner dimension mismatch " + shape_str(a.shape()) + " x " +
                               shape_str(b.shape()));
  RowMatrix opa = trans_a ? RowMatrix(detail::as_matrix(a.vec(), ar, ac).transpose())
                          : RowMatrix(detail::as_matrix(a.vec(), ar, ac));
  RowMatrix opb = trans_b ? RowMatrix(detail::as_matrix(b.vec(), br, bc).transpose())
                          : RowMatrix(detail::as_matrix(b.vec(), br, bc));
  std::vector<double> out(static_cast<std::size_t>(m) * n);
  MatrixMap(out.data(), m, n).noalias() = opa * opb;
  return detail::make_result(
      {m, n}, std::move(out), {a, b},
      [a, b, opa = std::move(opa), opb = std::move(opb), trans_a, trans_b, m, n](detail::Node& node) {
        ConstMatrixMap g(node.grad.data(), m, n);
        if (double* ga = detail::grad_of(a)) {
          RowMatrix d = g * opb.transpose();
          if (trans_a) MatrixMap(ga, a.dim(0), a.dim(1)) += d.transpose();
          else MatrixMap(ga, a.dim(0), a.dim(1)) += d;
        }
        if (double* gb = detail::grad_of(b)) {
          RowMatrix d = opa.transpose() * g;
          if (trans_b) MatrixMap(gb, b.dim(0), b.dim(1)) += d.transpose();
          else MatrixMap(gb, b.dim(0), b.dim(1)) += d;
        }
      });
}

/// a[m,n] + v[n] broadcast over rows.
inline Tensor add_row_vector(const Tensor& a, const Tensor& v) {
  detail::require_rank(a, 2, "add_row_vector");
  const int m = a.dim(0), n = a.dim(1);
  detail::require(static_cast<int>(v.numel()) == n, "add_row_vector: length mismatch");
  std::vector<double> out(a.numel());
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out[static_cast<std::size_t>(i) * n + j] = a[static_cast<std::size_t>(i) * n + j] + v[j];
  return detail::make_result(a.shape(), std::move(out), {a, v}, [a, v, m, n](detail::Node& node) {
    if (double* ga = detail::grad_of(a)) for (std::size_t i = 0; i < node.grad.size(); ++i) ga[i] += node.grad[i];
    if (double* gv = detail::grad_of(v))
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) gv[j] += node.grad[static_cast<std::size_t>(i) * n + j];
  });
}

/// a[m,...] + v[m] broadcast over the trailing dimensions.
inline Tensor add_col_vector(const Tensor& a, const Tensor& v) {
  const int m = a.dim(0);
  const std::size_t n = a.numel() / static_cast<std::size_t>(m);
  detail::require(static_cast<int>(v.numel()) == m, "add_col_vector: length mismatch");
  std::vector<double> out(a.numel());
  for (int i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = a[i * n + j] + v[i];
  return detail::make_result(a.shape(), std::move(out), {a, v}, [a, v, m, n](detail::Node& node) {
    if (double* ga = detail::grad_of(a)) for (std::size_t i = 0; i < node.grad.size(); ++i) ga[i] += node.grad[i];
    if (double* gv = detail::grad_of(v))
      for (int i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gv[i] += node.grad[i * n + j];
  });
}

/// a[m,n] * v[n] broadcast over rows.
inline Tensor mul_row_vector(const Tensor& a, const Tensor& v) {
  detail::require_rank(a, 2, "mul_row_vector");
  const int m = a.dim(0), n = a.dim(1);
  detail::require(static_cast<int>(v.numel()) == n, "mul_row_vector: length mismatch");
  std::vector<double> out(a.numel());
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out[static_cast<std::size_t>(i) * n + j] = a[static_cast<std::size_t>(i) * n + j] * v[j];
  return detail::make_result(a.shape(), std::move(out), {a, v}, [a, v, m, n](detail::Node& node) {
    double* ga = detail::grad_of(a);
    double* gv = detail::grad_of(v);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) {
        const std::size_t k = static_cast<std::size_t>(i) * n + j;
        if (ga) ga[k] += node.grad[k] * v[j];
        if (gv) gv[j] += node.grad[k] * a[k];
      }
  });
}

/// a[m,...] * v[m] broadcast over the trailing dimensions.
inline Tensor mul_col_vector(const Tensor& a, const Tensor& v) {
  const int m = a.dim(0);
  const std::size_t n = a.numel() / static_cast<std::size_t>(m);
  detail::require(static_cast<int>(v.numel()) == m, "mul_col_vector: length mismatch");
  std::vector<double> out(a.numel());
  for (int i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = a[i * n + j] * v[i];
  return detail::make_result(a.shape(), std::move(out), {a, v}, [a, v, m, n](detail::Node& node) {
    double* ga = detail::grad_of(a);
    double* gv = detail::grad_of(v);
    for (int i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        const std::size_t k = i * n + j;
        if (ga) ga[k] += node.grad[k] * v[i];
        if (gv) gv[i] += node.grad[k] * a[k];
      }
  });
}

// ---------------------------------------------------------------------------
// Reductions and normalization

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.values()) s += v;
  return detail::make_result({1}, {s}, {a}, [a](detail::Node& n) {
    double* ga = detail::grad_of(a);
    for (std::size_t i = 0; i < a.numel(); ++i) ga[i] += n.grad[0];
  });
}

/// Mean of every row of a[m,...] over its trailing elements -> [m].
inline Tensor mean_cols(const Tensor& a) {
  const int m = a.dim(0);
  const std::size_t n = a.numel() / static_cast<std::size_t>(m);
  std::vector<double> out(static_cast<std::size_t>(m), 0.0);
  for (int i = 0; i < m; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += a[i * n + j];
    out[static_cast<std::size_t>(i)] = s / static_cast<double>(n);
  }
  return detail::make_result({m}, std::move(out), {a}, [a, m, n](detail::Node& node) {
    double* ga = detail::grad_of(a);
    for (int i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += node.grad[static_cast<std::size_t>(i)] / static_cast<double>(n);
  });
}

/// Row-wise softmax of a[m,n]. Entries equal to -inf get weight 0; a row
/// that is entirely -inf yields an all-zero row.
inline Tensor softmax_rows(const Tensor& a) {
  detail::require_rank(a, 2, "softmax_rows");
  const int m = a.dim(0), n = a.dim(1);
  std::vector<double> out(a.numel(), 0.0);
  for (int i = 0; i < m; ++i) {
    const double* x = a.vec().data() + static_cast<std::size_t>(i) * n;
    double* y = out.data() + static_cast<std::size_t>(i) * n;
    const double mx = *std::max_element(x, x + n);
    if (mx == -std::numeric_limits<double>::infinity()) continue;
    double s = 0.0;
    for (int j = 0; j < n; ++j) s += (y[j] = std::exp(x[j] - mx));
    for (int j = 0; j < n; ++j) y[j] /= s;
  }
  auto y = out;
  return detail::make_result(a.shape(), std::move(out), {a}, [a, y = std::move(y), m, n](detail::Node& node) {
    double* ga = detail::grad_of(a);
    for (int i = 0; i < m; ++i) {
      const std::size_t r = static_cast<std::size_t>(i) * n;
      double dot = 0.0;
      for (int j = 0; j < n; ++j) dot += node.grad[r + j] * y[r + j];
      for (int j = 0; j < n; ++j) ga[r + j] += y[r + j] * (node.grad[r + j] - dot);
    }
  });
}

/// Standardizes every row of a[m,...] over its trailing elements (biased
/// variance, no affine).
inline Tensor normalize_rows(const Tensor& a, double eps = 1e-5) {
  const int m = a.dim(0);
  const std::size_t n = a.numel() / static_cast<std::size_t>(m);
  std::vector<double> out(a.numel());
  std::vector<double> inv_std(static_cast<std::size_t>(m));
  for (int i = 0; i < m; ++i) {
    const double* x = a.vec().data() + i * n;
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += x[j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (x[j] - mean) * (x[j] - mean);
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(i)] = is;
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = (x[j] - mean) * is;
  }
  auto y = out;
  return detail::make_result(
      a.shape(), std::move(out), {a}, [a, y = std::move(y), inv_std = std::move(inv_std), m, n](detail::Node& node) {
        double* ga = detail::grad_of(a);
        for (int i = 0; i < m; ++i) {
          const std::size_t r = i * n;
          double mg = 0.0, mgy = 0.0;
          for (std::size_t j = 0; j < n; ++j) {
            mg += node.grad[r + j];
            mgy += node.grad[r + j] * y[r + j];
          }
          mg /= static_cast<double>(n);
          mgy /= static_cast<double>(n);
          for (std::size_t j = 0; j < n; ++j)
            ga[r + j] += inv_std[static_cast<std::size_t>(i)] * (node.grad[r + j] - mg - y[r + j] * mgy);
        }
      });
}

// ---------------------------------------------------------------------------
// Convolution and resampling on [C, H, W] maps

/// Dense 2-D convolution. `weight` is [Cout, Cin, k, k]; `bias` may be undefined.
inline Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, int stride, int pad) {
  detail::require_rank(x, 3, "conv2d");
  detail::require_rank(weight, 4, "conv2d");
  const int cin = x.dim(0), h = x.dim(1), w = x.dim(2);
  const int cout = weight.dim(0), k = weight.dim(2);
  detail::require(weight.dim(1) == cin && weight.dim(3) == k, "conv2d: weight shape " + shape_str(weight.shape()) +
                                                                  " incompatible with input " + shape_str(x.shape()));
  const int ho = (h + 2 * pad - k) / stride + 1, wo = (w + 2 * pad - k) / stride + 1;
  detail::require(ho > 0 && wo > 0, "conv2d: empty output");
  const int rows = cin * k * k, cols = ho * wo;
  RowMatrix col = RowMatrix::Zero(rows, cols);
  for (int c = 0; c < cin; ++c)
    for (int ki = 0; ki < k; ++ki)
      for (int kj = 0; kj < k; ++kj) {
        const int r = (c * k + ki) * k + kj;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride - pad + ki;
          if (iy < 0 || iy >= h) continue;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride - pad + kj;
            if (ix < 0 || ix >= w) continue;
            col(r, oy * wo + ox) = x[(static_cast<std::size_t>(c) * h + iy) * w + ix];
          }
        }
      }
  std::vector<double> out(static_cast<std::size_t>(cout) * cols);
  MatrixMap o(out.data(), cout, cols);
  o.noalias() = detail::as_matrix(weight.vec(), cout, rows) * col;
  if (bias.defined()) {
    detail::require(static_cast<int>(bias.numel()) == cout, "conv2d: bias length mismatch");
    for (int c = 0; c < cout; ++c) o.row(c).array() += bias[static_cast<std::size_t>(c)];
  }
  std::vector<Tensor> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return detail::make_result(
      {cout, ho, wo}, std::move(out), inputs,
      [x, weight, bias, col = std::move(col), cin, h, w, k, stride, pad, ho, wo, cout, rows, cols](detail::Node& n) {
        ConstMatrixMap g(n.grad.data(), cout, cols);
        if (double* gw = detail::grad_of(weight)) MatrixMap(gw, cout, rows).noalias() += g * col.transpose();
        if (bias.defined())
          if (double* gb = detail::grad_of(bias))
            for (int c = 0; c < cout; ++c) gb[c] += g.row(c).sum();
        if (double* gx = detail::grad_of(x)) {
          RowMatrix dcol = detail::as_matrix(weight.vec(), cout, rows).transpose() * g;
          for (int c = 0; c < cin; ++c)
            for (int ki = 0; ki < k; ++ki)
              for (int kj = 0; kj < k; ++kj) {
                const int r = (c * k + ki) * k + kj;
                for (int oy = 0; oy < ho; ++oy) {
                  const int iy = oy * stride - pad + ki;
                  if (iy < 0 || iy >= h) continue;
                  for (int ox = 0; ox < wo; ++ox) {
                    const int ix = ox * stride - pad + kj;
                    if (ix < 0 || ix >= w) continue;
                    gx[(static_cast<std::size_t>(c) * h + iy) * w + ix] += dcol(r, oy * wo + ox);
                  }
                }
              }
        }
      });
}

/// Depthwise k x k convolution, stride 1, "same" zero padding. `weight` is [C, k, k].
inline Tensor depthwise_conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  detail::require_rank(x, 3, "depthwise_conv2d");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2), k = weight.dim(1), pad = k / 2;
  detail::require(weight.dim(0) == c && bias.numel() == static_cast<std::size_t>(c), "depthwise_conv2d: shape mismatch");
  std::vector<double> out(x.numel());
  for (int ch = 0; ch < c; ++ch) {
    const double* wk = weight.vec().data() + static_cast<std::size_t>(ch) * k * k;
    const double* xi = x.vec().data() + static_cast<std::size_t>(ch) * h * w;
    double* o = out.data() + static_cast<std::size_t>(ch) * h * w;
    for (int y = 0; y < h; ++y)
      for (int xx = 0; xx < w; ++xx) {
        double s = bias[static_cast<std::size_t>(ch)];
        for (int ki = 0; ki < k; ++ki) {
          const int iy = y - pad + ki;
          if (iy < 0 || iy >= h) continue;
          for (int kj = 0; kj < k; ++kj) {
            const int ix = xx - pad + kj;
            if (ix < 0 || ix >= w) continue;
            s += wk[ki * k + kj] * xi[iy * w + ix];
          }
        }
        o[y * w + xx] = s;
      }
  }
  return detail::make_result(x.shape(), std::move(out), {x, weight, bias}, [x, weight, bias, c, h, w, k, pad](detail::Node& n) {
    double* gx = detail::grad_of(x);
    double* gw = detail::grad_of(weight);
    double* gb = detail::grad_of(bias);
    for (int ch = 0; ch < c; ++ch) {
      const double* wk = weight.vec().data() + static_cast<std::size_t>(ch) * k * k;
      const double* xi = x.vec().data() + static_cast<std::size_t>(ch) * h * w;
      const double* g = n.grad.data() + static_cast<std::size_t>(ch) * h * w;
      for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < w; ++xx) {
          const double gy = g[y * w + xx];
          if (gb) gb[ch] += gy;
          for (int ki = 0; ki < k; ++ki) {
            const int iy = y - pad + ki;
            if (iy < 0 || iy >= h) continue;
            for (int kj = 0; kj < k; ++kj) {
              const int ix = xx - pad + kj;
              if (ix < 0 || ix >= w) continue;
              if (gw) gw[static_cast<std::size_t>(ch) * k * k + ki * k + kj] += gy * xi[iy * w + ix];
              if (gx) gx[static_cast<std::size_t>(ch) * h * w + iy * w + ix] += gy * wk[ki * k + kj];
            }
          }
        }
    }
  });
}

namespace detail {

struct LerpTap {
  int i0, i1;
  double w1;  // weight of i1; i0 gets 1 - w1
};

/// Half-pixel-centre linear interpolation taps (align_corners = false).
inline std::vector<LerpTap> lerp_taps(int in, int out) {
  std::vector<LerpTap> taps(static_cast<std::size_t>(out));
  const double ratio = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    double src = (o + 0.5) * ratio - 0.5;
    if (src < 0.0) src = 0.0;
    int i0 = static_cast<int>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    const int i1 = std::min(i0 + 1, in - 1);
    taps[static_cast<std::size_t>(o)] = {i0, i1, src - i0};
  }
  return taps;
}

}  // namespace detail

/// Bilinear resize of a [C, H, W] buffer (no autograd).
inline std::vector<double> resize_bilinear(std::span<const double> x, int c, int h, int w, int ho, int wo) {
  const auto ty = detail::lerp_taps(h, ho), tx = detail::lerp_taps(w, wo);
  std::vector<double> out(static_cast<std::size_t>(c) * ho * wo);
  for (int ch = 0; ch < c; ++ch) {
    const double* xi = x.data() + static_cast<std::size_t>(ch) * h * w;
    for (int oy = 0; oy < ho; ++oy) {
      const auto& a = ty[static_cast<std::size_t>(oy)];
      for (int ox = 0; ox < wo; ++ox) {
        const auto& b = tx[static_cast<std::size_t>(ox)];
        const double top = xi[a.i0 * w + b.i0] * (1 - b.w1) + xi[a.i0 * w + b.i1] * b.w1;
        const double bot = xi[a.i1 * w + b.i0] * (1 - b.w1) + xi[a.i1 * w + b.i1] * b.w1;
        out[(static_cast<std::size_t>(ch) * ho + oy) * wo + ox] = top * (1 - a.w1) + bot * a.w1;
      }
    }
  }
  return out;
}

inline Tensor upsample_bilinear(const Tensor& x, int ho, int wo) {
  detail::require_rank(x, 3, "upsample_bilinear");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  auto out = resize_bilinear(x.values(), c, h, w, ho, wo);
  return detail::make_result({c, ho, wo}, std::move(out), {x}, [x, c, h, w, ho, wo](detail::Node& n) {
    const auto ty = detail::lerp_taps(h, ho), tx = detail::lerp_taps(w, wo);
    double* gx = detail::grad_of(x);
    for (int ch = 0; ch < c; ++ch) {
      double* gi = gx + static_cast<std::size_t>(ch) * h * w;
      for (int oy = 0; oy < ho; ++oy) {
        const auto& a = ty[static_cast<std::size_t>(oy)];
        for (int ox = 0; ox < wo; ++ox) {
          const auto& b = tx[static_cast<std::size_t>(ox)];
          const double g = n.grad[(static_cast<std::size_t>(ch) * ho + oy) * wo + ox];
          gi[a.i0 * w + b.i0] += g * (1 - a.w1) * (1 - b.w1);
          gi[a.i0 * w + b.i1] += g * (1 - a.w1) * b.w1;
          gi[a.i1 * w + b.i0] += g * a.w1 * (1 - b.w1);
          gi[a.i1 * w + b.i1] += g * a.w1 * b.w1;
        }
      }
    }
  });
}

}  // namespace roadformer
