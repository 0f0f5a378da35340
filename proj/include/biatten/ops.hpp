#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <utility>
#include <vector>

#include "biatten/graph.hpp"
#include "biatten/tensor.hpp"

namespace biatten {

namespace detail {

template <typename T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
using MatMap = Eigen::Map<MatRM<T>>;

template <typename T>
using CMatMap = Eigen::Map<const MatRM<T>>;

template <typename T>
inline CMatMap<T> cmap(const std::vector<T>& v, std::size_t rows, std::size_t cols,
                       std::size_t offset = 0) {
  return CMatMap<T>(v.data() + offset, static_cast<Eigen::Index>(rows),
                    static_cast<Eigen::Index>(cols));
}

template <typename T>
inline MatMap<T> mmap(std::vector<T>& v, std::size_t rows, std::size_t cols,
                      std::size_t offset = 0) {
  return MatMap<T>(v.data() + offset, static_cast<Eigen::Index>(rows),
                   static_cast<Eigen::Index>(cols));
}

inline void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) {
    throw ShapeError(std::string(op) + ": operand shapes " + shape_str(a) + " and " +
                     shape_str(b) + " differ");
  }
}

// Gather 3x3 receptive fields of one sample into a (cin*9) x (oh*ow) matrix.
template <typename T>
inline void im2col_3x3(const T* x, std::size_t cin, std::size_t h, std::size_t w,
                       std::size_t oh, std::size_t ow, std::size_t stride, std::size_t pad,
                       T* cols) {
  const std::size_t p = oh * ow;
  for (std::size_t c = 0; c < cin; ++c) {
    for (std::size_t ky = 0; ky < 3; ++ky) {
      for (std::size_t kx = 0; kx < 3; ++kx) {
        T* row = cols + ((c * 3 + ky) * 3 + kx) * p;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const std::ptrdiff_t iy =
              static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
          T* dst = row + oy * ow;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) {
            std::fill(dst, dst + ow, T(0));
            continue;
          }
          const T* src = x + (c * h + static_cast<std::size_t>(iy)) * w;
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const std::ptrdiff_t ix =
                static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
            dst[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w))
                          ? T(0)
                          : src[static_cast<std::size_t>(ix)];
          }
        }
      }
    }
  }
}

// Scatter-add of column gradients back onto one sample's input gradient.
template <typename T>
inline void col2im_3x3(const T* cols, std::size_t cin, std::size_t h, std::size_t w,
                       std::size_t oh, std::size_t ow, std::size_t stride, std::size_t pad,
                       T* dx) {
  const std::size_t p = oh * ow;
  for (std::size_t c = 0; c < cin; ++c) {
    for (std::size_t ky = 0; ky < 3; ++ky) {
      for (std::size_t kx = 0; kx < 3; ++kx) {
        const T* row = cols + ((c * 3 + ky) * 3 + kx) * p;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const std::ptrdiff_t iy =
              static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
          T* drow = dx + (c * h + static_cast<std::size_t>(iy)) * w;
          const T* srow = row + oy * ow;
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const std::ptrdiff_t ix =
                static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
            drow[static_cast<std::size_t>(ix)] += srow[ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

template <typename T>
int add(Graph<T>& g, int a, int b) {
  const Tensor<T>& ta = g.value(a);
  const Tensor<T>& tb = g.value(b);
  detail::require_same_shape(ta.shape, tb.shape, "add");
  Tensor<T> out(ta.shape);
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = ta.data[i] + tb.data[i];
  return g.add_op("add", {a, b}, std::move(out), [a, b](Graph<T>& gr, int self) {
    const std::vector<T>& dy = gr.grad(self);
    if (gr.node(a).needs_grad) {
      std::vector<T>& da = gr.grad(a);
      for (std::size_t i = 0; i < dy.size(); ++i) da[i] += dy[i];
    }
    if (gr.node(b).needs_grad) {
      std::vector<T>& db = gr.grad(b);
      for (std::size_t i = 0; i < dy.size(); ++i) db[i] += dy[i];
    }
  });
}

template <typename T>
int mul(Graph<T>& g, int a, int b) {
  const Tensor<T>& ta = g.value(a);
  const Tensor<T>& tb = g.value(b);
  detail::require_same_shape(ta.shape, tb.shape, "mul");
  Tensor<T> out(ta.shape);
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = ta.data[i] * tb.data[i];
  return g.add_op("mul", {a, b}, std::move(out), [a, b](Graph<T>& gr, int self) {
    const std::vector<T>& dy = gr.grad(self);
    const std::vector<T>& va = gr.node(a).value.data;
    const std::vector<T>& vb = gr.node(b).value.data;
    if (gr.node(a).needs_grad) {
      std::vector<T>& da = gr.grad(a);
      for (std::size_t i = 0; i < dy.size(); ++i) da[i] += dy[i] * vb[i];
    }
    if (gr.node(b).needs_grad) {
      std::vector<T>& db = gr.grad(b);
      for (std::size_t i = 0; i < dy.size(); ++i) db[i] += dy[i] * va[i];
    }
  });
}

template <typename T>
int relu(Graph<T>& g, int x) {
  const Tensor<T>& tx = g.value(x);
  Tensor<T> out(tx.shape);
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = tx.data[i] > T(0) ? tx.data[i] : T(0);
  return g.add_op("relu", {x}, std::move(out), [x](Graph<T>& gr, int self) {
    const std::vector<T>& dy = gr.grad(self);
    const std::vector<T>& vx = gr.node(x).value.data;
    std::vector<T>& dx = gr.grad(x);
    for (std::size_t i = 0; i < dy.size(); ++i) {
      if (vx[i] > T(0)) dx[i] += dy[i];
    }
  });
}

template <typename T>
int sum(Graph<T>& g, int x) {
  const Tensor<T>& tx = g.value(x);
  double acc = 0.0;
  for (T v : tx.data) acc += static_cast<double>(v);
  Tensor<T> out(Shape{1});
  out.data[0] = static_cast<T>(acc);
  return g.add_op("sum", {x}, std::move(out), [x](Graph<T>& gr, int self) {
    const T gy = gr.grad(self)[0];
    std::vector<T>& dx = gr.grad(x);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += gy;
  });
}

/// Standard 2-d matrix product a[M,P] * b[P,R].
template <typename T>
int matmul(Graph<T>& g, int a, int b) {
  const Tensor<T>& ta = g.value(a);
  const Tensor<T>& tb = g.value(b);
  if (ta.rank() != 2 || tb.rank() != 2 || ta.dim(1) != tb.dim(0)) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(ta.shape) + " x " +
                     shape_str(tb.shape));
  }
  const std::size_t m = ta.dim(0), p = ta.dim(1), r = tb.dim(1);
  Tensor<T> out(Shape{m, r});
  detail::mmap(out.data, m, r).noalias() =
      detail::cmap(ta.data, m, p) * detail::cmap(tb.data, p, r);
  return g.add_op("matmul", {a, b}, std::move(out), [a, b, m, p, r](Graph<T>& gr, int self) {
    auto dy = detail::cmap(gr.grad(self), m, r);
    if (gr.node(a).needs_grad) {
      detail::mmap(gr.grad(a), m, p).noalias() +=
          dy * detail::cmap(gr.node(b).value.data, p, r).transpose();
    }
    if (gr.node(b).needs_grad) {
      detail::mmap(gr.grad(b), p, r).noalias() +=
          detail::cmap(gr.node(a).value.data, m, p).transpose() * dy;
    }
  });
}

/// Batched matrix product over the last two axes; all leading axes are batch.
/// transpose_b multiplies by the per-slice transpose of b.
template <typename T>
int bmm(Graph<T>& g, int a, int b, bool transpose_b) {
  const Tensor<T>& ta = g.value(a);
  const Tensor<T>& tb = g.value(b);
  if (ta.rank() < 2 || tb.rank() != ta.rank()) {
    throw ShapeError("bmm: operands must share rank >= 2");
  }
  const std::size_t nd = ta.rank();
  std::size_t batch = 1;
  for (std::size_t i = 0; i + 2 < nd; ++i) {
    if (ta.dim(i) != tb.dim(i)) {
      throw ShapeError("bmm: batch dims differ: " + shape_str(ta.shape) + " vs " +
                       shape_str(tb.shape));
    }
    batch *= ta.dim(i);
  }
  const std::size_t m = ta.dim(nd - 2), p = ta.dim(nd - 1);
  const std::size_t br = tb.dim(nd - 2), bc = tb.dim(nd - 1);
  const std::size_t inner = transpose_b ? bc : br;
  const std::size_t r = transpose_b ? br : bc;
  if (inner != p) {
    throw ShapeError("bmm: inner dims differ: " + shape_str(ta.shape) + " x " +
                     shape_str(tb.shape) + (transpose_b ? " (b transposed)" : ""));
  }
  Shape out_shape(ta.shape.begin(), ta.shape.end() - 2);
  out_shape.push_back(m);
  out_shape.push_back(r);
  Tensor<T> out(out_shape);
  for (std::size_t s = 0; s < batch; ++s) {
    auto A = detail::cmap(ta.data, m, p, s * m * p);
    auto Y = detail::mmap(out.data, m, r, s * m * r);
    if (transpose_b) {
      Y.noalias() = A * detail::cmap(tb.data, br, bc, s * br * bc).transpose();
    } else {
      Y.noalias() = A * detail::cmap(tb.data, br, bc, s * br * bc);
    }
  }
  return g.add_op("bmm", {a, b}, std::move(out),
                  [a, b, transpose_b, batch, m, p, r, br, bc](Graph<T>& gr, int self) {
                    const bool need_a = gr.node(a).needs_grad;
                    const bool need_b = gr.node(b).needs_grad;
                    for (std::size_t s = 0; s < batch; ++s) {
                      auto dy = detail::cmap(gr.grad(self), m, r, s * m * r);
                      auto va = detail::cmap(gr.node(a).value.data, m, p, s * m * p);
                      auto vb = detail::cmap(gr.node(b).value.data, br, bc, s * br * bc);
                      if (transpose_b) {
                        // y = a * b^T
                        if (need_a) {
                          detail::mmap(gr.grad(a), m, p, s * m * p).noalias() += dy * vb;
                        }
                        if (need_b) {
                          detail::mmap(gr.grad(b), br, bc, s * br * bc).noalias() +=
                              dy.transpose() * va;
                        }
                      } else {
                        if (need_a) {
                          detail::mmap(gr.grad(a), m, p, s * m * p).noalias() +=
                              dy * vb.transpose();
                        }
                        if (need_b) {
                          detail::mmap(gr.grad(b), br, bc, s * br * bc).noalias() +=
                              va.transpose() * dy;
                        }
                      }
                    }
                  });
}

/// Row-wise softmax along the last axis, stabilized by max subtraction.
template <typename T>
int softmax_rows(Graph<T>& g, int x) {
  const Tensor<T>& tx = g.value(x);
  if (tx.rank() < 1 || tx.size() == 0) throw ShapeError("softmax_rows: empty input");
  const std::size_t cols = tx.shape.back();
  const std::size_t rows = tx.size() / cols;
  Tensor<T> out(tx.shape);
  for (std::size_t rI = 0; rI < rows; ++rI) {
    const T* in = tx.data.data() + rI * cols;
    T* o = out.data.data() + rI * cols;
    T mx = in[0];
    for (std::size_t j = 1; j < cols; ++j) mx = std::max(mx, in[j]);
    double denom = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      const double e = std::exp(static_cast<double>(in[j] - mx));
      o[j] = static_cast<T>(e);
      denom += e;
    }
    const double inv = 1.0 / denom;
    for (std::size_t j = 0; j < cols; ++j) o[j] = static_cast<T>(static_cast<double>(o[j]) * inv);
  }
  return g.add_op("softmax_rows", {x}, std::move(out), [x, rows, cols](Graph<T>& gr, int self) {
    const std::vector<T>& dy = gr.grad(self);
    const std::vector<T>& a = gr.node(self).value.data;
    std::vector<T>& dx = gr.grad(x);
    for (std::size_t rI = 0; rI < rows; ++rI) {
      const std::size_t off = rI * cols;
      double dot = 0.0;
      for (std::size_t j = 0; j < cols; ++j) {
        dot += static_cast<double>(dy[off + j]) * static_cast<double>(a[off + j]);
      }
      for (std::size_t j = 0; j < cols; ++j) {
        dx[off + j] += a[off + j] * (dy[off + j] - static_cast<T>(dot));
      }
    }
  });
}

/// Population variance over all elements, as a scalar node.
template <typename T>
int variance(Graph<T>& g, int x) {
  const Tensor<T>& tx = g.value(x);
  if (tx.size() == 0) throw ShapeError("variance: empty input");
  const std::size_t n = tx.size();
  double mean = 0.0;
  for (T v : tx.data) mean += static_cast<double>(v);
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (T v : tx.data) {
    const double d = static_cast<double>(v) - mean;
    var += d * d;
  }
  var /= static_cast<double>(n);
  Tensor<T> out(Shape{1});
  out.data[0] = static_cast<T>(var);
  return g.add_op("variance", {x}, std::move(out), [x, mean, n](Graph<T>& gr, int self) {
    const double gy = static_cast<double>(gr.grad(self)[0]);
    const std::vector<T>& vx = gr.node(x).value.data;
    std::vector<T>& dx = gr.grad(x);
    const double c = 2.0 * gy / static_cast<double>(n);
    for (std::size_t i = 0; i < dx.size(); ++i) {
      dx[i] += static_cast<T>(c * (static_cast<double>(vx[i]) - mean));
    }
  });
}

/// Multiply each slice over the last two axes by a fixed per-slice factor.
/// The factors are an op attribute, not a graph input: no gradient flows
/// into them (this is how attention's variance normalizer stays detached).
template <typename T>
int scale_slices(Graph<T>& g, int x, std::vector<T> scales) {
  const Tensor<T>& tx = g.value(x);
  if (tx.rank() < 2) throw ShapeError("scale_slices: rank >= 2 required");
  const std::size_t slice = tx.dim(tx.rank() - 2) * tx.dim(tx.rank() - 1);
  const std::size_t n_slices = tx.size() / slice;
  if (scales.size() != n_slices) {
    throw ShapeError("scale_slices: expected " + std::to_string(n_slices) + " factors, got " +
                     std::to_string(scales.size()));
  }
  Tensor<T> out(tx.shape);
  for (std::size_t s = 0; s < n_slices; ++s) {
    const T k = scales[s];
    const std::size_t off = s * slice;
    for (std::size_t i = 0; i < slice; ++i) out.data[off + i] = tx.data[off + i] * k;
  }
  return g.add_op("scale_slices", {x}, std::move(out),
                  [x, scales = std::move(scales), slice](Graph<T>& gr, int self) {
                    const std::vector<T>& dy = gr.grad(self);
                    std::vector<T>& dx = gr.grad(x);
                    for (std::size_t s = 0; s < scales.size(); ++s) {
                      const T k = scales[s];
                      const std::size_t off = s * slice;
                      for (std::size_t i = 0; i < slice; ++i) dx[off + i] += dy[off + i] * k;
                    }
                  });
}

/// 3x3 cross-correlation. x[N,Cin,H,W] * w[Cout,Cin,3,3] + bias[Cout],
/// H' = (H + 2*pad - 3) / stride + 1.
template <typename T>
int conv2d(Graph<T>& g, int x, int w, int b, std::size_t stride, std::size_t padding) {
  const Tensor<T>& tx = g.value(x);
  const Tensor<T>& tw = g.value(w);
  const Tensor<T>& tb = g.value(b);
  if (tx.rank() != 4) throw ShapeError("conv2d: input must be [N,C,H,W], got " + shape_str(tx.shape));
  if (tw.rank() != 4 || tw.dim(2) != 3 || tw.dim(3) != 3) {
    throw ShapeError("conv2d: weight must be [Cout,Cin,3,3], got " + shape_str(tw.shape));
  }
  if (tw.dim(1) != tx.dim(1)) {
    throw ShapeError("conv2d: input channels " + std::to_string(tx.dim(1)) +
                     " != weight channels " + std::to_string(tw.dim(1)));
  }
  if (padding > 1) throw ShapeError("conv2d: padding must be 0 or 1");
  if (stride < 1) throw ShapeError("conv2d: stride must be >= 1");
  const std::size_t n = tx.dim(0), cin = tx.dim(1), h = tx.dim(2), wd = tx.dim(3);
  const std::size_t cout = tw.dim(0);
  if (tb.shape != Shape{cout}) {
    throw ShapeError("conv2d: bias must be [Cout], got " + shape_str(tb.shape));
  }
  if (h + 2 * padding < 3 || wd + 2 * padding < 3) {
    throw ShapeError("conv2d: spatial size too small: " + shape_str(tx.shape));
  }
  const std::size_t oh = (h + 2 * padding - 3) / stride + 1;
  const std::size_t ow = (wd + 2 * padding - 3) / stride + 1;
  const std::size_t k = cin * 9, p = oh * ow;

  Tensor<T> out(Shape{n, cout, oh, ow});
  std::vector<T> cols(k * p);
  for (std::size_t s = 0; s < n; ++s) {
    detail::im2col_3x3(tx.data.data() + s * cin * h * wd, cin, h, wd, oh, ow, stride, padding,
                       cols.data());
    auto Y = detail::mmap(out.data, cout, p, s * cout * p);
    Y.noalias() = detail::cmap(tw.data, cout, k) * detail::cmap(cols, k, p);
    for (std::size_t co = 0; co < cout; ++co) Y.row(co).array() += tb.data[co];
  }

  return g.add_op(
      "conv2d", {x, w, b}, std::move(out),
      [x, w, b, n, cin, h, wd, cout, oh, ow, stride, padding, k, p](Graph<T>& gr, int self) {
        const bool need_x = gr.node(x).needs_grad;
        const bool need_w = gr.node(w).needs_grad;
        const bool need_b = gr.node(b).needs_grad;
        const std::vector<T>& vx = gr.node(x).value.data;
        const std::vector<T>& vw = gr.node(w).value.data;
        std::vector<T> cols(k * p);
        std::vector<T> dcols(need_x ? k * p : 0);
        for (std::size_t s = 0; s < n; ++s) {
          auto dy = detail::cmap(gr.grad(self), cout, p, s * cout * p);
          if (need_b) {
            std::vector<T>& db = gr.grad(b);
            for (std::size_t co = 0; co < cout; ++co) {
              db[co] += dy.row(co).sum();
            }
          }
          if (need_w) {
            detail::im2col_3x3(vx.data() + s * cin * h * wd, cin, h, wd, oh, ow, stride, padding,
                               cols.data());
            detail::mmap(gr.grad(w), cout, k).noalias() +=
                dy * detail::cmap(cols, k, p).transpose();
          }
          if (need_x) {
            detail::mmap(dcols, k, p).noalias() = detail::cmap(vw, cout, k).transpose() * dy;
            detail::col2im_3x3(dcols.data(), cin, h, wd, oh, ow, stride, padding,
                               gr.grad(x).data() + s * cin * h * wd);
          }
        }
      });
}

template <typename T>
struct BNState {
  std::vector<T> running_mean;
  std::vector<T> running_var;

  explicit BNState(std::size_t channels = 0)
      : running_mean(channels, T(0)), running_var(channels, T(1)) {}
};

/// Per-channel batch normalization over (N,H,W). Training mode normalizes by
/// batch statistics and folds them into the running state by EMA; eval mode
/// uses the running state unchanged.
template <typename T>
int batch_norm(Graph<T>& g, int x, int gamma, int beta, BNState<T>& state, bool training,
               T momentum = T(0.1), T epsilon = T(1e-5)) {
  const Tensor<T>& tx = g.value(x);
  if (tx.rank() != 4) {
    throw ShapeError("batch_norm: input must be [N,C,H,W], got " + shape_str(tx.shape));
  }
  const std::size_t n = tx.dim(0), c = tx.dim(1), h = tx.dim(2), w = tx.dim(3);
  const Tensor<T>& tg = g.value(gamma);
  const Tensor<T>& tb = g.value(beta);
  if (tg.shape != Shape{c} || tb.shape != Shape{c}) {
    throw ShapeError("batch_norm: gamma/beta must be [C]");
  }
  if (state.running_mean.size() != c || state.running_var.size() != c) {
    throw ShapeError("batch_norm: running state has wrong channel count");
  }
  if (n * h * w == 0) throw ShapeError("batch_norm: empty batch");
  if (!(epsilon > T(0))) throw ShapeError("batch_norm: epsilon must be > 0");

  const std::size_t plane = h * w;
  const std::size_t m = n * plane;
  std::vector<double> mean(c, 0.0), var(c, 0.0);
  if (training) {
    for (std::size_t s = 0; s < n; ++s) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        const T* px = tx.data.data() + (s * c + ch) * plane;
        double acc = 0.0;
        for (std::size_t i = 0; i < plane; ++i) acc += static_cast<double>(px[i]);
        mean[ch] += acc;
      }
    }
    for (std::size_t ch = 0; ch < c; ++ch) mean[ch] /= static_cast<double>(m);
    for (std::size_t s = 0; s < n; ++s) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        const T* px = tx.data.data() + (s * c + ch) * plane;
        double acc = 0.0;
        for (std::size_t i = 0; i < plane; ++i) {
          const double d = static_cast<double>(px[i]) - mean[ch];
          acc += d * d;
        }
        var[ch] += acc;
      }
    }
    for (std::size_t ch = 0; ch < c; ++ch) var[ch] /= static_cast<double>(m);
    for (std::size_t ch = 0; ch < c; ++ch) {
      state.running_mean[ch] = static_cast<T>((1.0 - static_cast<double>(momentum)) *
                                                  static_cast<double>(state.running_mean[ch]) +
                                              static_cast<double>(momentum) * mean[ch]);
      state.running_var[ch] = static_cast<T>((1.0 - static_cast<double>(momentum)) *
                                                 static_cast<double>(state.running_var[ch]) +
                                             static_cast<double>(momentum) * var[ch]);
    }
  } else {
    for (std::size_t ch = 0; ch < c; ++ch) {
      mean[ch] = static_cast<double>(state.running_mean[ch]);
      var[ch] = static_cast<double>(state.running_var[ch]);
    }
  }

  std::vector<double> inv(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    inv[ch] = 1.0 / std::sqrt(var[ch] + static_cast<double>(epsilon));
  }

  Tensor<T> out(tx.shape);
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T* px = tx.data.data() + (s * c + ch) * plane;
      T* po = out.data.data() + (s * c + ch) * plane;
      const double gm = static_cast<double>(tg.data[ch]);
      const double bt = static_cast<double>(tb.data[ch]);
      for (std::size_t i = 0; i < plane; ++i) {
        const double xhat = (static_cast<double>(px[i]) - mean[ch]) * inv[ch];
        po[i] = static_cast<T>(gm * xhat + bt);
      }
    }
  }

  return g.add_op(
      "batch_norm", {x, gamma, beta}, std::move(out),
      [x, gamma, beta, training, n, c, plane, m, mean, inv](Graph<T>& gr, int self) {
        const std::vector<T>& dy = gr.grad(self);
        const std::vector<T>& vx = gr.node(x).value.data;
        const std::vector<T>& vg = gr.node(gamma).value.data;
        const bool need_x = gr.node(x).needs_grad;
        const bool need_g = gr.node(gamma).needs_grad;
        const bool need_b = gr.node(beta).needs_grad;

        std::vector<double> sum_dy(c, 0.0), sum_dy_xhat(c, 0.0);
        for (std::size_t s = 0; s < n; ++s) {
          for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t off = (s * c + ch) * plane;
            double a = 0.0, bacc = 0.0;
            for (std::size_t i = 0; i < plane; ++i) {
              const double d = static_cast<double>(dy[off + i]);
              const double xhat = (static_cast<double>(vx[off + i]) - mean[ch]) * inv[ch];
              a += d;
              bacc += d * xhat;
            }
            sum_dy[ch] += a;
            sum_dy_xhat[ch] += bacc;
          }
        }
        if (need_b) {
          std::vector<T>& db = gr.grad(beta);
          for (std::size_t ch = 0; ch < c; ++ch) db[ch] += static_cast<T>(sum_dy[ch]);
        }
        if (need_g) {
          std::vector<T>& dg = gr.grad(gamma);
          for (std::size_t ch = 0; ch < c; ++ch) dg[ch] += static_cast<T>(sum_dy_xhat[ch]);
        }
        if (!need_x) return;
        std::vector<T>& dx = gr.grad(x);
        for (std::size_t s = 0; s < n; ++s) {
          for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t off = (s * c + ch) * plane;
            const double gi = static_cast<double>(vg[ch]) * inv[ch];
            if (training) {
              const double md = static_cast<double>(m);
              for (std::size_t i = 0; i < plane; ++i) {
                const double d = static_cast<double>(dy[off + i]);
                const double xhat = (static_cast<double>(vx[off + i]) - mean[ch]) * inv[ch];
                dx[off + i] += static_cast<T>(
                    gi * (d - sum_dy[ch] / md - xhat * sum_dy_xhat[ch] / md));
              }
            } else {
              for (std::size_t i = 0; i < plane; ++i) {
                dx[off + i] += static_cast<T>(gi * static_cast<double>(dy[off + i]));
              }
            }
          }
        }
      });
}

/// Adaptive average pooling to a fixed output size; output bin i over an
/// input extent H spans floor(i*H/h) .. ceil((i+1)*H/h).
template <typename T>
int adaptive_avg_pool(Graph<T>& g, int x, std::size_t out_h, std::size_t out_w) {
  const Tensor<T>& tx = g.value(x);
  if (tx.rank() != 4) {
    throw ShapeError("adaptive_avg_pool: input must be [N,C,H,W], got " + shape_str(tx.shape));
  }
  const std::size_t n = tx.dim(0), c = tx.dim(1), h = tx.dim(2), w = tx.dim(3);
  if (out_h == 0 || out_w == 0 || out_h > h || out_w > w) {
    throw ShapeError("adaptive_avg_pool: output " + std::to_string(out_h) + "x" +
                     std::to_string(out_w) + " invalid for input " + shape_str(tx.shape));
  }
  auto bin_start = [](std::size_t i, std::size_t in, std::size_t out) { return i * in / out; };
  auto bin_end = [](std::size_t i, std::size_t in, std::size_t out) {
    return ((i + 1) * in + out - 1) / out;
  };
  Tensor<T> out(Shape{n, c, out_h, out_w});
  for (std::size_t s = 0; s < n * c; ++s) {
    const T* px = tx.data.data() + s * h * w;
    T* po = out.data.data() + s * out_h * out_w;
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      const std::size_t y0 = bin_start(oy, h, out_h), y1 = bin_end(oy, h, out_h);
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        const std::size_t x0 = bin_start(ox, w, out_w), x1 = bin_end(ox, w, out_w);
        double acc = 0.0;
        for (std::size_t iy = y0; iy < y1; ++iy) {
          for (std::size_t ix = x0; ix < x1; ++ix) acc += static_cast<double>(px[iy * w + ix]);
        }
        po[oy * out_w + ox] = static_cast<T>(acc / static_cast<double>((y1 - y0) * (x1 - x0)));
      }
    }
  }
  return g.add_op("adaptive_avg_pool", {x}, std::move(out),
                  [x, n, c, h, w, out_h, out_w, bin_start, bin_end](Graph<T>& gr, int self) {
                    const std::vector<T>& dy = gr.grad(self);
                    std::vector<T>& dx = gr.grad(x);
                    for (std::size_t s = 0; s < n * c; ++s) {
                      const T* pdy = dy.data() + s * out_h * out_w;
                      T* pdx = dx.data() + s * h * w;
                      for (std::size_t oy = 0; oy < out_h; ++oy) {
                        const std::size_t y0 = bin_start(oy, h, out_h), y1 = bin_end(oy, h, out_h);
                        for (std::size_t ox = 0; ox < out_w; ++ox) {
                          const std::size_t x0 = bin_start(ox, w, out_w),
                                            x1 = bin_end(ox, w, out_w);
                          const T gy = pdy[oy * out_w + ox] /
                                       static_cast<T>((y1 - y0) * (x1 - x0));
                          for (std::size_t iy = y0; iy < y1; ++iy) {
                            for (std::size_t ix = x0; ix < x1; ++ix) pdx[iy * w + ix] += gy;
                          }
                        }
                      }
                    }
                  });
}

/// Fully connected layer: x[N,F] * w[G,F]^T + b[G].
template <typename T>
int linear(Graph<T>& g, int x, int w, int b) {
  const Tensor<T>& tx = g.value(x);
  const Tensor<T>& tw = g.value(w);
  const Tensor<T>& tb = g.value(b);
  if (tx.rank() != 2 || tw.rank() != 2 || tx.dim(1) != tw.dim(1)) {
    throw ShapeError("linear: incompatible shapes " + shape_str(tx.shape) + " x " +
                     shape_str(tw.shape));
  }
  const std::size_t n = tx.dim(0), f = tx.dim(1), gdim = tw.dim(0);
  if (tb.shape != Shape{gdim}) throw ShapeError("linear: bias must be [G]");
  Tensor<T> out(Shape{n, gdim});
  detail::mmap(out.data, n, gdim).noalias() =
      detail::cmap(tx.data, n, f) * detail::cmap(tw.data, gdim, f).transpose();
  for (std::size_t row = 0; row < n; ++row) {
    T* po = out.data.data() + row * gdim;
    for (std::size_t j = 0; j < gdim; ++j) po[j] += tb.data[j];
  }
  return g.add_op("linear", {x, w, b}, std::move(out), [x, w, b, n, f, gdim](Graph<T>& gr,
                                                                             int self) {
    auto dy = detail::cmap(gr.grad(self), n, gdim);
    if (gr.node(x).needs_grad) {
      detail::mmap(gr.grad(x), n, f).noalias() += dy * detail::cmap(gr.node(w).value.data, gdim, f);
    }
    if (gr.node(w).needs_grad) {
      detail::mmap(gr.grad(w), gdim, f).noalias() +=
          dy.transpose() * detail::cmap(gr.node(x).value.data, n, f);
    }
    if (gr.node(b).needs_grad) {
      std::vector<T>& db = gr.grad(b);
      for (std::size_t j = 0; j < gdim; ++j) db[j] += dy.col(j).sum();
    }
  });
}

/// Mean absolute difference, as a scalar node.
template <typename T>
int l1_loss(Graph<T>& g, int pred, int target) {
  const Tensor<T>& tp = g.value(pred);
  const Tensor<T>& tt = g.value(target);
  detail::require_same_shape(tp.shape, tt.shape, "l1_loss");
  if (tp.size() == 0) throw ShapeError("l1_loss: empty input");
  const std::size_t n = tp.size();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    acc += std::abs(static_cast<double>(tp.data[i]) - static_cast<double>(tt.data[i]));
  }
  Tensor<T> out(Shape{1});
  out.data[0] = static_cast<T>(acc / static_cast<double>(n));
  return g.add_op("l1_loss", {pred, target}, std::move(out),
                  [pred, target, n](Graph<T>& gr, int self) {
                    const T gy = gr.grad(self)[0];
                    const std::vector<T>& vp = gr.node(pred).value.data;
                    const std::vector<T>& vt = gr.node(target).value.data;
                    const T c = gy / static_cast<T>(n);
                    const bool need_p = gr.node(pred).needs_grad;
                    const bool need_t = gr.node(target).needs_grad;
                    for (std::size_t i = 0; i < n; ++i) {
                      const T d = vp[i] - vt[i];
                      const T s = d > T(0) ? c : (d < T(0) ? -c : T(0));
                      if (need_p) gr.grad(pred)[i] += s;
                      if (need_t) gr.grad(target)[i] -= s;
                    }
                  });
}

/// Reshape to an equal-element-count shape (data copied, grads pass through).
template <typename T>
int reshape(Graph<T>& g, int x, Shape new_shape) {
  const Tensor<T>& tx = g.value(x);
  if (shape_numel(new_shape) != tx.size()) {
    throw ShapeError("reshape: cannot view " + shape_str(tx.shape) + " as " +
                     shape_str(new_shape));
  }
  Tensor<T> out(std::move(new_shape), tx.data);
  return g.add_op("reshape", {x}, std::move(out), [x](Graph<T>& gr, int self) {
    const std::vector<T>& dy = gr.grad(self);
    std::vector<T>& dx = gr.grad(x);
    for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i];
  });
}

/// Collapse all axes after the first: [N, ...] -> [N, rest].
template <typename T>
int flatten_rows(Graph<T>& g, int x) {
  const Tensor<T>& tx = g.value(x);
  if (tx.rank() < 1) throw ShapeError("flatten_rows: rank >= 1 required");
  const std::size_t n = tx.dim(0);
  return reshape(g, x, Shape{n, tx.size() / n});
}

/// Column-wise concatenation of a[N,F1] and b[N,F2] into [N,F1+F2].
template <typename T>
int concat_cols(Graph<T>& g, int a, int b) {
  const Tensor<T>& ta = g.value(a);
  const Tensor<T>& tb = g.value(b);
  if (ta.rank() != 2 || tb.rank() != 2 || ta.dim(0) != tb.dim(0)) {
    throw ShapeError("concat_cols: expected matching [N,*] operands, got " + shape_str(ta.shape) +
                     " and " + shape_str(tb.shape));
  }
  const std::size_t n = ta.dim(0), f1 = ta.dim(1), f2 = tb.dim(1);
  Tensor<T> out(Shape{n, f1 + f2});
  for (std::size_t row = 0; row < n; ++row) {
    std::copy_n(ta.data.begin() + row * f1, f1, out.data.begin() + row * (f1 + f2));
    std::copy_n(tb.data.begin() + row * f2, f2, out.data.begin() + row * (f1 + f2) + f1);
  }
  return g.add_op("concat_cols", {a, b}, std::move(out), [a, b, n, f1, f2](Graph<T>& gr,
                                                                           int self) {
    const std::vector<T>& dy = gr.grad(self);
    const bool need_a = gr.node(a).needs_grad;
    const bool need_b = gr.node(b).needs_grad;
    for (std::size_t row = 0; row < n; ++row) {
      const std::size_t off = row * (f1 + f2);
      if (need_a) {
        std::vector<T>& da = gr.grad(a);
        for (std::size_t j = 0; j < f1; ++j) da[row * f1 + j] += dy[off + j];
      }
      if (need_b) {
        std::vector<T>& db = gr.grad(b);
        for (std::size_t j = 0; j < f2; ++j) db[row * f2 + j] += dy[off + f1 + j];
      }
    }
  });
}

}  // namespace biatten
