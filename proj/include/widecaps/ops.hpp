#pragma once

// Differentiable tensor operations recorded on a Tape. Every op validates shapes
// eagerly and registers a vector-Jacobian product for its differentiable inputs.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "widecaps/linalg.hpp"
#include "widecaps/tape.hpp"
#include "widecaps/tensor.hpp"

namespace widecaps {

namespace detail {

template <typename T>
void require_same_shape(const char* op, Var<T> a, Var<T> b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

// Shape with the last axis dropped; a rank-1 input collapses to [1].
inline Shape drop_last(const Shape& s) {
  if (s.size() == 1) return Shape{1};
  return Shape(s.begin(), s.end() - 1);
}

template <typename T>
T stable_sigmoid(T x) {
  if (x >= T{0}) return T{1} / (T{1} + std::exp(-x));
  const T e = std::exp(x);
  return e / (T{1} + e);
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  detail::require_same_shape("add", a, b);
  Tensor<T> out = a.value();
  const auto bv = b.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return a.tape->record(std::move(out), {a, b}, [ia = a.id, ib = b.id](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_ref(self);
    t.accumulate(ia, g.data());
    t.accumulate(ib, g.data());
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  detail::require_same_shape("mul", a, b);
  Tensor<T> out = a.value();
  const auto bv = b.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return a.tape->record(std::move(out), {a, b}, [ia = a.id, ib = b.id](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_ref(self);
    const auto& av = t.value(ia);
    const auto& bv = t.value(ib);
    if (t.requires_grad(ia)) {
      auto& ga = t.grad_buffer(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.requires_grad(ib)) {
      auto& gb = t.grad_buffer(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

template <typename T>
Var<T> scale(Var<T> x, T factor) {
  Tensor<T> out = x.value();
  for (auto& v : out.data()) v *= factor;
  return x.tape->record(std::move(out), {x}, [ix = x.id, factor](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_ref(self);
    auto& gx = t.grad_buffer(ix);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += factor * g[i];
  });
}

/// x[..., C] + bias[C]
template <typename T>
Var<T> add_bias(Var<T> x, Var<T> bias) {
  const std::size_t c = x.value().last_extent();
  if (bias.value().size() != c) {
    throw DimensionError("add_bias: bias " + shape_string(bias.shape()) +
                         " does not match channel extent of " + shape_string(x.shape()));
  }
  Tensor<T> out = x.value();
  const auto bv = bias.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i % c];
  return x.tape->record(std::move(out), {x, bias},
                        [ix = x.id, ib = bias.id, c](Tape<T>& t, std::size_t self) {
                          const auto& g = t.grad_ref(self);
                          t.accumulate(ix, g.data());
                          if (t.requires_grad(ib)) {
                            auto& gb = t.grad_buffer(ib);
                            for (std::size_t i = 0; i < g.size(); ++i) gb[i % c] += g[i];
                          }
                        });
}

/// Scales x[n, ..., c] by gates[n, c] (or x[..., c] by gates[c]).
template <typename T>
Var<T> mul_channels(Var<T> x, Var<T> gates) {
  const auto& xs = x.shape();
  const auto& gs = gates.shape();
  const bool batched = gs.size() == 2;
  const std::size_t n = batched ? gs[0] : 1;
  const std::size_t c = gs.back();
  if ((batched && xs[0] != n) || xs.back() != c || (!batched && gs.size() != 1)) {
    throw DimensionError("mul_channels: gates " + shape_string(gs) + " incompatible with " +
                         shape_string(xs));
  }
  const std::size_t per_sample = x.value().size() / n;
  Tensor<T> out = x.value();
  const auto gv = gates.value().data();
  for (std::size_t s = 0; s < n; ++s) {
    T* o = out.raw() + s * per_sample;
    const T* gsmp = gv.data() + s * c;
    for (std::size_t i = 0; i < per_sample; ++i) o[i] *= gsmp[i % c];
  }
  return x.tape->record(
      std::move(out), {x, gates}, [ix = x.id, ig = gates.id, n, c, per_sample](Tape<T>& t, std::size_t self) {
        const auto& g = t.grad_ref(self);
        const auto& xv = t.value(ix);
        const auto& gv = t.value(ig);
        if (t.requires_grad(ix)) {
          auto& gx = t.grad_buffer(ix);
          for (std::size_t s = 0; s < n; ++s)
            for (std::size_t i = 0; i < per_sample; ++i)
              gx[s * per_sample + i] += g[s * per_sample + i] * gv[s * c + i % c];
        }
        if (t.requires_grad(ig)) {
          auto& gg = t.grad_buffer(ig);
          for (std::size_t s = 0; s < n; ++s)
            for (std::size_t i = 0; i < per_sample; ++i)
              gg[s * c + i % c] += g[s * per_sample + i] * xv[s * per_sample + i];
        }
      });
}

/// x[..., J, k] with each row j scaled by gates[..., J].
template <typename T>
Var<T> scale_rows(Var<T> x, Var<T> gates) {
  const std::size_t k = x.value().last_extent();
  const std::size_t rows = x.value().size() / k;
  if (gates.value().size() != rows || detail::drop_last(x.shape()) != gates.shape()) {
    throw DimensionError("scale_rows: gates " + shape_string(gates.shape()) +
                         " incompatible with " + shape_string(x.shape()));
  }
  Tensor<T> out = x.value();
  const auto gv = gates.value().data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t f = 0; f < k; ++f) out[r * k + f] *= gv[r];
  return x.tape->record(std::move(out), {x, gates},
                        [ix = x.id, ig = gates.id, rows, k](Tape<T>& t, std::size_t self) {
                          const auto& g = t.grad_ref(self);
                          const auto& xv = t.value(ix);
                          const auto& gv = t.value(ig);
                          if (t.requires_grad(ix)) {
                            auto& gx = t.grad_buffer(ix);
                            for (std::size_t r = 0; r < rows; ++r)
                              for (std::size_t f = 0; f < k; ++f) gx[r * k + f] += g[r * k + f] * gv[r];
                          }
                          if (t.requires_grad(ig)) {
                            auto& gg = t.grad_buffer(ig);
                            for (std::size_t r = 0; r < rows; ++r) {
                              T acc{0};
                              for (std::size_t f = 0; f < k; ++f) acc += g[r * k + f] * xv[r * k + f];
                              gg[r] += acc;
                            }
                          }
                        });
}

// relu'(0) is fixed to 0.
template <typename T>
Var<T> relu(Var<T> x) {
  Tensor<T> out = x.value();
  auto* tape = x.tape;
  for (auto& v : out.data()) {
    const bool on = v > T{0};
    tape->note_branch(on);
    if (!on) v = T{0};
  }
  return tape->record(std::move(out), {x}, [ix = x.id](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_ref(self);
    const auto& xv = t.value(ix);
    auto& gx = t.grad_buffer(ix);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (xv[i] > T{0}) gx[i] += g[i];
  });
}

template <typename T>
Var<T> sigmoid(Var<T> x) {
  Tensor<T> out = x.value();
  for (auto& v : out.data()) v = detail::stable_sigmoid(v);
  return x.tape->record(std::move(out), {x}, [ix = x.id](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_ref(self);
    const auto& y = t.value(self);
    auto& gx = t.grad_buffer(ix);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * y[i] * (T{1} - y[i]);
  });
}

template <typename T>
Var<T> exp(Var<T> x) {
  Tensor<T> out = x.value();
  for (auto& v : out.data()) v = std::exp(v);
  return x.tape->record(std::move(out), {x}, [ix = x.id](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_ref(self);
    const auto& y = t.value(self);
    auto& gx = t.grad_buffer(ix);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * y[i];
  });
}

/// Softmax over the last axis, evaluated as exp(x - max) / sum.
template <typename T>
Var<T> softmax(Var<T> x) {
  Tensor<T> out = x.value();
  const std::size_t n = out.last_extent();
  const std::size_t rows = out.size() / n;
  for (std::size_t r = 0; r < rows; ++r) {
    T* row = out.raw() + r * n;
    const T mx = *std::max_element(row, row + n);
    T total{0};
    for (std::size_t i = 0; i < n; ++i) {
      row[i] = std::exp(row[i] - mx);
      total += row[i];
    }
    for (std::size_t i = 0; i < n; ++i) row[i] /= total;
  }
  return x.tape->record(std::move(out), {x}, [ix = x.id, n, rows](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_ref(self);
    const auto& y = t.value(self);
    auto& gx = t.grad_buffer(ix);
    for (std::size_t r = 0; r < rows; ++r) {
      T dot{0};
      for (std::size_t i = 0; i < n; ++i) dot += g[r * n + i] * y[r * n + i];
      for (std::size_t i = 0; i < n; ++i) gx[r * n + i] += y[r * n + i] * (g[r * n + i] - dot);
    }
  });
}

// ---------------------------------------------------------------- shape & reductions

template <typename T>
Var<T> reshape(Var<T> x, Shape shape) {
  Tensor<T> out = x.value().reshaped(std::move(shape));
  return x.tape->record(std::move(out), {x}, [ix = x.id](Tape<T>& t, std::size_t self) {
    t.accumulate(ix, t.grad_ref(self).data());
  });
}

template <typename T>
Var<T> sum(Var<T> x) {
  T total{0};
  for (auto v : x.value().data()) total += v;
  return x.tape->record(Tensor<T>::scalar(total), {x}, [ix = x.id](Tape<T>& t, std::size_t self) {
    const T g = t.grad_ref(self)[0];
    for (auto& v : t.grad_buffer(ix).data()) v += g;
  });
}

template <typename T>
Var<T> mean(Var<T> x) {
  const auto n = static_cast<T>(x.value().size());
  return scale(sum(x), T{1} / n);
}

/// Sum over the last axis: [..., k] -> [...].
template <typename T>
Var<T> sum_last(Var<T> x) {
  const std::size_t k = x.value().last_extent();
  const std::size_t rows = x.value().size() / k;
  Tensor<T> out(detail::drop_last(x.shape()));
  for (std::size_t r = 0; r < rows; ++r) {
    T acc{0};
    for (std::size_t f = 0; f < k; ++f) acc += x.value()[r * k + f];
    out[r] = acc;
  }
  return x.tape->record(std::move(out), {x}, [ix = x.id, rows, k](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_ref(self);
    auto& gx = t.grad_buffer(ix);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t f = 0; f < k; ++f) gx[r * k + f] += g[r];
  });
}

template <typename T>
Var<T> mean_last(Var<T> x) {
  return scale(sum_last(x), T{1} / static_cast<T>(x.value().last_extent()));
}

// ---------------------------------------------------------------- linear algebra

/// a[m×p]·b[p×q]; vjp: g·bᵀ for a, aᵀ·g for b.
template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  const auto& as = a.shape();
  const auto& bs = b.shape();
  if (as.size() != 2 || bs.size() != 2 || as[1] != bs[0]) {
    throw DimensionError("matmul: cannot multiply " + shape_string(as) + " by " + shape_string(bs));
  }
  const std::size_t m = as[0], p = as[1], q = bs[1];
  Tensor<T> out({m, q});
  linalg::gemm(false, false, m, q, p, a.value().raw(), b.value().raw(), out.raw(), false);
  return a.tape->record(std::move(out), {a, b},
                        [ia = a.id, ib = b.id, m, p, q](Tape<T>& t, std::size_t self) {
                          const auto& g = t.grad_ref(self);
                          if (t.requires_grad(ia)) {
                            linalg::gemm(false, true, m, p, q, g.raw(), t.value(ib).raw(),
                                         t.grad_buffer(ia).raw(), true);
                          }
                          if (t.requires_grad(ib)) {
                            linalg::gemm(true, false, p, q, m, t.value(ia).raw(), g.raw(),
                                         t.grad_buffer(ib).raw(), true);
                          }
                        });
}

/// Fully connected layer: x[n×in]·w[in×out] + b[out].
template <typename T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> b) {
  return add_bias(matmul(x, w), b);
}

// ---------------------------------------------------------------- convolution

enum class Padding { same, valid };

struct Conv2dGeometry {
  std::size_t n, h, w, cin;
  std::size_t kh, kw, cout;
  std::size_t sh, sw;
  std::size_t ho, wo;
  std::size_t pad_top, pad_left;

  std::size_t patch() const { return kh * kw * cin; }
  std::size_t rows() const { return n * ho * wo; }
};

/// x is [n, h, w, cin] (or [h, w, cin]); kernels [kh, kw, cin, cout].
inline Conv2dGeometry conv2d_geometry(const Shape& xs, const Shape& ks, std::size_t stride_h,
                                      std::size_t stride_w, Padding padding) {
  if (xs.size() != 3 && xs.size() != 4) {
    throw DimensionError("conv2d: input must be [H,W,C] or [N,H,W,C], got " + shape_string(xs));
  }
  if (ks.size() != 4) {
    throw DimensionError("conv2d: kernels must be [kh,kw,Cin,Cout], got " + shape_string(ks));
  }
  if (stride_h == 0 || stride_w == 0) throw DimensionError("conv2d: stride must be positive");
  Conv2dGeometry g{};
  const bool batched = xs.size() == 4;
  g.n = batched ? xs[0] : 1;
  g.h = xs[batched ? 1 : 0];
  g.w = xs[batched ? 2 : 1];
  g.cin = xs[batched ? 3 : 2];
  g.kh = ks[0];
  g.kw = ks[1];
  g.cout = ks[3];
  g.sh = stride_h;
  g.sw = stride_w;
  if (ks[2] != g.cin) {
    throw DimensionError("conv2d: input channels of " + shape_string(xs) +
                         " do not match kernels " + shape_string(ks));
  }
  if (padding == Padding::same) {
    g.ho = (g.h + g.sh - 1) / g.sh;
    g.wo = (g.w + g.sw - 1) / g.sw;
    const std::size_t need_h = (g.ho - 1) * g.sh + g.kh;
    const std::size_t need_w = (g.wo - 1) * g.sw + g.kw;
    g.pad_top = need_h > g.h ? (need_h - g.h) / 2 : 0;
    g.pad_left = need_w > g.w ? (need_w - g.w) / 2 : 0;
  } else {
    if (g.kh > g.h || g.kw > g.w) {
      throw DimensionError("conv2d: kernel " + shape_string(ks) + " larger than input " +
                           shape_string(xs) + " gives an empty output");
    }
    g.ho = (g.h - g.kh) / g.sh + 1;
    g.wo = (g.w - g.kw) / g.sw + 1;
    g.pad_top = g.pad_left = 0;
  }
  if (g.ho == 0 || g.wo == 0) throw DimensionError("conv2d: zero-sized output");
  return g;
}

namespace detail {

template <typename T>
void im2col(const Conv2dGeometry& g, const T* x, T* cols) {
  const std::size_t patch = g.patch();
  for (std::size_t n = 0; n < g.n; ++n)
    for (std::size_t oh = 0; oh < g.ho; ++oh)
      for (std::size_t ow = 0; ow < g.wo; ++ow) {
        T* dst = cols + ((n * g.ho + oh) * g.wo + ow) * patch;
        for (std::size_t i = 0; i < g.kh; ++i) {
          const auto ih = static_cast<std::ptrdiff_t>(oh * g.sh + i) - static_cast<std::ptrdiff_t>(g.pad_top);
          for (std::size_t j = 0; j < g.kw; ++j, dst += g.cin) {
            const auto iw = static_cast<std::ptrdiff_t>(ow * g.sw + j) - static_cast<std::ptrdiff_t>(g.pad_left);
            if (ih < 0 || iw < 0 || ih >= static_cast<std::ptrdiff_t>(g.h) ||
                iw >= static_cast<std::ptrdiff_t>(g.w)) {
              std::fill(dst, dst + g.cin, T{0});
            } else {
              const T* src = x + ((n * g.h + static_cast<std::size_t>(ih)) * g.w + static_cast<std::size_t>(iw)) * g.cin;
              std::copy(src, src + g.cin, dst);
            }
          }
        }
      }
}

template <typename T>
void col2im_add(const Conv2dGeometry& g, const T* cols, T* dx) {
  const std::size_t patch = g.patch();
  for (std::size_t n = 0; n < g.n; ++n)
    for (std::size_t oh = 0; oh < g.ho; ++oh)
      for (std::size_t ow = 0; ow < g.wo; ++ow) {
        const T* src = cols + ((n * g.ho + oh) * g.wo + ow) * patch;
        for (std::size_t i = 0; i < g.kh; ++i) {
          const auto ih = static_cast<std::ptrdiff_t>(oh * g.sh + i) - static_cast<std::ptrdiff_t>(g.pad_top);
          for (std::size_t j = 0; j < g.kw; ++j, src += g.cin) {
            const auto iw = static_cast<std::ptrdiff_t>(ow * g.sw + j) - static_cast<std::ptrdiff_t>(g.pad_left);
            if (ih < 0 || iw < 0 || ih >= static_cast<std::ptrdiff_t>(g.h) ||
                iw >= static_cast<std::ptrdiff_t>(g.w))
              continue;
            T* dst = dx + ((n * g.h + static_cast<std::size_t>(ih)) * g.w + static_cast<std::size_t>(iw)) * g.cin;
            for (std::size_t c = 0; c < g.cin; ++c) dst[c] += src[c];
          }
        }
      }
}

inline bool is_pointwise(const Conv2dGeometry& g) {
  return g.kh == 1 && g.kw == 1 && g.sh == 1 && g.sw == 1;
}

}  // namespace detail

/// 2-D cross-correlation (no kernel flip) over NHWC input. "same" padding gives
/// ceil(H/stride) outputs with the extra pad row/column at the bottom/right.
template <typename T>
Var<T> conv2d(Var<T> x, Var<T> kernels, std::size_t stride = 1, Padding padding = Padding::same) {
  const Conv2dGeometry g = conv2d_geometry(x.shape(), kernels.shape(), stride, stride, padding);
  const bool batched = x.shape().size() == 4;
  Shape out_shape = batched ? Shape{g.n, g.ho, g.wo, g.cout} : Shape{g.ho, g.wo, g.cout};
  Tensor<T> out(out_shape);
  const bool pointwise = detail::is_pointwise(g);
  std::shared_ptr<std::vector<T>> cols;
  const T* lhs = x.value().raw();
  if (!pointwise) {
    cols = std::make_shared<std::vector<T>>(g.rows() * g.patch());
    detail::im2col(g, x.value().raw(), cols->data());
    lhs = cols->data();
  }
  linalg::gemm(false, false, g.rows(), g.cout, g.patch(), lhs, kernels.value().raw(), out.raw(), false);
  return x.tape->record(
      std::move(out), {x, kernels},
      [ix = x.id, ik = kernels.id, g, cols, pointwise](Tape<T>& t, std::size_t self) {
        const auto& grad = t.grad_ref(self);
        if (t.requires_grad(ik)) {
          const T* lhs = pointwise ? t.value(ix).raw() : cols->data();
          linalg::gemm(true, false, g.patch(), g.cout, g.rows(), lhs, grad.raw(),
                       t.grad_buffer(ik).raw(), true);
        }
        if (t.requires_grad(ix)) {
          if (pointwise) {
            linalg::gemm(false, true, g.rows(), g.cin, g.cout, grad.raw(), t.value(ik).raw(),
                         t.grad_buffer(ix).raw(), true);
          } else {
            std::vector<T> dcols(g.rows() * g.patch());
            linalg::gemm(false, true, g.rows(), g.patch(), g.cout, grad.raw(), t.value(ik).raw(),
                         dcols.data(), false);
            detail::col2im_add(g, dcols.data(), t.grad_buffer(ix).raw());
          }
        }
      });
}

// ---------------------------------------------------------------- pooling & normalization

/// Per-channel spatial mean: [N,H,W,C] -> [N,C], [H,W,C] -> [C].
template <typename T>
Var<T> global_avg_pool(Var<T> x) {
  const auto& xs = x.shape();
  if (xs.size() != 3 && xs.size() != 4) {
    throw DimensionError("global_avg_pool: expected [H,W,C] or [N,H,W,C], got " + shape_string(xs));
  }
  const bool batched = xs.size() == 4;
  const std::size_t n = batched ? xs[0] : 1;
  const std::size_t c = xs.back();
  const std::size_t spatial = x.value().size() / (n * c);
  Tensor<T> out(batched ? Shape{n, c} : Shape{c});
  const T inv = T{1} / static_cast<T>(spatial);
  for (std::size_t s = 0; s < n; ++s) {
    const T* src = x.value().raw() + s * spatial * c;
    T* dst = out.raw() + s * c;
    for (std::size_t p = 0; p < spatial; ++p)
      for (std::size_t ch = 0; ch < c; ++ch) dst[ch] += src[p * c + ch];
    for (std::size_t ch = 0; ch < c; ++ch) dst[ch] *= inv;
  }
  return x.tape->record(std::move(out), {x}, [ix = x.id, n, c, spatial, inv](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_ref(self);
    auto& gx = t.grad_buffer(ix);
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t p = 0; p < spatial; ++p)
        for (std::size_t ch = 0; ch < c; ++ch) gx[(s * spatial + p) * c + ch] += g[s * c + ch] * inv;
  });
}

enum class BatchNormMode { train, infer };

template <typename T>
struct RunningStats {
  Tensor<T> mean;
  Tensor<T> var;

  explicit RunningStats(std::size_t channels)
      : mean(Tensor<T>::zeros({channels})), var(Tensor<T>::full({channels}, T{1})) {}
  RunningStats(Tensor<T> m, Tensor<T> v) : mean(std::move(m)), var(std::move(v)) {}

  bool operator==(const RunningStats&) const = default;
};

struct BatchNormOptions {
  double epsilon = 1e-5;
  double momentum = 0.9;  // running <- momentum * running + (1 - momentum) * batch
};

/// Batch normalization over every axis but the last. Train mode uses biased batch
/// statistics and folds the unbiased variance into the running estimate.
template <typename T>
Var<T> batch_norm(Var<T> x, Var<T> gamma, Var<T> beta, BatchNormMode mode, RunningStats<T>& stats,
                  BatchNormOptions opts = {}) {
  const auto& xs = x.shape();
  const std::size_t c = xs.back();
  if (gamma.value().size() != c || beta.value().size() != c || stats.mean.size() != c ||
      stats.var.size() != c) {
    throw DimensionError("batch_norm: parameters do not match channel extent of " + shape_string(xs));
  }
  if (mode == BatchNormMode::train && (xs.size() < 2 || xs[0] < 2)) {
    throw InsufficientBatchError("batch_norm: train mode needs a batch of at least 2 samples, got " +
                                 shape_string(xs));
  }
  const std::size_t rows = x.value().size() / c;
  const T eps = static_cast<T>(opts.epsilon);
  const T* xv = x.value().raw();
  std::vector<T> mu(c, T{0}), inv_std(c, T{0});
  if (mode == BatchNormMode::train) {
    std::vector<T> var(c, T{0});
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t ch = 0; ch < c; ++ch) mu[ch] += xv[r * c + ch];
    for (auto& m : mu) m /= static_cast<T>(rows);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const T d = xv[r * c + ch] - mu[ch];
        var[ch] += d * d;
      }
    const T mom = static_cast<T>(opts.momentum);
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T biased = var[ch] / static_cast<T>(rows);
      inv_std[ch] = T{1} / std::sqrt(biased + eps);
      const T unbiased = var[ch] / static_cast<T>(rows - 1);
      stats.mean[ch] = mom * stats.mean[ch] + (T{1} - mom) * mu[ch];
      stats.var[ch] = mom * stats.var[ch] + (T{1} - mom) * unbiased;
    }
  } else {
    for (std::size_t ch = 0; ch < c; ++ch) {
      mu[ch] = stats.mean[ch];
      inv_std[ch] = T{1} / std::sqrt(stats.var[ch] + eps);
    }
  }
  auto xhat = std::make_shared<std::vector<T>>(x.value().size());
  Tensor<T> out(xs);
  const T* gv = gamma.value().raw();
  const T* bv = beta.value().raw();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t i = r * c + ch;
      (*xhat)[i] = (xv[i] - mu[ch]) * inv_std[ch];
      out[i] = gv[ch] * (*xhat)[i] + bv[ch];
    }
  const bool training = mode == BatchNormMode::train;
  return x.tape->record(
      std::move(out), {x, gamma, beta},
      [ix = x.id, ig = gamma.id, ib = beta.id, c, rows, xhat, inv_std = std::move(inv_std), training](
          Tape<T>& t, std::size_t self) {
        const auto& g = t.grad_ref(self);
        const auto& gam = t.value(ig);
        std::vector<T> sum_g(c, T{0}), sum_gx(c, T{0});
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t i = r * c + ch;
            sum_g[ch] += g[i];
            sum_gx[ch] += g[i] * (*xhat)[i];
          }
        if (t.requires_grad(ig)) {
          auto& gg = t.grad_buffer(ig);
          for (std::size_t ch = 0; ch < c; ++ch) gg[ch] += sum_gx[ch];
        }
        if (t.requires_grad(ib)) {
          auto& gb = t.grad_buffer(ib);
          for (std::size_t ch = 0; ch < c; ++ch) gb[ch] += sum_g[ch];
        }
        if (t.requires_grad(ix)) {
          auto& gx = t.grad_buffer(ix);
          const T m = static_cast<T>(rows);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t ch = 0; ch < c; ++ch) {
              const std::size_t i = r * c + ch;
              if (training) {
                gx[i] += gam[ch] * inv_std[ch] *
                         (g[i] - sum_g[ch] / m - (*xhat)[i] * sum_gx[ch] / m);
              } else {
                gx[i] += gam[ch] * inv_std[ch] * g[i];
              }
            }
        }
      });
}

// ---------------------------------------------------------------- loss

/// Mean over rows of -sum_j y_j log(max(p_j, 1e-12)). probs and one-hot targets are
/// [N, J] (or [J]).
template <typename T>
Var<T> cross_entropy(Var<T> probs, const Tensor<T>& targets) {
  if (probs.shape() != targets.shape()) {
    throw DimensionError("cross_entropy: predictions " + shape_string(probs.shape()) +
                         " vs targets " + shape_string(targets.shape()));
  }
  const std::size_t j = probs.value().last_extent();
  const std::size_t rows = probs.value().size() / j;
  for (std::size_t r = 0; r < rows; ++r) {
    int hot = 0;
    for (std::size_t c = 0; c < j; ++c) {
      const T y = targets[r * j + c];
      if (y == T{1}) {
        ++hot;
      } else if (y != T{0}) {
        throw InputError("cross_entropy: target row " + std::to_string(r) + " is not one-hot");
      }
    }
    if (hot != 1) throw InputError("cross_entropy: target row " + std::to_string(r) + " is not one-hot");
  }
  constexpr T floor_p = static_cast<T>(1e-12);
  T total{0};
  auto* tape = probs.tape;
  for (std::size_t i = 0; i < probs.value().size(); ++i) {
    if (targets[i] == T{0}) continue;
    const T p = probs.value()[i];
    tape->note_branch(p > floor_p);
    total -= std::log(std::max(p, floor_p));
  }
  total /= static_cast<T>(rows);
  return tape->record(Tensor<T>::scalar(total), {probs},
                      [ip = probs.id, targets, rows](Tape<T>& t, std::size_t self) {
                        const T g = t.grad_ref(self)[0] / static_cast<T>(rows);
                        const auto& p = t.value(ip);
                        auto& gp = t.grad_buffer(ip);
                        for (std::size_t i = 0; i < p.size(); ++i) {
                          if (targets[i] == T{0} || p[i] <= floor_p) continue;
                          gp[i] -= g / p[i];
                        }
                      });
}

}  // namespace widecaps
