#pragma once

// Convolutional network primitives. All image tensors are NCHW.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "unirep/ops.hpp"
#include "unirep/tensor.hpp"

namespace unirep {

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

inline void require_rank4(const Shape& s, const char* op, const char* what) {
  if (s.size() != 4) {
    throw ShapeError(std::string(op) + ": " + what + " must be rank 4, got " + shape_str(s));
  }
}

struct ConvGeom {
  std::size_t cin, h, w, kh, kw, stride, pad, ho, wo;
  std::size_t k() const { return cin * kh * kw; }
  std::size_t p() const { return ho * wo; }
  bool pointwise() const { return kh == 1 && kw == 1 && stride == 1 && pad == 0; }
};

// Output columns [ox_lo, ox_hi) read in-bounds input for kernel column b.
inline void valid_cols(const ConvGeom& g, std::size_t b, std::size_t& lo, std::size_t& hi) {
  // ix = ox * stride + b - pad must satisfy 0 <= ix < w.
  const auto pad = static_cast<std::ptrdiff_t>(g.pad), bb = static_cast<std::ptrdiff_t>(b);
  const auto s = static_cast<std::ptrdiff_t>(g.stride), w = static_cast<std::ptrdiff_t>(g.w);
  std::ptrdiff_t l = pad > bb ? (pad - bb + s - 1) / s : 0;
  std::ptrdiff_t h = w + pad - bb > 0 ? (w + pad - bb - 1) / s + 1 : 0;
  h = std::min<std::ptrdiff_t>(h, static_cast<std::ptrdiff_t>(g.wo));
  lo = static_cast<std::size_t>(std::min(l, h));
  hi = static_cast<std::size_t>(h);
}

template <class T>
void im2col(const T* x, const ConvGeom& g, T* col) {
  for (std::size_t ci = 0; ci < g.cin; ++ci) {
    for (std::size_t a = 0; a < g.kh; ++a) {
      for (std::size_t b = 0; b < g.kw; ++b) {
        T* row = col + ((ci * g.kh + a) * g.kw + b) * g.p();
        std::size_t lo, hi;
        valid_cols(g, b, lo, hi);
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + a) -
                          static_cast<std::ptrdiff_t>(g.pad);
          T* dst = row + oy * g.wo;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) {
            std::fill_n(dst, g.wo, T{0});
            continue;
          }
          const T* src = x + (ci * g.h + static_cast<std::size_t>(iy)) * g.w;
          std::fill(dst, dst + lo, T{0});
          if (lo < hi) {
            const std::size_t ix0 = lo * g.stride + b - g.pad;
            if (g.stride == 1) {
              std::copy(src + ix0, src + ix0 + (hi - lo), dst + lo);
            } else {
              for (std::size_t ox = lo; ox < hi; ++ox) dst[ox] = src[ix0 + (ox - lo) * g.stride];
            }
          }
          std::fill(dst + hi, dst + g.wo, T{0});
        }
      }
    }
  }
}

template <class T>
void col2im_add(const T* col, const ConvGeom& g, T* dx) {
  for (std::size_t ci = 0; ci < g.cin; ++ci) {
    for (std::size_t a = 0; a < g.kh; ++a) {
      for (std::size_t b = 0; b < g.kw; ++b) {
        const T* row = col + ((ci * g.kh + a) * g.kw + b) * g.p();
        std::size_t lo, hi;
        valid_cols(g, b, lo, hi);
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + a) -
                          static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
          if (lo >= hi) continue;
          T* dst = dx + (ci * g.h + static_cast<std::size_t>(iy)) * g.w + (lo * g.stride + b - g.pad);
          const T* src = row + oy * g.wo;
          if (g.stride == 1) {
            for (std::size_t ox = lo; ox < hi; ++ox) dst[ox - lo] += src[ox];
          } else {
            for (std::size_t ox = lo; ox < hi; ++ox) dst[(ox - lo) * g.stride] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

/// 2D cross-correlation. `bias` may be an undefined tensor.
template <class T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias,
                 std::size_t stride = 1, std::size_t padding = 0) {
  detail::require_rank4(input.shape(), "conv2d", "input");
  detail::require_rank4(kernel.shape(), "conv2d", "kernel");
  const std::size_t n = input.dim(0), cout = kernel.dim(0);
  if (kernel.dim(1) != input.dim(1)) {
    throw ShapeError("conv2d: input channel dimension (dim 1) is " + std::to_string(input.dim(1)) +
                     " but kernel expects " + std::to_string(kernel.dim(1)));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != cout)) {
    throw ShapeError("conv2d: bias must be [" + std::to_string(cout) + "], got " +
                     shape_str(bias.shape()));
  }
  if (stride == 0) throw ShapeError("conv2d: stride must be positive");
  detail::ConvGeom g{input.dim(1), input.dim(2), input.dim(3), kernel.dim(2), kernel.dim(3),
                     stride, padding, 0, 0};
  if (g.h + 2 * padding < g.kh || g.w + 2 * padding < g.kw) {
    throw ShapeError("conv2d: kernel " + shape_str(kernel.shape()) + " larger than padded input " +
                     shape_str(input.shape()));
  }
  g.ho = (g.h + 2 * padding - g.kh) / stride + 1;
  g.wo = (g.w + 2 * padding - g.kw) / stride + 1;

  const std::size_t K = g.k(), P = g.p();
  const bool keep_cols = grad_enabled() && !g.pointwise() &&
                         (kernel.requires_grad() || input.requires_grad());
  std::vector<T> out(n * cout * P);
  std::shared_ptr<T[]> cols;
  if (keep_cols) cols = std::shared_ptr<T[]>(std::make_unique_for_overwrite<T[]>(n * K * P));
  auto scratch = std::make_unique_for_overwrite<T[]>(g.pointwise() ? 0 : K * P);
  detail::ConstMatMap<T> W(kernel.data().data(), cout, K);
  const T* x = input.data().data();
  for (std::size_t s = 0; s < n; ++s) {
    const T* col = x + s * g.cin * g.h * g.w;
    if (!g.pointwise()) {
      T* dst = keep_cols ? cols.get() + s * K * P : scratch.get();
      detail::im2col(col, g, dst);
      col = dst;
    }
    detail::MatMap<T> Y(out.data() + s * cout * P, cout, P);
    Y.noalias() = W * detail::ConstMatMap<T>(col, K, P);
    if (bias.defined()) {
      for (std::size_t c = 0; c < cout; ++c) Y.row(c).array() += bias[c];
    }
  }

  std::vector<Tensor<T>> inputs{input, kernel};
  if (bias.defined()) inputs.push_back(bias);
  return Tensor<T>::make_result(
      Shape{n, cout, g.ho, g.wo}, std::move(out), std::move(inputs),
      [g, n, cout, cols = std::move(cols)](detail::Node<T>& self) {
        auto& px = *self.parents[0];
        auto& pk = *self.parents[1];
        const std::size_t K = g.k(), P = g.p();
        detail::ConstMatMap<T> W(pk.data.data(), cout, K);
        std::unique_ptr<T[]> col_buf;
        if (pk.requires_grad) pk.ensure_grad();
        if (px.requires_grad) px.ensure_grad();
        auto dcol = std::make_unique_for_overwrite<T[]>(g.pointwise() ? 0 : K * P);
        for (std::size_t s = 0; s < n; ++s) {
          detail::ConstMatMap<T> dY(self.grad.data() + s * cout * P, cout, P);
          if (pk.requires_grad) {
            const T* col = px.data.data() + s * g.cin * g.h * g.w;
            if (!g.pointwise()) {
              if (cols) {
                col = cols.get() + s * K * P;
              } else {
                if (!col_buf) col_buf = std::make_unique_for_overwrite<T[]>(K * P);
                detail::im2col(col, g, col_buf.get());
                col = col_buf.get();
              }
            }
            detail::MatMap<T>(pk.grad.data(), cout, K).noalias() +=
                dY * detail::ConstMatMap<T>(col, K, P).transpose();
          }
          if (px.requires_grad) {
            T* dx = px.grad.data() + s * g.cin * g.h * g.w;
            if (g.pointwise()) {
              detail::MatMap<T>(dx, K, P).noalias() += W.transpose() * dY;
            } else {
              detail::MatMap<T>(dcol.get(), K, P).noalias() = W.transpose() * dY;
              detail::col2im_add(dcol.get(), g, dx);
            }
          }
        }
        if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
          auto& pb = *self.parents[2];
          pb.ensure_grad();
          for (std::size_t s = 0; s < n; ++s) {
            for (std::size_t c = 0; c < cout; ++c) {
              const T* gr = self.grad.data() + (s * cout + c) * P;
              T acc{0};
              for (std::size_t i = 0; i < P; ++i) acc += gr[i];
              pb.grad[c] += acc;
            }
          }
        }
      });
}

/// 2x2 max pooling with stride 2. Ties route the gradient to the first
/// maximal element in row-major block order.
template <class T>
Tensor<T> max_pool2(const Tensor<T>& input) {
  detail::require_rank4(input.shape(), "max_pool2", "input");
  const std::size_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  if (h % 2 || w % 2) {
    throw ShapeError("max_pool2: spatial extents must be even, got " + shape_str(input.shape()));
  }
  const std::size_t ho = h / 2, wo = w / 2;
  std::vector<T> out(n * c * ho * wo);
  std::vector<std::uint32_t> arg(out.size());
  const T* x = input.data().data();
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const T* src = x + plane * h * w;
    for (std::size_t oy = 0; oy < ho; ++oy) {
      for (std::size_t ox = 0; ox < wo; ++ox) {
        std::size_t best = (2 * oy) * w + 2 * ox;
        const std::size_t cand[3] = {best + 1, best + w, best + w + 1};
        for (auto q : cand) {
          if (src[q] > src[best]) best = q;
        }
        const std::size_t o = plane * ho * wo + oy * wo + ox;
        out[o] = src[best];
        arg[o] = static_cast<std::uint32_t>(plane * h * w + best);
      }
    }
  }
  return Tensor<T>::make_result(Shape{n, c, ho, wo}, std::move(out), {input},
                                [arg = std::move(arg)](detail::Node<T>& self) {
                                  auto& p = *self.parents[0];
                                  if (!p.requires_grad) return;
                                  p.ensure_grad();
                                  for (std::size_t i = 0; i < arg.size(); ++i) {
                                    p.grad[arg[i]] += self.grad[i];
                                  }
                                });
}

/// Stride-2 transposed convolution with a 2x2 kernel laid out
/// [Cin, Cout, 2, 2]; doubles H and W. `bias` may be undefined.
template <class T>
Tensor<T> upsample2(const Tensor<T>& input, const Tensor<T>& kernel,
                    const Tensor<T>& bias = Tensor<T>{}) {
  detail::require_rank4(input.shape(), "upsample2", "input");
  detail::require_rank4(kernel.shape(), "upsample2", "kernel");
  const std::size_t n = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
  if (kernel.dim(0) != cin || kernel.dim(2) != 2 || kernel.dim(3) != 2) {
    throw ShapeError("upsample2: kernel must be [" + std::to_string(cin) + ",Cout,2,2], got " +
                     shape_str(kernel.shape()));
  }
  const std::size_t cout = kernel.dim(1);
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != cout)) {
    throw ShapeError("upsample2: bias must be [" + std::to_string(cout) + "]");
  }
  const std::size_t P = h * w, R = cout * 4;
  // Wt[(co*4 + a*2 + b), ci] = kernel[ci, co, a, b]
  detail::RowMat<T> Wt(R, cin);
  const T* kd = kernel.data().data();
  for (std::size_t ci = 0; ci < cin; ++ci)
    for (std::size_t r = 0; r < R; ++r) Wt(r, ci) = kd[ci * R + r];

  std::vector<T> out(n * cout * 4 * P);
  detail::RowMat<T> Y(R, P);
  for (std::size_t s = 0; s < n; ++s) {
    Y.noalias() = Wt * detail::ConstMatMap<T>(input.data().data() + s * cin * P, cin, P);
    T* o = out.data() + s * cout * 4 * P;
    for (std::size_t co = 0; co < cout; ++co) {
      const T b0 = bias.defined() ? bias[co] : T{0};
      for (std::size_t a = 0; a < 2; ++a)
        for (std::size_t b = 0; b < 2; ++b)
          for (std::size_t i = 0; i < h; ++i)
            for (std::size_t j = 0; j < w; ++j)
              o[(co * 2 * h + 2 * i + a) * 2 * w + 2 * j + b] = Y(co * 4 + a * 2 + b, i * w + j) + b0;
    }
  }
  std::vector<Tensor<T>> inputs{input, kernel};
  if (bias.defined()) inputs.push_back(bias);
  return Tensor<T>::make_result(
      Shape{n, cout, 2 * h, 2 * w}, std::move(out), std::move(inputs),
      [n, cin, cout, h, w, Wt = std::move(Wt)](detail::Node<T>& self) {
        auto& px = *self.parents[0];
        auto& pk = *self.parents[1];
        const std::size_t P = h * w, R = cout * 4;
        detail::RowMat<T> dY(R, P);
        detail::RowMat<T> dWt = detail::RowMat<T>::Zero(R, cin);
        std::vector<T> db(cout, T{0});
        if (px.requires_grad) px.ensure_grad();
        for (std::size_t s = 0; s < n; ++s) {
          const T* g = self.grad.data() + s * cout * 4 * P;
          for (std::size_t co = 0; co < cout; ++co)
            for (std::size_t a = 0; a < 2; ++a)
              for (std::size_t b = 0; b < 2; ++b)
                for (std::size_t i = 0; i < h; ++i)
                  for (std::size_t j = 0; j < w; ++j)
                    dY(co * 4 + a * 2 + b, i * w + j) = g[(co * 2 * h + 2 * i + a) * 2 * w + 2 * j + b];
          if (pk.requires_grad) {
            dWt.noalias() += dY * detail::ConstMatMap<T>(px.data.data() + s * cin * P, cin, P).transpose();
          }
          if (px.requires_grad) {
            detail::MatMap<T>(px.grad.data() + s * cin * P, cin, P).noalias() += Wt.transpose() * dY;
          }
          for (std::size_t co = 0; co < cout; ++co) db[co] += dY.middleRows(co * 4, 4).sum();
        }
        if (pk.requires_grad) {
          pk.ensure_grad();
          for (std::size_t ci = 0; ci < cin; ++ci)
            for (std::size_t r = 0; r < R; ++r) pk.grad[ci * R + r] += dWt(r, ci);
        }
        if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
          auto& pb = *self.parents[2];
          pb.ensure_grad();
          for (std::size_t co = 0; co < cout; ++co) pb.grad[co] += db[co];
        }
      });
}

enum class BnMode {
  Train,  // batch statistics, running stats updated, affine applied
  Eval,   // running statistics, affine applied
  Fixed,  // batch statistics, no affine, no learnable state
};

template <class T>
struct RunningStats {
  std::vector<T> mean;
  std::vector<T> var;

  explicit RunningStats(std::size_t channels = 0) : mean(channels, T{0}), var(channels, T{1}) {}
};

inline constexpr double kBnEpsilon = 1e-5;
inline constexpr double kBnMomentum = 0.1;

/// Per-channel batch normalization over (N, H, W). In Fixed mode `gamma`,
/// `beta` and `stats` are ignored and may be undefined/null.
template <class T>
Tensor<T> batchnorm(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta,
                    BnMode mode, RunningStats<T>* stats, T eps = T(kBnEpsilon),
                    T momentum = T(kBnMomentum)) {
  if (input.rank() < 2) throw ShapeError("batchnorm: input must be [N, C, ...]");
  const std::size_t n = input.dim(0), c = input.dim(1);
  const std::size_t plane = input.numel() / (n * c);
  const std::size_t m = n * plane;
  const bool affine = mode != BnMode::Fixed;
  if (affine) {
    if (!gamma.defined() || !beta.defined() || gamma.numel() != c || beta.numel() != c) {
      throw ShapeError("batchnorm: gamma/beta must have " + std::to_string(c) + " entries");
    }
  }
  if (mode != BnMode::Fixed && (stats == nullptr || stats->mean.size() != c)) {
    throw ShapeError("batchnorm: running statistics for " + std::to_string(c) + " channels required");
  }
  const T* x = input.data().data();
  std::vector<T> mean(c, T{0}), invstd(c);
  if (mode == BnMode::Eval) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      mean[ch] = stats->mean[ch];
      invstd[ch] = T{1} / std::sqrt(stats->var[ch] + eps);
    }
  } else {
    if (m < 2 && mode == BnMode::Train) {
      throw ShapeError("batchnorm: Train mode needs more than one value per channel");
    }
    for (std::size_t ch = 0; ch < c; ++ch) {
      T s{0};
      for (std::size_t b = 0; b < n; ++b) {
        const T* p = x + (b * c + ch) * plane;
        for (std::size_t i = 0; i < plane; ++i) s += p[i];
      }
      mean[ch] = s / static_cast<T>(m);
      T v{0};
      for (std::size_t b = 0; b < n; ++b) {
        const T* p = x + (b * c + ch) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          const T d = p[i] - mean[ch];
          v += d * d;
        }
      }
      v /= static_cast<T>(m);
      invstd[ch] = T{1} / std::sqrt(v + eps);
      if (mode == BnMode::Train) {
        const T unbiased = v * static_cast<T>(m) / static_cast<T>(m - 1);
        stats->mean[ch] = (T{1} - momentum) * stats->mean[ch] + momentum * mean[ch];
        stats->var[ch] = (T{1} - momentum) * stats->var[ch] + momentum * unbiased;
      }
    }
  }
  std::vector<T> xhat(input.numel()), out(input.numel());
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t off = (b * c + ch) * plane;
      const T g = affine ? gamma[ch] : T{1};
      const T be = affine ? beta[ch] : T{0};
      for (std::size_t i = 0; i < plane; ++i) {
        const T xh = (x[off + i] - mean[ch]) * invstd[ch];
        xhat[off + i] = xh;
        out[off + i] = g * xh + be;
      }
    }
  }
  std::vector<Tensor<T>> inputs{input};
  if (affine) {
    inputs.push_back(gamma);
    inputs.push_back(beta);
  }
  return Tensor<T>::make_result(
      input.shape(), std::move(out), std::move(inputs),
      [n, c, plane, m, mode, affine, invstd = std::move(invstd),
       xhat = std::move(xhat)](detail::Node<T>& self) {
        auto& px = *self.parents[0];
        const T* dy = self.grad.data();
        std::vector<T> dgamma(c, T{0}), dbeta(c, T{0});
        for (std::size_t ch = 0; ch < c; ++ch) {
          for (std::size_t b = 0; b < n; ++b) {
            const std::size_t off = (b * c + ch) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
              dgamma[ch] += dy[off + i] * xhat[off + i];
              dbeta[ch] += dy[off + i];
            }
          }
        }
        if (px.requires_grad) {
          px.ensure_grad();
          for (std::size_t ch = 0; ch < c; ++ch) {
            const T g = affine ? self.parents[1]->data[ch] : T{1};
            if (mode == BnMode::Eval) {
              for (std::size_t b = 0; b < n; ++b) {
                const std::size_t off = (b * c + ch) * plane;
                for (std::size_t i = 0; i < plane; ++i) px.grad[off + i] += dy[off + i] * g * invstd[ch];
              }
              continue;
            }
            // sum(dxhat) = g * dbeta, sum(dxhat * xhat) = g * dgamma
            const T sum_d = g * dbeta[ch];
            const T sum_dx = g * dgamma[ch];
            const T k = invstd[ch] / static_cast<T>(m);
            for (std::size_t b = 0; b < n; ++b) {
              const std::size_t off = (b * c + ch) * plane;
              for (std::size_t i = 0; i < plane; ++i) {
                const T dxh = dy[off + i] * g;
                px.grad[off + i] += k * (static_cast<T>(m) * dxh - sum_d - xhat[off + i] * sum_dx);
              }
            }
          }
        }
        if (affine) {
          auto& pg = *self.parents[1];
          auto& pb = *self.parents[2];
          if (pg.requires_grad) {
            pg.ensure_grad();
            for (std::size_t ch = 0; ch < c; ++ch) pg.grad[ch] += dgamma[ch];
          }
          if (pb.requires_grad) {
            pb.ensure_grad();
            for (std::size_t ch = 0; ch < c; ++ch) pb.grad[ch] += dbeta[ch];
          }
        }
      });
}

template <class T>
Tensor<T> leaky_relu(const Tensor<T>& input, T slope) {
  return detail::unary_op(
      input, [slope](T x) { return x >= T{0} ? x : slope * x; },
      [slope](T x, T) { return x >= T{0} ? T{1} : slope; });
}

/// Mean voxel-wise cross-entropy of softmax(logits) against integer labels.
/// logits: [N, K, H, W]; labels: N*H*W entries in [0, K).
template <class T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const std::uint8_t> labels) {
  detail::require_rank4(logits.shape(), "softmax_cross_entropy", "logits");
  const std::size_t n = logits.dim(0), k = logits.dim(1), plane = logits.dim(2) * logits.dim(3);
  if (labels.size() != n * plane) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(n * plane) + " voxels");
  }
  const T* z = logits.data().data();
  std::vector<T> prob(logits.numel());
  T total{0};
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t i = 0; i < plane; ++i) {
      const std::uint8_t lab = labels[b * plane + i];
      if (lab >= k) {
        throw ShapeError("softmax_cross_entropy: label " + std::to_string(lab) +
                         " out of range [0, " + std::to_string(k) + ")");
      }
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t c = 0; c < k; ++c) mx = std::max(mx, z[(b * k + c) * plane + i]);
      T s{0};
      for (std::size_t c = 0; c < k; ++c) {
        const T e = std::exp(z[(b * k + c) * plane + i] - mx);
        prob[(b * k + c) * plane + i] = e;
        s += e;
      }
      for (std::size_t c = 0; c < k; ++c) prob[(b * k + c) * plane + i] /= s;
      total += std::log(s) + mx - z[(b * k + lab) * plane + i];
    }
  }
  const std::size_t count = n * plane;
  std::vector<std::uint8_t> lab(labels.begin(), labels.end());
  return Tensor<T>::make_result(
      Shape{1}, {total / static_cast<T>(count)}, {logits},
      [n, k, plane, count, prob = std::move(prob), lab = std::move(lab)](detail::Node<T>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        const T g = self.grad[0] / static_cast<T>(count);
        for (std::size_t b = 0; b < n; ++b) {
          for (std::size_t c = 0; c < k; ++c) {
            for (std::size_t i = 0; i < plane; ++i) {
              const std::size_t q = (b * k + c) * plane + i;
              const T onehot = lab[b * plane + i] == c ? T{1} : T{0};
              p.grad[q] += g * (prob[q] - onehot);
            }
          }
        }
      });
}

// Per-voxel softmax over the channel axis (no graph).
template <class T>
std::vector<T> softmax_channels(const Tensor<T>& logits) {
  const std::size_t n = logits.dim(0), k = logits.dim(1), plane = logits.dim(2) * logits.dim(3);
  const T* z = logits.data().data();
  std::vector<T> out(logits.numel());
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t i = 0; i < plane; ++i) {
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t c = 0; c < k; ++c) mx = std::max(mx, z[(b * k + c) * plane + i]);
      T s{0};
      for (std::size_t c = 0; c < k; ++c) s += (out[(b * k + c) * plane + i] = std::exp(z[(b * k + c) * plane + i] - mx));
      for (std::size_t c = 0; c < k; ++c) out[(b * k + c) * plane + i] /= s;
    }
  }
  return out;
}

// Channel argmax per voxel; first maximum wins.
template <class T>
std::vector<std::uint8_t> argmax_channels(const Tensor<T>& logits) {
  const std::size_t n = logits.dim(0), k = logits.dim(1), plane = logits.dim(2) * logits.dim(3);
  const T* z = logits.data().data();
  std::vector<std::uint8_t> out(n * plane);
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t i = 0; i < plane; ++i) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < k; ++c) {
        if (z[(b * k + c) * plane + i] > z[(b * k + best) * plane + i]) best = c;
      }
      out[b * plane + i] = static_cast<std::uint8_t>(best);
    }
  }
  return out;
}

}  // namespace unirep
