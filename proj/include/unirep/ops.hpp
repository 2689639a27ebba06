#pragma once

// Elementwise arithmetic, reductions and layout ops on Tensor.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "unirep/tensor.hpp"

namespace unirep {

namespace detail {

inline std::vector<std::size_t> strides_of(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  if (a.size() != b.size()) {
    throw ShapeError(std::string(op) + ": rank mismatch " + shape_str(a) + " vs " + shape_str(b));
  }
  Shape out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] == b[i] || b[i] == 1) {
      out[i] = a[i];
    } else if (a[i] == 1) {
      out[i] = b[i];
    } else {
      throw ShapeError(std::string(op) + ": dimension " + std::to_string(i) + " mismatch (" +
                       std::to_string(a[i]) + " vs " + std::to_string(b[i]) + ")");
    }
  }
  return out;
}

// For each output linear index, the linear index into an operand of shape
// `in` broadcast to `out`.
inline std::vector<std::size_t> broadcast_index(const Shape& in, const Shape& out) {
  const auto in_st = strides_of(in);
  const auto n = shape_numel(out);
  std::vector<std::size_t> idx(n);
  std::vector<std::size_t> coord(out.size(), 0);
  for (std::size_t lin = 0; lin < n; ++lin) {
    std::size_t off = 0;
    for (std::size_t d = 0; d < out.size(); ++d) {
      if (in[d] != 1) off += coord[d] * in_st[d];
    }
    idx[lin] = off;
    for (std::size_t d = out.size(); d-- > 0;) {
      if (++coord[d] < out[d]) break;
      coord[d] = 0;
    }
  }
  return idx;
}

// Elementwise binary op with same-rank broadcasting. `da`/`db` give the
// partial derivatives at (x, y).
template <class T, class F, class DA, class DB>
Tensor<T> binary_op(const Tensor<T>& a, const Tensor<T>& b, const char* name, F f, DA da, DB db) {
  if (a.shape() == b.shape()) {
    const auto n = a.numel();
    std::vector<T> out(n);
    const auto x = a.data();
    const auto y = b.data();
    for (std::size_t i = 0; i < n; ++i) out[i] = f(x[i], y[i]);
    return Tensor<T>::make_result(a.shape(), std::move(out), {a, b}, [da, db](Node<T>& self) {
      auto& pa = *self.parents[0];
      auto& pb = *self.parents[1];
      const auto n = self.grad.size();
      if (pa.requires_grad) {
        pa.ensure_grad();
        for (std::size_t i = 0; i < n; ++i) pa.grad[i] += self.grad[i] * da(pa.data[i], pb.data[i]);
      }
      if (pb.requires_grad) {
        pb.ensure_grad();
        for (std::size_t i = 0; i < n; ++i) pb.grad[i] += self.grad[i] * db(pa.data[i], pb.data[i]);
      }
    });
  }
  Shape shape = broadcast_shape(a.shape(), b.shape(), name);
  auto ia = broadcast_index(a.shape(), shape);
  auto ib = broadcast_index(b.shape(), shape);
  std::vector<T> out(ia.size());
  const auto x = a.data();
  const auto y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[ia[i]], y[ib[i]]);
  return Tensor<T>::make_result(
      std::move(shape), std::move(out), {a, b},
      [da, db, ia = std::move(ia), ib = std::move(ib)](Node<T>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.requires_grad) pa.ensure_grad();
        if (pb.requires_grad) pb.ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
          const T x = pa.data[ia[i]];
          const T y = pb.data[ib[i]];
          if (pa.requires_grad) pa.grad[ia[i]] += self.grad[i] * da(x, y);
          if (pb.requires_grad) pb.grad[ib[i]] += self.grad[i] * db(x, y);
        }
      });
}

// Elementwise unary op; `d` gives the derivative from (input, output).
template <class T, class F, class D>
Tensor<T> unary_op(const Tensor<T>& a, F f, D d) {
  const auto x = a.data();
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
  return Tensor<T>::make_result(a.shape(), std::move(out), {a}, [d](Node<T>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      p.grad[i] += self.grad[i] * d(p.data[i], self.data[i]);
    }
  });
}

}  // namespace detail

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op(
      a, b, "add", [](T x, T y) { return x + y; }, [](T, T) { return T{1}; },
      [](T, T) { return T{1}; });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op(
      a, b, "sub", [](T x, T y) { return x - y; }, [](T, T) { return T{1}; },
      [](T, T) { return T{-1}; });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op(
      a, b, "mul", [](T x, T y) { return x * y; }, [](T, T y) { return y; },
      [](T x, T) { return x; });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  return detail::unary_op(a, [s](T x) { return x * s; }, [s](T, T) { return s; });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
  return detail::unary_op(a, [s](T x) { return x + s; }, [](T, T) { return T{1}; });
}

template <class T>
Tensor<T> square(const Tensor<T>& a) {
  return detail::unary_op(a, [](T x) { return x * x; }, [](T x, T) { return T{2} * x; });
}

template <class T>
Tensor<T> exp(const Tensor<T>& a) {
  return detail::unary_op(a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <class T>
Tensor<T> log(const Tensor<T>& a) {
  for (T v : a.data()) {
    if (!(v > T{0})) throw NumericalError("log: non-positive input " + std::to_string(v));
  }
  return detail::unary_op(a, [](T x) { return std::log(x); }, [](T x, T) { return T{1} / x; });
}

// Clamp to [lo, hi]; gradient passes only strictly inside the interval.
template <class T>
Tensor<T> clamp(const Tensor<T>& a, T lo, T hi) {
  return detail::unary_op(
      a, [lo, hi](T x) { return std::clamp(x, lo, hi); },
      [lo, hi](T x, T) { return (x > lo && x < hi) ? T{1} : T{0}; });
}

template <class T>
Tensor<T> sum_all(const Tensor<T>& a) {
  T s{0};
  for (T v : a.data()) s += v;
  return Tensor<T>::make_result(Shape{1}, {s}, {a}, [](detail::Node<T>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (auto& g : p.grad) g += self.grad[0];
  });
}

template <class T>
Tensor<T> mean_all(const Tensor<T>& a) {
  return scale(sum_all(a), T{1} / static_cast<T>(a.numel()));
}

/// Mean over the listed axes, keeping them as extent-1 dimensions.
template <class T>
Tensor<T> mean_over(const Tensor<T>& a, const std::vector<std::size_t>& axes) {
  Shape out_shape = a.shape();
  std::size_t count = 1;
  for (auto ax : axes) {
    if (ax >= a.rank()) throw ShapeError("mean_over: axis " + std::to_string(ax) + " out of range");
    count *= out_shape[ax];
    out_shape[ax] = 1;
  }
  auto idx = detail::broadcast_index(out_shape, a.shape());
  std::vector<T> out(shape_numel(out_shape), T{0});
  const auto x = a.data();
  for (std::size_t i = 0; i < x.size(); ++i) out[idx[i]] += x[i];
  const T inv = T{1} / static_cast<T>(count);
  for (auto& v : out) v *= inv;
  return Tensor<T>::make_result(std::move(out_shape), std::move(out), {a},
                                [idx = std::move(idx), inv](detail::Node<T>& self) {
                                  auto& p = *self.parents[0];
                                  if (!p.requires_grad) return;
                                  p.ensure_grad();
                                  for (std::size_t i = 0; i < p.grad.size(); ++i) {
                                    p.grad[i] += self.grad[idx[i]] * inv;
                                  }
                                });
}

/// Population variance over the listed axes (keepdim). Values are shifted by
/// the first element of each group before the two-pass sums, so constant
/// groups give exactly zero.
template <class T>
Tensor<T> variance_over(const Tensor<T>& a, const std::vector<std::size_t>& axes) {
  Shape out_shape = a.shape();
  std::size_t count = 1;
  for (auto ax : axes) {
    if (ax >= a.rank()) throw ShapeError("variance_over: axis " + std::to_string(ax) + " out of range");
    count *= out_shape[ax];
    out_shape[ax] = 1;
  }
  auto idx = detail::broadcast_index(out_shape, a.shape());
  const std::size_t groups = shape_numel(out_shape);
  const auto x = a.data();
  const T inv = T{1} / static_cast<T>(count);
  std::vector<T> ref(groups, T{0}), shift(groups, T{0}), out(groups, T{0});
  std::vector<std::uint8_t> seen(groups, 0);
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!seen[idx[i]]) {
      seen[idx[i]] = 1;
      ref[idx[i]] = x[i];
    }
    shift[idx[i]] += x[i] - ref[idx[i]];
  }
  for (std::size_t g = 0; g < groups; ++g) {
    shift[g] = ref[g] + shift[g] * inv;  // the group mean
  }
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T d = (x[i] - ref[idx[i]]) - (shift[idx[i]] - ref[idx[i]]);
    out[idx[i]] += d * d;
  }
  for (auto& v : out) v *= inv;
  return Tensor<T>::make_result(
      std::move(out_shape), std::move(out), {a},
      [idx = std::move(idx), ref = std::move(ref), mean = std::move(shift), inv](detail::Node<T>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::size_t i = 0; i < p.grad.size(); ++i) {
          const T d = (p.data[i] - ref[idx[i]]) - (mean[idx[i]] - ref[idx[i]]);
          p.grad[i] += self.grad[idx[i]] * T{2} * d * inv;
        }
      });
}

/// Concatenate along `axis`; all other extents must agree.
template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis = 1) {
  if (parts.empty()) throw ShapeError("concat: empty input list");
  const Shape& ref = parts[0].shape();
  if (axis >= ref.size()) throw ShapeError("concat: axis out of range");
  Shape shape = ref;
  shape[axis] = 0;
  for (const auto& p : parts) {
    if (p.rank() != ref.size()) throw ShapeError("concat: rank mismatch");
    for (std::size_t d = 0; d < ref.size(); ++d) {
      if (d != axis && p.dim(d) != ref[d]) {
        throw ShapeError("concat: dimension " + std::to_string(d) + " mismatch (" +
                         std::to_string(p.dim(d)) + " vs " + std::to_string(ref[d]) + ")");
      }
    }
    shape[axis] += p.dim(axis);
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= ref[d];
  for (std::size_t d = axis + 1; d < ref.size(); ++d) inner *= ref[d];
  const std::size_t row = shape[axis] * inner;
  std::vector<T> out(shape_numel(shape));
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const std::size_t block = p.dim(axis) * inner;
    const auto x = p.data();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(x.begin() + o * block, block, out.begin() + o * row + off);
    }
    off += block;
  }
  return Tensor<T>::make_result(
      std::move(shape), std::move(out), parts,
      [offsets = std::move(offsets), outer, row](detail::Node<T>& self) {
        for (std::size_t k = 0; k < self.parents.size(); ++k) {
          auto& p = *self.parents[k];
          if (!p.requires_grad) continue;
          p.ensure_grad();
          const std::size_t block = p.data.size() / outer;
          for (std::size_t o = 0; o < outer; ++o) {
            for (std::size_t i = 0; i < block; ++i) {
              p.grad[o * block + i] += self.grad[o * row + offsets[k] + i];
            }
          }
        }
      });
}

/// Rows of axis 0 picked by `indices` (repeats allowed).
template <class T>
Tensor<T> gather_batch(const Tensor<T>& a, const std::vector<std::size_t>& indices) {
  const std::size_t row = a.numel() / a.dim(0);
  Shape shape = a.shape();
  shape[0] = indices.size();
  std::vector<T> out(indices.size() * row);
  const auto x = a.data();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= a.dim(0)) throw ShapeError("gather_batch: index out of range");
    std::copy_n(x.begin() + indices[i] * row, row, out.begin() + i * row);
  }
  return Tensor<T>::make_result(std::move(shape), std::move(out), {a},
                                [indices, row](detail::Node<T>& self) {
                                  auto& p = *self.parents[0];
                                  if (!p.requires_grad) return;
                                  p.ensure_grad();
                                  for (std::size_t i = 0; i < indices.size(); ++i) {
                                    for (std::size_t j = 0; j < row; ++j) {
                                      p.grad[indices[i] * row + j] += self.grad[i * row + j];
                                    }
                                  }
                                });
}

/// Zero whole channels of an [N, C, ...] tensor. `keep` has either C
/// entries (same for every sample) or N*C entries (per sample); nonzero
/// means the channel is kept.
template <class T>
Tensor<T> zero_channels(const Tensor<T>& a, std::span<const std::uint8_t> keep) {
  if (a.rank() < 2) throw ShapeError("zero_channels: need [N, C, ...]");
  const std::size_t n = a.dim(0), c = a.dim(1);
  if (keep.size() != c && keep.size() != n * c) {
    throw ShapeError("zero_channels: mask has " + std::to_string(keep.size()) +
                     " entries, expected " + std::to_string(c) + " or " + std::to_string(n * c));
  }
  const std::size_t plane = a.numel() / (n * c);
  std::vector<std::uint8_t> k(n * c);
  for (std::size_t i = 0; i < n * c; ++i) k[i] = keep.size() == c ? keep[i % c] : keep[i];
  std::vector<T> out(a.data().begin(), a.data().end());
  for (std::size_t i = 0; i < n * c; ++i) {
    if (!k[i]) std::fill_n(out.begin() + i * plane, plane, T{0});
  }
  return Tensor<T>::make_result(a.shape(), std::move(out), {a},
                                [k = std::move(k), plane](detail::Node<T>& self) {
                                  auto& p = *self.parents[0];
                                  if (!p.requires_grad) return;
                                  p.ensure_grad();
                                  for (std::size_t i = 0; i < k.size(); ++i) {
                                    if (!k[i]) continue;
                                    for (std::size_t j = 0; j < plane; ++j) {
                                      p.grad[i * plane + j] += self.grad[i * plane + j];
                                    }
                                  }
                                });
}

template <class T>
Tensor<T> mse_loss(const Tensor<T>& pred, const Tensor<T>& target) {
  if (pred.shape() != target.shape()) {
    throw ShapeError("mse_loss: " + shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
  }
  return mean_all(square(sub(pred, target)));
}

}  // namespace unirep
