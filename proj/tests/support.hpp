#pragma once

// Test-side oracles shared by the unit and acceptance suites.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "unirep/unirep.hpp"

namespace unirep::testing {

using DTensor = Tensor<double>;

inline DTensor random_tensor(const Shape& shape, CounterRng& rng, double scale = 1.0, bool grad = true) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = scale * rng.normal();
  return DTensor(shape, std::move(v), grad);
}

// Values bounded away from zero (for ops with a kink at 0).
inline DTensor random_away_from_zero(const Shape& shape, CounterRng& rng, double margin = 0.05) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) {
    const double m = margin + std::abs(rng.normal());
    x = rng.uniform() < 0.5 ? -m : m;
  }
  return DTensor(shape, std::move(v), true);
}

// Distinct values spaced 0.01 apart in random order (no near-ties).
inline DTensor random_distinct(const Shape& shape, CounterRng& rng) {
  const std::size_t n = shape_numel(shape);
  std::vector<double> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = 0.01 * (static_cast<double>(i) - 0.5 * static_cast<double>(n));
  for (std::size_t i = n; i > 1; --i) std::swap(v[i - 1], v[rng.below(i)]);
  return DTensor(shape, std::move(v), true);
}

using ScalarFn = std::function<DTensor(const std::vector<DTensor>&)>;

// Central differences of `fn` with respect to every element of every input.
inline std::vector<std::vector<double>> finite_differences(const ScalarFn& fn, std::vector<DTensor>& inputs,
                                                           double eps) {
  NoGradGuard ng;
  std::vector<std::vector<double>> out;
  for (auto& in : inputs) {
    std::vector<double> g(in.numel(), 0.0);
    if (in.requires_grad()) {
      auto x = in.mutable_data();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double orig = x[i];
        x[i] = orig + eps;
        const double plus = fn(inputs).item();
        x[i] = orig - eps;
        const double minus = fn(inputs).item();
        x[i] = orig;
        g[i] = (plus - minus) / (2 * eps);
      }
    }
    out.push_back(std::move(g));
  }
  return out;
}

inline double relative_error(const std::vector<double>& a, const std::vector<double>& b) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nb), 1e-10});
}

/// Worst relative error over all inputs between the autodiff gradient and
/// central differences, where `fn` maps the inputs to a scalar. The error
/// for one input is ||g_auto - g_fd|| / max(||g_auto||, ||g_fd||, 1e-10).
inline double gradient_error(const ScalarFn& fn, std::vector<DTensor> inputs, double eps = 1e-3) {
  for (auto& t : inputs) t.zero_grad();
  fn(inputs).backward();
  const auto numeric = finite_differences(fn, inputs, eps);
  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    if (!inputs[k].requires_grad()) continue;
    std::vector<double> analytic(inputs[k].numel(), 0.0);
    if (inputs[k].has_grad()) {
      const auto g = inputs[k].grad();
      std::copy(g.begin(), g.end(), analytic.begin());
    }
    worst = std::max(worst, relative_error(analytic, numeric[k]));
  }
  return worst;
}

/// True when the function is smooth at scale `eps` around the inputs:
/// central differences at eps and eps/10 agree to 1e-5. Piecewise-linear
/// networks fail this when an activation or pooling kink lies within eps.
inline bool smooth_at(const ScalarFn& fn, std::vector<DTensor> inputs, double eps = 1e-3) {
  const auto coarse = finite_differences(fn, inputs, eps);
  const auto fine = finite_differences(fn, inputs, eps / 10);
  for (std::size_t k = 0; k < coarse.size(); ++k) {
    if (relative_error(coarse[k], fine[k]) > 1e-5) return false;
  }
  return true;
}

/// Scalar probe of a tensor-valued function: a fixed random projection.
inline DTensor project(const DTensor& out, std::uint64_t seed = 99) {
  CounterRng rng(seed);
  auto w = random_tensor(out.shape(), rng, 1.0, false);
  return sum_all(mul(out, w));
}

}  // namespace unirep::testing
