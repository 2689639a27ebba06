#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "unirep/tensor.hpp"

namespace unirep {

/// A trainable leaf tensor with its Adam moment buffers.
template <class T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  std::vector<T> adam_m;
  std::vector<T> adam_v;
  std::uint64_t step_count = 0;
  bool frozen = false;

  Parameter() = default;
  Parameter(std::string n, Tensor<T> t)
      : name(std::move(n)),
        value(std::move(t)),
        adam_m(value.numel(), T{0}),
        adam_v(value.numel(), T{0}) {
    value.set_requires_grad(true);
  }

  void zero_grad() { value.zero_grad(); }
};

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One bias-corrected Adam update from each parameter's accumulated
/// gradient. Frozen parameters, and parameters that received no gradient,
/// are left untouched.
template <class T>
void adam_step(std::span<Parameter<T>* const> params, const AdamOptions& opt) {
  const T b1 = static_cast<T>(opt.beta1), b2 = static_cast<T>(opt.beta2);
  const T lr = static_cast<T>(opt.lr), eps = static_cast<T>(opt.eps);
  for (Parameter<T>* p : params) {
    if (p->frozen) continue;
    if (!p->value.has_grad()) continue;
    ++p->step_count;
    const auto t = static_cast<double>(p->step_count);
    const T c1 = static_cast<T>(1.0 - std::pow(opt.beta1, t));
    const T c2 = static_cast<T>(1.0 - std::pow(opt.beta2, t));
    auto g = p->value.grad();
    auto w = p->value.mutable_data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      p->adam_m[i] = b1 * p->adam_m[i] + (T{1} - b1) * g[i];
      p->adam_v[i] = b2 * p->adam_v[i] + (T{1} - b2) * g[i] * g[i];
      const T mhat = p->adam_m[i] / c1;
      const T vhat = p->adam_v[i] / c2;
      w[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

template <class T>
void adam_step(std::vector<Parameter<T>*>& params, const AdamOptions& opt) {
  adam_step(std::span<Parameter<T>* const>(params.data(), params.size()), opt);
}

}  // namespace unirep
