#pragma once

// Fusion of a variable set of standardized modality encodings into one
// representation (a generalized f-mean), the across-modality variance
// regularizer, and the full encode / fuse / decode forward pass.

#include <algorithm>
#include <cstddef>
#include <map>
#include <numeric>
#include <utility>
#include <vector>

#include "unirep/errors.hpp"
#include "unirep/model.hpp"
#include "unirep/moddrop.hpp"
#include "unirep/ops.hpp"

namespace unirep {

/// The function f of the f-mean together with its inverse.
struct FusionF {
  FusionKind kind = FusionKind::Identity;

  // Exp inputs are clamped to this range before exponentiation.
  static constexpr double kExpClamp = 20.0;

  template <class T>
  Tensor<T> forward(const Tensor<T>& x) const {
    if (kind == FusionKind::Identity) return x;
    return exp(clamp(x, static_cast<T>(-kExpClamp), static_cast<T>(kExpClamp)));
  }

  template <class T>
  Tensor<T> inverse(const Tensor<T>& y) const {
    if (kind == FusionKind::Identity) return y;
    return log(y);
  }
};

namespace detail {

template <class T>
void check_same_shapes(const std::vector<Tensor<T>>& inputs, const char* who) {
  for (const auto& t : inputs) {
    if (!t.defined()) throw ShapeError(std::string(who) + ": undefined input");
    if (t.shape() != inputs.front().shape()) {
      throw ShapeError(std::string(who) + ": input shapes differ (" + shape_str(inputs.front().shape()) +
                       " vs " + shape_str(t.shape()) + ")");
    }
  }
}

template <class T>
Tensor<T> sum_list(const std::vector<Tensor<T>>& xs) {
  Tensor<T> acc = xs.front();
  for (std::size_t i = 1; i < xs.size(); ++i) acc = add(acc, xs[i]);
  return acc;
}

}  // namespace detail

/// f^{-1}( (1/n) sum_i f(x_i) ), summed in list order.
template <class T>
Tensor<T> fuse(const std::vector<Tensor<T>>& inputs, const FusionF& f) {
  if (inputs.empty()) throw ShapeError("fuse: no inputs");
  detail::check_same_shapes(inputs, "fuse");
  if (inputs.size() == 1) return inputs.front();
  std::vector<Tensor<T>> mapped;
  mapped.reserve(inputs.size());
  for (const auto& x : inputs) mapped.push_back(f.forward(x));
  const T inv_n = T{1} / static_cast<T>(inputs.size());
  return f.inverse(scale(detail::sum_list(mapped), inv_n));
}

/// Keyed by modality index; sums in ascending index order whatever the
/// order of the list, so the result is independent of presentation order.
template <class T>
Tensor<T> fuse(std::vector<std::pair<std::size_t, Tensor<T>>> inputs, const FusionF& f) {
  std::stable_sort(inputs.begin(), inputs.end(),
                   [](const auto& a, const auto& b) { return a.first < b.first; });
  std::vector<Tensor<T>> ordered;
  ordered.reserve(inputs.size());
  for (auto& [idx, t] : inputs) ordered.push_back(std::move(t));
  return fuse(ordered, f);
}

/// Mean over every element of the across-input population variance.
template <class T>
Tensor<T> variance_penalty(const std::vector<Tensor<T>>& inputs) {
  if (inputs.size() < 2) {
    throw ShapeError("variance_penalty: needs at least two inputs, got " + std::to_string(inputs.size()));
  }
  detail::check_same_shapes(inputs, "variance_penalty");
  const T inv_n = T{1} / static_cast<T>(inputs.size());
  // Offsets from the first input, so identical inputs give exactly zero.
  std::vector<Tensor<T>> offsets;
  offsets.reserve(inputs.size() - 1);
  for (std::size_t i = 1; i < inputs.size(); ++i) offsets.push_back(sub(inputs[i], inputs[0]));
  const Tensor<T> mean = scale(detail::sum_list(offsets), inv_n);
  std::vector<Tensor<T>> sq{square(mean)};
  for (const auto& d : offsets) sq.push_back(square(sub(d, mean)));
  return mean_all(scale(detail::sum_list(sq), inv_n));
}

struct UrnForwardOptions {
  FusionF f;
  Phase encoder_phase = Phase::Train;
  Phase decoder_phase = Phase::Train;
  Phase head_phase = Phase::Train;
  bool compute_penalty = true;  // only for samples with >= 2 available modalities
  bool decode = true;           // run every decoder on the fused representation
  bool segment = true;          // run the segmentation head
};

template <class T>
struct FusionOutput {
  Tensor<T> z;                            // [N,R,H,W]
  Tensor<T> variance_penalty;             // scalar, per-sample mean; undefined if no sample had n >= 2
  std::vector<std::size_t> contributing;  // available modalities per sample
  std::vector<Tensor<T>> syntheses;       // one [N,1,H,W] per modality when decoding
  Tensor<T> logits;                       // [N,K,H,W] when segmenting
  std::size_t encoder_calls = 0;
};

/// Encodes only the available modalities, fuses them per sample and
/// optionally decodes through every decoder and segments.
///
/// `images[m]` is [N,1,H,W] for model modality m, or undefined when no
/// sample carries that modality. `masks` holds one mask per sample.
/// Each encoder runs once over the sub-batch of samples that have its
/// modality; samples sharing an availability pattern are fused together.
template <class T>
FusionOutput<T> urn_forward(UrnModel<T>& model, const std::vector<Tensor<T>>& images,
                            const std::vector<ModalityMask>& masks, const UrnForwardOptions& opt) {
  const std::size_t M = model.modality_count();
  if (images.size() != M) {
    throw ShapeError("urn_forward: expected " + std::to_string(M) + " image slots, got " +
                     std::to_string(images.size()));
  }
  const std::size_t N = masks.size();
  if (N == 0) throw ShapeError("urn_forward: empty batch");
  for (std::size_t s = 0; s < N; ++s) {
    if (masks[s].size() != M) throw ShapeError("urn_forward: mask length differs from modality count");
    if (masks[s].count() == 0) throw ShapeError("urn_forward: sample " + std::to_string(s) + " has no available modality");
  }

  FusionOutput<T> out;
  // Encode each modality over the samples that have it; remember where
  // each sample sits within that sub-batch.
  std::vector<Tensor<T>> encoded(M);
  std::vector<std::vector<std::size_t>> position(M, std::vector<std::size_t>(N, 0));
  for (std::size_t m = 0; m < M; ++m) {
    std::vector<std::size_t> rows;
    for (std::size_t s = 0; s < N; ++s) {
      if (masks[s].available(m)) {
        position[m][s] = rows.size();
        rows.push_back(s);
      }
    }
    if (rows.empty()) continue;
    const auto& img = images[m];
    if (!img.defined()) throw ShapeError("urn_forward: modality " + std::to_string(m) + " is available but has no image");
    if (img.rank() != 4 || img.dim(0) != N) {
      throw ShapeError("urn_forward: image for modality " + std::to_string(m) + " must be [N,1,H,W], got " +
                       shape_str(img.shape()));
    }
    const Tensor<T> input = rows.size() == N ? img : gather_batch(img, rows);
    encoded[m] = model.encode(m, input, opt.encoder_phase);
    ++out.encoder_calls;
  }

  // Group samples by availability pattern, in order of first appearance.
  std::map<std::vector<std::uint8_t>, std::vector<std::size_t>> groups;
  std::vector<std::vector<std::uint8_t>> group_order;
  for (std::size_t s = 0; s < N; ++s) {
    auto [it, inserted] = groups.try_emplace(masks[s].bits());
    if (inserted) group_order.push_back(masks[s].bits());
    it->second.push_back(s);
  }

  std::vector<Tensor<T>> fused_parts;
  std::vector<std::size_t> order;  // sample index of each fused row
  Tensor<T> penalty;
  for (const auto& key : group_order) {
    const auto& members = groups[key];
    const ModalityMask mask(key);
    std::vector<Tensor<T>> zs;  // canonical modality order
    for (std::size_t m : mask.indices()) {
      std::vector<std::size_t> rows;
      for (std::size_t s : members) rows.push_back(position[m][s]);
      const bool whole = rows.size() == encoded[m].dim(0) &&
                         std::is_sorted(rows.begin(), rows.end()) && rows.front() == 0;
      zs.push_back(whole ? encoded[m] : gather_batch(encoded[m], rows));
    }
    fused_parts.push_back(fuse(zs, opt.f));
    order.insert(order.end(), members.begin(), members.end());
    if (opt.compute_penalty && zs.size() >= 2) {
      const T weight = static_cast<T>(members.size()) / static_cast<T>(N);
      const auto term = scale(variance_penalty(zs), weight);
      penalty = penalty.defined() ? add(penalty, term) : term;
    }
  }
  Tensor<T> stacked = fused_parts.size() == 1 ? fused_parts.front() : concat(fused_parts, 0);
  // Restore the original sample order.
  std::vector<std::size_t> inverse(N);
  for (std::size_t r = 0; r < N; ++r) inverse[order[r]] = r;
  bool identity = true;
  for (std::size_t s = 0; s < N; ++s) identity = identity && inverse[s] == s;
  out.z = identity ? stacked : gather_batch(stacked, inverse);
  out.variance_penalty = penalty;
  for (const auto& m : masks) out.contributing.push_back(m.count());

  if (opt.decode) {
    for (std::size_t m = 0; m < M; ++m) out.syntheses.push_back(model.decode(m, out.z, opt.decoder_phase));
  }
  if (opt.segment) out.logits = model.segment(out.z, opt.head_phase);
  return out;
}

}  // namespace unirep
