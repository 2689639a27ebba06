#pragma once

// Modality dropout: a truncated geometric number of dropped modalities,
// then a uniformly random subset of that size.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "unirep/errors.hpp"
#include "unirep/rng.hpp"

namespace unirep {

struct DropConfig {
  double theta = 0.5;
  std::size_t n_max = 0;          // largest number of modalities that may be dropped
  std::size_t min_available = 1;  // never go below this many available modalities

  // Throws ConfigError unless the configuration is usable for M modalities.
  void validate(std::size_t modality_count) const {
    if (!(theta > 0.0 && theta < 1.0)) {
      throw ConfigError("moddrop: theta must lie in (0,1), got " + std::to_string(theta));
    }
    if (min_available < 1) throw ConfigError("moddrop: min_available must be >= 1");
    if (modality_count < min_available || n_max > modality_count - min_available) {
      throw ConfigError("moddrop: n_max=" + std::to_string(n_max) + " with " +
                        std::to_string(modality_count) + " modalities leaves fewer than " +
                        std::to_string(min_available) + " available");
    }
  }

  // Largest n_max allowed for M modalities.
  static DropConfig for_modalities(double theta, std::size_t modality_count,
                                   std::size_t min_available) {
    if (modality_count < min_available) {
      throw ConfigError("moddrop: " + std::to_string(modality_count) +
                        " modalities cannot keep " + std::to_string(min_available) + " available");
    }
    DropConfig cfg{theta, modality_count - min_available, min_available};
    cfg.validate(modality_count);
    return cfg;
  }
};

/// Per-sample availability; bit i set means modality i is present.
class ModalityMask {
 public:
  ModalityMask() = default;
  explicit ModalityMask(std::size_t m, bool value = true) : bits_(m, value ? 1 : 0) {}
  explicit ModalityMask(std::vector<std::uint8_t> bits) : bits_(std::move(bits)) {
    for (auto& b : bits_) b = b ? 1 : 0;
  }

  // From a pattern string such as "1011" (canonical modality order).
  static ModalityMask from_pattern(const std::string& s) {
    std::vector<std::uint8_t> bits;
    for (char c : s) {
      if (c != '0' && c != '1') throw ConfigError("invalid availability pattern '" + s + "'");
      bits.push_back(c == '1');
    }
    return ModalityMask(std::move(bits));
  }

  std::size_t size() const { return bits_.size(); }
  bool available(std::size_t i) const { return bits_.at(i) != 0; }
  void set(std::size_t i, bool on) { bits_.at(i) = on ? 1 : 0; }
  std::size_t count() const {
    std::size_t c = 0;
    for (auto b : bits_) c += b;
    return c;
  }
  std::vector<std::size_t> indices() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < bits_.size(); ++i)
      if (bits_[i]) out.push_back(i);
    return out;
  }
  const std::vector<std::uint8_t>& bits() const { return bits_; }
  std::string pattern() const {
    std::string s;
    for (auto b : bits_) s.push_back(b ? '1' : '0');
    return s;
  }

  friend bool operator==(const ModalityMask&, const ModalityMask&) = default;

 private:
  std::vector<std::uint8_t> bits_;
};

/// Truncated geometric probability of dropping k modalities:
/// (1 - theta) theta^k / (1 - theta^(n_max + 1)).
inline double drop_pmf(const DropConfig& cfg, std::size_t k) {
  if (k > cfg.n_max) {
    throw std::out_of_range("drop_pmf: k=" + std::to_string(k) + " exceeds n_max=" +
                            std::to_string(cfg.n_max));
  }
  const double norm = 1.0 - std::pow(cfg.theta, static_cast<double>(cfg.n_max + 1));
  return (1.0 - cfg.theta) * std::pow(cfg.theta, static_cast<double>(k)) / norm;
}

// Inverse transform sampling on the cumulative pmf.
inline std::size_t sample_drop_count(const DropConfig& cfg, CounterRng& rng) {
  const double u = rng.uniform();
  double cdf = 0.0;
  for (std::size_t k = 0; k < cfg.n_max; ++k) {
    cdf += drop_pmf(cfg, k);
    if (u < cdf) return k;
  }
  return cfg.n_max;
}

/// Draw k, then drop k of the M modalities chosen uniformly among the
/// C(M, k) subsets (partial Fisher-Yates).
inline ModalityMask sample_mask(const DropConfig& cfg, std::size_t modality_count,
                                CounterRng& rng) {
  cfg.validate(modality_count);
  const std::size_t k = sample_drop_count(cfg, rng);
  std::vector<std::size_t> order(modality_count);
  for (std::size_t i = 0; i < modality_count; ++i) order[i] = i;
  ModalityMask mask(modality_count, true);
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(modality_count - i));
    std::swap(order[i], order[j]);
    mask.set(order[i], false);
  }
  return mask;
}

}  // namespace unirep
