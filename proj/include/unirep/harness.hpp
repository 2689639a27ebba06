#pragma once

// Training loops (segmentation, synthesis pre-training on one or more
// datasets), evaluation metrics and the modality-combination sweep.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "unirep/checkpoint.hpp"
#include "unirep/data.hpp"
#include "unirep/fusion.hpp"
#include "unirep/moddrop.hpp"
#include "unirep/model.hpp"
#include "unirep/nn_ops.hpp"
#include "unirep/optim.hpp"
#include "unirep/text.hpp"

namespace unirep {

using Real = float;

enum class Scenario { Baseline, BaselineMD, UrnMD, UrnMDPretrained };

inline std::string to_string(Scenario s) {
  switch (s) {
    case Scenario::Baseline: return "baseline";
    case Scenario::BaselineMD: return "baseline-md";
    case Scenario::UrnMD: return "urn-md";
    case Scenario::UrnMDPretrained: return "urn-md-pretrained";
  }
  return "?";
}

inline Scenario scenario_from_string(const std::string& s) {
  for (auto sc : {Scenario::Baseline, Scenario::BaselineMD, Scenario::UrnMD, Scenario::UrnMDPretrained}) {
    if (to_string(sc) == s) return sc;
  }
  throw ConfigError("unknown scenario '" + s + "' (expected baseline|baseline-md|urn-md|urn-md-pretrained)");
}

inline bool is_urn(Scenario s) { return s == Scenario::UrnMD || s == Scenario::UrnMDPretrained; }
inline bool uses_dropout(Scenario s) { return s != Scenario::Baseline; }

struct TrainConfig {
  Scenario scenario = Scenario::Baseline;
  std::size_t batch_size = 4;
  double lr_seg = 1e-4;
  double lr_pre = 3e-5;
  double theta_seg = 0.5;
  double theta_pre = 0.8;
  // Largest number of dropped modalities; unset means as many as the
  // minimum-available constraint allows.
  std::optional<std::size_t> n_max_seg;
  std::optional<std::size_t> n_max_pre;
  double variance_weight = 1e-4;
  std::size_t epochs_seg = 50;
  // Pre-training stops once the best validation loss improved by less than
  // `converge_rel` (relative) over the last `converge_window` epochs.
  double converge_rel = 0.005;
  std::size_t converge_window = 5;
  std::size_t max_pre_epochs = 200;
  std::uint64_t seed = 0;

  // Network shape.
  std::size_t levels = 4;
  std::size_t base_width = 16;
  std::size_t rep_channels = 16;
  std::size_t decoder_blocks = 2;
  double leaky_slope = kDefaultLeakySlope;
  FusionKind fusion = FusionKind::Identity;

  bool verbose = false;

  void validate() const {
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (!(lr_seg >= 0) || !(lr_pre >= 0)) throw ConfigError("learning rates must be non-negative");
    for (double th : {theta_seg, theta_pre}) {
      if (!(th > 0 && th < 1)) throw ConfigError("theta must lie in (0,1)");
    }
    if (!(variance_weight >= 0)) throw ConfigError("variance_weight must be non-negative");
    if (converge_window == 0) throw ConfigError("converge_window must be positive");
    if (!(converge_rel >= 0)) throw ConfigError("converge_rel must be non-negative");
  }

  SegNetConfig seg_config(const std::vector<std::string>& modalities) const {
    SegNetConfig c;
    c.modalities = modalities;
    c.num_classes = kNumClasses;
    c.levels = levels;
    c.base_width = base_width;
    c.leaky_slope = leaky_slope;
    return c;
  }

  UrnConfig urn_config(const std::vector<std::string>& modalities) const {
    UrnConfig c;
    static_cast<SegNetConfig&>(c) = seg_config(modalities);
    c.rep_channels = rep_channels;
    c.fusion = fusion;
    c.variance_weight = variance_weight;
    c.decoder_blocks = decoder_blocks;
    return c;
  }
};

/// Sets one TrainConfig field from its key=value text form.
inline void apply_setting(TrainConfig& c, const std::string& key, const std::string& value) {
  const auto bad = [&] { return ConfigError("invalid value '" + value + "' for " + key); };
  const auto real = [&](double& out) {
    if (!parse_double(value, out)) throw bad();
  };
  const auto size = [&](std::size_t& out) {
    std::uint64_t v = 0;
    if (!parse_u64(value, v)) throw bad();
    out = static_cast<std::size_t>(v);
  };
  const auto cap = [&](std::optional<std::size_t>& out) {
    if (value == "auto") {
      out.reset();
      return;
    }
    std::size_t v = 0;
    size(v);
    out = v;
  };
  if (key == "scenario") c.scenario = scenario_from_string(value);
  else if (key == "batch_size") size(c.batch_size);
  else if (key == "lr_seg") real(c.lr_seg);
  else if (key == "lr_pre") real(c.lr_pre);
  else if (key == "theta_seg") real(c.theta_seg);
  else if (key == "theta_pre") real(c.theta_pre);
  else if (key == "n_max_seg") cap(c.n_max_seg);
  else if (key == "n_max_pre") cap(c.n_max_pre);
  else if (key == "variance_weight") real(c.variance_weight);
  else if (key == "epochs_seg") size(c.epochs_seg);
  else if (key == "converge_rel") real(c.converge_rel);
  else if (key == "converge_window") size(c.converge_window);
  else if (key == "max_pre_epochs") size(c.max_pre_epochs);
  else if (key == "seed") {
    if (!parse_u64(value, c.seed)) throw bad();
  }
  else if (key == "levels") size(c.levels);
  else if (key == "base_width") size(c.base_width);
  else if (key == "rep_channels") size(c.rep_channels);
  else if (key == "decoder_blocks") size(c.decoder_blocks);
  else if (key == "leaky_slope") real(c.leaky_slope);
  else if (key == "fusion") c.fusion = fusion_from_string(value);
  else throw ConfigError("unknown config key '" + key + "'");
}

/// Every setting in a fixed order; `apply_setting` accepts each pair back.
inline KeyValues describe(const TrainConfig& c) {
  const auto cap = [](const std::optional<std::size_t>& v) { return v ? std::to_string(*v) : std::string("auto"); };
  return {{"scenario", to_string(c.scenario)},
          {"batch_size", std::to_string(c.batch_size)},
          {"lr_seg", format_double(c.lr_seg)},
          {"lr_pre", format_double(c.lr_pre)},
          {"theta_seg", format_double(c.theta_seg)},
          {"theta_pre", format_double(c.theta_pre)},
          {"n_max_seg", cap(c.n_max_seg)},
          {"n_max_pre", cap(c.n_max_pre)},
          {"variance_weight", format_double(c.variance_weight)},
          {"epochs_seg", std::to_string(c.epochs_seg)},
          {"converge_rel", format_double(c.converge_rel)},
          {"converge_window", std::to_string(c.converge_window)},
          {"max_pre_epochs", std::to_string(c.max_pre_epochs)},
          {"seed", std::to_string(c.seed)},
          {"levels", std::to_string(c.levels)},
          {"base_width", std::to_string(c.base_width)},
          {"rep_channels", std::to_string(c.rep_channels)},
          {"decoder_blocks", std::to_string(c.decoder_blocks)},
          {"leaky_slope", format_double(c.leaky_slope)},
          {"fusion", to_string(c.fusion)}};
}

/// A model of either family plus what the harness needs to evaluate it.
struct TrainedModel {
  Scenario scenario = Scenario::Baseline;
  std::variant<BaselineModel<Real>, UrnModel<Real>> net;
  bool decoders_trained = false;

  const std::vector<std::string>& modalities() const {
    return std::visit([](const auto& m) -> const std::vector<std::string>& {
      if constexpr (std::is_same_v<std::decay_t<decltype(m)>, BaselineModel<Real>>) {
        return m.cfg.modalities;
      } else {
        return m.config().modalities;
      }
    }, net);
  }
  BaselineModel<Real>& baseline() { return std::get<BaselineModel<Real>>(net); }
  UrnModel<Real>& urn() { return std::get<UrnModel<Real>>(net); }
};

inline TrainedModel make_model(const TrainConfig& cfg, const std::vector<std::string>& modalities) {
  const auto rng = CounterRng(cfg.seed).split("model");
  TrainedModel m;
  m.scenario = cfg.scenario;
  if (is_urn(cfg.scenario)) {
    m.net = UrnModel<Real>(cfg.urn_config(modalities), rng);
  } else {
    m.net = BaselineModel<Real>(cfg.seg_config(modalities), rng);
  }
  return m;
}

inline void save_trained(const std::filesystem::path& dir, TrainedModel& m,
                         std::map<std::string, std::string> meta = {}) {
  meta["scenario"] = to_string(m.scenario);
  meta["decoders_trained"] = m.decoders_trained ? "1" : "0";
  std::visit([&](auto& net) { save_checkpoint(dir, net, meta); }, m.net);
}

inline TrainedModel load_trained(const std::filesystem::path& dir) {
  const auto manifest = read_checkpoint_manifest(dir);
  const auto path = (dir / "checkpoint.txt").string();
  TrainedModel m;
  try {
    m.scenario = scenario_from_string(detail::require(manifest.meta, "scenario", path));
  } catch (const ConfigError& e) {
    throw FormatError(path, e.what());
  }
  if (is_urn(m.scenario) != (manifest.kind == "urn")) throw FormatError(path, "scenario does not match model kind");
  m.decoders_trained = detail::require(manifest.meta, "decoders_trained", path) == "1";
  if (manifest.kind == "urn") {
    m.net = load_urn_checkpoint<Real>(dir);
  } else {
    m.net = load_baseline_checkpoint<Real>(dir);
  }
  return m;
}

// ---------------------------------------------------------------------------
// Batching

struct Batch {
  std::vector<Tensor<Real>> images;  // one [N,1,H,W] per model modality, undefined if the dataset lacks it
  std::vector<std::uint8_t> labels;  // N*H*W
  std::vector<std::uint8_t> present; // per model modality: dataset carries it
  std::size_t n = 0;
};

inline Batch make_batch(const Dataset& d, const std::vector<std::size_t>& rows,
                        const std::vector<std::string>& model_modalities) {
  const auto& m = d.manifest;
  const std::size_t plane = m.height * m.width;
  Batch b;
  b.n = rows.size();
  for (const auto& name : model_modalities) {
    const std::size_t li = m.local_index(name);
    b.present.push_back(li != std::string::npos);
    if (li == std::string::npos) {
      b.images.emplace_back();
      continue;
    }
    std::vector<Real> v(rows.size() * plane);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      std::copy_n(d.samples[rows[i]].images[li].begin(), plane, v.begin() + i * plane);
    }
    b.images.emplace_back(Shape{rows.size(), 1, m.height, m.width}, std::move(v));
  }
  b.labels.resize(rows.size() * plane);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(d.samples[rows[i]].labels.begin(), plane, b.labels.begin() + i * plane);
  }
  return b;
}

// Stacked [N,M,H,W] baseline input with unavailable modalities zeroed.
inline Tensor<Real> baseline_input(const Batch& b, const std::vector<ModalityMask>& masks) {
  const std::size_t M = b.images.size();
  Shape shape;
  for (const auto& t : b.images) {
    if (t.defined()) shape = t.shape();
  }
  if (shape.empty()) throw ShapeError("baseline_input: batch has no images");
  const std::size_t plane = shape[2] * shape[3];
  std::vector<Real> v(b.n * M * plane, Real{0});
  for (std::size_t s = 0; s < b.n; ++s) {
    for (std::size_t c = 0; c < M; ++c) {
      if (!b.images[c].defined() || !masks[s].available(c)) continue;
      const auto src = b.images[c].data().subspan(s * plane, plane);
      std::copy(src.begin(), src.end(), v.begin() + (s * M + c) * plane);
    }
  }
  return Tensor<Real>({b.n, M, shape[2], shape[3]}, std::move(v));
}

// Dataset availability as a mask over model modalities.
inline ModalityMask presence_mask(const Batch& b) { return ModalityMask(b.present); }

// Drop config restricted to the modalities a dataset actually carries.
inline DropConfig drop_config_for(double theta, std::size_t present, std::size_t min_available,
                                  std::optional<std::size_t> n_max = std::nullopt) {
  if (present < min_available) {
    throw ConfigError("dataset carries " + std::to_string(present) + " modalities, needs at least " +
                      std::to_string(min_available));
  }
  if (n_max && present - min_available < *n_max) {
    throw ConfigError("n_max=" + std::to_string(*n_max) + " would leave fewer than " + std::to_string(min_available) +
                      " of " + std::to_string(present) + " modalities");
  }
  return DropConfig{theta, n_max.value_or(present - min_available), min_available};
}

// Samples a mask over the dataset's present modalities and lifts it to the
// model's modality list.
inline ModalityMask sample_lifted_mask(const DropConfig& cfg, const ModalityMask& presence, CounterRng& rng) {
  const auto idx = presence.indices();
  const auto local = sample_mask(cfg, idx.size(), rng);
  ModalityMask out(presence.size(), false);
  for (std::size_t i = 0; i < idx.size(); ++i) out.set(idx[i], local.available(i));
  return out;
}

inline std::vector<std::size_t> shuffled(std::vector<std::size_t> v, CounterRng rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.below(i)]);
  return v;
}

inline std::vector<std::vector<std::size_t>> chunk(const std::vector<std::size_t>& v, std::size_t size) {
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < v.size(); i += size) {
    out.emplace_back(v.begin() + static_cast<std::ptrdiff_t>(i),
                     v.begin() + static_cast<std::ptrdiff_t>(std::min(v.size(), i + size)));
  }
  return out;
}

inline void check_finite(double loss, std::size_t step, double lr, std::uint64_t batch_seed, const char* phase) {
  if (!std::isfinite(loss)) {
    std::ostringstream os;
    os << phase << ": non-finite loss " << loss << " at step " << step << " (lr=" << format_double(lr)
       << ", batch seed=" << batch_seed << ")";
    throw NumericalError(os.str());
  }
}

// ---------------------------------------------------------------------------
// Segmentation training

struct LossRecord {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double loss = 0.0;
};

struct TrainResult {
  std::vector<LossRecord> trace;
  std::size_t steps = 0;
};

/// Mask streams: one independent stream per (seed, purpose, epoch, sample).
inline CounterRng mask_stream(std::uint64_t seed, std::string_view purpose, std::size_t epoch, std::size_t sample) {
  return CounterRng(seed).split(purpose).split(epoch).split(sample);
}

inline TrainResult train_segmentation(TrainedModel& model, const Dataset& data, const TrainConfig& cfg) {
  cfg.validate();
  const auto& mods = model.modalities();
  std::vector<std::size_t> all(data.samples.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  if (all.empty()) throw ConfigError("train_segmentation: empty dataset");

  const bool urn = is_urn(model.scenario);
  const bool pretrained = model.scenario == Scenario::UrnMDPretrained;
  std::vector<Parameter<Real>*> params =
      std::visit([](auto& m) { return model_parameters<Real>(m); }, model.net);
  const AdamOptions opt{cfg.lr_seg};

  TrainResult result;
  const auto root = CounterRng(cfg.seed).split("segmentation");
  for (std::size_t epoch = 0; epoch < cfg.epochs_seg; ++epoch) {
    const auto order = shuffled(all, root.split("shuffle").split(epoch));
    double epoch_loss = 0.0;
    std::size_t batches = 0;
    for (const auto& rows : chunk(order, cfg.batch_size)) {
      const Batch b = make_batch(data, rows, mods);
      const ModalityMask presence = presence_mask(b);
      std::vector<ModalityMask> masks;
      for (std::size_t r : rows) {
        if (!uses_dropout(model.scenario)) {
          masks.push_back(presence);
          continue;
        }
        auto rng = mask_stream(cfg.seed, "segmentation-mask", epoch, r);
        const auto dc = drop_config_for(cfg.theta_seg, presence.count(), urn ? 2 : 1, cfg.n_max_seg);
        masks.push_back(sample_lifted_mask(dc, presence, rng));
      }

      for (auto* p : params) p->zero_grad();
      Tensor<Real> loss;
      if (urn) {
        UrnForwardOptions o;
        o.f = FusionF{model.urn().config().fusion};
        o.encoder_phase = pretrained ? Phase::Eval : Phase::Train;
        o.decode = false;
        o.compute_penalty = !pretrained && cfg.variance_weight > 0;
        auto fwd = urn_forward(model.urn(), b.images, masks, o);
        loss = softmax_cross_entropy(fwd.logits, b.labels);
        if (fwd.variance_penalty.defined()) {
          loss = add(loss, scale(fwd.variance_penalty, static_cast<Real>(cfg.variance_weight)));
        }
      } else {
        auto& net = model.baseline().net;
        loss = softmax_cross_entropy(net.forward(baseline_input(b, masks), Phase::Train), b.labels);
      }
      const double value = loss.item();
      check_finite(value, result.steps, cfg.lr_seg, root.split("shuffle").split(epoch).key(), "segmentation");
      loss.backward();
      adam_step(params, opt);
      result.trace.push_back({result.steps, epoch, value});
      ++result.steps;
      epoch_loss += value;
      ++batches;
    }
    if (cfg.verbose) {
      std::fprintf(stderr, "[%s] epoch %zu/%zu loss %.5f\n", to_string(model.scenario).c_str(), epoch + 1,
                   cfg.epochs_seg, epoch_loss / static_cast<double>(batches));
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Synthesis pre-training

struct PretrainResult {
  std::vector<LossRecord> trace;
  std::vector<double> validation;  // per epoch
  std::size_t epochs = 0;
  bool converged = false;
};

struct SynthesisLoss {
  Tensor<Real> total;
  std::vector<std::size_t> loss_modalities;  // model modalities that contributed a reconstruction term
};

// Sum of per-modality MSE over the modalities the batch's dataset carries,
// plus the weighted variance penalty.
inline SynthesisLoss synthesis_loss(UrnModel<Real>& model, const Batch& b, const std::vector<ModalityMask>& masks,
                                    double variance_weight, Phase phase) {
  UrnForwardOptions o;
  o.f = FusionF{model.config().fusion};
  o.encoder_phase = phase;
  o.decoder_phase = phase;
  o.segment = false;
  o.decode = false;
  o.compute_penalty = variance_weight > 0;
  auto fwd = urn_forward(model, b.images, masks, o);
  SynthesisLoss out;
  for (std::size_t m = 0; m < b.images.size(); ++m) {
    if (!b.present[m]) continue;
    const auto term = mse_loss(model.decode(m, fwd.z, phase), b.images[m]);
    out.total = out.total.defined() ? add(out.total, term) : term;
    out.loss_modalities.push_back(m);
  }
  if (fwd.variance_penalty.defined()) {
    out.total = add(out.total, scale(fwd.variance_penalty, static_cast<Real>(variance_weight)));
  }
  return out;
}

/// Proportional interleave of per-dataset batch counts: at every step the
/// dataset furthest behind its share goes next (ties to the lower index).
inline std::vector<std::size_t> interleave(const std::vector<std::size_t>& counts) {
  std::size_t total = 0;
  for (auto c : counts) total += c;
  std::vector<std::size_t> taken(counts.size(), 0), out;
  out.reserve(total);
  for (std::size_t step = 0; step < total; ++step) {
    std::size_t best = counts.size();
    double best_key = std::numeric_limits<double>::infinity();
    for (std::size_t d = 0; d < counts.size(); ++d) {
      if (taken[d] == counts[d]) continue;
      const double key = (static_cast<double>(taken[d]) + 0.5) / static_cast<double>(counts[d]);
      if (key < best_key) {
        best_key = key;
        best = d;
      }
    }
    out.push_back(best);
    ++taken[best];
  }
  return out;
}

/// Observer invoked for every training batch: dataset index, the model
/// modalities that received a reconstruction loss.
using PretrainObserver = std::function<void(std::size_t, const std::vector<std::size_t>&)>;

/// Trains encoders and decoders on image synthesis over the train splits
/// of one or more datasets; stops on the validation-loss criterion.
inline PretrainResult pretrain_synthesis(UrnModel<Real>& model, const std::vector<const Dataset*>& datasets,
                                         const TrainConfig& cfg, const PretrainObserver& observe = {}) {
  cfg.validate();
  if (datasets.empty()) throw ConfigError("pretrain: no datasets");
  const auto& mods = model.config().modalities;
  if (cfg.n_max_pre && mods.size() < 2 + *cfg.n_max_pre) {
    throw ConfigError("n_max_pre=" + std::to_string(*cfg.n_max_pre) + " leaves fewer than 2 of " +
                      std::to_string(mods.size()) + " modalities");
  }
  std::vector<Split> splits;
  std::vector<DropConfig> drops;
  for (const auto* d : datasets) {
    std::size_t present = 0;
    for (const auto& name : mods) present += d->manifest.has_modality(name);
    if (present < 2) {
      throw ConfigError("pretrain: dataset '" + d->manifest.name + "' shares fewer than 2 modalities with the model");
    }
    // A cap above what a smaller dataset allows is clamped for that dataset.
    std::optional<std::size_t> cap;
    if (cfg.n_max_pre) cap = std::min(*cfg.n_max_pre, present - 2);
    drops.push_back(drop_config_for(cfg.theta_pre, present, 2, cap));
    splits.push_back(split_indices(d->manifest));
    if (splits.back().train.empty()) throw ConfigError("pretrain: dataset '" + d->manifest.name + "' has no training samples");
  }

  std::vector<Parameter<Real>*> params;
  {
    ParameterCollector<Real> c;
    for (std::size_t m = 0; m < mods.size(); ++m) {
      model.encoder(m).visit(c, "encoder." + mods[m]);
      model.decoder(m).visit(c, "decoder." + mods[m]);
    }
    params = c.out;
  }
  const AdamOptions opt{cfg.lr_pre};
  const auto root = CounterRng(cfg.seed).split("pretrain");

  // Validation batches and masks are fixed across epochs.
  auto validation_loss = [&]() {
    NoGradGuard ng;
    double sum = 0.0;
    std::size_t count = 0;
    for (std::size_t d = 0; d < datasets.size(); ++d) {
      for (const auto& rows : chunk(splits[d].validation, cfg.batch_size)) {
        const Batch b = make_batch(*datasets[d], rows, mods);
        std::vector<ModalityMask> masks;
        for (std::size_t r : rows) {
          auto rng = mask_stream(cfg.seed, "pretrain-val-mask", d, r);
          masks.push_back(sample_lifted_mask(drops[d], presence_mask(b), rng));
        }
        sum += synthesis_loss(model, b, masks, cfg.variance_weight, Phase::Eval).total.item() *
               static_cast<double>(rows.size());
        count += rows.size();
      }
    }
    return count ? sum / static_cast<double>(count) : 0.0;
  };

  PretrainResult result;
  std::size_t step = 0;
  std::vector<double> best_so_far;
  for (std::size_t epoch = 0; epoch < cfg.max_pre_epochs; ++epoch) {
    std::vector<std::vector<std::vector<std::size_t>>> batches;
    std::vector<std::size_t> counts;
    for (std::size_t d = 0; d < datasets.size(); ++d) {
      batches.push_back(chunk(shuffled(splits[d].train, root.split("shuffle").split(d).split(epoch)), cfg.batch_size));
      counts.push_back(batches.back().size());
    }
    std::vector<std::size_t> next(datasets.size(), 0);
    double epoch_loss = 0.0;
    const auto schedule = interleave(counts);
    for (std::size_t d : schedule) {
      const auto& rows = batches[d][next[d]++];
      const Batch b = make_batch(*datasets[d], rows, mods);
      std::vector<ModalityMask> masks;
      for (std::size_t r : rows) {
        auto rng = CounterRng(cfg.seed).split("pretrain-mask").split(d).split(epoch).split(r);
        masks.push_back(sample_lifted_mask(drops[d], presence_mask(b), rng));
      }
      for (auto* p : params) p->zero_grad();
      auto loss = synthesis_loss(model, b, masks, cfg.variance_weight, Phase::Train);
      if (observe) observe(d, loss.loss_modalities);
      const double value = loss.total.item();
      check_finite(value, step, cfg.lr_pre, root.split("shuffle").split(d).split(epoch).key(), "pretrain");
      loss.total.backward();
      adam_step(params, opt);
      result.trace.push_back({step, epoch, value});
      ++step;
      epoch_loss += value;
    }
    const double val = validation_loss();
    result.validation.push_back(val);
    best_so_far.push_back(best_so_far.empty() ? val : std::min(best_so_far.back(), val));
    result.epochs = epoch + 1;
    if (cfg.verbose) {
      std::fprintf(stderr, "[pretrain] epoch %zu train %.5f val %.5f\n", epoch + 1,
                   epoch_loss / static_cast<double>(schedule.size()), val);
    }
    if (best_so_far.size() > cfg.converge_window) {
      const double before = best_so_far[best_so_far.size() - 1 - cfg.converge_window];
      const double now = best_so_far.back();
      if ((before - now) < cfg.converge_rel * before) {
        result.converged = true;
        break;
      }
    }
  }
  return result;
}

struct ScenarioResult {
  TrainedModel model;
  TrainResult segmentation;
  std::optional<PretrainResult> pretraining;
};

/// Full training recipe of one scenario on `data`. The pre-trained URN first
/// learns synthesis on `pretrain` (one or more datasets), then segments with
/// its encoders frozen.
inline ScenarioResult run_scenario(const TrainConfig& cfg, const Dataset& data,
                                   const std::vector<const Dataset*>& pretrain = {},
                                   const PretrainObserver& observe = {}) {
  cfg.validate();
  const bool pretrained = cfg.scenario == Scenario::UrnMDPretrained;
  if (pretrained && pretrain.empty()) throw ConfigError("urn-md-pretrained needs pre-training data");
  if (!pretrained && !pretrain.empty()) {
    throw ConfigError("pre-training data given for scenario " + to_string(cfg.scenario));
  }
  ScenarioResult r{make_model(cfg, data.manifest.modalities), {}, std::nullopt};
  if (pretrained) {
    r.pretraining = pretrain_synthesis(r.model.urn(), pretrain, cfg, observe);
    r.model.decoders_trained = true;
    r.model.urn().freeze_encoders(true);
    r.model.urn().freeze_decoders(true);
  }
  r.segmentation = train_segmentation(r.model, data, cfg);
  return r;
}

inline void write_loss_trace(const std::filesystem::path& p, const ScenarioResult& r) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError(p.string(), "cannot open for writing");
  f << "phase,step,epoch,loss\n";
  if (r.pretraining) {
    for (const auto& e : r.pretraining->trace) f << "pretrain," << e.step << "," << e.epoch << "," << format_double(e.loss) << "\n";
  }
  for (const auto& e : r.segmentation.trace) f << "segmentation," << e.step << "," << e.epoch << "," << format_double(e.loss) << "\n";
  if (!f) throw FormatError(p.string(), "write failed");
}

// ---------------------------------------------------------------------------
// Metrics

/// 2|P∩G| / (|P|+|G|) over voxels whose label lies in `region`;
/// 1 when both sets are empty.
inline double dice(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt, const Region& region) {
  if (pred.size() != gt.size()) throw ShapeError("dice: prediction and ground truth differ in size");
  std::size_t p = 0, g = 0, both = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool a = region.contains(pred[i]), b = region.contains(gt[i]);
    p += a;
    g += b;
    both += a && b;
  }
  if (p + g == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(p + g);
}

inline constexpr double kPsnrCap = 99.0;

/// 10 log10(range^2 / MSE), capped at kPsnrCap (also for MSE = 0).
inline double psnr_from_mse(double mse, double data_range) {
  if (!(data_range > 0)) throw ConfigError("psnr: data_range must be positive");
  if (mse <= 0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(data_range * data_range / mse));
}

inline double psnr(std::span<const float> synth, std::span<const float> gt, double data_range) {
  if (synth.size() != gt.size()) throw ShapeError("psnr: size mismatch");
  double se = 0.0;
  for (std::size_t i = 0; i < gt.size(); ++i) se += (double(synth[i]) - gt[i]) * (double(synth[i]) - gt[i]);
  return psnr_from_mse(gt.empty() ? 0.0 : se / static_cast<double>(gt.size()), data_range);
}

/// max - min of one modality over every voxel of the given samples.
inline double modality_range(const Dataset& d, std::size_t local_modality, const std::vector<std::size_t>& rows) {
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (std::size_t r : rows) {
    for (float v : d.samples[r].images[local_modality]) {
      lo = std::min(lo, double(v));
      hi = std::max(hi, double(v));
    }
  }
  return hi - lo;
}

inline std::vector<std::size_t> all_rows(const Dataset& d) {
  std::vector<std::size_t> v(d.samples.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = i;
  return v;
}

// ---------------------------------------------------------------------------
// Inference and evaluation

struct Prediction {
  std::vector<std::uint8_t> labels;              // per sample, H*W each, concatenated
  std::vector<std::vector<float>> syntheses;     // per model modality, concatenated; empty if not decoded
};

/// Inference on `rows` with only the modalities in `pattern` available,
/// in fixed batches of `batch_size`.
inline Prediction predict(TrainedModel& model, const Dataset& data, const std::vector<std::size_t>& rows,
                          const ModalityMask& pattern, std::size_t batch_size, bool decode) {
  NoGradGuard ng;
  const auto& mods = model.modalities();
  if (pattern.size() != mods.size()) throw ShapeError("predict: pattern length differs from modality count");
  Prediction out;
  out.syntheses.resize(mods.size());
  for (const auto& part : chunk(rows, batch_size)) {
    const Batch b = make_batch(data, part, mods);
    for (std::size_t m = 0; m < mods.size(); ++m) {
      if (pattern.available(m) && !b.present[m]) {
        throw ConfigError("predict: modality " + mods[m] + " is not in dataset '" + data.manifest.name + "'");
      }
    }
    const std::vector<ModalityMask> masks(part.size(), pattern);
    Tensor<Real> logits;
    if (is_urn(model.scenario)) {
      UrnForwardOptions o;
      o.f = FusionF{model.urn().config().fusion};
      o.encoder_phase = o.decoder_phase = o.head_phase = Phase::Eval;
      o.compute_penalty = false;
      o.decode = decode;
      auto fwd = urn_forward(model.urn(), b.images, masks, o);
      logits = fwd.logits;
      for (std::size_t m = 0; m < fwd.syntheses.size(); ++m) {
        const auto v = fwd.syntheses[m].data();
        out.syntheses[m].insert(out.syntheses[m].end(), v.begin(), v.end());
      }
    } else {
      logits = model.baseline().net.forward(baseline_input(b, masks), Phase::Eval);
    }
    const auto lab = argmax_channels(logits);
    out.labels.insert(out.labels.end(), lab.begin(), lab.end());
  }
  return out;
}

/// Mean over samples of per-sample Dice, per region.
inline std::vector<double> mean_dice(const Dataset& data, const std::vector<std::size_t>& rows,
                                     std::span<const std::uint8_t> pred, const RegionMap& regions) {
  const std::size_t plane = data.manifest.height * data.manifest.width;
  std::vector<double> out(regions.size(), 0.0);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& gt = data.samples[rows[i]].labels;
    for (std::size_t r = 0; r < regions.size(); ++r) out[r] += dice(pred.subspan(i * plane, plane), gt, regions[r]);
  }
  for (auto& v : out) v /= static_cast<double>(rows.size());
  return out;
}

/// PSNR of a modality's synthesis pooled over the evaluated samples.
inline double synthesis_psnr(const Dataset& data, const std::vector<std::size_t>& rows, std::size_t local_modality,
                             std::span<const float> synth, double data_range) {
  const std::size_t plane = data.manifest.height * data.manifest.width;
  double se = 0.0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& gt = data.samples[rows[i]].images[local_modality];
    for (std::size_t j = 0; j < plane; ++j) {
      const double e = double(synth[i * plane + j]) - gt[j];
      se += e * e;
    }
  }
  return psnr_from_mse(se / static_cast<double>(rows.size() * plane), data_range);
}

/// Voxel-wise mean image of one modality over a dataset: the constant
/// predictor that synthesis must beat.
inline std::vector<float> mean_image(const Dataset& d, const std::string& modality) {
  const std::size_t li = d.manifest.local_index(modality);
  if (li == std::string::npos) throw ConfigError("mean_image: dataset lacks modality " + modality);
  const std::size_t plane = d.manifest.height * d.manifest.width;
  std::vector<double> acc(plane, 0.0);
  for (const auto& s : d.samples) {
    for (std::size_t j = 0; j < plane; ++j) acc[j] += s.images[li][j];
  }
  std::vector<float> out(plane);
  for (std::size_t j = 0; j < plane; ++j) out[j] = static_cast<float>(acc[j] / static_cast<double>(d.samples.size()));
  return out;
}

// ---------------------------------------------------------------------------
// Sweep report

struct SweepEntry {
  std::string pattern;
  std::string key;     // region name or modality name
  std::string metric;  // "dice" or "psnr"
  double value = 0.0;

  friend bool operator==(const SweepEntry&, const SweepEntry&) = default;
};

struct SweepReport {
  std::vector<std::string> modalities;
  std::vector<SweepEntry> entries;

  friend bool operator==(const SweepReport& a, const SweepReport& b) { return a.entries == b.entries; }

  std::vector<std::string> patterns() const {
    std::vector<std::string> out;
    for (const auto& e : entries) {
      if (out.empty() || out.back() != e.pattern) out.push_back(e.pattern);
    }
    return out;
  }
  std::optional<double> find(const std::string& pattern, const std::string& key, const std::string& metric) const {
    for (const auto& e : entries) {
      if (e.pattern == pattern && e.key == key && e.metric == metric) return e.value;
    }
    return std::nullopt;
  }
};

/// Every nonempty availability pattern over M modalities: fewer available
/// first, then by pattern string descending ("1000" before "0100").
inline std::vector<ModalityMask> all_patterns(std::size_t M) {
  std::vector<ModalityMask> out;
  for (std::size_t bits = 1; bits < (std::size_t{1} << M); ++bits) {
    ModalityMask m(M, false);
    for (std::size_t i = 0; i < M; ++i) m.set(i, (bits >> (M - 1 - i)) & 1);
    out.push_back(m);
  }
  std::stable_sort(out.begin(), out.end(), [](const ModalityMask& a, const ModalityMask& b) {
    if (a.count() != b.count()) return a.count() < b.count();
    return a.pattern() > b.pattern();
  });
  return out;
}

struct SweepOptions {
  std::size_t batch_size = 4;
  RegionMap regions = tumor_regions();
};

/// Evaluates every availability pattern on the whole eval dataset: Dice per
/// region and, when the decoders were trained, PSNR per absent modality.
inline SweepReport sweep(TrainedModel& model, const Dataset& eval, const SweepOptions& opt = {}) {
  const auto& mods = model.modalities();
  for (const auto& m : mods) {
    if (!eval.manifest.has_modality(m)) throw ConfigError("sweep: eval dataset lacks modality " + m);
  }
  const auto rows = all_rows(eval);
  std::vector<double> ranges;
  for (const auto& m : mods) ranges.push_back(modality_range(eval, eval.manifest.local_index(m), rows));
  const bool with_psnr = is_urn(model.scenario) && model.decoders_trained;

  SweepReport report;
  report.modalities = mods;
  for (const auto& pattern : all_patterns(mods.size())) {
    const auto pred = predict(model, eval, rows, pattern, opt.batch_size, with_psnr);
    const auto d = mean_dice(eval, rows, pred.labels, opt.regions);
    for (std::size_t r = 0; r < opt.regions.size(); ++r) {
      report.entries.push_back({pattern.pattern(), opt.regions[r].name, "dice", d[r]});
    }
    if (!with_psnr) continue;
    for (std::size_t m = 0; m < mods.size(); ++m) {
      if (pattern.available(m)) continue;
      report.entries.push_back({pattern.pattern(), mods[m], "psnr",
                                synthesis_psnr(eval, rows, eval.manifest.local_index(mods[m]), pred.syntheses[m],
                                               ranges[m])});
    }
  }
  return report;
}

inline constexpr const char* kSweepHeader = "pattern,region_or_modality,metric,value";

inline void write_sweep_csv(std::ostream& os, const SweepReport& r) {
  os << kSweepHeader << "\n";
  for (const auto& e : r.entries) os << e.pattern << "," << e.key << "," << e.metric << "," << format_double(e.value) << "\n";
}

inline void write_sweep_csv(const std::filesystem::path& p, const SweepReport& r) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError(p.string(), "cannot open for writing");
  write_sweep_csv(f, r);
  if (!f) throw FormatError(p.string(), "write failed");
}

inline SweepReport read_sweep_csv(std::istream& in, const std::string& source) {
  SweepReport r;
  std::string line;
  if (!std::getline(in, line) || trim(line) != kSweepHeader) throw FormatError(source, "missing or wrong CSV header");
  int lineno = 1;
  std::size_t width = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    const auto cols = split(trim(line), ',');
    const auto where = "line " + std::to_string(lineno) + ": ";
    if (cols.size() != 4) throw FormatError(source, where + "expected 4 columns");
    SweepEntry e{cols[0], cols[1], cols[2], 0.0};
    if (e.pattern.empty() || e.pattern.find_first_not_of("01") != std::string::npos) {
      throw FormatError(source, where + "bad availability pattern '" + e.pattern + "'");
    }
    if (width == 0) width = e.pattern.size();
    if (e.pattern.size() != width) throw FormatError(source, where + "pattern length changes");
    if (e.metric != "dice" && e.metric != "psnr") throw FormatError(source, where + "unknown metric '" + e.metric + "'");
    if (!parse_double(cols[3], e.value)) throw FormatError(source, where + "bad value '" + cols[3] + "'");
    r.entries.push_back(std::move(e));
  }
  if (width == canonical_modalities().size()) r.modalities = canonical_modalities();
  return r;
}

inline SweepReport read_sweep_csv(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw FormatError(p.string(), "cannot open");
  return read_sweep_csv(f, p.string());
}

inline std::string xml_escape(const std::string& in) {
  std::string out;
  for (char c : in) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

/// Grouped bar chart of one metric: one group per availability pattern, one
/// bar per labelled report. Output depends only on the inputs.
inline std::string render_svg(const std::vector<std::pair<std::string, SweepReport>>& reports,
                              const std::string& key = "WT", const std::string& metric = "dice") {
  if (reports.empty()) throw ConfigError("plot: no reports");
  const auto patterns = reports.front().second.patterns();
  const double group_w = 48, bar_gap = 2, left = 60, top = 40, plot_h = 240, bottom = 70;
  const double ymax = metric == "dice" ? 1.0 : [&] {
    double m = 1.0;
    for (const auto& [l, r] : reports)
      for (const auto& e : r.entries)
        if (e.key == key && e.metric == metric) m = std::max(m, e.value);
    return std::ceil(m / 10.0) * 10.0;
  }();
  const double width = left + group_w * static_cast<double>(patterns.size()) + 160;
  const double height = top + plot_h + bottom;
  static const char* palette[] = {"#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860"};
  const double bar_w = (group_w - 8) / static_cast<double>(reports.size()) - bar_gap;

  auto num = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return std::string(buf);
  };
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << num(width) << "\" height=\"" << num(height)
    << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s << "<text x=\"" << num(left) << "\" y=\"20\" font-size=\"14\">" << key << " " << metric
    << " by available modalities</text>\n";
  for (int t = 0; t <= 4; ++t) {
    const double v = ymax * t / 4.0, y = top + plot_h - plot_h * t / 4.0;
    s << "<line x1=\"" << num(left) << "\" y1=\"" << num(y) << "\" x2=\"" << num(width - 160) << "\" y2=\"" << num(y)
      << "\" stroke=\"#ddd\"/>\n";
    s << "<text x=\"" << num(left - 6) << "\" y=\"" << num(y + 4) << "\" text-anchor=\"end\">" << num(v) << "</text>\n";
  }
  for (std::size_t g = 0; g < patterns.size(); ++g) {
    const double gx = left + group_w * static_cast<double>(g) + 4;
    for (std::size_t r = 0; r < reports.size(); ++r) {
      const auto v = reports[r].second.find(patterns[g], key, metric);
      if (!v) continue;
      const double h = plot_h * std::clamp(*v / ymax, 0.0, 1.0);
      s << "<rect x=\"" << num(gx + static_cast<double>(r) * (bar_w + bar_gap)) << "\" y=\"" << num(top + plot_h - h)
        << "\" width=\"" << num(bar_w) << "\" height=\"" << num(h) << "\" fill=\"" << palette[r % 6]
        << "\"><title>" << xml_escape(reports[r].first) << " " << patterns[g] << " " << format_double(*v) << "</title></rect>\n";
    }
    // Pattern label as filled/empty dots, one row per modality.
    const auto& pat = patterns[g];
    for (std::size_t m = 0; m < pat.size(); ++m) {
      const double cy = top + plot_h + 12 + 11 * static_cast<double>(m);
      s << "<circle cx=\"" << num(gx + (group_w - 8) / 2) << "\" cy=\"" << num(cy) << "\" r=\"3.5\" stroke=\"black\" fill=\""
        << (pat[m] == '1' ? "black" : "white") << "\"/>\n";
    }
  }
  const auto& mods = reports.front().second.modalities;
  for (std::size_t m = 0; m < mods.size(); ++m) {
    s << "<text x=\"" << num(left - 6) << "\" y=\"" << num(top + plot_h + 16 + 11 * static_cast<double>(m))
      << "\" text-anchor=\"end\">" << mods[m] << "</text>\n";
  }
  for (std::size_t r = 0; r < reports.size(); ++r) {
    const double y = top + 14 * static_cast<double>(r);
    s << "<rect x=\"" << num(width - 150) << "\" y=\"" << num(y) << "\" width=\"10\" height=\"10\" fill=\""
      << palette[r % 6] << "\"/>\n";
    s << "<text x=\"" << num(width - 135) << "\" y=\"" << num(y + 9) << "\">" << xml_escape(reports[r].first) << "</text>\n";
  }
  s << "</svg>\n";
  return s.str();
}

}  // namespace unirep
