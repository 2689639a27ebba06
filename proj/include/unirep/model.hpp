#pragma once

// Network building blocks: the baseline U-net, residual synthesis decoders
// and the container holding a unified representation network.

#include <cmath>
#include <cstddef>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "unirep/errors.hpp"
#include "unirep/nn_ops.hpp"
#include "unirep/optim.hpp"
#include "unirep/rng.hpp"
#include "unirep/tensor.hpp"

namespace unirep {

enum class Phase { Train, Eval };

inline constexpr double kDefaultLeakySlope = 0.2;

namespace detail {

// Kaiming-style fan-in initialisation adapted to the leaky-relu slope.
template <class T>
Tensor<T> kaiming(const Shape& shape, std::size_t fan_in, double slope, CounterRng& rng) {
  const double stddev = std::sqrt(2.0 / ((1.0 + slope * slope) * static_cast<double>(fan_in)));
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(stddev * rng.normal());
  return Tensor<T>(shape, std::move(v));
}

}  // namespace detail

// Anything with visit(v, prefix) exposes parameters via v.param(name, p)
// and non-trainable buffers via v.buffer(name, shape, vec).

template <class T>
struct Conv2dLayer {
  Parameter<T> weight;
  Parameter<T> bias;  // value undefined when the layer has no bias
  std::size_t padding = 0;

  Conv2dLayer() = default;
  Conv2dLayer(std::size_t cin, std::size_t cout, std::size_t k, bool with_bias, double slope,
              CounterRng& rng)
      : weight("weight", detail::kaiming<T>({cout, cin, k, k}, cin * k * k, slope, rng)),
        padding((k - 1) / 2) {
    if (k % 2 == 0) throw ConfigError("conv: kernel size must be odd");
    if (with_bias) bias = Parameter<T>("bias", Tensor<T>::zeros({cout}));
  }

  Tensor<T> operator()(const Tensor<T>& x) const {
    return conv2d(x, weight.value, bias.value, 1, padding);
  }

  template <class V>
  void visit(V& v, const std::string& prefix) {
    v.param(prefix + ".weight", weight);
    if (bias.value.defined()) v.param(prefix + ".bias", bias);
  }
};

template <class T>
struct UpLayer {
  Parameter<T> weight;  // [Cin, Cout, 2, 2]
  Parameter<T> bias;

  UpLayer() = default;
  UpLayer(std::size_t cin, std::size_t cout, double slope, CounterRng& rng)
      : weight("weight", detail::kaiming<T>({cin, cout, 2, 2}, cin, slope, rng)),
        bias("bias", Tensor<T>::zeros({cout})) {}

  Tensor<T> operator()(const Tensor<T>& x) const { return upsample2(x, weight.value, bias.value); }

  template <class V>
  void visit(V& v, const std::string& prefix) {
    v.param(prefix + ".weight", weight);
    v.param(prefix + ".bias", bias);
  }
};

template <class T>
struct BatchNormLayer {
  Parameter<T> gamma;
  Parameter<T> beta;
  RunningStats<T> stats;

  BatchNormLayer() = default;
  explicit BatchNormLayer(std::size_t c)
      : gamma("gamma", Tensor<T>::full({c}, T{1})), beta("beta", Tensor<T>::zeros({c})), stats(c) {}

  Tensor<T> operator()(const Tensor<T>& x, Phase phase) {
    return batchnorm(x, gamma.value, beta.value, phase == Phase::Train ? BnMode::Train : BnMode::Eval,
                     &stats);
  }

  template <class V>
  void visit(V& v, const std::string& prefix) {
    v.param(prefix + ".gamma", gamma);
    v.param(prefix + ".beta", beta);
    v.buffer(prefix + ".running_mean", Shape{stats.mean.size()}, stats.mean);
    v.buffer(prefix + ".running_var", Shape{stats.var.size()}, stats.var);
  }
};

struct UNetConfig {
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  std::size_t levels = 4;
  std::size_t base_width = 16;
  double leaky_slope = kDefaultLeakySlope;

  void validate() const {
    if (levels < 2) throw ConfigError("unet: levels must be >= 2");
    if (in_channels == 0 || out_channels == 0 || base_width == 0) {
      throw ConfigError("unet: channel counts must be positive");
    }
    if (!(leaky_slope > 0.0 && leaky_slope < 1.0)) throw ConfigError("unet: leaky slope must be in (0,1)");
  }
  std::size_t width(std::size_t level) const { return base_width << level; }
};

/// U-net with one 3x3 conv -> batchnorm -> leaky-relu per resolution level,
/// 2x2 max pooling down, stride-2 transposed convolution up, concatenating
/// skips and a linear 1x1 output convolution.
template <class T>
class UNet {
 public:
  UNet() = default;
  UNet(const UNetConfig& cfg, CounterRng& rng) : cfg_(cfg) {
    cfg.validate();
    const double a = cfg.leaky_slope;
    std::size_t cin = cfg.in_channels;
    for (std::size_t l = 0; l < cfg.levels; ++l) {
      down_conv_.emplace_back(cin, cfg.width(l), 3, false, a, rng);
      down_bn_.emplace_back(cfg.width(l));
      cin = cfg.width(l);
    }
    for (std::size_t l = 0; l + 1 < cfg.levels; ++l) {
      up_.emplace_back(cfg.width(l + 1), cfg.width(l), a, rng);
      up_conv_.emplace_back(2 * cfg.width(l), cfg.width(l), 3, false, a, rng);
      up_bn_.emplace_back(cfg.width(l));
    }
    final_ = Conv2dLayer<T>(cfg.width(0), cfg.out_channels, 1, true, a, rng);
  }

  const UNetConfig& config() const { return cfg_; }

  Tensor<T> forward(const Tensor<T>& x, Phase phase) {
    if (x.rank() != 4) throw ShapeError("unet: input must be [N,C,H,W], got " + shape_str(x.shape()));
    if (x.dim(1) != cfg_.in_channels) {
      throw ShapeError("unet: channel dimension (dim 1) is " + std::to_string(x.dim(1)) +
                       ", expected " + std::to_string(cfg_.in_channels));
    }
    const std::size_t div = std::size_t{1} << (cfg_.levels - 1);
    if (x.dim(2) % div || x.dim(3) % div) {
      throw ShapeError("unet: spatial extents " + std::to_string(x.dim(2)) + "x" +
                       std::to_string(x.dim(3)) + " not divisible by " + std::to_string(div));
    }
    const T slope = static_cast<T>(cfg_.leaky_slope);
    std::vector<Tensor<T>> skips;
    Tensor<T> h = x;
    for (std::size_t l = 0; l < cfg_.levels; ++l) {
      if (l > 0) h = max_pool2(h);
      h = leaky_relu(down_bn_[l](down_conv_[l](h), phase), slope);
      skips.push_back(h);
    }
    for (std::size_t l = cfg_.levels - 1; l-- > 0;) {
      h = up_[l](h);
      h = concat<T>({skips[l], h}, 1);
      h = leaky_relu(up_bn_[l](up_conv_[l](h), phase), slope);
    }
    return final_(h);
  }

  template <class V>
  void visit(V& v, const std::string& prefix) {
    for (std::size_t l = 0; l < down_conv_.size(); ++l) {
      const auto p = prefix + ".down" + std::to_string(l);
      down_conv_[l].visit(v, p + ".conv");
      down_bn_[l].visit(v, p + ".bn");
    }
    for (std::size_t l = 0; l < up_.size(); ++l) {
      const auto p = prefix + ".up" + std::to_string(l);
      up_[l].visit(v, p + ".tconv");
      up_conv_[l].visit(v, p + ".conv");
      up_bn_[l].visit(v, p + ".bn");
    }
    final_.visit(v, prefix + ".out");
  }

 private:
  UNetConfig cfg_;
  std::vector<Conv2dLayer<T>> down_conv_;
  std::vector<BatchNormLayer<T>> down_bn_;
  std::vector<UpLayer<T>> up_;
  std::vector<Conv2dLayer<T>> up_conv_;
  std::vector<BatchNormLayer<T>> up_bn_;
  Conv2dLayer<T> final_;
};

template <class T>
UNet<T> build_unet(const UNetConfig& cfg, CounterRng& rng) {
  return UNet<T>(cfg, rng);
}

/// (3x3 conv -> bn -> lrelu -> 3x3 conv -> bn) + identity, then lrelu.
template <class T>
struct ResidualBlock {
  Conv2dLayer<T> conv1, conv2;
  BatchNormLayer<T> bn1, bn2;
  T slope{};

  ResidualBlock() = default;
  ResidualBlock(std::size_t c, double a, CounterRng& rng)
      : conv1(c, c, 3, false, a, rng), conv2(c, c, 3, false, a, rng), bn1(c), bn2(c),
        slope(static_cast<T>(a)) {}

  Tensor<T> forward(const Tensor<T>& x, Phase phase) {
    auto h = leaky_relu(bn1(conv1(x), phase), slope);
    h = bn2(conv2(h), phase);
    return leaky_relu(add(h, x), slope);
  }

  template <class V>
  void visit(V& v, const std::string& prefix) {
    conv1.visit(v, prefix + ".conv1");
    bn1.visit(v, prefix + ".bn1");
    conv2.visit(v, prefix + ".conv2");
    bn2.visit(v, prefix + ".bn2");
  }
};

struct DecoderConfig {
  std::size_t in_channels = 16;
  std::size_t blocks = 2;
  double leaky_slope = kDefaultLeakySlope;
};

/// Shallow synthesis decoder: residual blocks and a linear 1x1 convolution
/// to a single image channel.
template <class T>
class SynthesisDecoder {
 public:
  SynthesisDecoder() = default;
  SynthesisDecoder(const DecoderConfig& cfg, CounterRng& rng) : cfg_(cfg) {
    for (std::size_t b = 0; b < cfg.blocks; ++b) blocks_.emplace_back(cfg.in_channels, cfg.leaky_slope, rng);
    final_ = Conv2dLayer<T>(cfg.in_channels, 1, 1, true, cfg.leaky_slope, rng);
  }

  Tensor<T> forward(const Tensor<T>& z, Phase phase) {
    if (z.rank() != 4 || z.dim(1) != cfg_.in_channels) {
      throw ShapeError("decoder: expected [N," + std::to_string(cfg_.in_channels) + ",H,W], got " +
                       shape_str(z.shape()));
    }
    Tensor<T> h = z;
    for (auto& b : blocks_) h = b.forward(h, phase);
    return final_(h);
  }

  std::vector<ResidualBlock<T>>& blocks() { return blocks_; }
  Conv2dLayer<T>& output_layer() { return final_; }

  template <class V>
  void visit(V& v, const std::string& prefix) {
    for (std::size_t b = 0; b < blocks_.size(); ++b) blocks_[b].visit(v, prefix + ".block" + std::to_string(b));
    final_.visit(v, prefix + ".out");
  }

 private:
  DecoderConfig cfg_;
  std::vector<ResidualBlock<T>> blocks_;
  Conv2dLayer<T> final_;
};

template <class T>
SynthesisDecoder<T> build_synthesis_decoder(const DecoderConfig& cfg, CounterRng& rng) {
  return SynthesisDecoder<T>(cfg, rng);
}

// Parameter-free standardizer applied to every encoder output before fusion.
template <class T>
Tensor<T> standardize(const Tensor<T>& x) {
  return batchnorm(x, Tensor<T>{}, Tensor<T>{}, BnMode::Fixed, static_cast<RunningStats<T>*>(nullptr));
}

// Collects parameter pointers in visit order.
template <class T>
struct ParameterCollector {
  std::vector<Parameter<T>*> out;
  void param(const std::string& name, Parameter<T>& p) {
    p.name = name;
    out.push_back(&p);
  }
  void buffer(const std::string&, const Shape&, std::vector<T>&) {}
};

template <class T, class Net>
std::vector<Parameter<T>*> parameters_of(Net& net, const std::string& prefix = "net") {
  ParameterCollector<T> c;
  net.visit(c, prefix);
  return c.out;
}

template <class T, class Net>
std::size_t parameter_count(Net& net) {
  std::size_t n = 0;
  for (auto* p : parameters_of<T>(net)) n += p->value.numel();
  return n;
}

template <class T, class Net>
void set_frozen(Net& net, bool frozen) {
  for (auto* p : parameters_of<T>(net)) p->frozen = frozen;
}

// ---------------------------------------------------------------------------

inline const std::vector<std::string>& canonical_modalities() {
  static const std::vector<std::string> names{"F", "T1", "T1c", "T2"};
  return names;
}

enum class FusionKind { Identity, Exp };

inline std::string to_string(FusionKind f) { return f == FusionKind::Identity ? "identity" : "exp"; }
inline FusionKind fusion_from_string(const std::string& s) {
  if (s == "identity") return FusionKind::Identity;
  if (s == "exp") return FusionKind::Exp;
  throw ConfigError("unknown fusion function '" + s + "' (expected identity|exp)");
}

struct SegNetConfig {
  std::vector<std::string> modalities = canonical_modalities();
  std::size_t num_classes = 4;
  std::size_t levels = 4;
  std::size_t base_width = 16;
  double leaky_slope = kDefaultLeakySlope;

  UNetConfig unet(std::size_t in, std::size_t out) const {
    return UNetConfig{in, out, levels, base_width, leaky_slope};
  }
};

struct UrnConfig : SegNetConfig {
  std::size_t rep_channels = 16;
  FusionKind fusion = FusionKind::Identity;
  double variance_weight = 1e-4;
  std::size_t decoder_blocks = 2;

  void validate() const {
    if (rep_channels < 1) throw ConfigError("urn: rep_channels must be >= 1");
    if (variance_weight < 0) throw ConfigError("urn: variance_weight must be >= 0");
    if (modalities.empty()) throw ConfigError("urn: no modalities");
  }
};

/// Segmentation head: a baseline U-net over `in_channels` inputs
/// (|modalities| for the baseline, rep_channels on the representation).
template <class T>
UNet<T> build_segmentation_head(const SegNetConfig& cfg, std::size_t in_channels, CounterRng& rng) {
  return UNet<T>(cfg.unet(in_channels, cfg.num_classes), rng);
}

/// Baseline: one U-net over the stacked modalities.
template <class T>
struct BaselineModel {
  SegNetConfig cfg;
  UNet<T> net;

  BaselineModel() = default;
  BaselineModel(const SegNetConfig& c, CounterRng rng)
      : cfg(c), net(build_segmentation_head<T>(c, c.modalities.size(), rng)) {}

  template <class V>
  void visit(V& v) {
    net.visit(v, "seg");
  }
};

/// Modality-specific encoders, per-modality synthesis decoders and a
/// segmentation head operating on the fused representation.
template <class T>
class UrnModel {
 public:
  UrnModel() = default;
  UrnModel(const UrnConfig& cfg, CounterRng rng) : cfg_(cfg) {
    cfg.validate();
    for (std::size_t i = 0; i < cfg.modalities.size(); ++i) {
      auto r = rng.split("encoder/" + cfg.modalities[i]);
      encoders_.emplace_back(cfg.unet(1, cfg.rep_channels), r);
    }
    for (std::size_t i = 0; i < cfg.modalities.size(); ++i) {
      auto r = rng.split("decoder/" + cfg.modalities[i]);
      decoders_.emplace_back(DecoderConfig{cfg.rep_channels, cfg.decoder_blocks, cfg.leaky_slope}, r);
    }
    auto r = rng.split("head");
    head_ = build_segmentation_head<T>(cfg, cfg.rep_channels, r);
  }

  const UrnConfig& config() const { return cfg_; }
  std::size_t modality_count() const { return encoders_.size(); }

  /// Standardized representation of one modality: [N,1,H,W] -> [N,R,H,W].
  Tensor<T> encode(std::size_t modality, const Tensor<T>& image, Phase phase) {
    if (modality >= encoders_.size()) {
      throw ShapeError("encode: unknown modality index " + std::to_string(modality));
    }
    if (image.rank() != 4 || image.dim(1) != 1) {
      throw ShapeError("encode: image must be [N,1,H,W], got " + shape_str(image.shape()));
    }
    return standardize(encoders_[modality].forward(image, phase));
  }

  Tensor<T> decode(std::size_t modality, const Tensor<T>& z, Phase phase) {
    return decoders_.at(modality).forward(z, phase);
  }

  Tensor<T> segment(const Tensor<T>& z, Phase phase) { return head_.forward(z, phase); }

  UNet<T>& encoder(std::size_t i) { return encoders_.at(i); }
  SynthesisDecoder<T>& decoder(std::size_t i) { return decoders_.at(i); }
  UNet<T>& head() { return head_; }

  void freeze_encoders(bool on) {
    encoders_frozen_ = on;
    for (auto& e : encoders_) set_frozen<T>(e, on);
  }
  void freeze_decoders(bool on) {
    decoders_frozen_ = on;
    for (auto& d : decoders_) set_frozen<T>(d, on);
  }
  void freeze_head(bool on) {
    head_frozen_ = on;
    set_frozen<T>(head_, on);
  }
  bool encoders_frozen() const { return encoders_frozen_; }
  bool decoders_frozen() const { return decoders_frozen_; }
  bool head_frozen() const { return head_frozen_; }

  template <class V>
  void visit(V& v) {
    for (std::size_t i = 0; i < encoders_.size(); ++i) encoders_[i].visit(v, "encoder." + cfg_.modalities[i]);
    for (std::size_t i = 0; i < decoders_.size(); ++i) decoders_[i].visit(v, "decoder." + cfg_.modalities[i]);
    head_.visit(v, "head");
  }

 private:
  UrnConfig cfg_;
  std::vector<UNet<T>> encoders_;
  std::vector<SynthesisDecoder<T>> decoders_;
  UNet<T> head_;
  bool encoders_frozen_ = false;
  bool decoders_frozen_ = false;
  bool head_frozen_ = false;
};

template <class T, class Model>
std::vector<Parameter<T>*> model_parameters(Model& m) {
  ParameterCollector<T> c;
  m.visit(c);
  return c.out;
}

}  // namespace unirep
