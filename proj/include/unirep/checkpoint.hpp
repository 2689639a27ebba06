#pragma once

// Model checkpoints: a key=value text manifest (config, flags and one
// entry per named tensor) next to one raw little-endian float32 file per
// tensor. Saving the same model twice produces identical bytes.
//
//   checkpoint.txt:
//     format=unirep-checkpoint
//     version=1
//     kind=baseline|urn
//     config.<key>=<value>          model configuration
//     meta.<key>=<value>            scenario, flags, training facts
//     param.<name>=<d0>x<d1>... <file>
//     buffer.<name>=<d0>x<d1>... <file>

#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "unirep/data.hpp"
#include "unirep/errors.hpp"
#include "unirep/model.hpp"
#include "unirep/text.hpp"

namespace unirep {

inline constexpr int kCheckpointVersion = 1;

struct CheckpointManifest {
  std::string kind;
  std::map<std::string, std::string> config;
  std::map<std::string, std::string> meta;
  struct Entry {
    std::string name;
    Shape shape;
    std::string file;
    bool buffer = false;
  };
  std::vector<Entry> entries;
};

namespace detail {

inline std::string shape_token(const Shape& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "x" : "") + std::to_string(s[i]);
  return out.empty() ? "scalar" : out;
}

inline Shape parse_shape_token(const std::string& tok, const std::string& path) {
  if (tok == "scalar") return {};
  Shape s;
  for (const auto& part : split(tok, 'x')) {
    std::uint64_t v = 0;
    if (!parse_u64(part, v)) throw FormatError(path, "bad shape '" + tok + "'");
    s.push_back(static_cast<std::size_t>(v));
  }
  return s;
}

inline void write_seg_config(std::map<std::string, std::string>& c, const SegNetConfig& cfg) {
  std::string mods;
  for (const auto& m : cfg.modalities) mods += (mods.empty() ? "" : ",") + m;
  c["modalities"] = mods;
  c["num_classes"] = std::to_string(cfg.num_classes);
  c["levels"] = std::to_string(cfg.levels);
  c["base_width"] = std::to_string(cfg.base_width);
  c["leaky_slope"] = format_double(cfg.leaky_slope);
}

inline const std::string& require(const std::map<std::string, std::string>& m, const std::string& key,
                                  const std::string& path) {
  const auto it = m.find(key);
  if (it == m.end()) throw FormatError(path, "missing key '" + key + "'");
  return it->second;
}

inline std::size_t require_size(const std::map<std::string, std::string>& m, const std::string& key,
                                const std::string& path) {
  std::uint64_t v = 0;
  if (!parse_u64(require(m, key, path), v)) throw FormatError(path, "key '" + key + "' is not an integer");
  return static_cast<std::size_t>(v);
}

inline double require_double(const std::map<std::string, std::string>& m, const std::string& key,
                             const std::string& path) {
  double v = 0;
  if (!parse_double(require(m, key, path), v)) throw FormatError(path, "key '" + key + "' is not a number");
  return v;
}

inline void read_seg_config(const std::map<std::string, std::string>& c, SegNetConfig& cfg, const std::string& path) {
  try {
    cfg.modalities = parse_modalities(require(c, "modalities", path));
  } catch (const ConfigError& e) {
    throw FormatError(path, e.what());
  }
  cfg.num_classes = require_size(c, "num_classes", path);
  cfg.levels = require_size(c, "levels", path);
  cfg.base_width = require_size(c, "base_width", path);
  cfg.leaky_slope = require_double(c, "leaky_slope", path);
}

template <class T>
struct TensorWriter {
  std::filesystem::path dir;
  std::vector<std::string> lines;

  void write(const std::string& kind, const std::string& name, const Shape& shape, std::span<const T> values) {
    const std::string file = name + ".f32";
    std::vector<float> f(values.begin(), values.end());
    io::write_f32(dir / file, f);
    lines.push_back(kind + "." + name + "=" + shape_token(shape) + " " + file);
  }
  void param(const std::string& name, Parameter<T>& p) { write("param", name, p.value.shape(), p.value.data()); }
  void buffer(const std::string& name, const Shape& shape, std::vector<T>& v) {
    write("buffer", name, shape, std::span<const T>(v));
  }
};

template <class T>
struct TensorReader {
  std::filesystem::path dir;
  std::map<std::string, CheckpointManifest::Entry> entries;
  std::size_t consumed = 0;

  std::vector<float> fetch(const std::string& name, const Shape& shape, bool buffer) {
    const auto it = entries.find(name);
    const auto manifest = (dir / "checkpoint.txt").string();
    if (it == entries.end()) throw FormatError(manifest, "missing tensor '" + name + "'");
    if (it->second.buffer != buffer) throw FormatError(manifest, "tensor '" + name + "' has the wrong kind");
    if (it->second.shape != shape) {
      throw FormatError(manifest, "tensor '" + name + "' has shape " + shape_str(it->second.shape) +
                                      ", model expects " + shape_str(shape));
    }
    ++consumed;
    return io::read_f32(dir / it->second.file, shape_numel(shape));
  }
  void param(const std::string& name, Parameter<T>& p) {
    const auto v = fetch(name, p.value.shape(), false);
    auto w = p.value.mutable_data();
    std::copy(v.begin(), v.end(), w.begin());
  }
  void buffer(const std::string& name, const Shape& shape, std::vector<T>& out) {
    const auto v = fetch(name, shape, true);
    std::copy(v.begin(), v.end(), out.begin());
  }
};

template <class T, class Model>
void write_checkpoint(const std::filesystem::path& dir, Model& model, const CheckpointManifest& header) {
  std::filesystem::create_directories(dir);
  TensorWriter<T> w{dir, {}};
  model.visit(w);
  const auto path = dir / "checkpoint.txt";
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError(path.string(), "cannot open for writing");
  f << "format=unirep-checkpoint\n";
  f << "version=" << kCheckpointVersion << "\n";
  f << "kind=" << header.kind << "\n";
  for (const auto& [k, v] : header.config) f << "config." << k << "=" << v << "\n";
  for (const auto& [k, v] : header.meta) f << "meta." << k << "=" << v << "\n";
  for (const auto& line : w.lines) f << line << "\n";
  if (!f) throw FormatError(path.string(), "write failed");
}

template <class T, class Model>
void read_tensors(const std::filesystem::path& dir, const CheckpointManifest& m, Model& model) {
  TensorReader<T> r{dir, {}, 0};
  for (const auto& e : m.entries) r.entries.emplace(e.name, e);
  model.visit(r);
  if (r.consumed != m.entries.size()) {
    throw FormatError((dir / "checkpoint.txt").string(), "checkpoint lists tensors the model does not have");
  }
}

}  // namespace detail

inline CheckpointManifest read_checkpoint_manifest(const std::filesystem::path& dir) {
  const auto path = (dir / "checkpoint.txt").string();
  CheckpointManifest m;
  const auto kv = read_key_values(path);
  std::map<std::string, std::string> top;
  for (const auto& [k, v] : kv) {
    const auto dot = k.find('.');
    const auto ns = dot == std::string::npos ? std::string() : k.substr(0, dot);
    const auto rest = dot == std::string::npos ? k : k.substr(dot + 1);
    if (ns == "config") {
      m.config[rest] = v;
    } else if (ns == "meta") {
      m.meta[rest] = v;
    } else if (ns == "param" || ns == "buffer") {
      const auto sp = v.find(' ');
      if (sp == std::string::npos) throw FormatError(path, "entry '" + k + "' lacks a file name");
      m.entries.push_back({rest, detail::parse_shape_token(v.substr(0, sp), path), v.substr(sp + 1), ns == "buffer"});
    } else {
      top[k] = v;
    }
  }
  if (detail::require(top, "format", path) != "unirep-checkpoint") throw FormatError(path, "not a unirep checkpoint");
  if (detail::require(top, "version", path) != std::to_string(kCheckpointVersion)) {
    throw FormatError(path, "unknown checkpoint version " + top["version"]);
  }
  m.kind = detail::require(top, "kind", path);
  if (m.kind != "baseline" && m.kind != "urn") throw FormatError(path, "unknown model kind '" + m.kind + "'");
  return m;
}

template <class T>
void save_checkpoint(const std::filesystem::path& dir, BaselineModel<T>& model,
                     const std::map<std::string, std::string>& meta = {}) {
  CheckpointManifest h;
  h.kind = "baseline";
  detail::write_seg_config(h.config, model.cfg);
  h.meta = meta;
  detail::write_checkpoint<T>(dir, model, h);
}

template <class T>
void save_checkpoint(const std::filesystem::path& dir, UrnModel<T>& model,
                     std::map<std::string, std::string> meta = {}) {
  CheckpointManifest h;
  h.kind = "urn";
  const auto& cfg = model.config();
  detail::write_seg_config(h.config, cfg);
  h.config["rep_channels"] = std::to_string(cfg.rep_channels);
  h.config["fusion"] = to_string(cfg.fusion);
  h.config["variance_weight"] = format_double(cfg.variance_weight);
  h.config["decoder_blocks"] = std::to_string(cfg.decoder_blocks);
  meta["frozen.encoders"] = model.encoders_frozen() ? "1" : "0";
  meta["frozen.decoders"] = model.decoders_frozen() ? "1" : "0";
  meta["frozen.head"] = model.head_frozen() ? "1" : "0";
  h.meta = std::move(meta);
  detail::write_checkpoint<T>(dir, model, h);
}

template <class T>
BaselineModel<T> load_baseline_checkpoint(const std::filesystem::path& dir) {
  const auto m = read_checkpoint_manifest(dir);
  const auto path = (dir / "checkpoint.txt").string();
  if (m.kind != "baseline") throw FormatError(path, "expected a baseline checkpoint, found '" + m.kind + "'");
  SegNetConfig cfg;
  detail::read_seg_config(m.config, cfg, path);
  BaselineModel<T> model(cfg, CounterRng(0));
  detail::read_tensors<T>(dir, m, model);
  return model;
}

template <class T>
UrnModel<T> load_urn_checkpoint(const std::filesystem::path& dir) {
  const auto m = read_checkpoint_manifest(dir);
  const auto path = (dir / "checkpoint.txt").string();
  if (m.kind != "urn") throw FormatError(path, "expected a urn checkpoint, found '" + m.kind + "'");
  UrnConfig cfg;
  detail::read_seg_config(m.config, cfg, path);
  cfg.rep_channels = detail::require_size(m.config, "rep_channels", path);
  try {
    cfg.fusion = fusion_from_string(detail::require(m.config, "fusion", path));
  } catch (const ConfigError& e) {
    throw FormatError(path, e.what());
  }
  cfg.variance_weight = detail::require_double(m.config, "variance_weight", path);
  cfg.decoder_blocks = detail::require_size(m.config, "decoder_blocks", path);
  UrnModel<T> model(cfg, CounterRng(0));
  detail::read_tensors<T>(dir, m, model);
  const auto flag = [&](const std::string& k) {
    const auto it = m.meta.find(k);
    return it != m.meta.end() && it->second == "1";
  };
  model.freeze_encoders(flag("frozen.encoders"));
  model.freeze_decoders(flag("frozen.decoders"));
  model.freeze_head(flag("frozen.head"));
  return model;
}

}  // namespace unirep
