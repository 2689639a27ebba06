#pragma once

// Synthetic multimodal brain phantoms, in-mask normalization and the
// on-disk dataset format.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "unirep/errors.hpp"
#include "unirep/model.hpp"
#include "unirep/rng.hpp"

namespace unirep {

// Label classes.
inline constexpr std::uint8_t kBackground = 0;
inline constexpr std::uint8_t kNecrotic = 1;
inline constexpr std::uint8_t kEdema = 2;
inline constexpr std::uint8_t kEnhancing = 3;
inline constexpr std::size_t kNumClasses = 4;

/// Evaluation regions as sets of label classes. Nested: ET within TC within WT.
struct Region {
  std::string name;
  std::vector<std::uint8_t> classes;

  bool contains(std::uint8_t label) const {
    return std::find(classes.begin(), classes.end(), label) != classes.end();
  }
};

using RegionMap = std::vector<Region>;

inline const RegionMap& tumor_regions() {
  static const RegionMap regions{
      {"WT", {kNecrotic, kEdema, kEnhancing}},
      {"TC", {kNecrotic, kEnhancing}},
      {"ET", {kEnhancing}},
  };
  return regions;
}

inline std::size_t modality_index(const std::string& name) {
  const auto& all = canonical_modalities();
  const auto it = std::find(all.begin(), all.end(), name);
  if (it == all.end()) {
    throw ConfigError("unknown modality '" + name + "' (expected one of F,T1,T1c,T2)");
  }
  return static_cast<std::size_t>(it - all.begin());
}

/// Parses a comma-separated modality list into canonical order. Rejects
/// unknown names, duplicates and the empty list.
inline std::vector<std::string> parse_modalities(const std::string& csv) {
  std::set<std::size_t> idx;
  std::size_t start = 0;
  while (start <= csv.size()) {
    const auto end = std::min(csv.find(',', start), csv.size());
    const auto name = csv.substr(start, end - start);
    if (!idx.insert(modality_index(name)).second) throw ConfigError("duplicate modality '" + name + "'");
    start = end + 1;
  }
  if (idx.empty()) throw ConfigError("empty modality list");
  std::vector<std::string> out;
  for (auto i : idx) out.push_back(canonical_modalities()[i]);
  return out;
}

inline constexpr int kDatasetVersion = 1;

struct DatasetManifest {
  std::string name;
  std::vector<std::string> modalities;  // canonical order
  std::size_t samples = 0;
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t classes = kNumClasses;
  std::uint64_t seed = 0;
  double train_fraction = 0.7;
  bool tumors = true;

  std::size_t modality_count() const { return modalities.size(); }
  bool has_modality(const std::string& m) const {
    return std::find(modalities.begin(), modalities.end(), m) != modalities.end();
  }
  // Position of a canonical modality in this dataset, or npos.
  std::size_t local_index(const std::string& m) const {
    const auto it = std::find(modalities.begin(), modalities.end(), m);
    return it == modalities.end() ? std::string::npos : static_cast<std::size_t>(it - modalities.begin());
  }
};

struct PhantomSample {
  std::vector<std::vector<float>> images;  // one H*W image per manifest modality
  std::vector<std::uint8_t> labels;        // H*W
  std::vector<std::uint8_t> brain_mask;    // H*W, 0/1

  friend bool operator==(const PhantomSample&, const PhantomSample&) = default;
};

struct Dataset {
  DatasetManifest manifest;
  std::vector<PhantomSample> samples;
};

/// Zero mean / unit variance over the masked voxels; outside the mask is 0.
inline std::vector<float> normalize_in_mask(std::span<const float> image,
                                            std::span<const std::uint8_t> mask) {
  if (image.size() != mask.size()) throw ShapeError("normalize_in_mask: image/mask size mismatch");
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < image.size(); ++i) {
    if (mask[i]) {
      sum += image[i];
      ++n;
    }
  }
  if (n == 0) throw ShapeError("normalize_in_mask: empty mask");
  const double mean = sum / static_cast<double>(n);
  double ss = 0.0;
  for (std::size_t i = 0; i < image.size(); ++i) {
    if (mask[i]) ss += (image[i] - mean) * (image[i] - mean);
  }
  const double var = ss / static_cast<double>(n);
  if (!(var > 0.0)) throw NumericalError("normalize_in_mask: constant image inside mask");
  const double inv = 1.0 / std::sqrt(var);
  std::vector<float> out(image.size(), 0.0f);
  for (std::size_t i = 0; i < image.size(); ++i) {
    if (mask[i]) out[i] = static_cast<float>((image[i] - mean) * inv);
  }
  return out;
}

namespace detail {

enum Tissue : std::uint8_t { kOutside, kCsf, kGrey, kWhite, kNecro, kOedema, kEnhance, kTissueCount };

// Mean intensity per tissue class for each canonical modality (F, T1, T1c, T2).
// FLAIR carries the strongest edema contrast; T1c the enhancing tumor.
inline constexpr std::array<std::array<double, kTissueCount>, 4> kContrast{{
    //  out   csf   grey  white necro edema enh
    {{0.0, 0.15, 0.55, 0.45, 0.62, 1.05, 0.72}},  // F
    {{0.0, 0.20, 0.55, 0.75, 0.35, 0.64, 0.55}},  // T1
    {{0.0, 0.20, 0.55, 0.75, 0.35, 0.64, 1.10}},  // T1c
    {{0.0, 0.95, 0.62, 0.45, 0.88, 0.55, 0.66}},  // T2
}};

inline constexpr double kNoiseSigma = 0.05;

// Lobulated ellipse: returns the normalized radius (< 1 inside).
struct Blob {
  double cx, cy, a, b, angle, w2, p2, w3, p3;

  double radius(double x, double y) const {
    const double dx = x - cx, dy = y - cy;
    const double c = std::cos(angle), s = std::sin(angle);
    const double u = (c * dx + s * dy) / a, v = (-s * dx + c * dy) / b;
    const double phi = std::atan2(v, u);
    const double lobes = 1.0 + w2 * std::sin(2 * phi + p2) + w3 * std::sin(3 * phi + p3);
    return std::sqrt(u * u + v * v) / lobes;
  }

  static Blob random(double cx, double cy, double a, double b, double lobe, CounterRng& rng) {
    return Blob{cx, cy, a, b, rng.uniform(0.0, std::numbers::pi), lobe * rng.uniform(0.3, 1.0),
                rng.uniform(0.0, 2 * std::numbers::pi), lobe * rng.uniform(0.2, 0.7),
                rng.uniform(0.0, 2 * std::numbers::pi)};
  }
};

}  // namespace detail

/// Deterministic phantom for (manifest.seed, index). Geometry and every
/// modality draw from separate named streams, so a modality renders the
/// same whatever other modalities the manifest lists.
inline PhantomSample generate_phantom(const DatasetManifest& m, std::size_t index) {
  using namespace detail;
  if (index >= m.samples) throw ShapeError("generate_phantom: index out of range");
  const std::size_t H = m.height, W = m.width, n = H * W;
  const CounterRng root = CounterRng(m.seed).split("phantom").split(index);
  auto geo = root.split("geometry");

  const double scale = static_cast<double>(std::min(H, W));
  const double cx = 0.5 * (W - 1) + geo.uniform(-0.04, 0.04) * scale;
  const double cy = 0.5 * (H - 1) + geo.uniform(-0.04, 0.04) * scale;
  const Blob brain = Blob::random(cx, cy, geo.uniform(0.36, 0.44) * scale, geo.uniform(0.38, 0.46) * scale,
                                  0.05, geo);
  const Blob ventricle = Blob::random(cx + geo.uniform(-0.03, 0.03) * scale, cy, geo.uniform(0.05, 0.08) * scale,
                                      geo.uniform(0.08, 0.13) * scale, 0.1, geo);

  std::vector<std::uint8_t> tissue(n, kOutside);
  PhantomSample s;
  s.labels.assign(n, kBackground);
  s.brain_mask.assign(n, 0);
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      const double r = brain.radius(static_cast<double>(x), static_cast<double>(y));
      if (r >= 1.0) continue;
      s.brain_mask[y * W + x] = 1;
      tissue[y * W + x] = r > 0.62 ? kGrey : kWhite;
      if (ventricle.radius(static_cast<double>(x), static_cast<double>(y)) < 1.0) tissue[y * W + x] = kCsf;
    }
  }

  if (m.tumors) {
    // Tumor centre inside the brain, away from the rim.
    double tx, ty;
    do {
      tx = geo.uniform(0.0, static_cast<double>(W - 1));
      ty = geo.uniform(0.0, static_cast<double>(H - 1));
    } while (brain.radius(tx, ty) > 0.55);
    const double re = geo.uniform(0.15, 0.24) * scale;
    const Blob edema = Blob::random(tx, ty, re * geo.uniform(0.8, 1.2), re * geo.uniform(0.8, 1.2), 0.15, geo);
    const double rc = re * geo.uniform(0.5, 0.65);
    const Blob core = Blob::random(tx + geo.uniform(-0.15, 0.15) * re, ty + geo.uniform(-0.15, 0.15) * re,
                                   rc * geo.uniform(0.85, 1.15), rc * geo.uniform(0.85, 1.15), 0.1, geo);
    const double rt = rc * geo.uniform(0.45, 0.65);
    const Blob enh = Blob::random(core.cx + geo.uniform(-0.2, 0.2) * rc, core.cy + geo.uniform(-0.2, 0.2) * rc,
                                  rt, rt * geo.uniform(0.8, 1.2), 0.1, geo);
    for (std::size_t y = 0; y < H; ++y) {
      for (std::size_t x = 0; x < W; ++x) {
        const std::size_t i = y * W + x;
        if (!s.brain_mask[i]) continue;
        const double px = static_cast<double>(x), py = static_cast<double>(y);
        if (edema.radius(px, py) >= 1.0) continue;
        if (enh.radius(px, py) < 1.0 && core.radius(px, py) < 1.0) {
          s.labels[i] = kEnhancing;
          tissue[i] = kEnhance;
        } else if (core.radius(px, py) < 1.0) {
          s.labels[i] = kNecrotic;
          tissue[i] = kNecro;
        } else {
          s.labels[i] = kEdema;
          tissue[i] = kOedema;
        }
      }
    }
  }

  for (const auto& name : m.modalities) {
    const std::size_t mi = modality_index(name);
    auto rng = root.split("modality/" + name);
    // Smooth multiplicative bias field.
    const double bx = rng.uniform(-0.12, 0.12), by = rng.uniform(-0.12, 0.12), bq = rng.uniform(-0.1, 0.1);
    std::vector<float> img(n);
    for (std::size_t y = 0; y < H; ++y) {
      for (std::size_t x = 0; x < W; ++x) {
        const std::size_t i = y * W + x;
        const double u = (static_cast<double>(x) - cx) / scale, v = (static_cast<double>(y) - cy) / scale;
        const double bias = 1.0 + bx * u + by * v + bq * (u * u + v * v);
        const double noise = kNoiseSigma * rng.normal();
        img[i] = static_cast<float>(s.brain_mask[i] ? kContrast[mi][tissue[i]] * bias + noise : 0.0);
      }
    }
    s.images.push_back(normalize_in_mask(img, s.brain_mask));
  }
  return s;
}

inline Dataset generate_dataset(const DatasetManifest& m) {
  if (m.modalities.empty()) throw ConfigError("dataset: no modalities");
  Dataset d{m, {}};
  d.samples.reserve(m.samples);
  for (std::size_t i = 0; i < m.samples; ++i) d.samples.push_back(generate_phantom(m, i));
  return d;
}

struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> validation;
};

/// Disjoint, exhaustive train/validation split; a pure function of
/// (seed, train_fraction, sample count). Both halves are returned sorted.
inline Split split_indices(const DatasetManifest& m) {
  std::vector<std::size_t> order(m.samples);
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  auto rng = CounterRng(m.seed).split("split");
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  const auto n_train = static_cast<std::size_t>(std::llround(m.train_fraction * static_cast<double>(m.samples)));
  Split s;
  s.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(std::min(n_train, order.size())));
  s.validation.assign(order.begin() + static_cast<std::ptrdiff_t>(s.train.size()), order.end());
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.validation.begin(), s.validation.end());
  return s;
}

// ---------------------------------------------------------------------------
// Directory format:
//   manifest.json                 format, version, shapes, modalities, seed
//   sample_NNNNN.<MOD>.f32        H*W little-endian float32, row-major
//   sample_NNNNN.labels.u8        H*W uint8
//   sample_NNNNN.mask.u8          H*W uint8 (0/1)

namespace io {

inline void write_bytes(const std::filesystem::path& p, const void* data, std::size_t bytes) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError(p.string(), "cannot open for writing");
  f.write(static_cast<const char*>(data), static_cast<std::streamsize>(bytes));
  if (!f) throw FormatError(p.string(), "write failed");
}

inline std::vector<char> read_bytes(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw FormatError(p.string(), "missing or unreadable file");
  return std::vector<char>(std::istreambuf_iterator<char>(f), {});
}

inline void write_f32(const std::filesystem::path& p, std::span<const float> v) {
  std::vector<std::uint8_t> bytes(v.size() * 4);
  for (std::size_t i = 0; i < v.size(); ++i) {
    const auto u = std::bit_cast<std::uint32_t>(v[i]);
    for (int b = 0; b < 4; ++b) bytes[4 * i + b] = static_cast<std::uint8_t>(u >> (8 * b));
  }
  write_bytes(p, bytes.data(), bytes.size());
}

inline std::vector<float> read_f32(const std::filesystem::path& p, std::size_t count) {
  const auto bytes = read_bytes(p);
  if (bytes.size() != count * 4) {
    throw FormatError(p.string(), "expected " + std::to_string(count * 4) + " bytes, found " +
                                      std::to_string(bytes.size()));
  }
  std::vector<float> v(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::uint32_t u = 0;
    for (int b = 0; b < 4; ++b) u |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(bytes[4 * i + b])) << (8 * b);
    v[i] = std::bit_cast<float>(u);
  }
  return v;
}

inline std::vector<std::uint8_t> read_u8(const std::filesystem::path& p, std::size_t count) {
  const auto bytes = read_bytes(p);
  if (bytes.size() != count) {
    throw FormatError(p.string(), "expected " + std::to_string(count) + " bytes, found " +
                                      std::to_string(bytes.size()));
  }
  return std::vector<std::uint8_t>(bytes.begin(), bytes.end());
}

inline std::string sample_stem(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "sample_%05zu", i);
  return buf;
}

}  // namespace io

inline nlohmann::json manifest_to_json(const DatasetManifest& m) {
  return nlohmann::json{{"format", "unirep-dataset"},
                        {"version", kDatasetVersion},
                        {"name", m.name},
                        {"modalities", m.modalities},
                        {"samples", m.samples},
                        {"height", m.height},
                        {"width", m.width},
                        {"classes", m.classes},
                        {"seed", m.seed},
                        {"train_fraction", m.train_fraction},
                        {"tumors", m.tumors},
                        {"image_dtype", "float32-le"},
                        {"label_dtype", "uint8"}};
}

inline DatasetManifest manifest_from_json(const nlohmann::json& j, const std::string& path) {
  try {
    if (j.at("format").get<std::string>() != "unirep-dataset") throw FormatError(path, "not a unirep dataset");
    const int version = j.at("version").get<int>();
    if (version != kDatasetVersion) throw FormatError(path, "unknown manifest version " + std::to_string(version));
    DatasetManifest m;
    m.name = j.at("name").get<std::string>();
    m.modalities = j.at("modalities").get<std::vector<std::string>>();
    m.samples = j.at("samples").get<std::size_t>();
    m.height = j.at("height").get<std::size_t>();
    m.width = j.at("width").get<std::size_t>();
    m.classes = j.at("classes").get<std::size_t>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.train_fraction = j.at("train_fraction").get<double>();
    m.tumors = j.at("tumors").get<bool>();
    std::string csv;
    for (const auto& s : m.modalities) csv += (csv.empty() ? "" : ",") + s;
    if (parse_modalities(csv) != m.modalities) throw FormatError(path, "modalities not in canonical order");
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path, std::string("malformed manifest: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(path, e.what());
  }
}

inline void save_dataset(const Dataset& d, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const auto& m = d.manifest;
  {
    std::ofstream f(dir / "manifest.json", std::ios::binary | std::ios::trunc);
    if (!f) throw FormatError((dir / "manifest.json").string(), "cannot open for writing");
    f << manifest_to_json(m).dump(2) << '\n';
  }
  for (std::size_t i = 0; i < d.samples.size(); ++i) {
    const auto stem = io::sample_stem(i);
    const auto& s = d.samples[i];
    for (std::size_t k = 0; k < m.modalities.size(); ++k) {
      io::write_f32(dir / (stem + "." + m.modalities[k] + ".f32"), s.images[k]);
    }
    io::write_bytes(dir / (stem + ".labels.u8"), s.labels.data(), s.labels.size());
    io::write_bytes(dir / (stem + ".mask.u8"), s.brain_mask.data(), s.brain_mask.size());
  }
}

inline DatasetManifest load_manifest(const std::filesystem::path& dir) {
  const auto path = dir / "manifest.json";
  std::ifstream f(path);
  if (!f) throw FormatError(path.string(), "missing manifest");
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string(), std::string("malformed manifest: ") + e.what());
  }
  return manifest_from_json(j, path.string());
}

/// Strict load: every declared file must exist with the exact byte count,
/// and no sample may carry image files beyond the declared modalities.
inline Dataset load_dataset(const std::filesystem::path& dir) {
  Dataset d;
  d.manifest = load_manifest(dir);
  const auto& m = d.manifest;
  std::map<std::string, std::size_t> image_files;  // stem -> count of *.f32
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    const auto name = e.path().filename().string();
    if (name.rfind("sample_", 0) == 0 && e.path().extension() == ".f32") {
      ++image_files[name.substr(0, name.find('.'))];
    }
  }
  const std::size_t n = m.height * m.width;
  d.samples.reserve(m.samples);
  for (std::size_t i = 0; i < m.samples; ++i) {
    const auto stem = io::sample_stem(i);
    const auto found = image_files.count(stem) ? image_files[stem] : 0;
    if (found != m.modalities.size()) {
      throw FormatError((dir / stem).string(), "manifest declares " + std::to_string(m.modalities.size()) +
                                                   " modalities but " + std::to_string(found) +
                                                   " image files are present");
    }
    PhantomSample s;
    for (const auto& mod : m.modalities) s.images.push_back(io::read_f32(dir / (stem + "." + mod + ".f32"), n));
    s.labels = io::read_u8(dir / (stem + ".labels.u8"), n);
    s.brain_mask = io::read_u8(dir / (stem + ".mask.u8"), n);
    d.samples.push_back(std::move(s));
  }
  if (image_files.size() != m.samples) {
    throw FormatError(dir.string(), "found image files for " + std::to_string(image_files.size()) +
                                        " samples, manifest declares " + std::to_string(m.samples));
  }
  return d;
}

}  // namespace unirep
