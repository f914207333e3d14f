#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "taseg/error.hpp"
#include "taseg/image_io.hpp"
#include "taseg/random.hpp"
#include "taseg/tensor.hpp"

namespace taseg {

struct LabelMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::int32_t> ids;  // row-major

  LabelMap() = default;
  LabelMap(std::size_t h, std::size_t w, std::int32_t fill = 0) : height(h), width(w), ids(h * w, fill) {}

  std::int32_t& at(std::size_t r, std::size_t c) { return ids[r * width + c]; }
  std::int32_t at(std::size_t r, std::size_t c) const { return ids[r * width + c]; }
  bool operator==(const LabelMap&) const = default;
};

struct RgbtSample {
  Tensor rgb;      // [H x W x 3] in [0, 1]
  Tensor thermal;  // [H x W x 1] in [0, 1]
  LabelMap labels;
  std::string split;  // "day", "night", or empty
};

// Class ids of the synthetic benchmark.
inline constexpr std::int32_t kBackground = 0;
inline constexpr std::int32_t kBothVisible = 1;
inline constexpr std::int32_t kThermalOnly = 2;
inline constexpr std::int32_t kRgbOnly = 3;

inline std::vector<std::string> synthetic_class_names() {
  return {"background", "warm_object", "hidden_hot_object", "cold_object"};
}

struct SyntheticOptions {
  std::size_t count = 64;
  std::size_t size = 64;
  std::size_t patch = 8;  // generated size must be a multiple of this
  std::uint64_t seed = 0;
  Scalar noise = Scalar{0.02};
};

namespace detail {

// Appearance constants. Thermal-only objects reuse the background colour
// field exactly, so only the thermal channel separates them.
inline constexpr double kThermalBackground = 0.20;
inline constexpr double kThermalWarm = 0.75;
inline constexpr double kThermalHot = 0.85;
inline constexpr double kThermalCold = 0.15;
inline constexpr double kNightDimming = 0.35;

struct Scene {
  std::array<double, 3> base;   // background colour
  std::array<double, 3> ampl;   // low-frequency colour variation
  double fx, fy, phase;
  double th_slope;
};

inline std::array<double, 3> background_rgb(const Scene& s, double x, double y) {
  std::array<double, 3> c{};
  for (int k = 0; k < 3; ++k) {
    c[k] = s.base[k] + s.ampl[k] * std::sin(s.fx * x + s.fy * y + s.phase + 2.1 * k);
  }
  return c;
}

struct Shape2d {
  std::int32_t cls;
  double cx, cy, rx, ry;
  bool ellipse;
  bool contains(double x, double y) const {
    const double dx = (x - cx) / rx, dy = (y - cy) / ry;
    return ellipse ? dx * dx + dy * dy <= 1.0 : std::abs(dx) <= 1.0 && std::abs(dy) <= 1.0;
  }
};

inline RgbtSample render_scene(std::size_t n, Rng& rng, Scalar noise, bool night) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Scene s;
  for (int k = 0; k < 3; ++k) {
    s.base[k] = 0.35 + 0.2 * u(rng);
    s.ampl[k] = 0.03 + 0.04 * u(rng);
  }
  s.fx = (0.5 + 1.5 * u(rng)) * 2 * std::numbers::pi / static_cast<double>(n);
  s.fy = (0.5 + 1.5 * u(rng)) * 2 * std::numbers::pi / static_cast<double>(n);
  s.phase = 2 * std::numbers::pi * u(rng);
  s.th_slope = 0.05 * (u(rng) - 0.5);

  const double N = static_cast<double>(n);
  std::vector<Shape2d> shapes;
  auto random_shape = [&](std::int32_t cls) {
    const double r = N * (0.08 + 0.08 * u(rng));
    return Shape2d{cls,
                   r + (N - 2 * r) * u(rng),
                   r + (N - 2 * r) * u(rng),
                   r * (0.7 + 0.6 * u(rng)),
                   r * (0.7 + 0.6 * u(rng)),
                   u(rng) < 0.5};
  };
  for (std::int32_t c : {kBothVisible, kThermalOnly, kRgbOnly}) shapes.push_back(random_shape(c));
  const int extra = static_cast<int>(u(rng) * 3);
  for (int i = 0; i < extra; ++i) shapes.push_back(random_shape(1 + static_cast<std::int32_t>(u(rng) * 3) % 3));
  std::shuffle(shapes.begin(), shapes.end(), rng);

  // Colours of the visible classes.
  const std::array<double, 3> warm_rgb{0.80 + 0.1 * u(rng), 0.25, 0.20};
  const std::array<double, 3> cold_rgb{0.15, 0.30, 0.80 + 0.1 * u(rng)};

  RgbtSample out{Tensor({n, n, 3}), Tensor({n, n, 1}), LabelMap(n, n, kBackground), night ? "night" : "day"};
  std::normal_distribution<double> z(0.0, static_cast<double>(noise));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const double x = static_cast<double>(j) + 0.5, y = static_cast<double>(i) + 0.5;
      std::int32_t cls = kBackground;
      for (const auto& sh : shapes) {
        if (sh.contains(x, y)) cls = sh.cls;
      }
      std::array<double, 3> c = background_rgb(s, x, y);
      double t = kThermalBackground + s.th_slope * (y / N - 0.5);
      switch (cls) {
        case kBothVisible: c = warm_rgb; t = kThermalWarm; break;
        case kThermalOnly: t = kThermalHot; break;
        case kRgbOnly: c = cold_rgb; t = kThermalCold; break;
        default: break;
      }
      const double dim = night ? kNightDimming : 1.0;
      for (int k = 0; k < 3; ++k) {
        out.rgb[(i * n + j) * 3 + k] = static_cast<Scalar>(std::clamp(c[k] * dim + z(rng), 0.0, 1.0));
      }
      out.thermal[i * n + j] = static_cast<Scalar>(std::clamp(t + z(rng), 0.0, 1.0));
      out.labels.at(i, j) = cls;
    }
  return out;
}

}  // namespace detail

/// Seeded procedural RGB-thermal scenes with four classes: background,
/// objects visible in both modalities, objects camouflaged in RGB but hot in
/// thermal, and coloured objects at background temperature. Sample i is
/// generated from its own sub-seed and carries every non-background class.
/// Even indices are "day", odd indices "night" (RGB dimmed).
inline std::vector<RgbtSample> gen_synthetic(const SyntheticOptions& opt) {
  if (opt.size == 0 || opt.patch == 0 || opt.size % opt.patch != 0) {
    throw ConfigError("synthetic image size " + std::to_string(opt.size) + " is not a multiple of patch size " +
                      std::to_string(opt.patch));
  }
  std::vector<RgbtSample> out;
  out.reserve(opt.count);
  for (std::size_t i = 0; i < opt.count; ++i) {
    for (std::uint64_t attempt = 0;; ++attempt) {
      Rng rng(mix_seed(mix_seed(opt.seed, i), attempt));
      RgbtSample s = detail::render_scene(opt.size, rng, opt.noise, i % 2 == 1);
      std::array<std::size_t, 4> counts{};
      for (std::int32_t l : s.labels.ids) ++counts[static_cast<std::size_t>(l)];
      const std::size_t min_px = std::max<std::size_t>(4, opt.size * opt.size / 256);
      if (counts[1] >= min_px && counts[2] >= min_px && counts[3] >= min_px) {
        out.push_back(std::move(s));
        break;
      }
    }
  }
  return out;
}

// On-disk dataset: <root>/manifest.json plus rgb/*.ppm, thermal/*.pgm and
// labels/*.pgm (class id per byte).
//   {"classes": [...], "samples": [{"rgb": ..., "thermal": ..., "labels": ..., "split": ...}]}

struct ManifestEntry {
  std::string rgb;
  std::string thermal;
  std::string labels;
  std::string split;
};

struct DatasetManifest {
  std::filesystem::path root;
  std::vector<std::string> classes;
  std::vector<ManifestEntry> samples;
};

inline nlohmann::json to_json(const DatasetManifest& m) {
  nlohmann::json samples = nlohmann::json::array();
  for (const auto& e : m.samples) {
    nlohmann::json s = {{"rgb", e.rgb}, {"thermal", e.thermal}, {"labels", e.labels}};
    if (!e.split.empty()) s["split"] = e.split;
    samples.push_back(s);
  }
  return {{"classes", m.classes}, {"samples", samples}};
}

inline Image8 labels_to_image(const LabelMap& l) {
  Image8 img{l.height, l.width, 1, {}};
  img.pixels.reserve(l.ids.size());
  for (std::int32_t v : l.ids) {
    if (v < 0 || v > 255) throw FormatError("label id " + std::to_string(v) + " does not fit a graymap byte");
    img.pixels.push_back(static_cast<std::uint8_t>(v));
  }
  return img;
}

inline LabelMap image_to_labels(const Image8& img) {
  if (img.channels != 1) throw FormatError("label image must be a single-channel graymap");
  LabelMap l(img.height, img.width);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) l.ids[i] = img.pixels[i];
  return l;
}

inline DatasetManifest write_dataset(const std::filesystem::path& root, const std::vector<RgbtSample>& samples,
                                     const std::vector<std::string>& classes) {
  namespace fs = std::filesystem;
  std::error_code ec;
  for (const char* sub : {"rgb", "thermal", "labels"}) {
    fs::create_directories(root / sub, ec);
    if (ec) throw FormatError("cannot create '" + (root / sub).string() + "': " + ec.message());
  }
  DatasetManifest m{root, classes, {}};
  for (std::size_t i = 0; i < samples.size(); ++i) {
    char stem[16];
    std::snprintf(stem, sizeof stem, "%04zu", i);
    ManifestEntry e{std::string("rgb/") + stem + ".ppm", std::string("thermal/") + stem + ".pgm",
                    std::string("labels/") + stem + ".pgm", samples[i].split};
    write_image((root / e.rgb).string(), to_image8(samples[i].rgb));
    write_image((root / e.thermal).string(), to_image8(samples[i].thermal));
    write_image((root / e.labels).string(), labels_to_image(samples[i].labels));
    m.samples.push_back(std::move(e));
  }
  std::ofstream out(root / "manifest.json");
  if (!out) throw FormatError("cannot write manifest under '" + root.string() + "'");
  out << to_json(m).dump(2) << '\n';
  return m;
}

inline DatasetManifest read_manifest(const std::filesystem::path& root) {
  const auto path = root / "manifest.json";
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open manifest '" + path.string() + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError("manifest '" + path.string() + "' is not valid JSON: " + e.what());
  }
  DatasetManifest m{root, {}, {}};
  try {
    m.classes = j.at("classes").get<std::vector<std::string>>();
    for (const auto& s : j.at("samples")) {
      m.samples.push_back({s.at("rgb").get<std::string>(), s.at("thermal").get<std::string>(),
                           s.at("labels").get<std::string>(), s.value("split", std::string())});
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("manifest '" + path.string() + "': " + e.what());
  }
  if (m.classes.empty()) throw FormatError("manifest lists no classes");
  for (const auto& e : m.samples) {
    for (const auto& f : {e.rgb, e.thermal, e.labels}) {
      if (!std::filesystem::exists(root / f)) throw FormatError("manifest references missing file '" + f + "'");
    }
  }
  return m;
}

inline std::vector<RgbtSample> load_samples(const DatasetManifest& m) {
  std::vector<RgbtSample> out;
  for (const auto& e : m.samples) {
    Image8 rgb = read_image((m.root / e.rgb).string());
    Image8 th = read_image((m.root / e.thermal).string());
    LabelMap lbl = image_to_labels(read_image((m.root / e.labels).string()));
    if (rgb.channels != 3 || th.channels != 1) throw FormatError("sample '" + e.rgb + "': wrong channel count");
    if (rgb.height != th.height || rgb.width != th.width || lbl.height != rgb.height || lbl.width != rgb.width) {
      throw FormatError("sample '" + e.rgb + "': RGB, thermal and labels are not pixel-aligned");
    }
    for (std::int32_t l : lbl.ids) {
      if (l >= static_cast<std::int32_t>(m.classes.size()) && l != 255) {
        throw FormatError("sample '" + e.labels + "': label " + std::to_string(l) + " outside the class list");
      }
    }
    out.push_back({to_tensor(rgb), to_tensor(th), std::move(lbl), e.split});
  }
  return out;
}

}  // namespace taseg
