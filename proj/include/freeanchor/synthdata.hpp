// Copyright 2026 The FreeAnchor Toy Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Synthetic detection scenes: filled rectangles whose class is encoded in a
// fill pattern, rendered into an 8-bit raster with optional noise.

#pragma once

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "freeanchor/errors.hpp"
#include "freeanchor/geometry.hpp"
#include "json.hpp"

namespace freeanchor {

/// Aspect-ratio threshold max(w/h, h/w) at which an object counts as slender.
inline constexpr double kSlenderAspect = 3.0;

inline double aspect_ratio(const BBox& b) {
  const double w = b.width(), h = b.height();
  return std::max(w / h, h / w);
}

inline bool is_slender(const BBox& b) { return aspect_ratio(b) >= kSlenderAspect; }

struct Scene {
  std::uint64_t id = 0;
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> raster;  // row-major intensities
  std::vector<LabeledBox> objects;

  std::size_t crowdedness() const { return objects.size(); }
  std::vector<BBox> boxes() const {
    std::vector<BBox> out;
    out.reserve(objects.size());
    for (const auto& o : objects) out.push_back(o.box);
    return out;
  }

  friend bool operator==(const Scene&, const Scene&) = default;
};

struct DatasetSpec {
  std::size_t num_scenes = 100;
  int width = 64;
  int height = 64;
  int num_classes = 3;
  // Shape mix; must sum to 1.
  double frac_square = 1.0;
  double frac_slender_h = 0.0;
  double frac_slender_v = 0.0;
  // Objects per scene, uniform over [min_objects, max_objects].
  int min_objects = 1;
  int max_objects = 3;
  bool crowded = false;
  double max_gt_iou = 0.7;  // crowded mode cap on pairwise ground-truth IoU
  double square_aspect_min = 1.0, square_aspect_max = 2.0;
  double slender_aspect_min = 3.0, slender_aspect_max = 5.0;
  double scale_min = 12.0, scale_max = 24.0;  // sqrt(area), pixels
  double contrast = 0.8;                      // mean fill intensity, [0, 1]
  double noise = 0.0;                         // additive Gaussian sigma, intensity units
  std::uint64_t seed = 0;
  int max_retries = 100;

  void validate() const {
    if (width < 8 || height < 8) throw ConfigError("dataset spec: image must be at least 8x8");
    if (num_classes < 1) throw ConfigError("dataset spec: need at least one class");
    if (frac_square < 0 || frac_slender_h < 0 || frac_slender_v < 0 ||
        std::abs(frac_square + frac_slender_h + frac_slender_v - 1.0) > 1e-9)
      throw ConfigError("dataset spec: shape fractions must be non-negative and sum to 1");
    if (min_objects < 0 || max_objects < min_objects) throw ConfigError("dataset spec: bad object count range");
    if (!(scale_min > 1.0) || scale_max < scale_min) throw ConfigError("dataset spec: bad scale range");
    if (square_aspect_min < 1.0 || square_aspect_max < square_aspect_min || square_aspect_max >= kSlenderAspect)
      throw ConfigError("dataset spec: square aspect range must lie in [1, 3)");
    if (slender_aspect_min < kSlenderAspect || slender_aspect_max < slender_aspect_min)
      throw ConfigError("dataset spec: slender aspect range must start at 3 or above");
    if (!(contrast > 0.0 && contrast <= 1.0)) throw ConfigError("dataset spec: contrast must lie in (0, 1]");
    if (!(noise >= 0.0)) throw ConfigError("dataset spec: noise must be non-negative");
    if (!(max_gt_iou >= 0.0 && max_gt_iou <= 0.7)) throw ConfigError("dataset spec: ground-truth IoU cap must lie in [0, 0.7]");
  }
};

inline nlohmann::json spec_to_json(const DatasetSpec& s) {
  return {{"num_scenes", s.num_scenes},         {"width", s.width},
          {"height", s.height},                 {"num_classes", s.num_classes},
          {"frac_square", s.frac_square},       {"frac_slender_h", s.frac_slender_h},
          {"frac_slender_v", s.frac_slender_v}, {"min_objects", s.min_objects},
          {"max_objects", s.max_objects},       {"crowded", s.crowded},
          {"max_gt_iou", s.max_gt_iou},         {"square_aspect", {s.square_aspect_min, s.square_aspect_max}},
          {"slender_aspect", {s.slender_aspect_min, s.slender_aspect_max}},
          {"scale", {s.scale_min, s.scale_max}}, {"contrast", s.contrast},
          {"noise", s.noise},                   {"seed", s.seed},
          {"max_retries", s.max_retries}};
}

inline DatasetSpec spec_from_json(const nlohmann::json& j) {
  DatasetSpec s;
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  auto get_pair = [&](const char* key, double& lo, double& hi) {
    if (!j.contains(key)) return;
    const auto v = j.at(key).get<std::vector<double>>();
    if (v.size() != 2) throw ConfigError(std::string("dataset spec: ") + key + " must be a [min, max] pair");
    lo = v[0];
    hi = v[1];
  };
  try {
    get("num_scenes", s.num_scenes);
    get("width", s.width);
    get("height", s.height);
    get("num_classes", s.num_classes);
    get("frac_square", s.frac_square);
    get("frac_slender_h", s.frac_slender_h);
    get("frac_slender_v", s.frac_slender_v);
    get("min_objects", s.min_objects);
    get("max_objects", s.max_objects);
    get("crowded", s.crowded);
    get("max_gt_iou", s.max_gt_iou);
    get_pair("square_aspect", s.square_aspect_min, s.square_aspect_max);
    get_pair("slender_aspect", s.slender_aspect_min, s.slender_aspect_max);
    get_pair("scale", s.scale_min, s.scale_max);
    get("contrast", s.contrast);
    get("noise", s.noise);
    get("seed", s.seed);
    get("max_retries", s.max_retries);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("dataset spec: ") + e.what());
  }
  s.validate();
  return s;
}

// ---------------------------------------------------------------------------
// Generation

/// splitmix64 finalizer; derives independent per-scene / per-iteration seeds.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

/// Fill intensity of class `label` at pixel (x, y): solid, horizontal
/// stripes, or vertical stripes, all with mean `contrast` (darker for
/// labels beyond the first three).
inline double fill_intensity(int label, int x, int y, double contrast) {
  const double mean = contrast * (1.0 - 0.2 * static_cast<double>(label / 3));
  const double amp = 0.25 * mean;
  switch (label % 3) {
    case 0: return mean;
    case 1: return (y % 2 == 0) ? mean + amp : mean - amp;
    default: return (x % 2 == 0) ? mean + amp : mean - amp;
  }
}

inline void render_scene(Scene& scene, double contrast, double noise, std::mt19937_64& rng) {
  std::vector<double> img(static_cast<std::size_t>(scene.width) * static_cast<std::size_t>(scene.height), 0.0);
  // Larger objects first so smaller ones stay visible.
  std::vector<std::size_t> order(scene.objects.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return scene.objects[a].box.area() > scene.objects[b].box.area();
  });
  for (std::size_t idx : order) {
    const auto& o = scene.objects[idx];
    for (int y = static_cast<int>(o.box.y1); y < static_cast<int>(o.box.y2); ++y)
      for (int x = static_cast<int>(o.box.x1); x < static_cast<int>(o.box.x2); ++x)
        img[static_cast<std::size_t>(y) * static_cast<std::size_t>(scene.width) + static_cast<std::size_t>(x)] =
            fill_intensity(o.label, x, y, contrast);
  }
  std::normal_distribution<double> gauss(0.0, 1.0);
  scene.raster.resize(img.size());
  for (std::size_t p = 0; p < img.size(); ++p) {
    double v = img[p];
    if (noise > 0.0) v += noise * gauss(rng);
    scene.raster[p] = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
  }
}

using SkipLogger = std::function<void(std::uint64_t scene_id, std::size_t object_index)>;

inline Scene generate_scene(const DatasetSpec& spec, std::uint64_t scene_id, const SkipLogger& on_skip = {}) {
  std::mt19937_64 rng(mix_seed(spec.seed, scene_id));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };

  Scene scene;
  scene.id = scene_id;
  scene.width = spec.width;
  scene.height = spec.height;
  const int count = spec.min_objects + static_cast<int>(unit(rng) * (spec.max_objects - spec.min_objects + 1));
  const int target = std::min(count, spec.max_objects);

  for (int n = 0; n < target; ++n) {
    const double shape = unit(rng);
    const int label = std::min(spec.num_classes - 1, static_cast<int>(unit(rng) * spec.num_classes));
    bool placed = false;
    for (int attempt = 0; attempt < spec.max_retries && !placed; ++attempt) {
      const double s = uniform(spec.scale_min, spec.scale_max);
      double w = s, h = s;
      if (shape < spec.frac_square) {
        const double a = uniform(spec.square_aspect_min, spec.square_aspect_max);
        if (unit(rng) < 0.5) w = s * std::sqrt(a), h = s / std::sqrt(a);
        else w = s / std::sqrt(a), h = s * std::sqrt(a);
      } else {
        const double a = uniform(spec.slender_aspect_min, spec.slender_aspect_max);
        const bool horizontal = shape < spec.frac_square + spec.frac_slender_h;
        w = horizontal ? s * std::sqrt(a) : s / std::sqrt(a);
        h = horizontal ? s / std::sqrt(a) : s * std::sqrt(a);
      }
      // Integer boxes; the rounding must not break the shape class.
      int iw = std::max(2, static_cast<int>(std::lround(w)));
      int ih = std::max(2, static_cast<int>(std::lround(h)));
      if (shape >= spec.frac_square) {
        if (iw > ih) iw = std::max(iw, 3 * ih);
        else ih = std::max(ih, 3 * iw);
      } else if (std::max(iw, ih) >= 3 * std::min(iw, ih)) {
        continue;
      }
      if (iw > spec.width - 2 || ih > spec.height - 2) continue;

      double cx, cy;
      if (spec.crowded && !scene.objects.empty()) {
        const auto& near = scene.objects[static_cast<std::size_t>(unit(rng) * static_cast<double>(scene.objects.size())) %
                                         scene.objects.size()].box;
        cx = near.cx() + uniform(-0.8, 0.8) * (0.5 * near.width() + 0.5 * iw);
        cy = near.cy() + uniform(-0.8, 0.8) * (0.5 * near.height() + 0.5 * ih);
      } else {
        cx = uniform(0.5 * iw, spec.width - 0.5 * iw);
        cy = uniform(0.5 * ih, spec.height - 0.5 * ih);
      }
      const int x1 = static_cast<int>(std::lround(cx - 0.5 * iw));
      const int y1 = static_cast<int>(std::lround(cy - 0.5 * ih));
      if (x1 < 0 || y1 < 0 || x1 + iw > spec.width || y1 + ih > spec.height) continue;
      const BBox box{static_cast<double>(x1), static_cast<double>(y1), static_cast<double>(x1 + iw),
                     static_cast<double>(y1 + ih)};
      const double cap = spec.crowded ? spec.max_gt_iou : 0.0;
      bool ok = true;
      for (const auto& other : scene.objects) {
        const double v = iou(box, other.box);
        // Non-crowded scenes keep objects disjoint.
        if (v > cap || (!spec.crowded && intersection_area(box, other.box) > 0.0)) {
          ok = false;
          break;
        }
      }
      if (!ok) continue;
      scene.objects.push_back({box, label});
      placed = true;
    }
    if (!placed && on_skip) on_skip(scene_id, static_cast<std::size_t>(n));
  }
  render_scene(scene, spec.contrast, spec.noise, rng);
  return scene;
}

inline std::vector<Scene> generate_dataset(const DatasetSpec& spec, const SkipLogger& on_skip = {}) {
  spec.validate();
  std::vector<Scene> out;
  out.reserve(spec.num_scenes);
  for (std::size_t i = 0; i < spec.num_scenes; ++i) out.push_back(generate_scene(spec, i, on_skip));
  return out;
}

// ---------------------------------------------------------------------------
// Serialization: one JSON object per line, raster as base64.

namespace detail {

inline constexpr char kB64[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

inline std::string base64_encode(std::span<const std::uint8_t> in) {
  std::string out;
  out.reserve((in.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 2 < in.size(); i += 3) {
    const std::uint32_t v = (std::uint32_t{in[i]} << 16) | (std::uint32_t{in[i + 1]} << 8) | in[i + 2];
    out += kB64[(v >> 18) & 63];
    out += kB64[(v >> 12) & 63];
    out += kB64[(v >> 6) & 63];
    out += kB64[v & 63];
  }
  if (i < in.size()) {
    std::uint32_t v = std::uint32_t{in[i]} << 16;
    if (i + 1 < in.size()) v |= std::uint32_t{in[i + 1]} << 8;
    out += kB64[(v >> 18) & 63];
    out += kB64[(v >> 12) & 63];
    out += i + 1 < in.size() ? kB64[(v >> 6) & 63] : '=';
    out += '=';
  }
  return out;
}

/// Strict decoder; returns false on bad length, characters, or padding.
inline bool base64_decode(std::string_view in, std::vector<std::uint8_t>& out) {
  auto val = [](char c) -> int {
    if (c >= 'A' && c <= 'Z') return c - 'A';
    if (c >= 'a' && c <= 'z') return c - 'a' + 26;
    if (c >= '0' && c <= '9') return c - '0' + 52;
    if (c == '+') return 62;
    if (c == '/') return 63;
    return -1;
  };
  out.clear();
  if (in.size() % 4 != 0) return false;
  out.reserve(in.size() / 4 * 3);
  for (std::size_t i = 0; i < in.size(); i += 4) {
    const bool last = i + 4 == in.size();
    int v[4];
    int pad = 0;
    for (int q = 0; q < 4; ++q) {
      const char c = in[i + static_cast<std::size_t>(q)];
      if (c == '=' && last && q >= 2) {
        v[q] = 0;
        ++pad;
        continue;
      }
      if (pad > 0) return false;
      v[q] = val(c);
      if (v[q] < 0) return false;
    }
    const std::uint32_t w = (std::uint32_t(v[0]) << 18) | (std::uint32_t(v[1]) << 12) | (std::uint32_t(v[2]) << 6) |
                            std::uint32_t(v[3]);
    out.push_back(static_cast<std::uint8_t>(w >> 16));
    if (pad < 2) out.push_back(static_cast<std::uint8_t>((w >> 8) & 0xFF));
    if (pad < 1) out.push_back(static_cast<std::uint8_t>(w & 0xFF));
  }
  return true;
}

inline bool ends_with(std::string_view s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.substr(s.size() - suffix.size()) == suffix;
}

}  // namespace detail

inline nlohmann::json scene_to_json(const Scene& s) {
  nlohmann::json objs = nlohmann::json::array();
  for (const auto& o : s.objects)
    objs.push_back({{"x1", o.box.x1}, {"y1", o.box.y1}, {"x2", o.box.x2}, {"y2", o.box.y2}, {"class", o.label}});
  return {{"id", s.id}, {"width", s.width}, {"height", s.height}, {"objects", objs},
          {"raster", detail::base64_encode(s.raster)}};
}

/// Parses one dataset line; `line_no` is 1-based and used in errors.
inline Scene scene_from_json_line(std::string_view line, std::size_t line_no) {
  const std::string where = "dataset line " + std::to_string(line_no);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(where + ": " + e.what());
  }
  Scene s;
  try {
    s.id = j.at("id").get<std::uint64_t>();
    s.width = j.at("width").get<int>();
    s.height = j.at("height").get<int>();
    for (const auto& o : j.at("objects"))
      s.objects.push_back({{o.at("x1").get<double>(), o.at("y1").get<double>(), o.at("x2").get<double>(),
                            o.at("y2").get<double>()},
                           o.at("class").get<int>()});
    const auto b64 = j.at("raster").get<std::string>();
    if (!detail::base64_decode(b64, s.raster))
      throw FormatError(where + ": scene " + std::to_string(s.id) + ": raster is not valid base64");
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(where + ": " + e.what());
  }
  if (s.width <= 0 || s.height <= 0 ||
      s.raster.size() != static_cast<std::size_t>(s.width) * static_cast<std::size_t>(s.height))
    throw FormatError(where + ": scene " + std::to_string(s.id) + ": raster holds " + std::to_string(s.raster.size()) +
                      " bytes, expected " + std::to_string(static_cast<long>(s.width) * s.height));
  for (const auto& o : s.objects)
    if (!o.box.valid() || o.label < 0)
      throw FormatError(where + ": scene " + std::to_string(s.id) + ": invalid object");
  return s;
}

/// Writes JSON lines; a `.gz` suffix selects gzip compression.
inline void save_dataset(const std::vector<Scene>& scenes, const std::string& path) {
  std::string text;
  for (const auto& s : scenes) {
    text += scene_to_json(s).dump();
    text += '\n';
  }
  if (detail::ends_with(path, ".gz")) {
    gzFile f = gzopen(path.c_str(), "wb9");
    if (!f) throw FormatError("dataset: cannot open " + path + " for writing");
    const int wrote = text.empty() ? 0 : gzwrite(f, text.data(), static_cast<unsigned>(text.size()));
    const int closed = gzclose(f);
    if ((!text.empty() && wrote <= 0) || closed != Z_OK) throw FormatError("dataset: write to " + path + " failed");
    return;
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("dataset: cannot open " + path + " for writing");
  out << text;
  if (!out) throw FormatError("dataset: write to " + path + " failed");
}

inline std::vector<Scene> load_dataset(const std::string& path) {
  std::string text;
  if (detail::ends_with(path, ".gz")) {
    gzFile f = gzopen(path.c_str(), "rb");
    if (!f) throw FormatError("dataset: cannot open " + path);
    char buf[1 << 16];
    int got;
    while ((got = gzread(f, buf, sizeof buf)) > 0) text.append(buf, static_cast<std::size_t>(got));
    const bool failed = got < 0;
    gzclose(f);
    if (failed) throw FormatError("dataset: " + path + " is not a valid gzip stream");
  } else {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("dataset: cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    text = ss.str();
  }
  std::vector<Scene> scenes;
  std::size_t line_no = 0, pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    ++line_no;
    const std::string_view line(text.data() + pos, end - pos);
    if (!line.empty()) scenes.push_back(scene_from_json_line(line, line_no));
    pos = end + 1;
  }
  return scenes;
}

}  // namespace freeanchor
