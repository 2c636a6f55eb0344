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

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "freeanchor/errors.hpp"

namespace freeanchor {

/// Axis-aligned box in corner form, continuous pixel coordinates.
struct BBox {
  double x1 = 0.0;
  double y1 = 0.0;
  double x2 = 0.0;
  double y2 = 0.0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return std::max(0.0, width()) * std::max(0.0, height()); }
  double cx() const { return 0.5 * (x1 + x2); }
  double cy() const { return 0.5 * (y1 + y2); }
  bool valid() const { return x1 <= x2 && y1 <= y2; }

  static BBox from_center(double cx, double cy, double w, double h) {
    return {cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
  }

  friend bool operator==(const BBox&, const BBox&) = default;
};

/// Ground-truth object: box plus class label in [0, k).
struct LabeledBox {
  BBox box;
  int label = 0;

  friend bool operator==(const LabeledBox&, const LabeledBox&) = default;
};

/// Regression target / prediction in center-log-size coding.
using Deltas = std::array<double, 4>;

inline double intersection_area(const BBox& a, const BBox& b) {
  const double w = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double h = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (w <= 0.0 || h <= 0.0) return 0.0;
  return w * h;
}

inline double iou(const BBox& a, const BBox& b) {
  const double inter = intersection_area(a, b);
  const double uni = a.area() + b.area() - inter;
  if (uni <= 0.0) return 0.0;
  return std::clamp(inter / uni, 0.0, 1.0);
}

/// Dense row-major |objects| x |anchors| matrix.
class IouMatrix {
 public:
  IouMatrix() = default;
  IouMatrix(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), data_(rows * cols, 0.0) {}

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }
  double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
  std::span<const double> row(std::size_t i) const { return {data_.data() + i * cols_, cols_}; }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline IouMatrix iou_matrix(std::span<const BBox> objects, std::span<const BBox> anchors) {
  if (anchors.empty()) throw ConfigError("iou_matrix: anchor list is empty");
  IouMatrix m(objects.size(), anchors.size());
  for (std::size_t i = 0; i < objects.size(); ++i)
    for (std::size_t j = 0; j < anchors.size(); ++j) m(i, j) = iou(objects[i], anchors[j]);
  return m;
}

// ---------------------------------------------------------------------------
// Anchors

struct AnchorLevel {
  int stride = 8;
  std::vector<double> sizes;  // anchor side length (sqrt of area), pixels
};

/// Anchor ratio r is height / width; a size-s anchor of ratio r spans
/// s / sqrt(r) by s * sqrt(r).
struct AnchorLayout {
  int image_width = 64;
  int image_height = 64;
  std::vector<AnchorLevel> levels;
  std::vector<double> ratios;

  std::size_t cells_w(const AnchorLevel& l) const { return static_cast<std::size_t>(image_width / l.stride); }
  std::size_t cells_h(const AnchorLevel& l) const { return static_cast<std::size_t>(image_height / l.stride); }

  std::size_t anchor_count() const {
    std::size_t n = 0;
    for (const auto& l : levels) n += cells_w(l) * cells_h(l) * l.sizes.size() * ratios.size();
    return n;
  }

  void validate() const {
    if (image_width <= 0 || image_height <= 0) throw ConfigError("anchor layout: image size must be positive");
    if (levels.empty()) throw ConfigError("anchor layout: no levels");
    if (ratios.empty()) throw ConfigError("anchor layout: no aspect ratios");
    for (double r : ratios)
      if (!(r > 0.0) || !std::isfinite(r)) throw ConfigError("anchor layout: aspect ratios must be positive");
    for (const auto& l : levels) {
      if (l.stride <= 0) throw ConfigError("anchor layout: stride must be positive");
      if (l.sizes.empty()) throw ConfigError("anchor layout: level has no scales");
      for (double s : l.sizes)
        if (!(s > 0.0) || !std::isfinite(s)) throw ConfigError("anchor layout: scales must be positive");
      if (cells_w(l) < 1 || cells_h(l) < 1)
        throw ConfigError("anchor layout: stride " + std::to_string(l.stride) + " leaves no cells");
    }
  }

  /// Two-level layout used by the toy detector on 64x64 scenes.
  static AnchorLayout toy_default(int width = 64, int height = 64) {
    AnchorLayout a;
    a.image_width = width;
    a.image_height = height;
    a.levels = {{8, {16.0, 24.0}}, {16, {32.0, 48.0}}};
    a.ratios = {0.5, 1.0, 2.0};
    return a;
  }
};

/// Level-major, row-major over cells, then scale, then ratio.
inline std::vector<BBox> generate_anchors(const AnchorLayout& layout) {
  layout.validate();
  std::vector<BBox> out;
  out.reserve(layout.anchor_count());
  for (const auto& level : layout.levels) {
    const double s = static_cast<double>(level.stride);
    for (std::size_t y = 0; y < layout.cells_h(level); ++y) {
      for (std::size_t x = 0; x < layout.cells_w(level); ++x) {
        const double cx = (static_cast<double>(x) + 0.5) * s;
        const double cy = (static_cast<double>(y) + 0.5) * s;
        for (double size : level.sizes) {
          for (double r : layout.ratios) {
            const double sr = std::sqrt(r);
            out.push_back(BBox::from_center(cx, cy, size / sr, size * sr));
          }
        }
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Box coding

inline Deltas encode_deltas(const BBox& anchor, const BBox& target) {
  const double wa = anchor.width(), ha = anchor.height();
  const double wt = target.width(), ht = target.height();
  if (!(wa > 0.0) || !(ha > 0.0)) throw NumericError("encode_deltas: anchor has zero area");
  if (!(wt > 0.0) || !(ht > 0.0)) throw NumericError("encode_deltas: target has zero area");
  return {(target.cx() - anchor.cx()) / wa, (target.cy() - anchor.cy()) / ha, std::log(wt / wa),
          std::log(ht / ha)};
}

inline BBox decode_deltas(const BBox& anchor, const Deltas& d) {
  const double wa = anchor.width(), ha = anchor.height();
  const double w = wa * std::exp(d[2]);
  const double h = ha * std::exp(d[3]);
  const double cx = anchor.cx() + d[0] * wa;
  const double cy = anchor.cy() + d[1] * ha;
  if (!std::isfinite(w) || !std::isfinite(h) || !std::isfinite(cx) || !std::isfinite(cy))
    throw NumericError("decode_deltas: deltas produce a non-finite box");
  return BBox::from_center(cx, cy, w, h);
}

/// Caps the log-scale deltas before decoding untrained predictions.
inline constexpr double kMaxLogScale = 4.0;

inline BBox decode_deltas_capped(const BBox& anchor, Deltas d) {
  d[2] = std::min(d[2], kMaxLogScale);
  d[3] = std::min(d[3], kMaxLogScale);
  return decode_deltas(anchor, d);
}

// ---------------------------------------------------------------------------
// SmoothL1

inline double smooth_l1_unit(double u) {
  const double a = std::abs(u);
  return a < 1.0 ? 0.5 * u * u : a - 0.5;
}

inline double smooth_l1_unit_grad(double u) {
  if (u >= 1.0) return 1.0;
  if (u <= -1.0) return -1.0;
  return u;
}

inline double smooth_l1(const Deltas& pred, const Deltas& target) {
  double s = 0.0;
  for (std::size_t d = 0; d < 4; ++d) s += smooth_l1_unit(pred[d] - target[d]);
  return s;
}

/// d smooth_l1 / d pred.
inline Deltas smooth_l1_grad(const Deltas& pred, const Deltas& target) {
  Deltas g{};
  for (std::size_t d = 0; d < 4; ++d) g[d] = smooth_l1_unit_grad(pred[d] - target[d]);
  return g;
}

// ---------------------------------------------------------------------------
// NMS

struct ScoredBox {
  BBox box;
  double score = 0.0;
};

/// Greedy suppression in descending score order; equal scores keep the lower
/// input index first. Returns kept indices in visiting order.
inline std::vector<std::size_t> nms(std::span<const ScoredBox> dets, double threshold) {
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });
  std::vector<std::size_t> kept;
  for (std::size_t idx : order) {
    bool suppressed = false;
    for (std::size_t k : kept) {
      if (iou(dets[idx].box, dets[k].box) > threshold) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(idx);
  }
  return kept;
}

}  // namespace freeanchor
