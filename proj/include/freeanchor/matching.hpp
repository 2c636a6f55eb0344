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
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <vector>

#include "freeanchor/errors.hpp"
#include "freeanchor/geometry.hpp"

namespace freeanchor {

/// Candidate anchors for one object, sorted by descending anchor/object IoU.
struct AnchorBag {
  std::size_t object = 0;
  std::vector<std::size_t> anchors;
  std::vector<double> ious;

  std::size_t size() const { return anchors.size(); }
};

/// Hand-crafted assignment C_ij; each anchor matches at most one object.
class MatchMatrix {
 public:
  MatchMatrix() = default;
  MatchMatrix(std::size_t objects, std::size_t anchors)
      : objects_(objects), anchors_(anchors), data_(objects * anchors, 0) {}

  std::size_t objects() const { return objects_; }
  std::size_t anchors() const { return anchors_; }
  bool operator()(std::size_t i, std::size_t j) const { return data_[i * anchors_ + j] != 0; }
  void set(std::size_t i, std::size_t j, bool v) { data_[i * anchors_ + j] = v ? 1 : 0; }

  /// Object matched by anchor j, or -1 for background.
  long matched_object(std::size_t j) const {
    for (std::size_t i = 0; i < objects_; ++i)
      if ((*this)(i, j)) return static_cast<long>(i);
    return -1;
  }

  std::size_t column_sum(std::size_t j) const {
    std::size_t s = 0;
    for (std::size_t i = 0; i < objects_; ++i) s += (*this)(i, j) ? 1 : 0;
    return s;
  }

 private:
  std::size_t objects_ = 0;
  std::size_t anchors_ = 0;
  std::vector<std::uint8_t> data_;
};

/// P{a_j -> b_i} per bag member (aligned with AnchorBag::anchors) and
/// P{a_j in A_-} per anchor.
struct MatchProbabilities {
  std::vector<std::vector<double>> positive;
  std::vector<double> background;
};

inline std::vector<AnchorBag> build_anchor_bags(std::span<const BBox> objects, std::span<const BBox> anchors,
                                                int n) {
  if (n <= 0) throw ConfigError("build_anchor_bags: bag size must be positive");
  if (anchors.empty()) throw ConfigError("build_anchor_bags: anchor list is empty");
  const std::size_t keep = std::min(static_cast<std::size_t>(n), anchors.size());
  std::vector<AnchorBag> bags;
  bags.reserve(objects.size());
  std::vector<double> ious(anchors.size());
  std::vector<std::size_t> order(anchors.size());
  for (std::size_t i = 0; i < objects.size(); ++i) {
    for (std::size_t j = 0; j < anchors.size(); ++j) ious[j] = iou(objects[i], anchors[j]);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep), order.end(),
                      [&](std::size_t a, std::size_t b) { return ious[a] > ious[b] || (ious[a] == ious[b] && a < b); });
    AnchorBag bag;
    bag.object = i;
    bag.anchors.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep));
    bag.ious.reserve(keep);
    for (std::size_t j : bag.anchors) bag.ious.push_back(ious[j]);
    bags.push_back(std::move(bag));
  }
  return bags;
}

/// C_ij = 1 iff IoU > threshold and object i has the largest IoU with anchor j
/// (ties go to the lower object index).
inline MatchMatrix build_iou_assignment(std::span<const BBox> objects, std::span<const BBox> anchors,
                                        double iou_threshold) {
  if (!(iou_threshold > 0.0 && iou_threshold < 1.0))
    throw ConfigError("build_iou_assignment: threshold must lie in (0, 1)");
  MatchMatrix m(objects.size(), anchors.size());
  for (std::size_t j = 0; j < anchors.size(); ++j) {
    long best = -1;
    double best_iou = 0.0;
    for (std::size_t i = 0; i < objects.size(); ++i) {
      const double v = iou(objects[i], anchors[j]);
      if (best < 0 || v > best_iou) {
        best = static_cast<long>(i);
        best_iou = v;
      }
    }
    if (best >= 0 && best_iou > iou_threshold) m.set(static_cast<std::size_t>(best), j, true);
  }
  return m;
}

inline double saturated_linear(double x, double t1, double t2) {
  if (!(t1 < t2)) throw ConfigError("saturated_linear: requires t1 < t2");
  if (x <= t1) return 0.0;
  if (x >= t2) return 1.0;
  return (x - t1) / (t2 - t1);
}

/// Saturated-linear ramp of IoU(predicted box, object) between t and the bag
/// maximum. If the bag maximum does not exceed t every value is 0.
inline std::vector<double> match_probability(std::span<const BBox> pred_boxes, const BBox& object, double t) {
  std::vector<double> ious(pred_boxes.size());
  double max_iou = 0.0;
  for (std::size_t k = 0; k < pred_boxes.size(); ++k) {
    ious[k] = iou(pred_boxes[k], object);
    max_iou = std::max(max_iou, ious[k]);
  }
  std::vector<double> out(pred_boxes.size(), 0.0);
  if (max_iou <= t) return out;
  for (std::size_t k = 0; k < pred_boxes.size(); ++k) out[k] = saturated_linear(ious[k], t, max_iou);
  return out;
}

/// 1 - max_i P{a_j -> b_i}; anchors outside every bag get 1.
inline std::vector<double> background_probabilities(std::span<const AnchorBag> bags,
                                                    std::span<const std::vector<double>> positive,
                                                    std::size_t num_anchors) {
  std::vector<double> best(num_anchors, 0.0);
  for (std::size_t b = 0; b < bags.size(); ++b) {
    const auto& bag = bags[b];
    for (std::size_t k = 0; k < bag.anchors.size(); ++k)
      best[bag.anchors[k]] = std::max(best[bag.anchors[k]], positive[b][k]);
  }
  for (double& v : best) v = 1.0 - v;
  return best;
}

/// Full match-probability pass for one image given every anchor's decoded
/// predicted box.
inline MatchProbabilities compute_match_probabilities(std::span<const AnchorBag> bags,
                                                      std::span<const BBox> objects,
                                                      std::span<const BBox> predicted_boxes, double t) {
  MatchProbabilities mp;
  mp.positive.reserve(bags.size());
  std::vector<BBox> members;
  for (const auto& bag : bags) {
    members.clear();
    for (std::size_t j : bag.anchors) members.push_back(predicted_boxes[j]);
    mp.positive.push_back(match_probability(members, objects[bag.object], t));
  }
  mp.background = background_probabilities(bags, mp.positive, predicted_boxes.size());
  return mp;
}

}  // namespace freeanchor
