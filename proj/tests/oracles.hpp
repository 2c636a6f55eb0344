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

// Slow reference implementations shared by the unit suites and the
// acceptance runner.

#pragma once

#include <algorithm>
#include <utility>
#include <vector>

#include "freeanchor/geometry.hpp"

namespace oracle {

/// Greedy NMS by explicit ranking: score descending, lower index first.
inline std::vector<std::size_t> nms_brute_force(const std::vector<freeanchor::ScoredBox>& d, double thr) {
  const std::size_t n = d.size();
  std::vector<std::size_t> rank(n, 0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (d[j].score > d[i].score || (d[j].score == d[i].score && j < i)) ++rank[i];
  std::vector<std::size_t> by_rank(n);
  for (std::size_t i = 0; i < n; ++i) by_rank[rank[i]] = i;
  std::vector<bool> kept(n, false);
  std::vector<std::size_t> out;
  for (std::size_t r = 0; r < n; ++r) {
    const std::size_t i = by_rank[r];
    bool ok = true;
    for (std::size_t j = 0; j < n; ++j)
      if (kept[j] && freeanchor::iou(d[i].box, d[j].box) > thr) ok = false;
    if (ok) {
      kept[i] = true;
      out.push_back(i);
    }
  }
  return out;
}

/// Top-n anchors by IoU from a full sort; ties go to the lower index.
inline std::vector<std::size_t> bag_by_full_sort(const freeanchor::BBox& obj, const std::vector<freeanchor::BBox>& anchors,
                                                 std::size_t n) {
  std::vector<std::pair<double, std::size_t>> all;
  for (std::size_t j = 0; j < anchors.size(); ++j) all.push_back({-freeanchor::iou(obj, anchors[j]), j});
  std::sort(all.begin(), all.end());
  std::vector<std::size_t> out;
  for (std::size_t r = 0; r < std::min(n, all.size()); ++r) out.push_back(all[r].second);
  return out;
}

/// 101-point interpolated AP from an explicit list of (recall, precision)
/// operating points.
inline double ap_from_table(const std::vector<std::pair<double, double>>& pr) {
  double s = 0.0;
  for (int r = 0; r <= 100; ++r) {
    double best = 0.0;
    for (const auto& [rec, prec] : pr)
      if (rec >= r / 100.0 - 1e-12) best = std::max(best, prec);
    s += best;
  }
  return s / 101.0;
}

}  // namespace oracle
