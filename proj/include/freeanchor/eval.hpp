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

// Detection evaluation: COCO-style interpolated AP, NMS recall, and
// shape / crowdedness breakdowns.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "freeanchor/geometry.hpp"
#include "freeanchor/loss.hpp"
#include "freeanchor/synthdata.hpp"
#include "json.hpp"

namespace freeanchor {

struct Detection {
  std::uint64_t scene_id = 0;
  BBox box;
  int label = 0;
  double score = 0.0;
};

struct GroundTruth {
  std::uint64_t scene_id = 0;
  LabeledBox object;
  bool ignore = false;  // matched detections are neither TP nor FP
};

inline std::vector<GroundTruth> ground_truths(std::span<const Scene> scenes) {
  std::vector<GroundTruth> out;
  for (const auto& s : scenes)
    for (const auto& o : s.objects) out.push_back({s.id, o, false});
  return out;
}

// ---------------------------------------------------------------------------
// Average precision

inline constexpr int kRecallPoints = 101;

struct PrCurve {
  int label = 0;
  double iou_threshold = 0.5;
  std::array<double, kRecallPoints> precision{};  // at recall 0, 0.01, ..., 1
  double ap = 0.0;
};

/// AP of one class, or nullopt when the class has no non-ignored ground truth.
/// Detections are visited by descending score (ties by input order); each
/// takes the unmatched ground truth of highest IoU >= threshold, falling back
/// to an ignored ground truth, which may absorb any number of detections.
inline std::optional<PrCurve> class_average_precision(std::span<const Detection> dets, std::span<const GroundTruth> gts,
                                                      int label, double iou_threshold) {
  std::unordered_map<std::uint64_t, std::vector<std::size_t>> by_scene;
  std::size_t positives = 0;
  for (std::size_t g = 0; g < gts.size(); ++g) {
    if (gts[g].object.label != label) continue;
    by_scene[gts[g].scene_id].push_back(g);
    if (!gts[g].ignore) ++positives;
  }
  if (positives == 0) return std::nullopt;

  std::vector<std::size_t> order;
  for (std::size_t d = 0; d < dets.size(); ++d)
    if (dets[d].label == label) order.push_back(d);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });

  std::vector<bool> taken(gts.size(), false);
  std::vector<double> recall, precision;
  std::size_t tp = 0, fp = 0;
  for (std::size_t d : order) {
    const auto it = by_scene.find(dets[d].scene_id);
    long best = -1;
    double best_iou = iou_threshold;
    bool ignored = false;
    if (it != by_scene.end()) {
      for (std::size_t g : it->second) {
        if (gts[g].ignore || taken[g]) continue;
        const double v = iou(dets[d].box, gts[g].object.box);
        if (v >= best_iou) {
          best_iou = v;
          best = static_cast<long>(g);
        }
      }
      if (best < 0) {
        for (std::size_t g : it->second)
          if (gts[g].ignore && iou(dets[d].box, gts[g].object.box) >= iou_threshold) ignored = true;
      }
    }
    if (best >= 0) {
      taken[static_cast<std::size_t>(best)] = true;
      ++tp;
    } else if (ignored) {
      continue;
    } else {
      ++fp;
    }
    recall.push_back(static_cast<double>(tp) / static_cast<double>(positives));
    precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
  }
  for (std::size_t i = precision.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);

  PrCurve curve;
  curve.label = label;
  curve.iou_threshold = iou_threshold;
  double sum = 0.0;
  for (int r = 0; r < kRecallPoints; ++r) {
    const double level = static_cast<double>(r) / (kRecallPoints - 1);
    const auto pos = std::lower_bound(recall.begin(), recall.end(), level - 1e-12);
    const double p = pos == recall.end() ? 0.0 : precision[static_cast<std::size_t>(pos - recall.begin())];
    curve.precision[static_cast<std::size_t>(r)] = p;
    sum += p;
  }
  curve.ap = sum / kRecallPoints;
  return curve;
}

inline std::vector<int> labels_present(std::span<const GroundTruth> gts) {
  std::vector<int> labels;
  for (const auto& g : gts)
    if (!g.ignore) labels.push_back(g.object.label);
  std::sort(labels.begin(), labels.end());
  labels.erase(std::unique(labels.begin(), labels.end()), labels.end());
  return labels;
}

/// Mean over classes with ground truth of the per-class interpolated AP.
inline double average_precision(std::span<const Detection> dets, std::span<const GroundTruth> gts, double iou_threshold) {
  const auto labels = labels_present(gts);
  if (labels.empty()) return 0.0;
  double sum = 0.0;
  for (int c : labels) sum += class_average_precision(dets, gts, c, iou_threshold)->ap;
  return sum / static_cast<double>(labels.size());
}

inline std::vector<double> coco_iou_thresholds() {
  std::vector<double> t;
  for (int i = 0; i < 10; ++i) t.push_back(0.5 + 0.05 * i);
  return t;
}

/// AP averaged over IoU 0.50:0.05:0.95.
inline double coco_average_precision(std::span<const Detection> dets, std::span<const GroundTruth> gts) {
  double s = 0.0;
  const auto ts = coco_iou_thresholds();
  for (double t : ts) s += average_precision(dets, gts, t);
  return s / static_cast<double>(ts.size());
}

// ---------------------------------------------------------------------------
// Post-processing

struct PostprocessOptions {
  double score_floor = 0.01;
  std::size_t pre_nms_top_k = 1000;
  double nms_threshold = 0.5;
  std::size_t max_detections = 100;
};

/// Score-floored, per-class candidates before NMS, boxes clipped to the image.
inline std::vector<Detection> raw_detections(const Predictions& pred, std::span<const BBox> anchors, std::uint64_t scene_id,
                                             int width, int height, const PostprocessOptions& opt = {}) {
  std::vector<Detection> out;
  for (std::size_t j = 0; j < pred.size(); ++j) {
    bool decoded = false;
    BBox box;
    for (std::size_t c = 0; c < pred.num_classes; ++c) {
      const double s = pred.prob(j, c);
      if (s < opt.score_floor) continue;
      if (!decoded) {
        box = decode_deltas_capped(anchors[j], pred.deltas[j]);
        box = {std::clamp(box.x1, 0.0, double(width)), std::clamp(box.y1, 0.0, double(height)),
               std::clamp(box.x2, 0.0, double(width)), std::clamp(box.y2, 0.0, double(height))};
        decoded = true;
      }
      out.push_back({scene_id, box, static_cast<int>(c), s});
    }
  }
  std::stable_sort(out.begin(), out.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
  if (out.size() > opt.pre_nms_top_k) out.resize(opt.pre_nms_top_k);
  return out;
}

/// Per-class NMS over one scene's detections; output sorted by score.
inline std::vector<Detection> nms_per_class(std::span<const Detection> dets, double threshold) {
  std::map<int, std::vector<std::size_t>> by_label;
  for (std::size_t d = 0; d < dets.size(); ++d) by_label[dets[d].label].push_back(d);
  std::vector<std::size_t> keep;
  std::vector<ScoredBox> boxes;
  for (const auto& [label, idx] : by_label) {
    boxes.clear();
    for (std::size_t d : idx) boxes.push_back({dets[d].box, dets[d].score});
    for (std::size_t k : nms(boxes, threshold)) keep.push_back(idx[k]);
  }
  std::sort(keep.begin(), keep.end());
  std::vector<Detection> out;
  out.reserve(keep.size());
  for (std::size_t k : keep) out.push_back(dets[k]);
  std::stable_sort(out.begin(), out.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
  return out;
}

inline std::vector<Detection> final_detections(std::span<const Detection> raw, const PostprocessOptions& opt = {}) {
  auto out = nms_per_class(raw, opt.nms_threshold);
  if (out.size() > opt.max_detections) out.resize(opt.max_detections);
  return out;
}

// ---------------------------------------------------------------------------
// NMS recall

inline std::vector<double> nr_thresholds() {
  std::vector<double> t;
  for (int i = 0; i < 9; ++i) t.push_back(0.5 + 0.05 * i);
  return t;
}

struct NmsRecall {
  std::vector<double> taus;
  std::vector<std::optional<double>> nr_tau;  // nullopt where recall before NMS is 0
  std::vector<double> recall_before;
  std::vector<double> recall_after;
  std::optional<double> nr;  // mean over defined nr_tau
};

namespace detail {

inline double class_agnostic_recall(const std::unordered_map<std::uint64_t, std::vector<const Detection*>>& dets,
                                    std::span<const GroundTruth> gts, double tau) {
  std::size_t hit = 0, total = 0;
  for (const auto& g : gts) {
    if (g.ignore) continue;
    ++total;
    const auto it = dets.find(g.scene_id);
    if (it == dets.end()) continue;
    for (const Detection* d : it->second)
      if (iou(d->box, g.object.box) >= tau) {
        ++hit;
        break;
      }
  }
  return total == 0 ? 0.0 : static_cast<double>(hit) / static_cast<double>(total);
}

}  // namespace detail

/// Ratio of class-agnostic recall after per-class NMS to recall before it. A
/// ground truth counts as recalled at tau when any detection in its scene
/// overlaps it with IoU >= tau.
inline NmsRecall nms_recall(std::span<const Detection> raw, std::span<const GroundTruth> gts, std::span<const double> taus,
                            double nms_threshold) {
  std::map<std::uint64_t, std::vector<Detection>> per_scene;
  for (const auto& d : raw) per_scene[d.scene_id].push_back(d);
  std::vector<Detection> kept;
  for (const auto& [id, dets] : per_scene) {
    auto k = nms_per_class(dets, nms_threshold);
    kept.insert(kept.end(), k.begin(), k.end());
  }
  std::unordered_map<std::uint64_t, std::vector<const Detection*>> before, after;
  for (const auto& d : raw) before[d.scene_id].push_back(&d);
  for (const auto& d : kept) after[d.scene_id].push_back(&d);

  NmsRecall out;
  out.taus.assign(taus.begin(), taus.end());
  double sum = 0.0;
  int defined = 0;
  for (double tau : taus) {
    const double rb = detail::class_agnostic_recall(before, gts, tau);
    const double ra = detail::class_agnostic_recall(after, gts, tau);
    out.recall_before.push_back(rb);
    out.recall_after.push_back(ra);
    if (rb > 0.0) {
      out.nr_tau.push_back(ra / rb);
      sum += ra / rb;
      ++defined;
    } else {
      out.nr_tau.push_back(std::nullopt);
    }
  }
  if (defined > 0) out.nr = sum / defined;
  return out;
}

// ---------------------------------------------------------------------------
// Report

struct CrowdBucket {
  std::string name;
  std::size_t lo, hi;  // inclusive object-count range
};

inline std::vector<CrowdBucket> default_crowd_buckets() {
  return {{"1", 1, 1}, {"2-3", 2, 3}, {"4-6", 4, 6}, {"7+", 7, static_cast<std::size_t>(-1)}};
}

struct ApTriple {
  double ap = 0.0, ap50 = 0.0, ap75 = 0.0;
};

struct EvalReport {
  ApTriple overall;
  std::map<int, double> per_class;            // AP over 0.50:0.95
  std::map<std::string, ApTriple> per_shape;  // "square" / "slender"; absent when empty
  std::map<std::string, ApTriple> per_crowd;  // bucket name; absent when empty
  NmsRecall nms;
  std::size_t num_scenes = 0, num_objects = 0, num_detections = 0;
  std::vector<PrCurve> pr_curves;
};

inline ApTriple ap_triple(std::span<const Detection> dets, std::span<const GroundTruth> gts) {
  return {coco_average_precision(dets, gts), average_precision(dets, gts, 0.5), average_precision(dets, gts, 0.75)};
}

using ShapeClassifier = std::function<bool(const BBox&)>;  // true = slender

/// Shape and crowdedness breakdown. Shape subsets mark out-of-subset ground
/// truth as ignored; crowd buckets restrict both sides to scenes whose object
/// count falls in the bucket.
inline void breakdown_report(std::span<const Detection> dets, std::span<const Scene> scenes, const ShapeClassifier& slender,
                             std::span<const CrowdBucket> buckets, EvalReport& report) {
  const auto gts = ground_truths(scenes);
  for (const bool want_slender : {false, true}) {
    std::vector<GroundTruth> subset = gts;
    bool any = false;
    for (auto& g : subset) {
      g.ignore = slender(g.object.box) != want_slender;
      any = any || !g.ignore;
    }
    if (any) report.per_shape[want_slender ? "slender" : "square"] = ap_triple(dets, subset);
  }
  for (const auto& b : buckets) {
    std::vector<std::uint64_t> ids;
    for (const auto& s : scenes)
      if (s.crowdedness() >= b.lo && s.crowdedness() <= b.hi) ids.push_back(s.id);
    if (ids.empty()) continue;
    std::sort(ids.begin(), ids.end());
    auto in = [&](std::uint64_t id) { return std::binary_search(ids.begin(), ids.end(), id); };
    std::vector<Detection> d;
    for (const auto& x : dets)
      if (in(x.scene_id)) d.push_back(x);
    std::vector<GroundTruth> g;
    for (const auto& x : gts)
      if (in(x.scene_id)) g.push_back(x);
    report.per_crowd[b.name] = ap_triple(d, g);
  }
}

/// Full report from pre-NMS and final detections.
inline EvalReport evaluate(std::span<const Detection> raw, std::span<const Detection> final_dets, std::span<const Scene> scenes,
                           double nms_threshold = 0.5, bool keep_curves = false) {
  EvalReport r;
  const auto gts = ground_truths(scenes);
  r.num_scenes = scenes.size();
  r.num_objects = gts.size();
  r.num_detections = final_dets.size();
  r.overall = ap_triple(final_dets, gts);
  for (int c : labels_present(gts)) {
    double s = 0.0;
    for (double t : coco_iou_thresholds()) {
      auto curve = class_average_precision(final_dets, gts, c, t);
      s += curve->ap;
      if (keep_curves) r.pr_curves.push_back(*curve);
    }
    r.per_class[c] = s / static_cast<double>(coco_iou_thresholds().size());
  }
  const auto buckets = default_crowd_buckets();
  breakdown_report(final_dets, scenes, [](const BBox& b) { return is_slender(b); }, buckets, r);
  const auto taus = nr_thresholds();
  r.nms = nms_recall(raw, gts, taus, nms_threshold);
  return r;
}

inline std::string nr_key(double tau) {
  return "NR_" + std::to_string(static_cast<int>(std::lround(tau * 100)));
}

/// Metrics as percentages; absent subsets are omitted, undefined NR_tau are
/// null and listed under "nr_undefined".
inline nlohmann::json report_to_json(const EvalReport& r) {
  auto pct = [](double v) { return 100.0 * v; };
  auto triple = [&](const ApTriple& t) { return nlohmann::json{{"AP", pct(t.ap)}, {"AP50", pct(t.ap50)}, {"AP75", pct(t.ap75)}}; };
  nlohmann::json j;
  j["notes"] = {{"ap", "101-point interpolated, per class then averaged, IoU 0.50:0.05:0.95"},
                {"nr_recall", "class-agnostic; ground truth recalled if any detection has IoU >= tau"}};
  j["AP"] = pct(r.overall.ap);
  j["AP50"] = pct(r.overall.ap50);
  j["AP75"] = pct(r.overall.ap75);
  j["NR"] = r.nms.nr ? nlohmann::json(pct(*r.nms.nr)) : nlohmann::json(nullptr);
  nlohmann::json undefined = nlohmann::json::array();
  for (std::size_t t = 0; t < r.nms.taus.size(); ++t) {
    const auto& v = r.nms.nr_tau[t];
    j[nr_key(r.nms.taus[t])] = v ? nlohmann::json(pct(*v)) : nlohmann::json(nullptr);
    if (!v) undefined.push_back(r.nms.taus[t]);
  }
  j["nr_undefined"] = undefined;
  nlohmann::json pc = nlohmann::json::object();
  for (const auto& [c, v] : r.per_class) pc[std::to_string(c)] = pct(v);
  j["per_class"] = pc;
  nlohmann::json ps = nlohmann::json::object();
  for (const auto& [k, v] : r.per_shape) ps[k] = triple(v);
  j["per_shape"] = ps;
  nlohmann::json pcr = nlohmann::json::object();
  for (const auto& [k, v] : r.per_crowd) pcr[k] = triple(v);
  j["per_crowd"] = pcr;
  j["num_scenes"] = r.num_scenes;
  j["num_objects"] = r.num_objects;
  j["num_detections"] = r.num_detections;
  return j;
}

/// class,iou_threshold,recall,precision rows of the interpolated curves.
inline std::string pr_curves_csv(const EvalReport& r) {
  std::ostringstream out;
  out << "class,iou_threshold,recall,precision\n";
  for (const auto& c : r.pr_curves)
    for (int i = 0; i < kRecallPoints; ++i)
      out << c.label << ',' << c.iou_threshold << ',' << static_cast<double>(i) / (kRecallPoints - 1) << ','
          << c.precision[static_cast<std::size_t>(i)] << '\n';
  return out.str();
}

}  // namespace freeanchor
