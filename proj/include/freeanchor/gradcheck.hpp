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

// Central finite-difference checks of the learned-matching loss composed
// with the detector head. Match probabilities are computed once at the base
// point and held fixed, mirroring the stop-gradient in the analytic path.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "freeanchor/loss.hpp"
#include "freeanchor/matching.hpp"
#include "freeanchor/model.hpp"
#include "freeanchor/trainer.hpp"

namespace freeanchor {

struct GradcheckSizes {
  int min_objects = 2, max_objects = 4;
  int min_anchors = 20, max_anchors = 100;
  std::vector<int> class_counts{1, 3};
  std::size_t feature_dim = 6;
  std::size_t hidden = 5;
  int bag_size = 12;
};

struct GradcheckInstance {
  FeatureMatrix features;
  std::vector<BBox> anchors;
  std::vector<LabeledBox> objects;
  ModelParams params;
  HyperParams hyper;
  std::vector<AnchorBag> bags;
  MatchProbabilities match;
};

/// Random objects, anchors (half of them jittered copies of objects so that
/// matching probabilities are non-trivial), features, and parameters.
inline GradcheckInstance make_gradcheck_instance(std::uint64_t seed, const GradcheckSizes& sz = {}) {
  std::mt19937_64 rng(mix_seed(seed, 0x6AD));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };
  auto uniform_int = [&](int lo, int hi) { return lo + static_cast<int>(unit(rng) * (hi - lo + 1)) % (hi - lo + 1); };

  GradcheckInstance inst;
  const int k = sz.class_counts[static_cast<std::size_t>(uniform_int(0, static_cast<int>(sz.class_counts.size()) - 1))];
  const int n_obj = uniform_int(sz.min_objects, sz.max_objects);
  const int n_anc = uniform_int(sz.min_anchors, sz.max_anchors);
  auto random_box = [&] {
    const double w = uniform(8, 30), h = uniform(8, 30);
    return BBox::from_center(uniform(w / 2, 64 - w / 2), uniform(h / 2, 64 - h / 2), w, h);
  };
  for (int i = 0; i < n_obj; ++i) inst.objects.push_back({random_box(), uniform_int(0, k - 1)});
  for (int j = 0; j < n_anc; ++j) {
    if (j % 2 == 0) {
      const BBox& o = inst.objects[static_cast<std::size_t>(j / 2) % inst.objects.size()].box;
      inst.anchors.push_back(BBox::from_center(o.cx() + uniform(-0.1, 0.1) * o.width(), o.cy() + uniform(-0.1, 0.1) * o.height(),
                                               o.width() * uniform(0.85, 1.15), o.height() * uniform(0.85, 1.15)));
    } else {
      inst.anchors.push_back(random_box());
    }
  }
  inst.features = FeatureMatrix(n_anc, static_cast<Eigen::Index>(sz.feature_dim));
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (Eigen::Index r = 0; r < inst.features.rows(); ++r)
    for (Eigen::Index c = 0; c < inst.features.cols(); ++c) inst.features(r, c) = gauss(rng);

  inst.params = init_params(sz.feature_dim, static_cast<std::size_t>(k), 0.3, mix_seed(seed, 1), sz.hidden);
  for (Eigen::Index r = 0; r < inst.params.w2.rows(); ++r)
    for (Eigen::Index c = 0; c < inst.params.w2.cols(); ++c)
      inst.params.w2(r, c) = gauss(rng) * (r < k ? 1.0 : 0.05);
  for (Eigen::Index r = 0; r < inst.params.b1.size(); ++r) inst.params.b1(r) = 0.3 * gauss(rng);

  inst.hyper.bag_size = sz.bag_size;
  std::vector<BBox> boxes;
  for (const auto& o : inst.objects) boxes.push_back(o.box);
  inst.bags = build_anchor_bags(boxes, inst.anchors, inst.hyper.bag_size);
  const auto pred = forward(inst.params, inst.features);
  inst.match = compute_match_probabilities(inst.bags, boxes, predicted_boxes(pred, inst.anchors), inst.hyper.bg_iou_threshold);
  return inst;
}

inline double instance_loss(const GradcheckInstance& inst, const ModelParams& params) {
  return free_anchor_loss(forward(params, inst.features), inst.anchors, inst.objects, inst.bags, inst.match, inst.hyper).total;
}

inline double instance_loss(const GradcheckInstance& inst, const Predictions& pred) {
  return free_anchor_loss(pred, inst.anchors, inst.objects, inst.bags, inst.match, inst.hyper).total;
}

/// |a - f| / max(|a|, |f|, floor).
inline double gradient_relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

struct BlockError {
  std::string name;
  std::size_t entries = 0;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
};

/// Denominator floor for the relative error: central differences on a loss of
/// order one carry roughly 1e-16 / h rounding noise plus h^2 truncation, so
/// gradients below ~1e-9 / h cannot be resolved to relative precision.
inline double fd_noise_floor(double step) { return 1e-9 / step; }

struct GradcheckOptions {
  double step = 1e-6;
  double floor = 0.0;  // 0 selects fd_noise_floor(step)
  /// Test hook: added to the first analytic entry of every block.
  double corrupt = 0.0;
};

/// Full-pipeline check: w1, b1, w2, b2 through forward, plus the loss-only
/// gradient with respect to logits and deltas.
inline std::vector<BlockError> gradcheck_instance(const GradcheckInstance& inst, const GradcheckOptions& opt = {}) {
  ForwardCache cache;
  const Predictions pred = forward(inst.params, inst.features, &cache);
  const LossBreakdown lb = free_anchor_loss(pred, inst.anchors, inst.objects, inst.bags, inst.match, inst.hyper);
  const ModelParams analytic = backward(inst.params, inst.features, cache, lb.grad);

  const double floor = opt.floor > 0.0 ? opt.floor : fd_noise_floor(opt.step);
  std::vector<BlockError> out;
  auto record = [&](BlockError& be, std::size_t i, double a, double f) {
    if (i == 0) a += opt.corrupt;
    be.max_rel_error = std::max(be.max_rel_error, gradient_relative_error(a, f, floor));
    be.max_abs_error = std::max(be.max_abs_error, std::abs(a - f));
    ++be.entries;
  };

  ModelParams probe = inst.params;
  auto probe_blocks = probe.blocks();
  const auto analytic_blocks = analytic.blocks();
  for (std::size_t b = 0; b < probe_blocks.size(); ++b) {
    BlockError be{ModelParams::kBlockNames[b]};
    for (std::size_t i = 0; i < probe_blocks[b].size(); ++i) {
      const double orig = probe_blocks[b][i];
      probe_blocks[b][i] = orig + opt.step;
      const double up = instance_loss(inst, probe);
      probe_blocks[b][i] = orig - opt.step;
      const double down = instance_loss(inst, probe);
      probe_blocks[b][i] = orig;
      record(be, i, analytic_blocks[b][i], (up - down) / (2.0 * opt.step));
    }
    out.push_back(be);
  }

  Predictions p = pred;
  BlockError logits{"logits"};
  for (std::size_t i = 0; i < p.logits.size(); ++i) {
    const double orig = p.logits[i];
    p.logits[i] = orig + opt.step;
    const double up = instance_loss(inst, p);
    p.logits[i] = orig - opt.step;
    const double down = instance_loss(inst, p);
    p.logits[i] = orig;
    record(logits, i, lb.grad.logits[i], (up - down) / (2.0 * opt.step));
  }
  out.push_back(logits);
  BlockError deltas{"deltas"};
  for (std::size_t j = 0; j < p.deltas.size(); ++j)
    for (std::size_t d = 0; d < 4; ++d) {
      const double orig = p.deltas[j][d];
      p.deltas[j][d] = orig + opt.step;
      const double up = instance_loss(inst, p);
      p.deltas[j][d] = orig - opt.step;
      const double down = instance_loss(inst, p);
      p.deltas[j][d] = orig;
      record(deltas, j * 4 + d, lb.grad.deltas[j][d], (up - down) / (2.0 * opt.step));
    }
  out.push_back(deltas);
  return out;
}

struct GradcheckSummary {
  std::vector<BlockError> blocks;  // worst case per block over all instances
  std::size_t instances = 0;
  double max_rel_error() const {
    double m = 0.0;
    for (const auto& b : blocks) m = std::max(m, b.max_rel_error);
    return m;
  }
};

/// Instances seeded mix_seed(seed, 0..count-1).
inline GradcheckSummary gradcheck_suite(std::uint64_t seed, std::size_t count, const GradcheckOptions& opt = {},
                                        const GradcheckSizes& sizes = {}) {
  GradcheckSummary s;
  for (std::size_t i = 0; i < count; ++i) {
    const auto errs = gradcheck_instance(make_gradcheck_instance(mix_seed(seed, i), sizes), opt);
    if (s.blocks.empty()) {
      s.blocks = errs;
      for (auto& b : s.blocks) b.entries = 0;
    }
    for (std::size_t b = 0; b < errs.size(); ++b) {
      s.blocks[b].entries += errs[b].entries;
      s.blocks[b].max_rel_error = std::max(s.blocks[b].max_rel_error, errs[b].max_rel_error);
      s.blocks[b].max_abs_error = std::max(s.blocks[b].max_abs_error, errs[b].max_abs_error);
    }
    ++s.instances;
  }
  return s;
}

}  // namespace freeanchor
