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

// Training loop: forward, bag construction, loss, backward, SGD update.

#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "freeanchor/errors.hpp"
#include "freeanchor/eval.hpp"
#include "freeanchor/geometry.hpp"
#include "freeanchor/loss.hpp"
#include "freeanchor/matching.hpp"
#include "freeanchor/model.hpp"
#include "freeanchor/synthdata.hpp"
#include "json.hpp"

namespace freeanchor {

enum class LossMode { kFreeAnchor, kBaselineIou };

inline std::string to_string(LossMode m) { return m == LossMode::kFreeAnchor ? "free_anchor" : "baseline_iou"; }

inline LossMode loss_mode_from_string(const std::string& s) {
  if (s == "free_anchor") return LossMode::kFreeAnchor;
  if (s == "baseline_iou") return LossMode::kBaselineIou;
  throw ConfigError("unknown loss mode '" + s + "' (expected free_anchor or baseline_iou)");
}

struct TrainConfig {
  HyperParams hyper;
  LossMode mode = LossMode::kFreeAnchor;
  long iterations = 2000;
  std::size_t batch_size = 8;
  std::vector<long> milestones{1200, 1600};
  double lr_decay = 0.1;
  double momentum = 0.0;
  std::size_t hidden = 32;
  double prior = 0.02;  // rho
  std::uint64_t seed = 0;
  int num_classes = 3;
  AnchorLayout layout = AnchorLayout::toy_default();
  unsigned threads = 1;

  double learning_rate_at(long iteration) const {
    double lr = hyper.learning_rate;
    for (long m : milestones)
      if (iteration >= m) lr *= lr_decay;
    return lr;
  }
};

inline nlohmann::json hyper_to_json(const HyperParams& h) {
  return {{"bag_size", h.bag_size}, {"bg_iou_threshold", h.bg_iou_threshold}, {"alpha", h.alpha},
          {"gamma", h.gamma},       {"beta", h.beta},                         {"assign_iou_threshold", h.assign_iou_threshold},
          {"learning_rate", h.learning_rate}};
}

inline HyperParams hyper_from_json(const nlohmann::json& j) {
  HyperParams h;
  if (j.contains("bag_size")) h.bag_size = j.at("bag_size").get<int>();
  if (j.contains("bg_iou_threshold")) h.bg_iou_threshold = j.at("bg_iou_threshold").get<double>();
  if (j.contains("alpha")) h.alpha = j.at("alpha").get<double>();
  if (j.contains("gamma")) h.gamma = j.at("gamma").get<double>();
  if (j.contains("beta")) h.beta = j.at("beta").get<double>();
  if (j.contains("assign_iou_threshold")) h.assign_iou_threshold = j.at("assign_iou_threshold").get<double>();
  if (j.contains("learning_rate")) h.learning_rate = j.at("learning_rate").get<double>();
  h.validate();
  return h;
}

inline nlohmann::json train_config_to_json(const TrainConfig& c) {
  return {{"hyper", hyper_to_json(c.hyper)}, {"loss", to_string(c.mode)},   {"iterations", c.iterations},
          {"batch_size", c.batch_size},      {"milestones", c.milestones},  {"lr_decay", c.lr_decay},
          {"momentum", c.momentum},          {"hidden", c.hidden},          {"prior", c.prior},
          {"seed", c.seed},                  {"num_classes", c.num_classes}, {"layout", layout_to_json(c.layout)}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  try {
    if (j.contains("hyper")) c.hyper = hyper_from_json(j.at("hyper"));
    if (j.contains("loss")) c.mode = loss_mode_from_string(j.at("loss").get<std::string>());
    if (j.contains("iterations")) c.iterations = j.at("iterations").get<long>();
    if (j.contains("batch_size")) c.batch_size = j.at("batch_size").get<std::size_t>();
    if (j.contains("milestones")) c.milestones = j.at("milestones").get<std::vector<long>>();
    if (j.contains("lr_decay")) c.lr_decay = j.at("lr_decay").get<double>();
    if (j.contains("momentum")) c.momentum = j.at("momentum").get<double>();
    if (j.contains("hidden")) c.hidden = j.at("hidden").get<std::size_t>();
    if (j.contains("prior")) c.prior = j.at("prior").get<double>();
    if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("num_classes")) c.num_classes = j.at("num_classes").get<int>();
    if (j.contains("layout")) c.layout = layout_from_json(j.at("layout"));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  return c;
}

/// FREEANCHOR_THREADS, defaulting to 1.
inline unsigned threads_from_env() {
  const char* v = std::getenv("FREEANCHOR_THREADS");
  if (!v) return 1;
  const long n = std::strtol(v, nullptr, 10);
  return n > 0 ? static_cast<unsigned>(n) : 1u;
}

// ---------------------------------------------------------------------------
// One image

struct SceneStep {
  LossBreakdown loss;
  ModelParams grad;
};

/// Decoded boxes for every anchor, used only to score matching quality.
inline std::vector<BBox> predicted_boxes(const Predictions& pred, std::span<const BBox> anchors) {
  std::vector<BBox> out;
  out.reserve(anchors.size());
  for (std::size_t j = 0; j < anchors.size(); ++j) out.push_back(decode_deltas_capped(anchors[j], pred.deltas[j]));
  return out;
}

inline LossBreakdown scene_loss(const Predictions& pred, std::span<const BBox> anchors, std::span<const LabeledBox> objects,
                                const HyperParams& hp, LossMode mode) {
  std::vector<BBox> boxes;
  boxes.reserve(objects.size());
  for (const auto& o : objects) boxes.push_back(o.box);
  if (mode == LossMode::kBaselineIou) {
    const auto match = build_iou_assignment(boxes, anchors, hp.assign_iou_threshold);
    return baseline_loss(pred, anchors, objects, match, hp.beta);
  }
  const auto bags = build_anchor_bags(boxes, anchors, hp.bag_size);
  const auto mp = compute_match_probabilities(bags, boxes, predicted_boxes(pred, anchors), hp.bg_iou_threshold);
  return free_anchor_loss(pred, anchors, objects, bags, mp, hp);
}

/// Baseline losses are divided by max(1, |B|) so both objectives see
/// comparable per-image gradient scales under the same learning rate.
inline double loss_normalizer(LossMode mode, std::size_t num_objects) {
  return mode == LossMode::kBaselineIou ? 1.0 / static_cast<double>(std::max<std::size_t>(1, num_objects)) : 1.0;
}

inline SceneStep scene_step(const ModelParams& params, const Scene& scene, std::span<const BBox> anchors,
                            const HyperParams& hp, LossMode mode) {
  const FeatureMatrix f = extract_features(scene.width, scene.height, scene.raster, anchors);
  ForwardCache cache;
  const Predictions pred = forward(params, f, &cache);
  SceneStep s;
  s.loss = scene_loss(pred, anchors, scene.objects, hp, mode);
  const double norm = loss_normalizer(mode, scene.objects.size());
  if (norm != 1.0) {
    s.loss.total *= norm;
    s.loss.recall *= norm;
    s.loss.background *= norm;
    s.loss.recall_grad_norm *= norm;
    s.loss.background_grad_norm *= norm;
    for (double& g : s.loss.grad.logits) g *= norm;
    for (auto& d : s.loss.grad.deltas)
      for (double& g : d) g *= norm;
  }
  s.grad = backward(params, f, cache, s.loss.grad);
  return s;
}

// ---------------------------------------------------------------------------
// Loop

struct LogRow {
  long iteration = 0;
  double learning_rate = 0.0;
  double total = 0.0;
  double recall = 0.0;
  double background = 0.0;
  double recall_grad_norm = 0.0;
  double background_grad_norm = 0.0;
  double param_grad_norm = 0.0;
};

inline std::string log_header() {
  return "iteration,learning_rate,total_loss,recall_term,background_term,recall_grad_norm,background_grad_norm,param_grad_norm";
}

inline std::string format_log_row(const LogRow& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%ld,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g", r.iteration, r.learning_rate, r.total,
                r.recall, r.background, r.recall_grad_norm, r.background_grad_norm, r.param_grad_norm);
  return buf;
}

struct TrainState {
  ModelParams params;
  ModelParams velocity;
  long iteration = 0;  // next iteration to run
};

struct TrainResult {
  TrainState state;  // last good state
  std::vector<LogRow> log;
  std::optional<std::string> failure;
};

inline TrainState initial_state(const TrainConfig& cfg) {
  TrainState s;
  s.params = init_params(kFeatureDim, static_cast<std::size_t>(cfg.num_classes), cfg.prior, cfg.seed, cfg.hidden);
  return s;
}

/// Scene indices of one mini-batch; a pure function of (seed, iteration).
inline std::vector<std::size_t> batch_indices(std::uint64_t seed, long iteration, std::size_t batch, std::size_t num_scenes) {
  std::mt19937_64 rng(mix_seed(seed ^ 0xB47C4ULL, static_cast<std::uint64_t>(iteration)));
  std::uniform_int_distribution<std::size_t> pick(0, num_scenes - 1);
  std::vector<std::size_t> out(batch);
  for (auto& i : out) i = pick(rng);
  return out;
}

namespace detail {

template <typename F>
void parallel_for(std::size_t n, unsigned threads, F&& fn) {
  if (threads <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  const unsigned t = std::min<unsigned>(threads, static_cast<unsigned>(n));
  for (unsigned w = 0; w < t; ++w)
    pool.emplace_back([&, w] {
      for (std::size_t i = w; i < n; i += t) fn(i);
    });
  for (auto& th : pool) th.join();
}

inline double params_norm(const ModelParams& p) {
  double s = 0.0;
  for (const auto& b : p.blocks())
    for (double v : b) s += v * v;
  return std::sqrt(s);
}

}  // namespace detail

using IterationHook = std::function<void(const TrainState&, const LogRow&)>;

/// Runs iterations [state.iteration, cfg.iterations). Per-scene work may run
/// on several threads; gradients are reduced in batch order. A numeric
/// failure stops the loop and returns the last good state.
inline TrainResult train(const TrainConfig& cfg, std::span<const Scene> scenes, TrainState state,
                         const IterationHook& hook = {}) {
  cfg.hyper.validate();
  if (scenes.empty()) throw ConfigError("train: dataset is empty");
  if (cfg.batch_size == 0) throw ConfigError("train: batch size must be positive");
  for (const auto& s : scenes) {
    if (s.width != cfg.layout.image_width || s.height != cfg.layout.image_height)
      throw ConfigError("train: scene " + std::to_string(s.id) + " size does not match the anchor layout");
    for (const auto& o : s.objects)
      if (o.label >= cfg.num_classes)
        throw ConfigError("train: scene " + std::to_string(s.id) + " has label " + std::to_string(o.label) +
                          " outside the model's " + std::to_string(cfg.num_classes) + " classes");
  }
  const auto anchors = generate_anchors(cfg.layout);
  TrainResult result;
  std::vector<SceneStep> steps(cfg.batch_size);
  for (long it = state.iteration; it < cfg.iterations; ++it) {
    const auto idx = batch_indices(cfg.seed, it, cfg.batch_size, scenes.size());
    std::vector<std::string> errors(idx.size());
    detail::parallel_for(idx.size(), cfg.threads, [&](std::size_t b) {
      try {
        steps[b] = scene_step(state.params, scenes[idx[b]], anchors, cfg.hyper, cfg.mode);
      } catch (const NumericError& e) {
        errors[b] = "scene " + std::to_string(scenes[idx[b]].id) + ": " + e.what();
      }
    });
    for (const auto& e : errors)
      if (!e.empty()) {
        result.failure = "iteration " + std::to_string(it) + ": " + e;
        result.state = std::move(state);
        return result;
      }

    LogRow row;
    row.iteration = it;
    row.learning_rate = cfg.learning_rate_at(it);
    ModelParams grad = ModelParams::zeros(state.params.feature_dim(), state.params.hidden(), state.params.num_classes());
    const double inv = 1.0 / static_cast<double>(idx.size());
    for (const auto& s : steps) {
      grad.w1 += inv * s.grad.w1;
      grad.b1 += inv * s.grad.b1;
      grad.w2 += inv * s.grad.w2;
      grad.b2 += inv * s.grad.b2;
      row.total += inv * s.loss.total;
      row.recall += inv * s.loss.recall;
      row.background += inv * s.loss.background;
      row.recall_grad_norm += inv * s.loss.recall_grad_norm;
      row.background_grad_norm += inv * s.loss.background_grad_norm;
    }
    row.param_grad_norm = detail::params_norm(grad);
    if (!std::isfinite(row.total) || !std::isfinite(row.param_grad_norm)) {
      result.failure = "iteration " + std::to_string(it) + ": non-finite loss";
      result.state = std::move(state);
      return result;
    }
    try {
      ModelParams next = state.params;
      ModelParams vel = state.velocity;
      sgd_step(next, grad, row.learning_rate, cfg.momentum, &vel);
      state.params = std::move(next);
      state.velocity = std::move(vel);
    } catch (const NumericError& e) {
      result.failure = "iteration " + std::to_string(it) + ": " + e.what();
      result.state = std::move(state);
      return result;
    }
    state.iteration = it + 1;
    result.log.push_back(row);
    if (hook) hook(state, row);
  }
  result.state = std::move(state);
  return result;
}

// ---------------------------------------------------------------------------
// Inference over a dataset

struct DetectionSet {
  std::vector<Detection> raw;    // before NMS
  std::vector<Detection> final;  // after NMS and the per-scene cap
};

inline DetectionSet run_detector(const ModelParams& params, const AnchorLayout& layout, std::span<const Scene> scenes,
                                 const PostprocessOptions& opt = {}) {
  const auto anchors = generate_anchors(layout);
  DetectionSet out;
  for (const auto& s : scenes) {
    if (s.width != layout.image_width || s.height != layout.image_height)
      throw ConfigError("detector: scene " + std::to_string(s.id) + " is " + std::to_string(s.width) + "x" +
                        std::to_string(s.height) + ", checkpoint layout expects " + std::to_string(layout.image_width) +
                        "x" + std::to_string(layout.image_height));
    const auto f = extract_features(s.width, s.height, s.raster, anchors);
    const auto pred = forward(params, f);
    auto raw = raw_detections(pred, anchors, s.id, s.width, s.height, opt);
    auto fin = final_detections(raw, opt);
    out.raw.insert(out.raw.end(), raw.begin(), raw.end());
    out.final.insert(out.final.end(), fin.begin(), fin.end());
  }
  return out;
}

}  // namespace freeanchor
