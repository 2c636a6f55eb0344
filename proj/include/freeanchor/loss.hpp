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

// Detection likelihoods and losses.
//
// Notation used in comments: for anchor j and object i with label c_i,
//   P^cls_ij = prod_c (p_jc if c == c_i else 1 - p_jc)   = exp(-BCE)
//   P^loc_ij = exp(-beta * SmoothL1(d_j, encode(anchor_j, b_i)))
//   P^bg_j   = prod_c (1 - p_jc)
// The learned-matching loss is
//   L = -w1 sum_i log MeanMax(X_i) + w2 sum_j FL(pi_j (1 - P^bg_j)),
// with X_i = {P^cls_ij P^loc_ij : j in bag_i} and pi_j = P{a_j in A_-}.
// pi_j and the match probabilities behind it are constants for
// differentiation: gradients flow only through logits and deltas.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "freeanchor/errors.hpp"
#include "freeanchor/geometry.hpp"
#include "freeanchor/matching.hpp"

namespace freeanchor {

/// Probability floor used before logs and Mean-max.
inline constexpr double kProbEps = 1e-12;

// ---------------------------------------------------------------------------
// Scalar helpers

inline double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

/// log(1 + e^z) without overflow.
inline double softplus(double z) {
  if (z > 0.0) return z + std::log1p(std::exp(-z));
  return std::log1p(std::exp(z));
}

/// log(1 - e^a) for a < 0.
inline double log1mexp(double a) {
  return a > -0.6931471805599453 ? std::log(-std::expm1(a)) : std::log1p(-std::exp(a));
}

inline double log_sum_exp(std::span<const double> v) {
  double m = -std::numeric_limits<double>::infinity();
  for (double x : v) m = std::max(m, x);
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

// ---------------------------------------------------------------------------
// Types

/// Per-anchor network outputs: pre-sigmoid class logits (anchors x k,
/// row-major) and raw box deltas.
struct Predictions {
  std::size_t num_classes = 1;
  std::vector<double> logits;
  std::vector<Deltas> deltas;

  Predictions() = default;
  Predictions(std::size_t anchors, std::size_t k) : num_classes(k), logits(anchors * k, 0.0), deltas(anchors, Deltas{}) {}

  std::size_t size() const { return deltas.size(); }
  double logit(std::size_t j, std::size_t c) const { return logits[j * num_classes + c]; }
  double& logit(std::size_t j, std::size_t c) { return logits[j * num_classes + c]; }
  double prob(std::size_t j, std::size_t c) const { return sigmoid(logit(j, c)); }
  /// 1 - p, computed as sigmoid(-z) to keep relative precision.
  double prob_complement(std::size_t j, std::size_t c) const { return sigmoid(-logit(j, c)); }
  std::span<const double> logits_of(std::size_t j) const { return {logits.data() + j * num_classes, num_classes}; }

  std::vector<double> probs_of(std::size_t j) const {
    std::vector<double> p(num_classes);
    for (std::size_t c = 0; c < num_classes; ++c) p[c] = prob(j, c);
    return p;
  }
};

/// Gradient of a scalar loss with respect to every Predictions entry.
struct OutputGradients {
  std::size_t num_classes = 1;
  std::vector<double> logits;
  std::vector<Deltas> deltas;

  OutputGradients() = default;
  OutputGradients(std::size_t anchors, std::size_t k) : num_classes(k), logits(anchors * k, 0.0), deltas(anchors, Deltas{}) {}

  double& logit(std::size_t j, std::size_t c) { return logits[j * num_classes + c]; }
  double logit(std::size_t j, std::size_t c) const { return logits[j * num_classes + c]; }

  double norm() const {
    double s = 0.0;
    for (double g : logits) s += g * g;
    for (const auto& d : deltas)
      for (double g : d) s += g * g;
    return std::sqrt(s);
  }

  OutputGradients& operator+=(const OutputGradients& o) {
    for (std::size_t i = 0; i < logits.size(); ++i) logits[i] += o.logits[i];
    for (std::size_t j = 0; j < deltas.size(); ++j)
      for (std::size_t d = 0; d < 4; ++d) deltas[j][d] += o.deltas[j][d];
    return *this;
  }
};

struct HyperParams {
  int bag_size = 50;                    // n
  double bg_iou_threshold = 0.6;        // t
  double alpha = 0.5;
  double gamma = 2.0;
  double beta = 0.75;
  double assign_iou_threshold = 0.5;    // hand-crafted assignment (baseline)
  double learning_rate = 0.01;          // lambda

  /// alpha / |B|; zero for an empty image (the recall sum is empty).
  double w1(std::size_t num_objects) const {
    return num_objects == 0 ? 0.0 : alpha / static_cast<double>(num_objects);
  }
  /// (1 - alpha) / (n |B|), falling back to (1 - alpha) / n when |B| = 0.
  double w2(std::size_t num_objects) const {
    const double denom = static_cast<double>(bag_size) * static_cast<double>(std::max<std::size_t>(num_objects, 1));
    return (1.0 - alpha) / denom;
  }

  void validate() const {
    if (bag_size <= 0) throw ConfigError("hyper-params: bag size must be positive");
    if (!(bg_iou_threshold > 0.0 && bg_iou_threshold < 1.0)) throw ConfigError("hyper-params: t must lie in (0, 1)");
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("hyper-params: alpha must lie in [0, 1]");
    if (!(gamma >= 0.0)) throw ConfigError("hyper-params: gamma must be non-negative");
    if (!(beta >= 0.0)) throw ConfigError("hyper-params: beta must be non-negative");
    if (!(assign_iou_threshold > 0.0 && assign_iou_threshold < 1.0))
      throw ConfigError("hyper-params: assignment IoU threshold must lie in (0, 1)");
  }
};

/// Loss value, its two terms, and gradients with respect to the predictions.
/// For the baseline, `recall` holds the positive-anchor terms.
struct LossBreakdown {
  double total = 0.0;
  double recall = 0.0;
  double background = 0.0;
  std::vector<std::vector<double>> bag_likelihoods;  // X_i, aligned with bags
  OutputGradients grad;
  double recall_grad_norm = 0.0;
  double background_grad_norm = 0.0;
};

// ---------------------------------------------------------------------------
// Confidences

/// prod_c (p_c if c == label else 1 - p_c); label < 0 means all-background.
inline double cls_confidence(std::span<const double> probs, int label) {
  double out = 1.0;
  for (std::size_t c = 0; c < probs.size(); ++c)
    out *= static_cast<int>(c) == label ? probs[c] : 1.0 - probs[c];
  return out;
}

/// Binary cross entropy of logits against a one-hot label (label < 0: zeros).
inline double bce_logits(std::span<const double> logits, int label) {
  double s = 0.0;
  for (std::size_t c = 0; c < logits.size(); ++c) {
    const double z = logits[c];
    s += static_cast<int>(c) == label ? softplus(-z) : softplus(z);
  }
  return s;
}

inline double loc_confidence(const Deltas& pred, const BBox& anchor, const BBox& target, double beta) {
  return std::exp(-beta * smooth_l1(pred, encode_deltas(anchor, target)));
}

// ---------------------------------------------------------------------------
// Mean-max and focal term

/// sum(x / (1 - x)) / sum(1 / (1 - x)); inputs clamped to [0, 1 - eps].
/// Written as max + sum(w (x - max)) / sum(w) with w = 1 / (1 - x), which
/// returns a constant input unchanged and never exceeds the max.
inline double mean_max(std::span<const double> xs) {
  if (xs.empty()) throw ConfigError("mean_max: empty input");
  double hi = 0.0;
  for (double x : xs) hi = std::max(hi, std::clamp(x, 0.0, 1.0 - kProbEps));
  double num = 0.0, den = 0.0;
  for (double x : xs) {
    const double v = std::clamp(x, 0.0, 1.0 - kProbEps);
    const double w = 1.0 / (1.0 - v);
    num += w * (v - hi);
    den += w;
  }
  return hi + num / den;
}

struct LogMeanMax {
  double value = 0.0;
  std::vector<double> grad;  // d value / d log x_j
};

/// log Mean-max from log-inputs, using log-sum-exp for both sums. Inputs
/// outside [log eps, log(1 - eps)] are clamped and receive zero gradient.
inline LogMeanMax log_mean_max(std::span<const double> log_x) {
  if (log_x.empty()) throw ConfigError("log_mean_max: empty input");
  static const double lo = std::log(kProbEps);
  static const double hi = std::log1p(-kProbEps);
  const std::size_t n = log_x.size();
  std::vector<double> lx(n), l1m(n), a(n), b(n);
  for (std::size_t k = 0; k < n; ++k) {
    lx[k] = std::clamp(log_x[k], lo, hi);
    l1m[k] = log1mexp(lx[k]);
    a[k] = lx[k] - l1m[k];  // log(x / (1 - x))
    b[k] = -l1m[k];         // log(1 / (1 - x))
  }
  const double log_s1 = log_sum_exp(a);
  const double log_s2 = log_sum_exp(b);
  LogMeanMax out;
  out.value = log_s1 - log_s2;
  out.grad.resize(n);
  for (std::size_t k = 0; k < n; ++k) {
    if (log_x[k] < lo || log_x[k] > hi) {
      out.grad[k] = 0.0;
      continue;
    }
    // d/dlog x of log S1 - log S2 = x / (1 - x)^2 * (1 / S1 - 1 / S2)
    const double base = lx[k] - 2.0 * l1m[k];
    out.grad[k] = std::exp(base - log_s1) - std::exp(base - log_s2);
  }
  return out;
}

/// FL(x) = -x^gamma log(1 - x), x clamped to 1 - eps.
inline double focal_term(double x, double gamma) {
  const double v = std::clamp(x, 0.0, 1.0 - kProbEps);
  if (v == 0.0) return 0.0;
  return -std::pow(v, gamma) * std::log1p(-v);
}

/// dFL/dx; zero where the clamp is active.
inline double focal_term_grad(double x, double gamma) {
  if (x >= 1.0 - kProbEps) return 0.0;
  const double v = std::max(x, 0.0);
  const double nl = -std::log1p(-v);  // -log(1 - x) >= 0
  double first = 0.0;
  if (gamma != 0.0 && v > 0.0) first = gamma * std::pow(v, gamma - 1.0) * nl;
  const double second = (gamma == 0.0 ? 1.0 : std::pow(v, gamma)) / (1.0 - v);
  return first + second;
}

// ---------------------------------------------------------------------------
// Hand-crafted assignment baseline

namespace detail {

inline void check_shapes(const Predictions& pred, std::span<const BBox> anchors) {
  if (pred.size() != anchors.size())
    throw ConfigError("loss: predictions cover " + std::to_string(pred.size()) + " anchors, layout has " +
                      std::to_string(anchors.size()));
  if (pred.num_classes == 0) throw ConfigError("loss: k must be at least 1");
}

inline void check_finite(double v, const char* what) {
  if (!std::isfinite(v)) throw NumericError(std::string("non-finite ") + what);
}

}  // namespace detail

/// sum_{A+} C_ij (BCE_ij + beta SmoothL1_ij) + sum_{A-} BCE(a_j, 0).
inline LossBreakdown baseline_loss(const Predictions& pred, std::span<const BBox> anchors,
                                   std::span<const LabeledBox> objects, const MatchMatrix& match, double beta) {
  detail::check_shapes(pred, anchors);
  const std::size_t k = pred.num_classes;
  LossBreakdown out;
  OutputGradients gpos(pred.size(), k), gneg(pred.size(), k);
  for (std::size_t j = 0; j < pred.size(); ++j) {
    const long i = match.matched_object(j);
    const auto z = pred.logits_of(j);
    if (i < 0) {
      out.background += bce_logits(z, -1);
      for (std::size_t c = 0; c < k; ++c) gneg.logit(j, c) = pred.prob(j, c);
      continue;
    }
    const auto& obj = objects[static_cast<std::size_t>(i)];
    const Deltas target = encode_deltas(anchors[j], obj.box);
    out.recall += bce_logits(z, obj.label) + beta * smooth_l1(pred.deltas[j], target);
    for (std::size_t c = 0; c < k; ++c)
      gpos.logit(j, c) = pred.prob(j, c) - (static_cast<int>(c) == obj.label ? 1.0 : 0.0);
    const Deltas g = smooth_l1_grad(pred.deltas[j], target);
    for (std::size_t d = 0; d < 4; ++d) gpos.deltas[j][d] = beta * g[d];
  }
  out.total = out.recall + out.background;
  detail::check_finite(out.total, "baseline loss");
  out.recall_grad_norm = gpos.norm();
  out.background_grad_norm = gneg.norm();
  out.grad = std::move(gpos);
  out.grad += gneg;
  return out;
}

/// Product form of exp(-baseline_loss), evaluated from probabilities.
inline double likelihood_of_loss(const Predictions& pred, std::span<const BBox> anchors,
                                 std::span<const LabeledBox> objects, const MatchMatrix& match, double beta) {
  detail::check_shapes(pred, anchors);
  const std::size_t k = pred.num_classes;
  double p_cls = 1.0, p_loc = 1.0, p_bg = 1.0;
  for (std::size_t j = 0; j < pred.size(); ++j) {
    double sum_cls = 0.0, sum_loc = 0.0;
    bool positive = false;
    for (std::size_t i = 0; i < objects.size(); ++i) {
      if (!match(i, j)) continue;
      positive = true;
      double c_conf = 1.0;
      for (std::size_t c = 0; c < k; ++c)
        c_conf *= static_cast<int>(c) == objects[i].label ? pred.prob(j, c) : pred.prob_complement(j, c);
      sum_cls += c_conf;
      sum_loc += loc_confidence(pred.deltas[j], anchors[j], objects[i].box, beta);
    }
    if (positive) {
      p_cls *= sum_cls;
      p_loc *= sum_loc;
    } else {
      for (std::size_t c = 0; c < k; ++c) p_bg *= pred.prob_complement(j, c);
    }
  }
  return p_cls * p_loc * p_bg;
}

// ---------------------------------------------------------------------------
// Learned matching

namespace detail {

/// log(P^cls_ij P^loc_ij) from logits.
inline double log_anchor_likelihood(const Predictions& pred, std::size_t j, const BBox& anchor,
                                    const LabeledBox& obj, double beta) {
  return -bce_logits(pred.logits_of(j), obj.label) - beta * smooth_l1(pred.deltas[j], encode_deltas(anchor, obj.box));
}

}  // namespace detail

/// prod_i max_{j in A_i} P^cls_ij P^loc_ij.
inline double recall_likelihood(const Predictions& pred, std::span<const BBox> anchors,
                                std::span<const LabeledBox> objects, std::span<const AnchorBag> bags, double beta) {
  detail::check_shapes(pred, anchors);
  double out = 1.0;
  for (const auto& bag : bags) {
    double best = 0.0;
    for (std::size_t j : bag.anchors) {
      const double v = cls_confidence(pred.probs_of(j), objects[bag.object].label) *
                       loc_confidence(pred.deltas[j], anchors[j], objects[bag.object].box, beta);
      best = std::max(best, v);
    }
    out *= best;
  }
  return out;
}

/// prod_j (1 - P{a_j in A_-} (1 - P^bg_j)).
inline double precision_likelihood(const Predictions& pred, const MatchProbabilities& mp) {
  double out = 1.0;
  for (std::size_t j = 0; j < pred.size(); ++j) {
    double p_bg = 1.0;
    for (std::size_t c = 0; c < pred.num_classes; ++c) p_bg *= pred.prob_complement(j, c);
    out *= 1.0 - mp.background[j] * (1.0 - p_bg);
  }
  return out;
}

inline double customized_likelihood(const Predictions& pred, std::span<const BBox> anchors,
                                    std::span<const LabeledBox> objects, std::span<const AnchorBag> bags,
                                    const MatchProbabilities& mp, double beta) {
  return recall_likelihood(pred, anchors, objects, bags, beta) * precision_likelihood(pred, mp);
}

/// -log of the customized likelihood with the max selection, in log space.
inline double customized_loss_max(const Predictions& pred, std::span<const BBox> anchors,
                                  std::span<const LabeledBox> objects, std::span<const AnchorBag> bags,
                                  const MatchProbabilities& mp, double beta) {
  detail::check_shapes(pred, anchors);
  double loss = 0.0;
  for (const auto& bag : bags) {
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t j : bag.anchors)
      best = std::max(best, detail::log_anchor_likelihood(pred, j, anchors[j], objects[bag.object], beta));
    loss -= best;
  }
  for (std::size_t j = 0; j < pred.size(); ++j) {
    double log_bg = 0.0;
    for (double z : pred.logits_of(j)) log_bg -= softplus(z);
    const double fg = -std::expm1(log_bg);  // 1 - P^bg
    loss -= std::log1p(-mp.background[j] * fg);
  }
  return loss;
}

/// The full learned-matching loss with Mean-max selection and the focal
/// background term, plus gradients with respect to logits and deltas.
inline LossBreakdown free_anchor_loss(const Predictions& pred, std::span<const BBox> anchors,
                                      std::span<const LabeledBox> objects, std::span<const AnchorBag> bags,
                                      const MatchProbabilities& mp, const HyperParams& hp) {
  detail::check_shapes(pred, anchors);
  if (mp.background.size() != pred.size()) throw ConfigError("free_anchor_loss: match probabilities do not cover every anchor");
  const std::size_t k = pred.num_classes;
  const double w1 = hp.w1(objects.size());
  const double w2 = hp.w2(objects.size());
  LossBreakdown out;
  OutputGradients grec(pred.size(), k), gbg(pred.size(), k);

  // Recall term.
  std::vector<double> log_x;
  std::vector<Deltas> sl1_grad;
  out.bag_likelihoods.reserve(bags.size());
  for (const auto& bag : bags) {
    const auto& obj = objects[bag.object];
    log_x.clear();
    sl1_grad.clear();
    for (std::size_t j : bag.anchors) {
      const Deltas target = encode_deltas(anchors[j], obj.box);
      log_x.push_back(-bce_logits(pred.logits_of(j), obj.label) - hp.beta * smooth_l1(pred.deltas[j], target));
      sl1_grad.push_back(smooth_l1_grad(pred.deltas[j], target));
    }
    std::vector<double> xs(log_x.size());
    std::transform(log_x.begin(), log_x.end(), xs.begin(), [](double v) { return std::exp(v); });
    out.bag_likelihoods.push_back(std::move(xs));

    const LogMeanMax lmm = log_mean_max(log_x);
    out.recall -= w1 * lmm.value;
    for (std::size_t m = 0; m < bag.anchors.size(); ++m) {
      const std::size_t j = bag.anchors[m];
      const double g = -w1 * lmm.grad[m];  // dL / dlog x_ij
      if (g == 0.0) continue;
      for (std::size_t c = 0; c < k; ++c) {
        const double y = static_cast<int>(c) == obj.label ? 1.0 : 0.0;
        grec.logit(j, c) += g * (y - pred.prob(j, c));
      }
      for (std::size_t d = 0; d < 4; ++d) grec.deltas[j][d] += g * (-hp.beta * sl1_grad[m][d]);
    }
  }
  detail::check_finite(out.recall, "recall term");

  // Focal background term.
  for (std::size_t j = 0; j < pred.size(); ++j) {
    const double pi = mp.background[j];
    if (pi <= 0.0) continue;
    double log_bg = 0.0;
    for (double z : pred.logits_of(j)) log_bg -= softplus(z);
    const double p_bg = std::exp(log_bg);
    const double q = pi * -std::expm1(log_bg);
    out.background += w2 * focal_term(q, hp.gamma);
    const double dq = w2 * focal_term_grad(q, hp.gamma);
    if (dq == 0.0) continue;
    for (std::size_t c = 0; c < k; ++c) gbg.logit(j, c) += dq * pi * p_bg * pred.prob(j, c);
  }
  detail::check_finite(out.background, "background term");

  out.total = out.recall + out.background;
  out.recall_grad_norm = grec.norm();
  out.background_grad_norm = gbg.norm();
  out.grad = std::move(grec);
  out.grad += gbg;
  for (double g : out.grad.logits) detail::check_finite(g, "logit gradient");
  return out;
}

/// Gradient tables of the learned-matching loss.
inline OutputGradients loss_gradients(const Predictions& pred, std::span<const BBox> anchors,
                                      std::span<const LabeledBox> objects, std::span<const AnchorBag> bags,
                                      const MatchProbabilities& mp, const HyperParams& hp) {
  return free_anchor_loss(pred, anchors, objects, bags, mp, hp).grad;
}

}  // namespace freeanchor
