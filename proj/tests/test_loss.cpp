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

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "freeanchor/gradcheck.hpp"
#include "freeanchor/loss.hpp"
#include "freeanchor/model.hpp"
#include "test_util.hpp"

namespace fa = freeanchor;
using fa::BBox;

namespace {

struct LossSetup {
  test::LossInstance inst;
  std::vector<fa::AnchorBag> bags;
  fa::MatchProbabilities mp;
  fa::HyperParams hp;
};

LossSetup make_setup(std::uint64_t seed, int n_obj, int n_anc, int k, int bag = 12) {
  LossSetup s;
  s.inst = test::random_instance(seed, n_obj, n_anc, k);
  s.hp.bag_size = bag;
  const auto boxes = s.inst.boxes();
  s.bags = fa::build_anchor_bags(boxes, s.inst.anchors, bag);
  std::vector<BBox> preds;
  for (std::size_t j = 0; j < s.inst.anchors.size(); ++j)
    preds.push_back(fa::decode_deltas_capped(s.inst.anchors[j], s.inst.pred.deltas[j]));
  s.mp = fa::compute_match_probabilities(s.bags, boxes, preds, s.hp.bg_iou_threshold);
  return s;
}

fa::LossBreakdown loss_of(const LossSetup& s) {
  return fa::free_anchor_loss(s.inst.pred, s.inst.anchors, s.inst.objects, s.bags, s.mp, s.hp);
}

/// Direct probability-space evaluation of the learned-matching loss.
double loss_oracle(const LossSetup& s) {
  const auto& p = s.inst.pred;
  const std::size_t nobj = s.inst.objects.size();
  const double w1 = nobj ? s.hp.alpha / nobj : 0.0;
  const double w2 = (1 - s.hp.alpha) / (s.hp.bag_size * std::max<std::size_t>(nobj, 1));
  double recall = 0.0;
  for (const auto& bag : s.bags) {
    const auto& obj = s.inst.objects[bag.object];
    double num = 0, den = 0;
    for (std::size_t j : bag.anchors) {
      double pc = 1.0;
      for (std::size_t c = 0; c < p.num_classes; ++c) {
        const double q = 1.0 / (1.0 + std::exp(-p.logit(j, c)));
        pc *= static_cast<int>(c) == obj.label ? q : 1 - q;
      }
      const double pl = std::exp(-s.hp.beta * fa::smooth_l1(p.deltas[j], fa::encode_deltas(s.inst.anchors[j], obj.box)));
      const double x = pc * pl;
      num += x / (1 - x);
      den += 1 / (1 - x);
    }
    recall -= w1 * std::log(num / den);
  }
  double bg = 0.0;
  for (std::size_t j = 0; j < p.size(); ++j) {
    double pbg = 1.0;
    for (std::size_t c = 0; c < p.num_classes; ++c) pbg *= 1 - 1.0 / (1.0 + std::exp(-p.logit(j, c)));
    const double q = s.mp.background[j] * (1 - pbg);
    bg += w2 * -std::pow(q, s.hp.gamma) * std::log(1 - q);
  }
  return recall + bg;
}

double rel(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-300}); }

}  // namespace

// ---------------------------------------------------------------------------
// Scalars

TEST(Scalars, ClosedFormValues) {
  EXPECT_NEAR(fa::mean_max(std::vector<double>{0.2, 0.8}), 0.68, 1e-15);
  EXPECT_NEAR(fa::focal_term(0.5, 2.0), 0.25 * std::log(2.0), 1e-15);
  EXPECT_NEAR(fa::sigmoid(fa::prior_bias(0.02)), 0.02, 1e-15);
  EXPECT_DOUBLE_EQ(fa::sigmoid(0.0), 0.5);
  EXPECT_NEAR(fa::softplus(0.0), std::log(2.0), 1e-15);
}

TEST(Scalars, StableAtExtremeLogits) {
  for (double z : {-800.0, -40.0, 40.0, 800.0}) {
    EXPECT_TRUE(std::isfinite(fa::softplus(z)));
    EXPECT_TRUE(std::isfinite(fa::sigmoid(z)));
  }
  EXPECT_NEAR(fa::softplus(800.0), 800.0, 1e-9);
  EXPECT_NEAR(fa::log1mexp(-1e-20), std::log(1e-20), 1e-9);
}

TEST(BceLogits, EqualsNegLogClassConfidence) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> g(0.0, 3.0);
  for (int t = 0; t < 500; ++t) {
    std::vector<double> z(3), p(3);
    for (int c = 0; c < 3; ++c) p[c] = fa::sigmoid(z[c] = g(rng));
    for (int label = -1; label < 3; ++label)
      EXPECT_NEAR(fa::bce_logits(z, label), -std::log(fa::cls_confidence(p, label)), 1e-10);
  }
}

// ---------------------------------------------------------------------------
// Mean-max

TEST(MeanMax, ConstantInputIdentity) {
  for (double c : {0.0, 1e-9, 0.1, 0.37, 0.5, 0.9, 0.999}) {
    std::vector<double> xs(7, c);
    EXPECT_EQ(fa::mean_max(xs), c);
  }
}

TEST(MeanMax, BetweenMinAndMax) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<int> n(1, 30);
  for (int t = 0; t < 10000; ++t) {
    std::vector<double> xs(static_cast<std::size_t>(n(rng)));
    for (double& x : xs) x = u(rng);
    const double m = fa::mean_max(xs);
    EXPECT_GE(m, *std::min_element(xs.begin(), xs.end()));
    EXPECT_LE(m, *std::max_element(xs.begin(), xs.end()));
  }
}

TEST(MeanMax, NearMeanForSmallInputs) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 0.05);
  for (int t = 0; t < 2000; ++t) {
    std::vector<double> xs(10);
    for (double& x : xs) x = u(rng);
    const double mean = std::accumulate(xs.begin(), xs.end(), 0.0) / xs.size();
    EXPECT_LE(std::abs(fa::mean_max(xs) - mean), *std::max_element(xs.begin(), xs.end()));
  }
}

TEST(MeanMax, ApproachesMaxAsOneLeadsNearOne) {
  const std::vector<double> xs{0.1, 0.2, 0.999999};
  EXPECT_NEAR(fa::mean_max(xs), 0.999999, 1e-5);
}

TEST(MeanMax, LogFormMatchesAndDifferentiates) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0.001, 0.99);
  const double h = 1e-6;
  for (int t = 0; t < 200; ++t) {
    std::vector<double> xs(6), lx(6);
    for (std::size_t k = 0; k < xs.size(); ++k) lx[k] = std::log(xs[k] = u(rng));
    const auto r = fa::log_mean_max(lx);
    EXPECT_NEAR(r.value, std::log(fa::mean_max(xs)), 1e-12);
    for (std::size_t k = 0; k < lx.size(); ++k) {
      auto up = lx, dn = lx;
      up[k] += h;
      dn[k] -= h;
      const double fd = (fa::log_mean_max(up).value - fa::log_mean_max(dn).value) / (2 * h);
      EXPECT_NEAR(r.grad[k], fd, 1e-8);
    }
  }
  EXPECT_THROW(fa::log_mean_max(std::vector<double>{}), fa::ConfigError);
  EXPECT_THROW(fa::mean_max(std::vector<double>{}), fa::ConfigError);
}

TEST(MeanMax, LogFormFiniteForTinyLikelihoods) {
  const std::vector<double> lx{-900.0, -1200.0, -700.0};
  const auto r = fa::log_mean_max(lx);
  EXPECT_TRUE(std::isfinite(r.value));
  for (double g : r.grad) EXPECT_TRUE(std::isfinite(g));
}

// ---------------------------------------------------------------------------
// Focal term

TEST(FocalTerm, GradientAndSpecialCases) {
  const double h = 1e-7;
  for (double gamma : {0.0, 1.0, 2.0, 2.5})
    for (double x : {0.01, 0.2, 0.5, 0.9}) {
      const double fd = (fa::focal_term(x + h, gamma) - fa::focal_term(x - h, gamma)) / (2 * h);
      EXPECT_NEAR(fa::focal_term_grad(x, gamma), fd, 1e-6 * std::max(1.0, std::abs(fd)));
    }
  EXPECT_NEAR(fa::focal_term(0.3, 0.0), -std::log(0.7), 1e-15);
  EXPECT_EQ(fa::focal_term(0.0, 2.0), 0.0);
  EXPECT_TRUE(std::isfinite(fa::focal_term(1.0, 2.0)));
}

// ---------------------------------------------------------------------------
// Baseline objective

TEST(BaselineLoss, LikelihoodIdentity) {
  for (std::uint64_t seed = 0; seed < 300; ++seed) {
    auto inst = test::random_instance(seed, 1 + seed % 4, 30 + seed % 50, 1 + seed % 3, 1.5, 0.3);
    const auto m = fa::build_iou_assignment(inst.boxes(), inst.anchors, 0.5);
    const double loss = fa::baseline_loss(inst.pred, inst.anchors, inst.objects, m, 0.75).total;
    EXPECT_LT(rel(fa::likelihood_of_loss(inst.pred, inst.anchors, inst.objects, m, 0.75), std::exp(-loss)), 1e-12);
  }
}

TEST(BaselineLoss, GradientMatchesFiniteDifference) {
  auto inst = test::random_instance(77, 3, 40, 3);
  const auto m = fa::build_iou_assignment(inst.boxes(), inst.anchors, 0.5);
  const auto lb = fa::baseline_loss(inst.pred, inst.anchors, inst.objects, m, 0.75);
  const double h = 1e-6;
  auto f = [&](const fa::Predictions& p) { return fa::baseline_loss(p, inst.anchors, inst.objects, m, 0.75).total; };
  fa::Predictions p = inst.pred;
  for (std::size_t i = 0; i < p.logits.size(); ++i) {
    const double o = p.logits[i];
    p.logits[i] = o + h;
    const double up = f(p);
    p.logits[i] = o - h;
    const double dn = f(p);
    p.logits[i] = o;
    EXPECT_NEAR(lb.grad.logits[i], (up - dn) / (2 * h), 1e-7);
  }
  for (std::size_t j = 0; j < p.size(); ++j)
    for (std::size_t d = 0; d < 4; ++d) {
      const double o = p.deltas[j][d];
      p.deltas[j][d] = o + h;
      const double up = f(p);
      p.deltas[j][d] = o - h;
      const double dn = f(p);
      p.deltas[j][d] = o;
      EXPECT_NEAR(lb.grad.deltas[j][d], (up - dn) / (2 * h), 1e-7);
    }
}

// ---------------------------------------------------------------------------
// Learned matching

TEST(CustomizedLikelihood, RecallTermIsProductOfBagMaxima) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const LossSetup s = make_setup(seed, 3, 40, 2);
    double oracle = 1.0;
    for (const auto& bag : s.bags) {
      double best = 0.0;
      for (std::size_t j : bag.anchors) {
        const auto& o = s.inst.objects[bag.object];
        best = std::max(best, fa::cls_confidence(s.inst.pred.probs_of(j), o.label) *
                                  fa::loc_confidence(s.inst.pred.deltas[j], s.inst.anchors[j], o.box, s.hp.beta));
      }
      oracle *= best;
    }
    EXPECT_LT(rel(fa::recall_likelihood(s.inst.pred, s.inst.anchors, s.inst.objects, s.bags, s.hp.beta), oracle), 1e-12);
  }
}

TEST(CustomizedLikelihood, PrecisionTermExpansion) {
  const LossSetup s = make_setup(5, 2, 30, 3);
  double oracle = 1.0;
  for (std::size_t j = 0; j < s.inst.pred.size(); ++j) {
    // 1 - P{bg} (1 - P^bg) = P{bg} P^bg + (1 - P{bg})
    double pbg = 1.0;
    for (double p : s.inst.pred.probs_of(j)) pbg *= 1 - p;
    oracle *= s.mp.background[j] * pbg + (1 - s.mp.background[j]);
  }
  EXPECT_LT(rel(fa::precision_likelihood(s.inst.pred, s.mp), oracle), 1e-12);
}

TEST(CustomizedLikelihood, LogSpaceLossMatchesProduct) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const LossSetup s = make_setup(seed, 2, 25, 2);
    const double lik = fa::customized_likelihood(s.inst.pred, s.inst.anchors, s.inst.objects, s.bags, s.mp, s.hp.beta);
    const double loss = fa::customized_loss_max(s.inst.pred, s.inst.anchors, s.inst.objects, s.bags, s.mp, s.hp.beta);
    EXPECT_NEAR(loss, -std::log(lik), 1e-9 * std::max(1.0, std::abs(loss)));
  }
}

TEST(FreeAnchorLoss, MatchesProbabilitySpaceOracle) {
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const LossSetup s = make_setup(seed, 1 + static_cast<int>(seed % 4), 20 + static_cast<int>(seed % 80), 1 + 2 * static_cast<int>(seed % 2));
    EXPECT_LT(rel(loss_of(s).total, loss_oracle(s)), 1e-10) << "seed " << seed;
  }
}

TEST(FreeAnchorLoss, TermsAndBagLikelihoods) {
  const LossSetup s = make_setup(9, 3, 60, 3);
  const auto lb = loss_of(s);
  EXPECT_NEAR(lb.total, lb.recall + lb.background, 1e-14);
  EXPECT_GT(lb.recall, 0.0);
  EXPECT_GE(lb.background, 0.0);
  ASSERT_EQ(lb.bag_likelihoods.size(), s.bags.size());
  for (std::size_t b = 0; b < s.bags.size(); ++b) {
    ASSERT_EQ(lb.bag_likelihoods[b].size(), s.bags[b].size());
    for (double x : lb.bag_likelihoods[b]) {
      EXPECT_GE(x, 0.0);
      EXPECT_LE(x, 1.0);
    }
  }
}

TEST(FreeAnchorLoss, GradientMatchesFiniteDifference) {
  for (double step : {1e-6, 1e-7}) {
    fa::GradcheckOptions opt;
    opt.step = step;
    const auto s = fa::gradcheck_suite(123, 10, opt);
    EXPECT_LT(s.max_rel_error(), 1e-5) << "step " << step;
  }
}

TEST(FreeAnchorLoss, CorruptedGradientIsDetected) {
  fa::GradcheckOptions opt;
  opt.corrupt = 1e-3;
  EXPECT_GT(fa::gradcheck_suite(1, 2, opt).max_rel_error(), 1e-5);
}

TEST(FreeAnchorLoss, ObjectOrderDoesNotMatter) {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    LossSetup s = make_setup(seed, 4, 50, 3);
    const double before = loss_of(s).total;
    std::reverse(s.inst.objects.begin(), s.inst.objects.end());
    s = [&] {
      LossSetup r = s;
      const auto boxes = r.inst.boxes();
      r.bags = fa::build_anchor_bags(boxes, r.inst.anchors, r.hp.bag_size);
      std::vector<BBox> preds;
      for (std::size_t j = 0; j < r.inst.anchors.size(); ++j)
        preds.push_back(fa::decode_deltas_capped(r.inst.anchors[j], r.inst.pred.deltas[j]));
      r.mp = fa::compute_match_probabilities(r.bags, boxes, preds, r.hp.bg_iou_threshold);
      return r;
    }();
    EXPECT_NEAR(loss_of(s).total, before, 1e-12 * std::abs(before));
  }
}

TEST(FreeAnchorLoss, AnchorOrderDoesNotMatter) {
  // Holds when bag membership is order free: no IoU tie at the cut-off,
  // otherwise the lower index wins and shuffling changes the bag.
  std::mt19937_64 rng(8);
  int checked = 0;
  for (std::uint64_t seed = 0; seed < 60; ++seed) {
    const LossSetup s = make_setup(seed, 3, 40, 2, 4);
    const auto boxes = s.inst.boxes();
    bool tie = false;
    for (const auto& bag : s.bags) {
      std::vector<double> v;
      for (const auto& a : s.inst.anchors) v.push_back(fa::iou(boxes[bag.object], a));
      std::sort(v.rbegin(), v.rend());
      tie = tie || v[3] == v[4];
    }
    if (tie) continue;
    ++checked;
    std::vector<std::size_t> perm(s.inst.anchors.size());
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::shuffle(perm.begin(), perm.end(), rng);
    LossSetup r = s;
    for (std::size_t q = 0; q < perm.size(); ++q) {
      r.inst.anchors[q] = s.inst.anchors[perm[q]];
      r.inst.pred.deltas[q] = s.inst.pred.deltas[perm[q]];
      for (std::size_t c = 0; c < s.inst.pred.num_classes; ++c) r.inst.pred.logit(q, c) = s.inst.pred.logit(perm[q], c);
    }
    r.bags = fa::build_anchor_bags(boxes, r.inst.anchors, r.hp.bag_size);
    std::vector<BBox> preds;
    for (std::size_t j = 0; j < r.inst.anchors.size(); ++j)
      preds.push_back(fa::decode_deltas_capped(r.inst.anchors[j], r.inst.pred.deltas[j]));
    r.mp = fa::compute_match_probabilities(r.bags, boxes, preds, r.hp.bg_iou_threshold);
    EXPECT_NEAR(loss_of(r).total, loss_of(s).total, 1e-12 * std::abs(loss_of(s).total));
  }
  EXPECT_GT(checked, 20);
}

TEST(FreeAnchorLoss, EmptyImageIsPureBackground) {
  LossSetup s = make_setup(3, 0, 30, 3);
  ASSERT_TRUE(s.bags.empty());
  for (double b : s.mp.background) EXPECT_EQ(b, 1.0);
  const auto lb = loss_of(s);
  EXPECT_EQ(lb.recall, 0.0);
  double oracle = 0.0;
  for (std::size_t j = 0; j < s.inst.pred.size(); ++j) {
    double pbg = 1.0;
    for (double p : s.inst.pred.probs_of(j)) pbg *= 1 - p;
    oracle += (1 - s.hp.alpha) / s.hp.bag_size * fa::focal_term(1 - pbg, s.hp.gamma);
  }
  EXPECT_NEAR(lb.background, oracle, 1e-12 * oracle);
}

TEST(FreeAnchorLoss, AlphaExtremesSelectOneTerm) {
  LossSetup s = make_setup(4, 2, 40, 2);
  s.hp.alpha = 1.0;
  EXPECT_EQ(loss_of(s).background, 0.0);
  s.hp.alpha = 0.0;
  EXPECT_EQ(loss_of(s).recall, 0.0);
}

TEST(FreeAnchorLoss, AnchorsOutsideBagsGetNoRegressionGradient) {
  const LossSetup s = make_setup(6, 2, 80, 2, 5);
  std::vector<bool> in_bag(s.inst.anchors.size(), false);
  for (const auto& b : s.bags)
    for (std::size_t j : b.anchors) in_bag[j] = true;
  const auto lb = loss_of(s);
  for (std::size_t j = 0; j < in_bag.size(); ++j)
    if (!in_bag[j])
      for (double g : lb.grad.deltas[j]) EXPECT_EQ(g, 0.0);
}

TEST(FreeAnchorLoss, ExtremeLogitsStayFinite) {
  LossSetup s = make_setup(10, 3, 50, 3);
  for (std::size_t i = 0; i < s.inst.pred.logits.size(); ++i) s.inst.pred.logits[i] = (i % 2 ? 60.0 : -60.0);
  const auto lb = loss_of(s);
  EXPECT_TRUE(std::isfinite(lb.total));
  for (double g : lb.grad.logits) EXPECT_TRUE(std::isfinite(g));
}

TEST(FreeAnchorLoss, ShapeMismatchRejected) {
  LossSetup s = make_setup(11, 2, 30, 2);
  s.mp.background.pop_back();
  EXPECT_THROW(loss_of(s), fa::ConfigError);
}

TEST(HyperParams, WeightsAndValidation) {
  fa::HyperParams hp;
  EXPECT_DOUBLE_EQ(hp.w1(4), 0.5 / 4);
  EXPECT_DOUBLE_EQ(hp.w2(4), 0.5 / (50.0 * 4));
  EXPECT_DOUBLE_EQ(hp.w2(0), 0.5 / 50.0);
  EXPECT_EQ(hp.w1(0), 0.0);
  hp.bag_size = 0;
  EXPECT_THROW(hp.validate(), fa::ConfigError);
  hp = {};
  hp.bg_iou_threshold = 1.0;
  EXPECT_THROW(hp.validate(), fa::ConfigError);
  hp = {};
  hp.alpha = 1.5;
  EXPECT_THROW(hp.validate(), fa::ConfigError);
}
