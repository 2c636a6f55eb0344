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

// Toy detector: pooled per-anchor raster statistics feeding a shared
// two-layer tanh perceptron that emits k class logits and 4 box deltas.

#pragma once

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "freeanchor/errors.hpp"
#include "freeanchor/geometry.hpp"
#include "freeanchor/loss.hpp"
#include "json.hpp"

namespace freeanchor {

using FeatureMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// ---------------------------------------------------------------------------
// Features

inline constexpr int kFeatureGrid = 4;       // inner grid is kFeatureGrid x kFeatureGrid
inline constexpr int kFeatureChannels = 3;   // intensity, |d/dx|, |d/dy|
inline constexpr int kFeatureRegions = kFeatureGrid * kFeatureGrid + 4;
inline constexpr std::size_t kFeatureDim = kFeatureRegions * kFeatureChannels + 2;

/// Zero-padded summed-area tables of the three feature channels.
class IntegralChannels {
 public:
  IntegralChannels(int width, int height, std::span<const std::uint8_t> pixels) : w_(width), h_(height) {
    if (width <= 0 || height <= 0 || pixels.size() != static_cast<std::size_t>(width) * static_cast<std::size_t>(height))
      throw ConfigError("features: raster size does not match image dimensions");
    for (auto& t : tables_) t.assign(static_cast<std::size_t>(w_ + 1) * static_cast<std::size_t>(h_ + 1), 0.0);
    auto px = [&](int x, int y) -> double {
      if (x < 0 || y < 0 || x >= w_ || y >= h_) return 0.0;
      return pixels[static_cast<std::size_t>(y) * static_cast<std::size_t>(w_) + static_cast<std::size_t>(x)] / 255.0;
    };
    for (int y = 0; y < h_; ++y) {
      std::array<double, kFeatureChannels> row{};
      for (int x = 0; x < w_; ++x) {
        const double v = px(x, y);
        row[0] += v;
        row[1] += std::abs(px(x + 1, y) - v);
        row[2] += std::abs(px(x, y + 1) - v);
        for (int c = 0; c < kFeatureChannels; ++c) at(c, x + 1, y + 1) = at(c, x + 1, y) + row[static_cast<std::size_t>(c)];
      }
    }
  }

  /// Sum of channel c over pixels [x0, x1) x [y0, y1); pixels outside the
  /// image count as zero.
  double sum(int c, int x0, int y0, int x1, int y1) const {
    x0 = std::clamp(x0, 0, w_);
    x1 = std::clamp(x1, 0, w_);
    y0 = std::clamp(y0, 0, h_);
    y1 = std::clamp(y1, 0, h_);
    if (x1 <= x0 || y1 <= y0) return 0.0;
    return at(c, x1, y1) - at(c, x0, y1) - at(c, x1, y0) + at(c, x0, y0);
  }

 private:
  double& at(int c, int x, int y) {
    return tables_[static_cast<std::size_t>(c)][static_cast<std::size_t>(y) * static_cast<std::size_t>(w_ + 1) + static_cast<std::size_t>(x)];
  }
  double at(int c, int x, int y) const {
    return tables_[static_cast<std::size_t>(c)][static_cast<std::size_t>(y) * static_cast<std::size_t>(w_ + 1) + static_cast<std::size_t>(x)];
  }

  int w_, h_;
  std::array<std::vector<double>, kFeatureChannels> tables_;
};

namespace detail {
inline int pix(double v) { return static_cast<int>(std::floor(v + 0.5)); }
}  // namespace detail

/// One row per anchor: channel means over a 4x4 grid inside the anchor and
/// four half-size context strips around it, then log(w/32), log(h/32).
/// Region means divide by the unclipped region area.
inline FeatureMatrix extract_features(int width, int height, std::span<const std::uint8_t> pixels,
                                      std::span<const BBox> anchors) {
  const IntegralChannels integral(width, height, pixels);
  FeatureMatrix f(static_cast<Eigen::Index>(anchors.size()), static_cast<Eigen::Index>(kFeatureDim));
  for (std::size_t j = 0; j < anchors.size(); ++j) {
    const BBox& a = anchors[j];
    const double w = a.width(), h = a.height();
    std::array<int, kFeatureGrid + 1> xs{}, ys{};
    for (int q = 0; q <= kFeatureGrid; ++q) {
      xs[static_cast<std::size_t>(q)] = detail::pix(a.x1 + q * w / kFeatureGrid);
      ys[static_cast<std::size_t>(q)] = detail::pix(a.y1 + q * h / kFeatureGrid);
    }
    const int cx0 = detail::pix(a.x1 - 0.5 * w), cx1 = detail::pix(a.x2 + 0.5 * w);
    const int cy0 = detail::pix(a.y1 - 0.5 * h), cy1 = detail::pix(a.y2 + 0.5 * h);
    std::array<std::array<int, 4>, kFeatureRegions> regions{};
    std::size_t r = 0;
    for (int gy = 0; gy < kFeatureGrid; ++gy)
      for (int gx = 0; gx < kFeatureGrid; ++gx)
        regions[r++] = {xs[static_cast<std::size_t>(gx)], ys[static_cast<std::size_t>(gy)],
                        xs[static_cast<std::size_t>(gx + 1)], ys[static_cast<std::size_t>(gy + 1)]};
    const int ix0 = xs.front(), ix1 = xs.back(), iy0 = ys.front(), iy1 = ys.back();
    regions[r++] = {cx0, iy0, ix0, iy1};  // left
    regions[r++] = {ix1, iy0, cx1, iy1};  // right
    regions[r++] = {ix0, cy0, ix1, iy0};  // top
    regions[r++] = {ix0, iy1, ix1, cy1};  // bottom

    Eigen::Index col = 0;
    for (const auto& reg : regions) {
      const double area = static_cast<double>(std::max(1, (reg[2] - reg[0]) * (reg[3] - reg[1])));
      for (int c = 0; c < kFeatureChannels; ++c)
        f(static_cast<Eigen::Index>(j), col++) = integral.sum(c, reg[0], reg[1], reg[2], reg[3]) / area;
    }
    f(static_cast<Eigen::Index>(j), col++) = std::log(w / 32.0);
    f(static_cast<Eigen::Index>(j), col++) = std::log(h / 32.0);
  }
  return f;
}

// ---------------------------------------------------------------------------
// Parameters

struct ModelParams {
  Eigen::MatrixXd w1;  // hidden x d
  Eigen::VectorXd b1;
  Eigen::MatrixXd w2;  // (k + 4) x hidden; rows [0, k) are class logits
  Eigen::VectorXd b2;

  std::size_t feature_dim() const { return static_cast<std::size_t>(w1.cols()); }
  std::size_t hidden() const { return static_cast<std::size_t>(w1.rows()); }
  std::size_t output_dim() const { return static_cast<std::size_t>(w2.rows()); }
  std::size_t num_classes() const { return output_dim() - 4; }

  static ModelParams zeros(std::size_t d, std::size_t hidden, std::size_t k) {
    ModelParams p;
    const auto D = static_cast<Eigen::Index>(d), H = static_cast<Eigen::Index>(hidden),
               O = static_cast<Eigen::Index>(k + 4);
    p.w1 = Eigen::MatrixXd::Zero(H, D);
    p.b1 = Eigen::VectorXd::Zero(H);
    p.w2 = Eigen::MatrixXd::Zero(O, H);
    p.b2 = Eigen::VectorXd::Zero(O);
    return p;
  }

  static constexpr std::array<const char*, 4> kBlockNames{"w1", "b1", "w2", "b2"};

  /// Parameter blocks in fixed order w1, b1, w2, b2.
  std::array<std::span<double>, 4> blocks() {
    return {std::span<double>(w1.data(), static_cast<std::size_t>(w1.size())),
            std::span<double>(b1.data(), static_cast<std::size_t>(b1.size())),
            std::span<double>(w2.data(), static_cast<std::size_t>(w2.size())),
            std::span<double>(b2.data(), static_cast<std::size_t>(b2.size()))};
  }
  std::array<std::span<const double>, 4> blocks() const {
    return {std::span<const double>(w1.data(), static_cast<std::size_t>(w1.size())),
            std::span<const double>(b1.data(), static_cast<std::size_t>(b1.size())),
            std::span<const double>(w2.data(), static_cast<std::size_t>(w2.size())),
            std::span<const double>(b2.data(), static_cast<std::size_t>(b2.size()))};
  }

  bool same_shape(const ModelParams& o) const {
    return w1.rows() == o.w1.rows() && w1.cols() == o.w1.cols() && b1.size() == o.b1.size() &&
           w2.rows() == o.w2.rows() && w2.cols() == o.w2.cols() && b2.size() == o.b2.size();
  }

  friend bool operator==(const ModelParams& a, const ModelParams& b) {
    return a.same_shape(b) && a.w1 == b.w1 && a.b1 == b.b1 && a.w2 == b.w2 && a.b2 == b.b2;
  }
};

/// Classification bias whose sigmoid equals the prior rho.
inline double prior_bias(double rho) { return -std::log((1.0 - rho) / rho); }

inline ModelParams init_params(std::size_t d, std::size_t k, double rho, std::uint64_t seed, std::size_t hidden = 32) {
  if (d < 1 || k < 1 || hidden < 1) throw ConfigError("init_params: dimensions must be at least 1");
  if (!(rho > 0.0 && rho < 1.0)) throw ConfigError("init_params: rho must lie in (0, 1)");
  ModelParams p = ModelParams::zeros(d, hidden, k);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n1(0.0, 1.0 / std::sqrt(static_cast<double>(d)));
  std::normal_distribution<double> n2(0.0, 0.01);
  for (double& v : p.blocks()[0]) v = n1(rng);
  for (double& v : p.blocks()[2]) v = n2(rng);
  const double b = prior_bias(rho);
  for (std::size_t c = 0; c < k; ++c) p.b2(static_cast<Eigen::Index>(c)) = b;
  return p;
}

// ---------------------------------------------------------------------------
// Forward / backward

/// Cached activations of one forward pass.
struct ForwardCache {
  FeatureMatrix hidden;  // tanh activations, anchors x hidden
};

/// Hidden-layer pre-activation features * w1^T + b1.
inline FeatureMatrix preactivation(const ModelParams& p, const FeatureMatrix& features) {
  if (static_cast<std::size_t>(features.cols()) != p.feature_dim())
    throw ConfigError("forward: feature dimension " + std::to_string(features.cols()) + " does not match model " +
                      std::to_string(p.feature_dim()));
  FeatureMatrix pre = features * p.w1.transpose();
  pre.rowwise() += p.b1.transpose();
  return pre;
}

inline Predictions forward(const ModelParams& p, const FeatureMatrix& features, ForwardCache* cache = nullptr) {
  FeatureMatrix act = preactivation(p, features).array().tanh().matrix();
  FeatureMatrix out = act * p.w2.transpose();
  out.rowwise() += p.b2.transpose();
  const std::size_t n = static_cast<std::size_t>(features.rows());
  const std::size_t k = p.num_classes();
  Predictions pred(n, k);
  for (std::size_t j = 0; j < n; ++j) {
    const auto r = static_cast<Eigen::Index>(j);
    for (std::size_t c = 0; c < k; ++c) pred.logit(j, c) = out(r, static_cast<Eigen::Index>(c));
    for (std::size_t d = 0; d < 4; ++d) pred.deltas[j][d] = out(r, static_cast<Eigen::Index>(k + d));
  }
  if (cache) cache->hidden = std::move(act);
  return pred;
}

/// Chain rule through the head given d loss / d outputs.
inline ModelParams backward(const ModelParams& p, const FeatureMatrix& features, const ForwardCache& cache,
                            const OutputGradients& upstream) {
  const std::size_t n = static_cast<std::size_t>(features.rows());
  const std::size_t k = p.num_classes();
  if (upstream.deltas.size() != n || upstream.num_classes != k)
    throw ConfigError("backward: upstream gradient shape does not match forward pass");
  FeatureMatrix g(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(k + 4));
  for (std::size_t j = 0; j < n; ++j) {
    const auto r = static_cast<Eigen::Index>(j);
    for (std::size_t c = 0; c < k; ++c) g(r, static_cast<Eigen::Index>(c)) = upstream.logit(j, c);
    for (std::size_t d = 0; d < 4; ++d) g(r, static_cast<Eigen::Index>(k + d)) = upstream.deltas[j][d];
  }
  ModelParams grad;
  grad.w2 = g.transpose() * cache.hidden;
  grad.b2 = g.colwise().sum().transpose();
  FeatureMatrix dpre = (g * p.w2).array() * (1.0 - cache.hidden.array().square());
  grad.w1 = dpre.transpose() * features;
  grad.b1 = dpre.colwise().sum().transpose();
  return grad;
}

/// theta <- theta - lr * (grad + momentum buffer); momentum is off when
/// `velocity` is null or `momentum` is zero.
inline void sgd_step(ModelParams& params, const ModelParams& grads, double lr, double momentum = 0.0,
                     ModelParams* velocity = nullptr) {
  if (!params.same_shape(grads)) throw ConfigError("sgd_step: gradient shape does not match parameters");
  auto gb = grads.blocks();
  for (std::size_t b = 0; b < gb.size(); ++b)
    for (std::size_t i = 0; i < gb[b].size(); ++i)
      if (!std::isfinite(gb[b][i]))
        throw NumericError(std::string("sgd_step: non-finite gradient in block ") + ModelParams::kBlockNames[b] +
                           " at index " + std::to_string(i));
  auto pb = params.blocks();
  if (velocity && momentum != 0.0) {
    if (!velocity->same_shape(params)) *velocity = ModelParams::zeros(params.feature_dim(), params.hidden(), params.num_classes());
    auto vb = velocity->blocks();
    for (std::size_t b = 0; b < pb.size(); ++b)
      for (std::size_t i = 0; i < pb[b].size(); ++i) {
        vb[b][i] = momentum * vb[b][i] + gb[b][i];
        pb[b][i] -= lr * vb[b][i];
      }
  } else {
    for (std::size_t b = 0; b < pb.size(); ++b)
      for (std::size_t i = 0; i < pb[b].size(); ++i) pb[b][i] -= lr * gb[b][i];
  }
  // Overflow in the update itself. params is left partly updated; train()
  // steps a copy.
  for (std::size_t b = 0; b < pb.size(); ++b)
    for (std::size_t i = 0; i < pb[b].size(); ++i)
      if (!std::isfinite(pb[b][i]))
        throw NumericError(std::string("sgd_step: update overflowed in block ") + ModelParams::kBlockNames[b] +
                           " at index " + std::to_string(i));
}

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  ModelParams params;
  std::optional<ModelParams> velocity;
  AnchorLayout layout;
  std::uint64_t seed = 0;
  long iteration = 0;
  nlohmann::json meta = nlohmann::json::object();  // training config echo
};

namespace detail {

inline nlohmann::json params_to_json(const ModelParams& p) {
  nlohmann::json j;
  const auto blocks = p.blocks();
  for (std::size_t b = 0; b < blocks.size(); ++b)
    j[ModelParams::kBlockNames[b]] = std::vector<double>(blocks[b].begin(), blocks[b].end());
  return j;
}

inline ModelParams params_from_json(const nlohmann::json& j, std::size_t d, std::size_t hidden, std::size_t k) {
  ModelParams p = ModelParams::zeros(d, hidden, k);
  auto blocks = p.blocks();
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    const auto v = j.at(ModelParams::kBlockNames[b]).get<std::vector<double>>();
    if (v.size() != blocks[b].size())
      throw FormatError(std::string("checkpoint: block ") + ModelParams::kBlockNames[b] + " has " +
                        std::to_string(v.size()) + " values, expected " + std::to_string(blocks[b].size()));
    std::copy(v.begin(), v.end(), blocks[b].begin());
  }
  return p;
}

}  // namespace detail

inline nlohmann::json layout_to_json(const AnchorLayout& l) {
  nlohmann::json j;
  j["image_width"] = l.image_width;
  j["image_height"] = l.image_height;
  j["ratios"] = l.ratios;
  j["levels"] = nlohmann::json::array();
  for (const auto& lv : l.levels) j["levels"].push_back({{"stride", lv.stride}, {"sizes", lv.sizes}});
  return j;
}

inline AnchorLayout layout_from_json(const nlohmann::json& j) {
  AnchorLayout l;
  l.image_width = j.at("image_width").get<int>();
  l.image_height = j.at("image_height").get<int>();
  l.ratios = j.at("ratios").get<std::vector<double>>();
  for (const auto& lv : j.at("levels")) l.levels.push_back({lv.at("stride").get<int>(), lv.at("sizes").get<std::vector<double>>()});
  l.validate();
  return l;
}

inline nlohmann::json checkpoint_to_json(const Checkpoint& c) {
  nlohmann::json j;
  j["format"] = "freeanchor-checkpoint";
  j["version"] = kCheckpointVersion;
  j["dims"] = {{"feature_dim", c.params.feature_dim()}, {"hidden", c.params.hidden()}, {"num_classes", c.params.num_classes()}};
  j["seed"] = c.seed;
  j["iteration"] = c.iteration;
  j["layout"] = layout_to_json(c.layout);
  j["params"] = detail::params_to_json(c.params);
  if (c.velocity) j["velocity"] = detail::params_to_json(*c.velocity);
  j["meta"] = c.meta;
  return j;
}

inline Checkpoint checkpoint_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format").get<std::string>() != "freeanchor-checkpoint") throw FormatError("checkpoint: unknown format tag");
    if (j.at("version").get<int>() != kCheckpointVersion)
      throw FormatError("checkpoint: unsupported version " + std::to_string(j.at("version").get<int>()));
    const auto& dims = j.at("dims");
    const auto d = dims.at("feature_dim").get<std::size_t>();
    const auto h = dims.at("hidden").get<std::size_t>();
    const auto k = dims.at("num_classes").get<std::size_t>();
    Checkpoint c;
    c.params = detail::params_from_json(j.at("params"), d, h, k);
    if (j.contains("velocity")) c.velocity = detail::params_from_json(j.at("velocity"), d, h, k);
    c.layout = layout_from_json(j.at("layout"));
    c.seed = j.at("seed").get<std::uint64_t>();
    c.iteration = j.at("iteration").get<long>();
    if (j.contains("meta")) c.meta = j.at("meta");
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: ") + e.what());
  }
}

inline void save_checkpoint(const Checkpoint& c, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("checkpoint: cannot open " + path + " for writing");
  out << checkpoint_to_json(c).dump() << '\n';
  if (!out) throw FormatError("checkpoint: write to " + path + " failed");
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("checkpoint: cannot open " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("checkpoint: " + path + ": " + e.what());
  }
  return checkpoint_from_json(j);
}

}  // namespace freeanchor
