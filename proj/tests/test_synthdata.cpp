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

#include <cmath>
#include <fstream>
#include <sstream>

#include "freeanchor/synthdata.hpp"
#include "test_util.hpp"

namespace fa = freeanchor;

namespace {

fa::DatasetSpec mixed_spec(std::size_t n, std::uint64_t seed) {
  fa::DatasetSpec s;
  s.num_scenes = n;
  s.seed = seed;
  s.frac_square = 0.6;
  s.frac_slender_h = s.frac_slender_v = 0.2;
  s.noise = 0.05;
  return s;
}

std::string read_all(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST(Generate, DeterministicPerSeed) {
  const auto a = fa::generate_dataset(mixed_spec(50, 7));
  const auto b = fa::generate_dataset(mixed_spec(50, 7));
  const auto c = fa::generate_dataset(mixed_spec(50, 8));
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
  // Scene i depends only on (seed, i).
  EXPECT_EQ(fa::generate_dataset(mixed_spec(10, 7))[9], a[9]);
}

TEST(Generate, ObjectCountsAndBounds) {
  auto spec = mixed_spec(300, 1);
  spec.min_objects = 1;
  spec.max_objects = 3;
  for (const auto& s : fa::generate_dataset(spec)) {
    EXPECT_GE(s.objects.size(), 1u);
    EXPECT_LE(s.objects.size(), 3u);
    EXPECT_EQ(s.raster.size(), 64u * 64u);
    for (const auto& o : s.objects) {
      EXPECT_GE(o.box.x1, 0);
      EXPECT_GE(o.box.y1, 0);
      EXPECT_LE(o.box.x2, 64);
      EXPECT_LE(o.box.y2, 64);
      EXPECT_EQ(o.box.x1, std::floor(o.box.x1));  // integer aligned
      EXPECT_GE(o.label, 0);
      EXPECT_LT(o.label, 3);
    }
  }
}

TEST(Generate, ShapeClassesRespectAspectThreshold) {
  auto spec = mixed_spec(200, 2);
  spec.frac_square = 0.0;
  spec.frac_slender_h = spec.frac_slender_v = 0.5;
  spec.slender_aspect_max = 8.0;
  std::size_t n = 0;
  for (const auto& s : fa::generate_dataset(spec))
    for (const auto& o : s.objects) {
      EXPECT_TRUE(fa::is_slender(o.box)) << o.box.width() << "x" << o.box.height();
      ++n;
    }
  EXPECT_GT(n, 200u);
  spec.frac_square = 1.0;
  spec.frac_slender_h = spec.frac_slender_v = 0.0;
  for (const auto& s : fa::generate_dataset(spec))
    for (const auto& o : s.objects) EXPECT_FALSE(fa::is_slender(o.box));
}

TEST(Generate, SlenderOrientationFollowsFractions) {
  auto spec = mixed_spec(200, 3);
  spec.frac_square = 0.0;
  spec.frac_slender_h = 1.0;
  spec.frac_slender_v = 0.0;
  for (const auto& s : fa::generate_dataset(spec))
    for (const auto& o : s.objects) EXPECT_GT(o.box.width(), o.box.height());
}

TEST(Generate, DisjointUnlessCrowded) {
  for (const auto& s : fa::generate_dataset(mixed_spec(200, 4)))
    for (std::size_t a = 0; a < s.objects.size(); ++a)
      for (std::size_t b = a + 1; b < s.objects.size(); ++b)
        EXPECT_EQ(fa::intersection_area(s.objects[a].box, s.objects[b].box), 0.0);
  auto spec = mixed_spec(200, 5);
  spec.crowded = true;
  spec.max_objects = 6;
  std::size_t overlapping = 0;
  for (const auto& s : fa::generate_dataset(spec))
    for (std::size_t a = 0; a < s.objects.size(); ++a)
      for (std::size_t b = a + 1; b < s.objects.size(); ++b) {
        const double v = fa::iou(s.objects[a].box, s.objects[b].box);
        EXPECT_LE(v, 0.7);
        overlapping += v > 0.0 ? 1 : 0;
      }
  EXPECT_GT(overlapping, 50u);
}

TEST(Generate, ClassMixWithinThreeSigma) {
  const auto scenes = fa::generate_dataset(mixed_spec(1000, 6));
  std::array<double, 3> count{};
  double n = 0;
  for (const auto& s : scenes)
    for (const auto& o : s.objects) {
      count[static_cast<std::size_t>(o.label)] += 1;
      n += 1;
    }
  const double p = 1.0 / 3.0, sigma = std::sqrt(n * p * (1 - p));
  for (double c : count) EXPECT_LE(std::abs(c - n * p), 3 * sigma);
}

TEST(Generate, ClassesAreRecoverableFromPixels) {
  // Noise-free: the object's mean intensity equals the contrast and the
  // stripe direction identifies the class.
  auto spec = mixed_spec(100, 9);
  spec.noise = 0.0;
  spec.frac_square = 1.0;
  spec.frac_slender_h = spec.frac_slender_v = 0.0;
  for (const auto& s : fa::generate_dataset(spec)) {
    if (s.objects.size() != 1) continue;
    const auto& o = s.objects[0];
    double sum = 0, dx = 0, dy = 0, n = 0;
    for (int y = static_cast<int>(o.box.y1); y + 1 < static_cast<int>(o.box.y2); ++y)
      for (int x = static_cast<int>(o.box.x1); x + 1 < static_cast<int>(o.box.x2); ++x) {
        const auto at = [&](int xx, int yy) { return s.raster[static_cast<std::size_t>(yy * 64 + xx)] / 255.0; };
        sum += at(x, y);
        dx += std::abs(at(x + 1, y) - at(x, y));
        dy += std::abs(at(x, y + 1) - at(x, y));
        n += 1;
      }
    EXPECT_NEAR(sum / n, 0.8, 0.03);
    const int predicted = (dx / n < 0.05 && dy / n < 0.05) ? 0 : (dy > dx ? 1 : 2);
    EXPECT_EQ(predicted, o.label);
  }
}

TEST(Generate, SkipLoggerFiresWhenPlacementFails) {
  fa::DatasetSpec spec;
  spec.num_scenes = 5;
  spec.min_objects = spec.max_objects = 12;  // cannot fit disjointly
  spec.scale_min = 20;
  spec.scale_max = 24;
  spec.max_retries = 20;
  std::size_t skipped = 0;
  const auto scenes = fa::generate_dataset(spec, [&](std::uint64_t, std::size_t) { ++skipped; });
  std::size_t placed = 0;
  for (const auto& s : scenes) placed += s.objects.size();
  EXPECT_GT(skipped, 0u);
  EXPECT_EQ(placed + skipped, 60u);
}

TEST(Spec, ValidationAndJsonRoundTrip) {
  auto s = mixed_spec(10, 3);
  s.crowded = true;
  s.slender_aspect_max = 7;
  const auto back = fa::spec_from_json(fa::spec_to_json(s));
  EXPECT_EQ(fa::spec_to_json(back), fa::spec_to_json(s));
  s.frac_square = 0.9;
  EXPECT_THROW(s.validate(), fa::ConfigError);
  s = mixed_spec(10, 3);
  s.max_gt_iou = 0.9;
  EXPECT_THROW(s.validate(), fa::ConfigError);
  s = mixed_spec(10, 3);
  s.square_aspect_max = 3.5;
  EXPECT_THROW(s.validate(), fa::ConfigError);
}

TEST(Serialization, Base64RoundTripAndStrictness) {
  for (std::size_t n = 0; n < 10; ++n) {
    std::vector<std::uint8_t> in(n);
    for (std::size_t i = 0; i < n; ++i) in[i] = static_cast<std::uint8_t>(i * 37 + 250);
    std::vector<std::uint8_t> out;
    ASSERT_TRUE(fa::detail::base64_decode(fa::detail::base64_encode(in), out));
    EXPECT_EQ(out, in);
  }
  EXPECT_EQ(fa::detail::base64_encode(std::vector<std::uint8_t>{'M', 'a', 'n'}), "TWFu");
  std::vector<std::uint8_t> out;
  EXPECT_FALSE(fa::detail::base64_decode("TWF", out));
  EXPECT_FALSE(fa::detail::base64_decode("TW=u", out));
  EXPECT_FALSE(fa::detail::base64_decode("TW*u", out));
}

TEST(Serialization, PlainAndGzipRoundTrip) {
  const auto dir = test::temp_dir("data");
  const auto scenes = fa::generate_dataset(mixed_spec(40, 11));
  for (const char* name : {"d.jsonl", "d.jsonl.gz"}) {
    const auto p = (dir / name).string();
    fa::save_dataset(scenes, p);
    EXPECT_EQ(fa::load_dataset(p), scenes) << name;
  }
  // Same content, deterministic bytes.
  fa::save_dataset(scenes, (dir / "e.jsonl").string());
  EXPECT_EQ(read_all(dir / "d.jsonl"), read_all(dir / "e.jsonl"));
}

TEST(Serialization, TruncatedRasterNamesLineAndScene) {
  const auto dir = test::temp_dir("data_bad");
  const auto scenes = fa::generate_dataset(mixed_spec(3, 12));
  fa::save_dataset(scenes, (dir / "ok.jsonl").string());
  std::string text = read_all(dir / "ok.jsonl");
  // Drop four base64 characters from the second line's raster.
  const auto line2 = text.find('\n') + 1;
  const auto pos = text.find("\"raster\":\"", line2) + 10;
  text.erase(pos, 4);
  {
    std::ofstream(dir / "bad.jsonl", std::ios::binary) << text;
  }
  try {
    fa::load_dataset((dir / "bad.jsonl").string());
    FAIL() << "expected FormatError";
  } catch (const fa::FormatError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("line 2"), std::string::npos) << msg;
    EXPECT_NE(msg.find("scene 1"), std::string::npos) << msg;
  }
  {
    std::ofstream(dir / "bad.jsonl.gz", std::ios::binary) << "not gzip at all";
  }
  EXPECT_THROW(fa::load_dataset((dir / "bad.jsonl.gz").string()), fa::FormatError);
  EXPECT_THROW(fa::load_dataset((dir / "missing.jsonl").string()), fa::FormatError);
}
