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

// Paired learned-matching vs IoU-assignment runs on the three synthetic
// suites (slender, crowded, mixed). Both objectives share every setting
// except the loss.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "freeanchor/eval.hpp"
#include "freeanchor/synthdata.hpp"
#include "freeanchor/trainer.hpp"

namespace freeanchor {

enum class Suite { kSlender, kCrowded, kMixed };

inline std::string to_string(Suite s) {
  switch (s) {
    case Suite::kSlender: return "slender";
    case Suite::kCrowded: return "crowded";
    case Suite::kMixed: return "mixed";
  }
  return "?";
}

struct ExperimentSetup {
  DatasetSpec train_spec;
  DatasetSpec test_spec;
  TrainConfig train;
};

/// Desk-scale defaults. `seed` selects the train set, the test set, and the
/// initialization.
inline ExperimentSetup experiment_setup(Suite suite, std::uint64_t seed) {
  ExperimentSetup e;
  DatasetSpec& d = e.train_spec;
  d.num_scenes = 500;
  d.noise = 0.05;
  d.slender_aspect_max = 8.0;
  switch (suite) {
    case Suite::kSlender:
      d.frac_square = 0.0;
      d.frac_slender_h = d.frac_slender_v = 0.5;
      break;
    case Suite::kCrowded:
      d.frac_square = 0.7;
      d.frac_slender_h = d.frac_slender_v = 0.15;
      d.crowded = true;
      d.max_objects = 6;
      break;
    case Suite::kMixed:
      d.frac_square = 0.7;
      d.frac_slender_h = d.frac_slender_v = 0.15;
      break;
  }
  d.seed = mix_seed(seed, 0x7124);
  e.test_spec = d;
  e.test_spec.num_scenes = 200;
  e.test_spec.seed = mix_seed(seed, 0x7E57);

  TrainConfig& t = e.train;
  t.seed = seed;
  t.iterations = 2000;
  t.milestones = {1200, 1600};
  t.momentum = 0.9;
  t.hyper.learning_rate = 0.03;
  t.hyper.bag_size = 10;  // the toy layout has 480 anchors
  t.num_classes = d.num_classes;
  t.threads = threads_from_env();
  return e;
}

struct PairedResult {
  EvalReport free_anchor;
  EvalReport baseline;
};

inline EvalReport train_and_evaluate(const ExperimentSetup& e, LossMode mode, std::span<const Scene> train_set,
                                     std::span<const Scene> test_set) {
  TrainConfig cfg = e.train;
  cfg.mode = mode;
  const auto res = train(cfg, train_set, initial_state(cfg));
  if (res.failure) throw NumericError(to_string(mode) + " training failed: " + *res.failure);
  const auto dets = run_detector(res.state.params, cfg.layout, test_set);
  return evaluate(dets.raw, dets.final, test_set);
}

inline PairedResult run_paired(Suite suite, std::uint64_t seed) {
  const ExperimentSetup e = experiment_setup(suite, seed);
  const auto train_set = generate_dataset(e.train_spec);
  const auto test_set = generate_dataset(e.test_spec);
  return {train_and_evaluate(e, LossMode::kFreeAnchor, train_set, test_set),
          train_and_evaluate(e, LossMode::kBaselineIou, train_set, test_set)};
}

}  // namespace freeanchor
