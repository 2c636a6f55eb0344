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

// freeanchor: generate | train | eval | gradcheck | trace_matching
//
// Exit codes: 0 success, 1 verification failure (gradcheck over tolerance,
// non-finite training step), 2 usage or input error.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "freeanchor/eval.hpp"
#include "freeanchor/gradcheck.hpp"
#include "freeanchor/synthdata.hpp"
#include "freeanchor/trainer.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace freeanchor;

namespace {

constexpr int kOk = 0;
constexpr int kVerifyFailed = 1;
constexpr int kUsage = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw UsageError(path + ": " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw UsageError("cannot write " + path.string());
  out << text;
}

std::string dump(const json& j) { return j.dump(2) + "\n"; }

// ---------------------------------------------------------------------------
// generate

struct GenerateArgs {
  std::string out_dir = ".";
  std::string config;
  std::optional<std::size_t> scenes;
  std::optional<std::uint64_t> seed;
  std::optional<double> slender_frac;
  std::optional<int> max_objects;
  std::optional<double> noise;
  bool crowded = false;
  bool gz = false;
  bool force = false;
};

int cmd_generate(const GenerateArgs& a) {
  DatasetSpec spec;
  if (!a.config.empty()) {
    const json j = read_json_file(a.config);
    spec = spec_from_json(j.contains("dataset") ? j.at("dataset") : j);
  }
  if (a.scenes) spec.num_scenes = *a.scenes;
  if (a.seed) spec.seed = *a.seed;
  if (a.slender_frac) {
    spec.frac_square = 1.0 - *a.slender_frac;
    spec.frac_slender_h = spec.frac_slender_v = 0.5 * *a.slender_frac;
  }
  if (a.max_objects) spec.max_objects = *a.max_objects;
  if (a.noise) spec.noise = *a.noise;
  if (a.crowded) spec.crowded = true;
  spec.validate();

  const fs::path dir(a.out_dir);
  const fs::path data = dir / (a.gz ? "dataset.jsonl.gz" : "dataset.jsonl");
  const fs::path manifest = dir / "manifest.json";
  if (!a.force && (fs::exists(data) || fs::exists(manifest)))
    throw UsageError("output " + dir.string() + " already holds a dataset; pass --force to overwrite");
  fs::create_directories(dir);

  json skipped = json::array();
  const auto scenes = generate_dataset(spec, [&](std::uint64_t id, std::size_t obj) {
    skipped.push_back({{"scene", id}, {"object", obj}});
  });
  save_dataset(scenes, data.string());

  std::size_t objects = 0, slender_h = 0, slender_v = 0;
  for (const auto& s : scenes)
    for (const auto& o : s.objects) {
      ++objects;
      if (is_slender(o.box)) (o.box.width() > o.box.height() ? slender_h : slender_v) += 1;
    }
  const std::size_t slender = slender_h + slender_v;
  json m;
  m["seed"] = spec.seed;
  m["num_scenes"] = scenes.size();
  m["num_objects"] = objects;
  m["composition"] = {{"square", objects - slender},
                      {"slender_horizontal", slender_h},
                      {"slender_vertical", slender_v},
                      {"slender_fraction", objects == 0 ? 0.0 : double(slender) / double(objects)}};
  m["dataset_file"] = data.filename().string();
  m["spec"] = spec_to_json(spec);
  m["skipped_objects"] = skipped;
  write_text(manifest, dump(m));
  if (!skipped.empty()) std::cerr << "generate: " << skipped.size() << " object(s) could not be placed; see manifest\n";
  std::cout << "wrote " << scenes.size() << " scenes to " << data.string() << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  std::string data;
  std::string out_dir;
  std::string config;
  std::string resume;
  std::optional<std::string> loss;
  std::optional<long> iterations;
  std::optional<std::uint64_t> seed;
  std::optional<double> lr;
  std::optional<double> momentum;
  std::optional<int> bag_size;
  long checkpoint_every = 0;
};

Checkpoint make_checkpoint(const TrainConfig& cfg, const TrainState& st) {
  Checkpoint c;
  c.params = st.params;
  if (st.velocity.same_shape(st.params)) c.velocity = st.velocity;
  c.layout = cfg.layout;
  c.seed = cfg.seed;
  c.iteration = st.iteration;
  c.meta = train_config_to_json(cfg);
  return c;
}

int cmd_train(const TrainArgs& a) {
  TrainConfig cfg;
  std::string data = a.data;
  std::string out_dir = a.out_dir;
  if (!a.config.empty()) {
    const json j = read_json_file(a.config);
    cfg = train_config_from_json(j);
    if (data.empty() && j.contains("dataset")) data = j.at("dataset").get<std::string>();
    if (out_dir.empty() && j.contains("output_dir")) out_dir = j.at("output_dir").get<std::string>();
  }
  if (data.empty()) throw UsageError("train: no dataset (--data or \"dataset\" in the config)");
  if (out_dir.empty()) throw UsageError("train: no output directory (--out or \"output_dir\" in the config)");
  if (a.loss) cfg.mode = loss_mode_from_string(*a.loss);
  if (a.iterations) cfg.iterations = *a.iterations;
  if (a.seed) cfg.seed = *a.seed;
  if (a.lr) cfg.hyper.learning_rate = *a.lr;
  if (a.momentum) cfg.momentum = *a.momentum;
  if (a.bag_size) cfg.hyper.bag_size = *a.bag_size;
  cfg.hyper.validate();
  cfg.threads = threads_from_env();

  const auto scenes = load_dataset(data);
  TrainState state = initial_state(cfg);
  if (!a.resume.empty()) {
    const Checkpoint c = load_checkpoint(a.resume);
    if (!c.params.same_shape(state.params))
      throw UsageError("train: checkpoint " + a.resume + " does not match the configured model dimensions");
    state.params = c.params;
    if (c.velocity) state.velocity = *c.velocity;
    state.iteration = c.iteration;
  }

  const fs::path dir(out_dir);
  fs::create_directories(dir);
  json effective = train_config_to_json(cfg);
  effective["dataset"] = data;
  effective["output_dir"] = out_dir;
  write_text(dir / "config.json", dump(effective));

  const fs::path log_path = dir / (a.resume.empty() ? "train_log.csv" : "train_log_resumed.csv");
  std::ofstream log(log_path, std::ios::trunc);
  if (!log) throw UsageError("cannot write " + log_path.string());
  log << log_header() << '\n';
  const auto res = train(cfg, scenes, state, [&](const TrainState& st, const LogRow& row) {
    log << format_log_row(row) << '\n';
    if (a.checkpoint_every > 0 && st.iteration % a.checkpoint_every == 0)
      save_checkpoint(make_checkpoint(cfg, st), (dir / ("checkpoint_" + std::to_string(st.iteration) + ".json")).string());
  });
  log.flush();
  if (res.failure) {
    const fs::path p = dir / "checkpoint_last_good.json";
    save_checkpoint(make_checkpoint(cfg, res.state), p.string());
    std::cerr << "train: " << *res.failure << "; last good state (iteration " << res.state.iteration << ") saved to "
              << p.string() << "\n";
    return kVerifyFailed;
  }
  save_checkpoint(make_checkpoint(cfg, res.state), (dir / "checkpoint_final.json").string());
  if (!res.log.empty())
    std::cout << "iterations " << res.log.front().iteration << ".." << res.log.back().iteration << ", loss "
              << res.log.front().total << " -> " << res.log.back().total << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------
// eval

int cmd_eval(const std::string& ckpt_path, const std::string& data, const std::string& out, const std::string& pr_csv) {
  const Checkpoint c = load_checkpoint(ckpt_path);
  const auto scenes = load_dataset(data);
  if (c.params.feature_dim() != kFeatureDim)
    throw UsageError("eval: checkpoint expects " + std::to_string(c.params.feature_dim()) + " features, this build extracts " +
                     std::to_string(kFeatureDim));
  for (const auto& s : scenes)
    for (const auto& o : s.objects)
      if (o.label >= static_cast<int>(c.params.num_classes()))
        throw UsageError("eval: scene " + std::to_string(s.id) + " has class " + std::to_string(o.label) +
                         " but the checkpoint predicts " + std::to_string(c.params.num_classes()) + " classes");
  const PostprocessOptions opt;
  const auto dets = run_detector(c.params, c.layout, scenes, opt);
  const EvalReport r = evaluate(dets.raw, dets.final, scenes, opt.nms_threshold, !pr_csv.empty());
  json j = report_to_json(r);
  j["checkpoint"] = {{"path", ckpt_path}, {"iteration", c.iteration}};
  j["dataset"] = data;
  if (out.empty()) {
    std::cout << dump(j);
  } else {
    write_text(out, dump(j));
  }
  if (!pr_csv.empty()) write_text(pr_csv, pr_curves_csv(r));
  return kOk;
}

// ---------------------------------------------------------------------------
// gradcheck

int cmd_gradcheck(std::uint64_t seed, std::size_t instances, double perturb, double tolerance, double corrupt,
                  const std::string& out) {
  GradcheckOptions opt;
  opt.step = perturb;
  opt.corrupt = corrupt;
  const auto s = gradcheck_suite(seed, instances, opt);
  const bool pass = s.max_rel_error() < tolerance;
  json j;
  j["seed"] = seed;
  j["instances"] = s.instances;
  j["perturb"] = perturb;
  j["tolerance"] = tolerance;
  j["floor"] = fd_noise_floor(perturb);
  j["blocks"] = json::array();
  std::printf("%-8s %10s %14s %14s %s\n", "block", "entries", "max_rel_err", "max_abs_err", "status");
  for (const auto& b : s.blocks) {
    const bool ok = b.max_rel_error < tolerance;
    std::printf("%-8s %10zu %14.3e %14.3e %s\n", b.name.c_str(), b.entries, b.max_rel_error, b.max_abs_error,
                ok ? "PASS" : "FAIL");
    j["blocks"].push_back({{"name", b.name},
                           {"entries", b.entries},
                           {"max_rel_error", b.max_rel_error},
                           {"max_abs_error", b.max_abs_error},
                           {"pass", ok}});
  }
  j["pass"] = pass;
  if (!out.empty()) write_text(out, dump(j));
  std::printf("%s: max relative error %.3e (tolerance %.1e, %zu instances)\n", pass ? "PASS" : "FAIL", s.max_rel_error(),
              tolerance, s.instances);
  return pass ? kOk : kVerifyFailed;
}

// ---------------------------------------------------------------------------
// trace_matching

int cmd_trace(const std::vector<std::string>& ckpts, const std::string& data, std::uint64_t scene_id,
              const std::string& out) {
  const auto scenes = load_dataset(data);
  const Scene* scene = nullptr;
  for (const auto& s : scenes)
    if (s.id == scene_id) scene = &s;
  if (!scene) throw UsageError("trace_matching: scene " + std::to_string(scene_id) + " is not in " + data);

  std::ostringstream csv;
  csv << "iteration,anchor,center_x,center_y,object,confidence,match_probability\n";
  char buf[256];
  for (const auto& path : ckpts) {
    const Checkpoint c = load_checkpoint(path);
    const HyperParams hp = c.meta.contains("hyper") ? hyper_from_json(c.meta.at("hyper")) : HyperParams{};
    if (scene->width != c.layout.image_width || scene->height != c.layout.image_height)
      throw UsageError("trace_matching: scene size does not match checkpoint " + path);
    const auto anchors = generate_anchors(c.layout);
    const auto pred = forward(c.params, extract_features(scene->width, scene->height, scene->raster, anchors));
    const auto boxes = scene->boxes();
    const auto bags = build_anchor_bags(boxes, anchors, hp.bag_size);
    const auto mp = compute_match_probabilities(bags, boxes, predicted_boxes(pred, anchors), hp.bg_iou_threshold);
    for (std::size_t b = 0; b < bags.size(); ++b) {
      const auto& obj = scene->objects[bags[b].object];
      for (std::size_t m = 0; m < bags[b].anchors.size(); ++m) {
        const std::size_t j = bags[b].anchors[m];
        const double conf = cls_confidence(pred.probs_of(j), obj.label) *
                            loc_confidence(pred.deltas[j], anchors[j], obj.box, hp.beta);
        std::snprintf(buf, sizeof buf, "%ld,%zu,%.6g,%.6g,%zu,%.10g,%.10g\n", c.iteration, j, anchors[j].cx(),
                      anchors[j].cy(), bags[b].object, conf, mp.positive[b][m]);
        csv << buf;
      }
    }
  }
  if (out.empty()) {
    std::cout << csv.str();
  } else {
    write_text(out, csv.str());
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Learned anchor matching on synthetic scenes"};
  app.require_subcommand(1);

  GenerateArgs g;
  auto* gen = app.add_subcommand("generate", "Write a synthetic dataset and manifest");
  gen->add_option("--out", g.out_dir, "Output directory")->capture_default_str();
  gen->add_option("--config", g.config, "Dataset spec JSON");
  gen->add_option("--scenes", g.scenes, "Number of scenes");
  gen->add_option("--seed", g.seed, "Generator seed");
  gen->add_option("--slender-frac", g.slender_frac, "Fraction of slender objects")->check(CLI::Range(0.0, 1.0));
  gen->add_option("--max-objects", g.max_objects, "Objects per scene upper bound");
  gen->add_option("--noise", g.noise, "Gaussian pixel noise sigma");
  gen->add_flag("--crowded", g.crowded, "Place objects near each other");
  gen->add_flag("--gz", g.gz, "gzip the dataset");
  gen->add_flag("--force", g.force, "Overwrite an existing dataset");

  TrainArgs t;
  auto* tr = app.add_subcommand("train", "Train the toy detector");
  tr->add_option("--data", t.data, "Dataset file");
  tr->add_option("--out", t.out_dir, "Output directory");
  tr->add_option("--config", t.config, "Training config JSON");
  tr->add_option("--resume", t.resume, "Checkpoint to resume from");
  tr->add_option("--loss", t.loss, "free_anchor or baseline_iou");
  tr->add_option("--iterations", t.iterations, "Total iterations");
  tr->add_option("--seed", t.seed, "Initialization and batching seed");
  tr->add_option("--lr", t.lr, "Base learning rate");
  tr->add_option("--momentum", t.momentum, "SGD momentum");
  tr->add_option("--bag-size", t.bag_size, "Anchors per bag");
  tr->add_option("--checkpoint-every", t.checkpoint_every, "Snapshot interval (0 = final only)");

  std::string e_ckpt, e_data, e_out, e_pr;
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint");
  ev->add_option("--checkpoint", e_ckpt, "Checkpoint JSON")->required();
  ev->add_option("--data", e_data, "Dataset file")->required();
  ev->add_option("--out", e_out, "Report JSON (stdout if omitted)");
  ev->add_option("--pr-csv", e_pr, "Write per-class PR curves");

  std::uint64_t gc_seed = 0;
  std::size_t gc_instances = 100;
  double gc_perturb = 1e-6, gc_tol = 1e-5, gc_corrupt = 0.0;
  std::string gc_out;
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of the loss and model gradients");
  gc->add_option("--seed", gc_seed, "Instance seed");
  gc->add_option("--instances", gc_instances, "Random instances");
  gc->add_option("--perturb", gc_perturb, "Central-difference step")->check(CLI::PositiveNumber);
  gc->add_option("--tolerance", gc_tol, "Max relative error");
  gc->add_option("--out", gc_out, "JSON result");
  gc->add_option("--corrupt", gc_corrupt, "Test hook: offset added to one analytic entry per block")->group("");

  std::vector<std::string> tm_ckpts;
  std::string tm_data, tm_out;
  std::uint64_t tm_scene = 0;
  auto* tm = app.add_subcommand("trace_matching", "Per-anchor confidence and match probability across checkpoints");
  tm->add_option("--checkpoints", tm_ckpts, "Checkpoint JSON files, in order")->required();
  tm->add_option("--data", tm_data, "Dataset file")->required();
  tm->add_option("--scene", tm_scene, "Scene id")->required();
  tm->add_option("--out", tm_out, "CSV output (stdout if omitted)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    if (*gen) return cmd_generate(g);
    if (*tr) return cmd_train(t);
    if (*ev) return cmd_eval(e_ckpt, e_data, e_out, e_pr);
    if (*gc) return cmd_gradcheck(gc_seed, gc_instances, gc_perturb, gc_tol, gc_corrupt, gc_out);
    if (*tm) return cmd_trace(tm_ckpts, tm_data, tm_scene, tm_out);
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kVerifyFailed;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  }
  return kUsage;
}
