// Command-line driver: dataset generation, both training stages, rendering
// and evaluation. Exit codes follow irt::ErrorCode.

#include <CLI11.hpp>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>

#include "irt/dataset.hpp"
#include "irt/errors.hpp"
#include "irt/metrics.hpp"
#include "irt/scene_oracle.hpp"
#include "irt/trainer.hpp"

namespace fs = std::filesystem;
using namespace irt;

namespace {

struct Globals {
  std::optional<std::uint64_t> seed;
  std::string config;
  std::string out = ".";
};

RunConfig run_config(const Globals& g) {
  RunConfig c = g.config.empty() ? micro_town_config() : load_run_config(g.config);
  if (g.seed) c.train.seed = *g.seed;
  return c;
}

std::string seg_name(Variant v) { return "seg-" + variant_name(v); }

void write_config_snapshot(const RunConfig& c, const fs::path& path) {
  std::ofstream(path) << nlohmann::json(c).dump(2) << "\n";
}

int make_scene(const Globals& g, int size) {
  MicroTownOptions o;
  o.width = o.height = size;
  const SceneOracle scene = micro_town();
  const DatasetManifest m = make_scene_dataset(scene, micro_town_rig(scene, o), g.out);
  std::cout << "wrote " << m.views.size() << " views (" << m.labeled_views().size()
            << " labeled) to " << g.out << "\n";
  return 0;
}

int train_color_cmd(const Globals& g, const std::string& data_dir, std::optional<std::int64_t> iters,
                    const std::string& resume) {
  RunConfig c = run_config(g);
  if (iters) c.train.iterations_1 = *iters;
  const Dataset data = load_dataset(data_dir);
  const fs::path out = g.out;
  fs::create_directories(out / "color");
  std::optional<Checkpoint> from;
  if (!resume.empty()) from = load_checkpoint(resume);
  std::ofstream log(out / "color.log", resume.empty() ? std::ios::trunc : std::ios::app);
  TrainOptions opt{out / "color", &log, from ? &*from : nullptr};
  const StageOutcome r = train_color(data, c, opt);
  save_checkpoint(r.checkpoint, out / "color.ckpt");
  write_config_snapshot(c, out / "color.config.json");
  std::cout << "color checkpoint: " << (out / "color.ckpt").string();
  if (!r.evals.empty()) std::cout << ", held-out PSNR " << r.evals.back().metric << " dB";
  std::cout << "\n";
  return 0;
}

int train_seg_cmd(const Globals& g, const std::string& data_dir, const std::string& variant,
                  std::string color, std::optional<std::int64_t> iters, const std::string& resume) {
  RunConfig c = run_config(g);
  c.train.variant = parse_variant(variant);
  if (iters) c.train.iterations_2 = *iters;
  const fs::path out = g.out;
  if (color.empty()) color = (out / "color.ckpt").string();
  if (!fs::exists(color)) {
    fail(ErrorCode::kIo, "color checkpoint " + color + " not found; run train-color first");
  }
  const Checkpoint color_ckpt = load_checkpoint(color);
  const Dataset data = load_dataset(data_dir);
  const std::string name = seg_name(c.train.variant);
  fs::create_directories(out / name);
  std::optional<Checkpoint> from;
  if (!resume.empty()) from = load_checkpoint(resume);
  std::ofstream log(out / (name + ".log"), resume.empty() ? std::ios::trunc : std::ios::app);
  TrainOptions opt{out / name, &log, from ? &*from : nullptr};
  const StageOutcome r = train_seg(data, color_ckpt, c, opt);
  save_checkpoint(r.checkpoint, out / (name + ".ckpt"));
  std::cout << "seg checkpoint: " << (out / (name + ".ckpt")).string();
  if (!r.evals.empty()) std::cout << ", held-out mIoU " << r.evals.back().metric;
  std::cout << "\n";
  return 0;
}

int render_cmd(const Globals& g, const std::string& data_dir, const std::string& ckpt_path,
               const std::string& mode_name, const std::string& which) {
  const RenderMode mode = parse_render_mode(mode_name);
  const Dataset data = load_dataset(data_dir);
  const Renderer renderer(load_checkpoint(ckpt_path), data.manifest);
  std::vector<std::size_t> views;
  if (which == "heldout") {
    views = data.manifest.views_in(Split::kHoldout);
  } else if (which == "train") {
    views = data.manifest.views_in(Split::kTrain);
  } else if (which == "all") {
    for (std::size_t v = 0; v < data.manifest.views.size(); ++v) views.push_back(v);
  } else {
    fail(ErrorCode::kUsage, "--views must be heldout, train or all");
  }
  const fs::path out = g.out;
  fs::create_directories(out);
  const auto& m = data.manifest;
  for (std::size_t v : views) {
    const RenderedFrame f = renderer.render(m.views[v].camera, mode, &data.images[v]);
    char stem[32];
    std::snprintf(stem, sizeof stem, "%04zu", v);
    if (mode == RenderMode::kRgb) {
      write_ppm(out / (std::string(stem) + ".ppm"), {f.width, f.height, f.rgb});
    } else if (mode == RenderMode::kDepth) {
      LabelMap d{f.width, f.height, {}};
      for (double z : f.depth) {
        const double t = std::clamp((z - m.near) / (m.far - m.near), 0.0, 1.0);
        d.ids.push_back(static_cast<int>(std::lround(255.0 * t)));
      }
      write_pgm(out / (std::string(stem) + "-depth.pgm"), d);
    } else {
      write_pgm(out / (std::string(stem) + "-label.pgm"), {f.width, f.height, f.labels});
      Image colored{f.width, f.height, {}};
      for (int id : f.labels) {
        for (int k = 0; k < 3; ++k) colored.rgb.push_back(m.palette[static_cast<std::size_t>(id)].rgb[k] / 255.0);
      }
      write_ppm(out / (std::string(stem) + "-label.ppm"), colored);
    }
  }
  std::cout << "rendered " << views.size() << " views (" << mode_name << ") to " << out.string() << "\n";
  return 0;
}

int describe(const std::string& data_dir) {
  const Dataset data = load_dataset(data_dir);
  const DatasetManifest& m = data.manifest;
  std::cout << "scene: " << m.scene << "\n"
            << "views: " << m.views.size() << " (" << m.views_in(Split::kTrain).size() << " train, "
            << m.views_in(Split::kHoldout).size() << " held-out)\n"
            << "labeled views: " << m.labeled_views().size() << "\n"
            << "near/far: " << m.near << " " << m.far << "\n"
            << "bounds: [" << m.bounds_min.transpose() << "] .. [" << m.bounds_max.transpose() << "]\n"
            << "classes: " << m.num_classes() << "\n";
  for (const auto& p : m.palette) {
    std::cout << "  " << p.id << " " << p.name << (p.id == m.background_class ? " (background)" : "")
              << "\n";
  }
  if (!m.views.empty()) {
    std::cout << "image size: " << m.views[0].camera.width << "x" << m.views[0].camera.height << "\n";
  }
  return 0;
}

int eval_cmd(const Globals& g, const std::string& data_dir, bool confusion) {
  const Dataset data = load_dataset(data_dir);
  const fs::path run = g.out;
  const auto& palette = data.manifest.palette;
  if (fs::exists(run / "color.ckpt")) {
    std::cout << "# held-out PSNR " << heldout_psnr(data, load_checkpoint(run / "color.ckpt")) << " dB\n";
  }
  std::map<std::string, double> table;
  for (Variant v : kAllVariants) {
    const fs::path p = run / (seg_name(v) + ".ckpt");
    if (!fs::exists(p)) continue;
    const ConfusionMatrix cm = heldout_confusion(data, load_checkpoint(p));
    const MiouResult r = miou(cm);
    table[variant_name(v)] = r.mean;
    std::cout << "# variant " << variant_name(v) << "\nclass,name,iou\n";
    for (std::size_t c = 0; c < r.per_class.size(); ++c) {
      std::cout << c << "," << palette[c].name << ",";
      if (std::isnan(r.per_class[c])) {
        std::cout << "nan\n";
      } else {
        std::cout << r.per_class[c] << "\n";
      }
    }
    if (confusion) {
      std::cout << "# confusion " << variant_name(v) << " (rows truth, columns prediction)\n";
      for (std::size_t t = 0; t < cm.num_classes(); ++t) {
        for (std::size_t q = 0; q < cm.num_classes(); ++q) std::cout << (q ? " " : "") << cm.at(t, q);
        std::cout << "\n";
      }
    }
  }
  if (table.empty()) {
    if (!fs::exists(run / "color.ckpt")) {
      fail(ErrorCode::kIo, "no checkpoints found under " + run.string());
    }
    return 0;
  }
  std::cout << "# held-out mIoU\nmethod,miou\n";
  for (Variant v : kAllVariants) {
    const auto it = table.find(variant_name(v));
    std::cout << "IRT(" << variant_name(v) << "),";
    if (it == table.end()) {
      std::cout << "-\n";
    } else {
      std::cout << it->second << "\n";
    }
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Implicit ray-transformer pipeline"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--seed", g.seed, "Seed for initialization and sampling");
  app.add_option("--config", g.config, "JSON run config (defaults to the micro-town config)");
  app.add_option("--out", g.out, "Output directory (dataset, run or render directory)");

  int size = 40;
  auto* make = app.add_subcommand("make-scene", "Write the micro-town oracle dataset to --out");
  make->add_option("--size", size, "Image width and height")->check(CLI::Range(4, 4096));

  std::string data = "data";
  std::optional<std::int64_t> iters;
  std::string resume;
  auto* tc = app.add_subcommand("train-color", "Stage 1: fit the color field");
  tc->add_option("--data", data, "Dataset directory");
  tc->add_option("--iterations", iters, "Override iterations_1");
  tc->add_option("--resume", resume, "Continue from a color checkpoint");

  std::string variant = "RTTC";
  std::string color;
  auto* ts = app.add_subcommand("train-seg", "Stage 2: fit the semantic branch");
  ts->add_option("--data", data, "Dataset directory");
  ts->add_option("--variant", variant, "B, RT, RTT, RTC or RTTC");
  ts->add_option("--color", color, "Color checkpoint (default <out>/color.ckpt)");
  ts->add_option("--iterations", iters, "Override iterations_2");
  ts->add_option("--resume", resume, "Continue from a seg checkpoint");

  std::string ckpt, mode = "rgb", views = "heldout";
  auto* rd = app.add_subcommand("render", "Render views from a checkpoint into --out");
  rd->add_option("--data", data, "Dataset directory");
  rd->add_option("--checkpoint", ckpt, "Checkpoint to render")->required();
  rd->add_option("--mode", mode, "rgb, semantic or depth");
  rd->add_option("--views", views, "heldout, train or all");

  bool describe_only = false, dump_confusion = false;
  auto* ev = app.add_subcommand("eval", "Held-out PSNR and mIoU of the checkpoints in --out");
  ev->add_option("--data", data, "Dataset directory");
  ev->add_flag("--describe", describe_only, "Summarize the dataset manifest only");
  ev->add_flag("--confusion", dump_confusion, "Dump confusion matrices");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return static_cast<int>(ErrorCode::kUsage);
  }

  try {
    if (*make) return make_scene(g, size);
    if (*tc) return train_color_cmd(g, data, iters, resume);
    if (*ts) return train_seg_cmd(g, data, variant, color, iters, resume);
    if (*rd) return render_cmd(g, data, ckpt, mode, views);
    if (*ev) return describe_only ? describe(data) : eval_cmd(g, data, dump_confusion);
  } catch (const Error& e) {
    std::cerr << "error [" << error_code_name(e.code()) << "]: " << e.what() << "\n";
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
