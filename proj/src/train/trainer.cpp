#include "irt/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <numeric>
#include <ostream>
#include <random>
#include <thread>

#include "irt/errors.hpp"

namespace irt {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------- config

void to_json(json& j, const ModelConfig& c) {
  j = {{"field", c.field}, {"rt", c.rt}, {"cnn", c.cnn},
       {"num_coarse", c.num_coarse}, {"num_fine", c.num_fine}};
}

void from_json(const json& j, ModelConfig& c) {
  ModelConfig d;
  c.field = j.value("field", d.field);
  c.rt = j.value("rt", d.rt);
  c.cnn = j.value("cnn", d.cnn);
  c.num_coarse = j.value("num_coarse", d.num_coarse);
  c.num_fine = j.value("num_fine", d.num_fine);
}

namespace {

json adam_json(const AdamConfig& a) {
  return {{"lr", a.lr},       {"beta1", a.beta1},           {"beta2", a.beta2},
          {"eps", a.eps},     {"decay_rate", a.decay_rate}, {"decay_steps", a.decay_steps}};
}

AdamConfig adam_from(const json& j, const AdamConfig& d) {
  AdamConfig a;
  a.lr = j.value("lr", d.lr);
  a.beta1 = j.value("beta1", d.beta1);
  a.beta2 = j.value("beta2", d.beta2);
  a.eps = j.value("eps", d.eps);
  a.decay_rate = j.value("decay_rate", d.decay_rate);
  a.decay_steps = j.value("decay_steps", d.decay_steps);
  return a;
}

}  // namespace

void TrainConfig::validate() const {
  if (iterations_1 < 0 || iterations_2 < 0) {
    fail(ErrorCode::kConfiguration, "train config: iterations must be >= 0");
  }
  if (batch_rays < 1) fail(ErrorCode::kConfiguration, "train config: batch_rays must be >= 1");
  if (workers < 1) fail(ErrorCode::kConfiguration, "train config: workers must be >= 1");
  if (checkpoint_every < 0 || eval_every < 0 || log_every < 0) {
    fail(ErrorCode::kConfiguration, "train config: cadences must be >= 0");
  }
}

void to_json(json& j, const TrainConfig& c) {
  j = {{"iterations_1", c.iterations_1},
       {"iterations_2", c.iterations_2},
       {"batch_rays", c.batch_rays},
       {"adam_1", adam_json(c.adam_1)},
       {"adam_2", adam_json(c.adam_2)},
       {"variant", variant_name(c.variant)},
       {"seed", c.seed},
       {"checkpoint_every", c.checkpoint_every},
       {"eval_every", c.eval_every},
       {"eval_views", c.eval_views},
       {"log_every", c.log_every},
       {"workers", c.workers}};
}

void from_json(const json& j, TrainConfig& c) {
  TrainConfig d;
  c.iterations_1 = j.value("iterations_1", d.iterations_1);
  c.iterations_2 = j.value("iterations_2", d.iterations_2);
  c.batch_rays = j.value("batch_rays", d.batch_rays);
  c.adam_1 = adam_from(j.value("adam_1", json::object()), d.adam_1);
  c.adam_2 = adam_from(j.value("adam_2", json::object()), d.adam_2);
  c.variant = parse_variant(j.value("variant", variant_name(d.variant)));
  c.seed = j.value("seed", d.seed);
  c.checkpoint_every = j.value("checkpoint_every", d.checkpoint_every);
  c.eval_every = j.value("eval_every", d.eval_every);
  c.eval_views = j.value("eval_views", d.eval_views);
  c.log_every = j.value("log_every", d.log_every);
  c.workers = j.value("workers", d.workers);
}

void to_json(json& j, const RunConfig& c) { j = {{"model", c.model}, {"train", c.train}}; }

void from_json(const json& j, RunConfig& c) {
  RunConfig d;
  c.model = j.value("model", d.model);
  c.train = j.value("train", d.train);
}

RunConfig load_run_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::kIo, "cannot open config " + path.string());
  RunConfig c;
  try {
    c = json::parse(in).get<RunConfig>();
  } catch (const json::exception& e) {
    fail(ErrorCode::kConfiguration, "config " + path.string() + ": " + e.what());
  }
  c.train.validate();
  return c;
}

RunConfig micro_town_config() {
  RunConfig c;
  FieldConfig& f = c.model.field;
  f.encoding.num_freqs_pos = 6;
  f.encoding.num_freqs_dir = 2;
  f.trunk_depth = 4;
  f.trunk_width = 64;
  f.skip_layer = 2;
  f.feature_dim = 32;
  f.dir_width = 32;
  c.model.num_coarse = 32;
  c.model.num_fine = 32;
  c.model.rt = {10, 32, 4, 2, 2, 16};
  c.model.cnn = {16, 16, 3};
  c.train.batch_rays = 32;
  c.train.adam_1.lr = 1e-3;
  c.train.adam_1.decay_steps = 20000.0;
  c.train.adam_2.lr = 1e-3;
  c.train.adam_2.decay_steps = 5000.0;
  return c;
}

// ---------------------------------------------------------------- helpers

namespace {

constexpr std::uint64_t kColorStream = 1;
constexpr std::uint64_t kSegStream = 2;
constexpr std::size_t kRenderChunk = 256;

std::mt19937_64 step_rng(std::uint64_t seed, std::uint64_t stage, std::int64_t step,
                         std::size_t worker) {
  const auto s = static_cast<std::uint64_t>(step);
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stage), static_cast<std::uint32_t>(s),
                    static_cast<std::uint32_t>(s >> 32), static_cast<std::uint32_t>(worker)};
  return std::mt19937_64(seq);
}

ParamStore deep_copy(const ParamStore& src, bool with_optimizer) {
  ParamStore out;
  for (const auto& name : src.names()) {
    if (!with_optimizer && name.rfind("adam/", 0) == 0) continue;
    out.set(name, src.get(name).detach());
  }
  return out;
}

ParamStore optimizer_state(const ParamStore& src) {
  ParamStore out;
  out.copy_from(src, "adam/");
  return out;
}

json bounds_json(const DatasetManifest& m) {
  return {{"min", {m.bounds_min.x(), m.bounds_min.y(), m.bounds_min.z()}},
          {"max", {m.bounds_max.x(), m.bounds_max.y(), m.bounds_max.z()}},
          {"near", m.near},
          {"far", m.far}};
}

// Checkpoint metadata carries everything needed to render without a config.
Checkpoint make_checkpoint(const char* stage, std::int64_t step, const RunConfig& config,
                           const DatasetManifest& m, const ParamStore& params, const Adam* adam) {
  Checkpoint c;
  c.meta = {{"stage", stage},
            {"step", step},
            {"adam_steps", adam != nullptr ? adam->steps_taken() : 0},
            {"model", config.model},
            {"train", config.train},
            {"seed", config.train.seed},
            {"scene", m.scene},
            {"num_classes", m.num_classes()},
            {"bounds", bounds_json(m)}};
  if (std::string(stage) == kSegStage) c.meta["variant"] = variant_name(config.train.variant);
  c.tensors = deep_copy(params, false);
  if (adam != nullptr) {
    const ParamStore state = adam->export_state();
    for (const auto& n : state.names()) c.tensors.set(n, state.get(n));
  }
  return c;
}

std::string meta_string(const Checkpoint& c, const char* key) {
  if (!c.meta.contains(key) || !c.meta[key].is_string()) {
    fail(ErrorCode::kCheckpoint, std::string("checkpoint metadata lacks '") + key + "'");
  }
  return c.meta[key].get<std::string>();
}

ModelConfig checkpoint_model(const Checkpoint& c) {
  if (!c.meta.contains("model")) fail(ErrorCode::kCheckpoint, "checkpoint metadata lacks 'model'");
  try {
    return c.meta["model"].get<ModelConfig>();
  } catch (const json::exception& e) {
    fail(ErrorCode::kCheckpoint, std::string("checkpoint model config: ") + e.what());
  }
}

void check_bounds(const Checkpoint& c, const DatasetManifest& m) {
  if (!c.meta.contains("bounds") || c.meta["bounds"] != bounds_json(m)) {
    fail(ErrorCode::kCheckpoint, "checkpoint scene bounds do not match the manifest");
  }
}

void periodic_save(const Checkpoint& c, const fs::path& out_dir, std::int64_t step) {
  char name[32];
  std::snprintf(name, sizeof name, "step-%06lld", static_cast<long long>(step));
  save_checkpoint(c, out_dir / "ckpt" / name);
}

Tensor dirs_tensor(const std::vector<Ray>& rays) {
  std::vector<double> v;
  v.reserve(rays.size() * 3);
  for (const Ray& r : rays) v.insert(v.end(), r.direction.data(), r.direction.data() + 3);
  return Tensor::constant({rays.size(), 3}, std::move(v));
}

Tensor positions_tensor(const RaySampleBatch& s, const SceneNormalization& norm) {
  return Tensor::constant({s.num_rays, s.samples_per_ray, 3}, norm.apply(s.positions));
}

// Coarse pass, importance resampling, then one render over the union of
// coarse and fine samples. The same network serves both passes, so coarse
// outputs are reused rather than re-evaluated.
struct HierarchicalPass {
  ops::VolumeRenderResult coarse;
  ops::VolumeRenderResult fine;
  Tensor sigma;  // [B, N] merged, depth order
  Tensor feat;   // [B, N, F]
  std::vector<double> depths;
  std::vector<double> deltas;
  std::size_t samples = 0;
};

HierarchicalPass hierarchical_pass(const NeuralField& field, const ParamFn& p,
                                   const SceneNormalization& norm, const ModelConfig& m,
                                   const std::vector<Ray>& rays, std::mt19937_64& rng, bool train,
                                   bool need_feat) {
  const std::size_t B = rays.size(), nc = m.num_coarse, nf = m.num_fine, n = nc + nf;
  const Tensor dirs = dirs_tensor(rays);
  const RaySampleBatch cs = sample_coarse(rays, nc, train, rng);
  const FieldOutput co = field.forward(p, positions_tensor(cs, norm), dirs);
  HierarchicalPass h;
  h.coarse = render_ray(co.sigma, co.color, cs.deltas);
  const RaySampleBatch fs = sample_fine(rays, cs, h.coarse.weights, nf, rng, !train);
  const FieldOutput fo = field.forward(p, positions_tensor(fs, norm), dirs);

  h.samples = n;
  h.depths.resize(B * n);
  h.deltas.resize(B * n);
  std::vector<std::size_t> order(B * n);
  std::vector<std::pair<double, std::size_t>> row(n);
  for (std::size_t r = 0; r < B; ++r) {
    for (std::size_t i = 0; i < nc; ++i) row[i] = {cs.depths[r * nc + i], r * nc + i};
    for (std::size_t j = 0; j < nf; ++j) row[nc + j] = {fs.depths[r * nf + j], B * nc + r * nf + j};
    std::stable_sort(row.begin(), row.end(),
                     [](const auto& a, const auto& b) { return a.first < b.first; });
    double* d = h.depths.data() + r * n;
    for (std::size_t i = 0; i < n; ++i) {
      d[i] = row[i].first;
      order[r * n + i] = row[i].second;
    }
    // Coincident samples still need a positive interval.
    for (std::size_t i = 1; i < n; ++i) {
      if (d[i] <= d[i - 1]) d[i] = std::nextafter(d[i - 1], rays[r].far + 1.0);
    }
    for (std::size_t i = 0; i + 1 < n; ++i) h.deltas[r * n + i] = d[i + 1] - d[i];
    h.deltas[r * n + n - 1] = (rays[r].far - rays[r].near) / static_cast<double>(n);
  }
  auto merge = [&](const Tensor& a, const Tensor& b, std::size_t width, Shape shape) {
    const Tensor rows = ops::concat_rows(
        {ops::reshape(a, {B * nc, width}), ops::reshape(b, {B * nf, width})});
    return ops::reshape(ops::gather_rows(rows, order), std::move(shape));
  };
  h.sigma = merge(co.sigma, fo.sigma, 1, {B, n});
  const Tensor color = merge(co.color, fo.color, 3, {B, n, 3});
  h.fine = render_ray(h.sigma, color, h.deltas);
  if (need_feat) {
    const std::size_t F = co.feat.dim(2);
    h.feat = merge(co.feat, fo.feat, F, {B, n, F});
  }
  return h;
}

// Per-pixel outputs of the frozen color field for one camera.
struct ViewTrace {
  int width = 0;
  int height = 0;
  std::vector<double> rgb;    // [P, 3]
  std::vector<double> depth;  // [P]
  std::size_t k = 0;
  std::size_t feature_dim = 0;
  std::vector<double> feats;   // [P, k, F] selected point features
  std::vector<double> sigma;   // [P, k]
  std::vector<double> deltas;  // [P, k]
};

ViewTrace trace_view(const ModelConfig& m, const ParamStore& params,
                     const SceneNormalization& norm, const Camera& cam, double near, double far,
                     bool select) {
  const NeuralField field(m.field);
  const Binding bind(params, nullptr, {});
  const ParamFn p = std::cref(bind);
  ViewTrace t;
  t.width = cam.width;
  t.height = cam.height;
  const std::size_t P = static_cast<std::size_t>(cam.width) * static_cast<std::size_t>(cam.height);
  t.rgb.resize(P * 3);
  t.depth.resize(P);
  if (select) {
    t.k = m.rt.k;
    t.feature_dim = m.field.feature_dim;
    t.feats.resize(P * t.k * t.feature_dim);
    t.sigma.resize(P * t.k);
    t.deltas.resize(P * t.k);
  }
  std::mt19937_64 unused(0);  // deterministic sampling draws nothing
  std::vector<Ray> rays;
  for (std::size_t begin = 0; begin < P; begin += kRenderChunk) {
    const std::size_t end = std::min(P, begin + kRenderChunk);
    rays.clear();
    for (std::size_t i = begin; i < end; ++i) {
      rays.push_back(pixel_center_ray(cam, static_cast<int>(i % static_cast<std::size_t>(cam.width)),
                                      static_cast<int>(i / static_cast<std::size_t>(cam.width)), near,
                                      far));
    }
    const HierarchicalPass h = hierarchical_pass(field, p, norm, m, rays, unused, false, select);
    const auto rgb = h.fine.value.values();
    std::copy(rgb.begin(), rgb.end(), t.rgb.begin() + static_cast<std::ptrdiff_t>(begin * 3));
    for (std::size_t r = 0; r < rays.size(); ++r) {
      double d = 0.0;
      for (std::size_t i = 0; i < h.samples; ++i) {
        d += h.fine.weights[r * h.samples + i] * h.depths[r * h.samples + i];
      }
      t.depth[begin + r] = d;
    }
    if (select) {
      const Selection sel = select_valid(h.sigma, h.feat, h.deltas, t.k);
      const auto f = sel.feats.values();
      const auto s = sel.sigma.values();
      std::copy(f.begin(), f.end(),
                t.feats.begin() + static_cast<std::ptrdiff_t>(begin * t.k * t.feature_dim));
      std::copy(s.begin(), s.end(), t.sigma.begin() + static_cast<std::ptrdiff_t>(begin * t.k));
      std::copy(sel.deltas.begin(), sel.deltas.end(),
                t.deltas.begin() + static_cast<std::ptrdiff_t>(begin * t.k));
    }
  }
  return t;
}

struct SelectedRays {
  Tensor feats;  // [B, k, F]
  Tensor sigma;  // [B, k]
  std::vector<double> deltas;
};

SelectedRays gather_selection(const ViewTrace& t, const std::vector<std::size_t>& pixels) {
  const std::size_t k = t.k, F = t.feature_dim, B = pixels.size();
  std::vector<double> f(B * k * F), s(B * k);
  SelectedRays out;
  out.deltas.resize(B * k);
  for (std::size_t i = 0; i < B; ++i) {
    const std::size_t px = pixels[i];
    std::copy_n(t.feats.begin() + static_cast<std::ptrdiff_t>(px * k * F), k * F,
                f.begin() + static_cast<std::ptrdiff_t>(i * k * F));
    std::copy_n(t.sigma.begin() + static_cast<std::ptrdiff_t>(px * k), k,
                s.begin() + static_cast<std::ptrdiff_t>(i * k));
    std::copy_n(t.deltas.begin() + static_cast<std::ptrdiff_t>(px * k), k,
                out.deltas.begin() + static_cast<std::ptrdiff_t>(i * k));
  }
  out.feats = Tensor::constant({B, k, F}, std::move(f));
  out.sigma = Tensor::constant({B, k}, std::move(s));
  return out;
}

struct SemanticOutput {
  Tensor logits;      // [B, L]
  Tensor cnn_logits;  // [B, L] when the variant uses the CNN
};

SemanticOutput semantic_forward(const ParamFn& p, const ModelConfig& m, Variant variant,
                                const SelectedRays& sel, const Tensor& cnn_feat) {
  const Tensor token = uses_texture_token(variant) ? cnn_feat : Tensor();
  const Tensor concat = uses_texture_concat(variant) ? cnn_feat : Tensor();
  const Tensor points = ray_transform(p, m.rt, sel.feats, token, variant);
  const Tensor rendered = render_semantic(points, sel.sigma, sel.deltas);
  SemanticOutput out;
  out.logits = fuse_and_classify(p, rendered, concat, variant);
  if (uses_cnn(variant)) out.cnn_logits = cnn_classify(p, cnn_feat);
  return out;
}

std::vector<int> argmax_rows(const Tensor& logits) {
  const std::size_t B = logits.dim(0), L = logits.dim(1);
  std::vector<int> out(B);
  for (std::size_t b = 0; b < B; ++b) {
    const auto row = logits.values().subspan(b * L, L);
    out[b] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

Tensor image_tensor(const std::vector<double>& rgb, int width, int height) {
  return Tensor::constant({static_cast<std::size_t>(height), static_cast<std::size_t>(width), 3}, rgb);
}

// Semantic classification of every pixel of a traced view.
std::vector<int> classify_view(const ParamStore& params, const ModelConfig& m, Variant variant,
                               const ViewTrace& t, const std::vector<double>& texture,
                               std::vector<double>* logits_out) {
  const Binding bind(params, nullptr, {});
  const ParamFn p = std::cref(bind);
  Tensor feat_map;
  if (uses_cnn(variant)) feat_map = cnn_forward(p, m.cnn, image_tensor(texture, t.width, t.height));
  const std::size_t P = static_cast<std::size_t>(t.width) * static_cast<std::size_t>(t.height);
  std::vector<int> labels(P);
  if (logits_out != nullptr) logits_out->clear();
  std::vector<std::size_t> pixels;
  std::vector<PixelIndex> index;
  for (std::size_t begin = 0; begin < P; begin += kRenderChunk) {
    const std::size_t end = std::min(P, begin + kRenderChunk);
    pixels.resize(end - begin);
    std::iota(pixels.begin(), pixels.end(), begin);
    Tensor cnn_feat;
    if (feat_map.defined()) {
      index.clear();
      for (std::size_t px : pixels) {
        index.push_back({static_cast<int>(px % static_cast<std::size_t>(t.width)),
                         static_cast<int>(px / static_cast<std::size_t>(t.width))});
      }
      cnn_feat = gather_ray_features(feat_map, index);
    }
    const SemanticOutput out = semantic_forward(p, m, variant, gather_selection(t, pixels), cnn_feat);
    const std::vector<int> chunk = argmax_rows(out.logits);
    std::copy(chunk.begin(), chunk.end(), labels.begin() + static_cast<std::ptrdiff_t>(begin));
    if (logits_out != nullptr) {
      const auto v = out.logits.values();
      logits_out->insert(logits_out->end(), v.begin(), v.end());
    }
  }
  return labels;
}

double mean_view_psnr(const ModelConfig& m, const ParamStore& params, const Dataset& data,
                      const std::vector<std::size_t>& views) {
  const auto& man = data.manifest;
  const SceneNormalization norm = SceneNormalization::from_bounds(man.bounds_min, man.bounds_max);
  double total = 0.0;
  for (std::size_t v : views) {
    const ViewTrace t = trace_view(m, params, norm, man.views[v].camera, man.near, man.far, false);
    total += psnr(t.rgb, data.images[v].rgb);
  }
  return views.empty() ? 0.0 : total / static_cast<double>(views.size());
}

// Splits [0, n) into `workers` contiguous ranges and runs `fn(worker, begin,
// end)` on each, one thread per worker. Exceptions are rethrown in worker order.
template <typename Fn>
void run_workers(std::size_t n, std::size_t workers, Fn&& fn) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    fn(0, 0, n);
    return;
  }
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> threads;
  for (std::size_t w = 0; w < workers; ++w) {
    const std::size_t begin = n * w / workers, end = n * (w + 1) / workers;
    threads.emplace_back([&, w, begin, end] {
      try {
        fn(w, begin, end);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : threads) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

std::string batch_description(const RayBatch& batch) {
  std::string s = "rays from views {";
  std::vector<std::size_t> views = batch.views;
  std::sort(views.begin(), views.end());
  views.erase(std::unique(views.begin(), views.end()), views.end());
  for (std::size_t i = 0; i < views.size(); ++i) s += (i ? "," : "") + std::to_string(views[i]);
  s += "}";
  if (!batch.pixels.empty()) {
    s += ", first pixel (" + std::to_string(batch.pixels[0].col) + "," +
         std::to_string(batch.pixels[0].row) + ")";
  }
  return s;
}

void check_finite(const Tensor& loss, const char* what) {
  if (!std::isfinite(loss.item())) fail(ErrorCode::kNumeric, std::string("non-finite ") + what);
}

void write_step(std::ostream* log, const StepRecord& r) {
  if (log == nullptr) return;
  char line[96];
  std::snprintf(line, sizeof line, "%lld %.9g %.6f\n", static_cast<long long>(r.step), r.loss,
                r.metric);
  *log << line << std::flush;
}

void write_eval(std::ostream* log, const EvalRecord& r, const char* metric) {
  if (log == nullptr) return;
  char line[96];
  std::snprintf(line, sizeof line, "# heldout step %lld %s %.6f\n", static_cast<long long>(r.step),
                metric, r.metric);
  *log << line << std::flush;
}

bool due(std::int64_t step, std::int64_t every, std::int64_t last) {
  return (every > 0 && step % every == 0) || step == last;
}

}  // namespace

// ---------------------------------------------------------------- init

ParamStore init_color_params(const ModelConfig& model, std::uint64_t seed) {
  ParamStore s;
  NeuralField(model.field).init(s, seed);
  return s;
}

ParamStore init_seg_params(const ModelConfig& model, std::size_t num_classes,
                           std::uint64_t seed) {
  ParamStore s;
  init_ray_transformer(s, model.rt, model.field.feature_dim, model.cnn.feature_channels,
                       num_classes, seed ^ 0x5EC0ULL);
  init_texture_cnn(s, model.cnn, num_classes, seed ^ 0xC77ULL);
  return s;
}

std::vector<std::size_t> heldout_views(const DatasetManifest& manifest, std::size_t limit) {
  std::vector<std::size_t> v = manifest.views_in(Split::kHoldout);
  if (limit > 0 && v.size() > limit) v.resize(limit);
  return v;
}

// ---------------------------------------------------------------- stage 1

StageOutcome train_color(const Dataset& data, const RunConfig& config,
                         const TrainOptions& options) {
  const TrainConfig& tc = config.train;
  tc.validate();
  const ModelConfig& m = config.model;
  const DatasetManifest& man = data.manifest;
  const NeuralField field(m.field);
  const SceneNormalization norm = SceneNormalization::from_bounds(man.bounds_min, man.bounds_max);
  const RaySampler sampler(data, TrainStage::kColor);
  const std::vector<std::string> trainable = FieldFreeze{}.trainable_prefixes();

  ParamStore params;
  Adam adam(tc.adam_1);
  std::int64_t start = 0;
  if (options.resume != nullptr) {
    const Checkpoint& r = *options.resume;
    if (meta_string(r, "stage") != kColorStage) {
      fail(ErrorCode::kCheckpoint, "resume checkpoint is not a color checkpoint");
    }
    check_bounds(r, man);
    if (r.meta["model"] != json(m) || r.meta.value("seed", tc.seed + 1) != tc.seed) {
      fail(ErrorCode::kConfiguration, "resume checkpoint was trained with another model or seed");
    }
    params = deep_copy(r.tensors, false);
    start = r.meta.value("step", std::int64_t{0});
    adam.import_state(optimizer_state(r.tensors), r.meta.value("adam_steps", std::int64_t{0}));
  } else {
    params = init_color_params(m, tc.seed);
  }

  StageOutcome outcome;
  const std::vector<std::size_t> eval_views = heldout_views(man, tc.eval_views);
  if (options.log != nullptr) *options.log << "# step loss psnr\n";
  for (std::int64_t step = start + 1; step <= tc.iterations_1; ++step) {
    std::mt19937_64 rng = step_rng(tc.seed, kColorStream, step, 0);
    const RayBatch batch = sampler.next(tc.batch_rays, rng);
    const std::size_t B = batch.rays.size();
    std::size_t workers = std::min(tc.workers, B);
    std::vector<Gradients> grads(workers);
    std::vector<double> losses(workers, 0.0), fine_se(workers, 0.0);
    try {
      run_workers(B, workers, [&](std::size_t w, std::size_t begin, std::size_t end) {
        std::mt19937_64 wrng = step_rng(tc.seed, kColorStream, step, w + 1);
        const std::vector<Ray> rays(batch.rays.begin() + static_cast<std::ptrdiff_t>(begin),
                                    batch.rays.begin() + static_cast<std::ptrdiff_t>(end));
        const Tensor target = Tensor::constant(
            {end - begin, 3}, std::vector<double>(batch.rgb.begin() + static_cast<std::ptrdiff_t>(3 * begin),
                                                  batch.rgb.begin() + static_cast<std::ptrdiff_t>(3 * end)));
        Tape tape;
        const Binding bind(params, &tape, trainable);
        const HierarchicalPass h =
            hierarchical_pass(field, std::cref(bind), norm, m, rays, wrng, true, false);
        const Tensor lc = rgb_loss(h.coarse.value, target);
        const Tensor lf = rgb_loss(h.fine.value, target);
        const Tensor loss = ops::add(lc, lf);
        check_finite(loss, "photometric loss");
        tape.backward(loss);
        grads[w] = bind.gradients();
        losses[w] = loss.item();
        fine_se[w] = lf.item();
      });
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kNumeric) throw;
      fail(ErrorCode::kNumeric, "color training aborted at step " + std::to_string(step) + ", " +
                                    batch_description(batch) + ": " + e.what());
    }
    adam.step(params, reduce_gradients(grads));

    const double loss = std::accumulate(losses.begin(), losses.end(), 0.0) / static_cast<double>(B);
    const double mse = std::accumulate(fine_se.begin(), fine_se.end(), 0.0) / static_cast<double>(3 * B);
    const StepRecord rec{step, loss, mse > 0.0 ? -10.0 * std::log10(mse) : kPsnrCap};
    outcome.steps.push_back(rec);
    if (due(step, tc.log_every, tc.iterations_1)) write_step(options.log, rec);
    if (tc.eval_every > 0 && !eval_views.empty() && due(step, tc.eval_every, tc.iterations_1)) {
      const EvalRecord ev{step, mean_view_psnr(m, params, data, eval_views)};
      outcome.evals.push_back(ev);
      write_eval(options.log, ev, "psnr");
    }
    if (!options.out_dir.empty() && tc.checkpoint_every > 0 && step % tc.checkpoint_every == 0) {
      periodic_save(make_checkpoint(kColorStage, step, config, man, params, &adam), options.out_dir,
                    step);
    }
  }
  outcome.checkpoint = make_checkpoint(kColorStage, std::max(start, tc.iterations_1), config, man,
                                       params, adam.steps_taken() > 0 ? &adam : nullptr);
  return outcome;
}

// ---------------------------------------------------------------- stage 2

StageOutcome train_seg(const Dataset& data, const Checkpoint& color, const RunConfig& config,
                       const TrainOptions& options) {
  const TrainConfig& tc = config.train;
  tc.validate();
  const ModelConfig& m = config.model;
  const DatasetManifest& man = data.manifest;
  const std::size_t L = man.num_classes();
  const Variant variant = tc.variant;

  const std::string stage = meta_string(color, "stage");
  if (stage != kColorStage && stage != kSegStage) {
    fail(ErrorCode::kCheckpoint, "unknown checkpoint stage '" + stage + "'");
  }
  check_bounds(color, man);
  const ModelConfig trained = checkpoint_model(color);
  if (json(trained.field) != json(m.field) || trained.num_coarse != m.num_coarse ||
      trained.num_fine != m.num_fine) {
    fail(ErrorCode::kConfiguration, "field config differs from the color checkpoint");
  }
  const RaySampler sampler(data, TrainStage::kSeg);

  ParamStore params;
  params.copy_from(color.tensors, "field/");
  if (params.size() == 0) fail(ErrorCode::kCheckpoint, "color checkpoint holds no field parameters");
  params = deep_copy(params, false);
  const std::uint64_t frozen_hash = hash_params(params, "field/");

  Adam adam(tc.adam_2);
  std::int64_t start = 0;
  if (options.resume != nullptr) {
    const Checkpoint& r = *options.resume;
    if (meta_string(r, "stage") != kSegStage) {
      fail(ErrorCode::kCheckpoint, "resume checkpoint is not a seg checkpoint");
    }
    check_bounds(r, man);
    if (meta_string(r, "variant") != variant_name(variant)) {
      fail(ErrorCode::kConfiguration, "resume checkpoint was trained as variant " +
                                          meta_string(r, "variant") + ", not " +
                                          variant_name(variant));
    }
    if (r.meta["model"] != json(m) || r.meta.value("seed", tc.seed + 1) != tc.seed) {
      fail(ErrorCode::kConfiguration, "resume checkpoint was trained with another model or seed");
    }
    if (hash_params(r.tensors, "field/") != frozen_hash) {
      fail(ErrorCode::kCheckpoint, "resume checkpoint has a different color field");
    }
    for (const auto& prefix : {kRtPrefix, kSegPrefix, kCnnPrefix}) {
      params.copy_from(deep_copy(r.tensors, false), prefix);
    }
    start = r.meta.value("step", std::int64_t{0});
    adam.import_state(optimizer_state(r.tensors), r.meta.value("adam_steps", std::int64_t{0}));
  } else {
    const ParamStore head = init_seg_params(m, L, tc.seed);
    for (const auto& n : head.names()) params.set(n, head.get(n));
  }
  const std::vector<std::string> trainable = {kRtPrefix, kSegPrefix, kCnnPrefix};

  // The trunk is frozen and sampling is deterministic, so every pixel's
  // selected points are fixed for the whole stage.
  const SceneNormalization norm = SceneNormalization::from_bounds(man.bounds_min, man.bounds_max);
  std::vector<std::optional<ViewTrace>> traces(man.views.size());
  for (std::size_t v : sampler.source_views()) {
    traces[v] = trace_view(m, params, norm, man.views[v].camera, man.near, man.far, true);
  }
  std::vector<std::size_t> eval_views;
  for (std::size_t v : heldout_views(man, tc.eval_views)) {
    if (!data.eval_labels[v]) continue;
    eval_views.push_back(v);
    if (!traces[v]) traces[v] = trace_view(m, params, norm, man.views[v].camera, man.near, man.far, true);
  }
  std::vector<Tensor> images(man.views.size());
  if (uses_cnn(variant)) {
    for (std::size_t v : sampler.source_views()) {
      images[v] = image_tensor(data.images[v].rgb, data.images[v].width, data.images[v].height);
    }
  }
  auto evaluate = [&] {
    ConfusionMatrix cm(L);
    for (std::size_t v : eval_views) {
      cm.add(data.eval_labels[v]->ids, classify_view(params, m, variant, *traces[v],
                                                     data.images[v].rgb, nullptr));
    }
    return miou(cm).mean;
  };

  StageOutcome outcome;
  if (options.log != nullptr) *options.log << "# step loss miou\n";
  for (std::int64_t step = start + 1; step <= tc.iterations_2; ++step) {
    std::mt19937_64 rng = step_rng(tc.seed, kSegStream, step, 0);
    const RayBatch batch = sampler.next(tc.batch_rays, rng);
    const std::size_t B = batch.rays.size();
    const std::size_t workers = std::min(tc.workers, B);
    std::vector<Gradients> grads(workers);
    std::vector<double> losses(workers, 0.0);
    std::vector<int> predicted(B);
    try {
      run_workers(B, workers, [&](std::size_t w, std::size_t begin, std::size_t end) {
        Tape tape;
        const Binding bind(params, &tape, trainable);
        const ParamFn p = std::cref(bind);
        const std::size_t n = end - begin, k = m.rt.k, F = m.field.feature_dim;
        SelectedRays sel;
        std::vector<double> feats(n * k * F), sigma(n * k);
        sel.deltas.resize(n * k);
        for (std::size_t i = 0; i < n; ++i) {
          const ViewTrace& t = *traces[batch.views[begin + i]];
          const PixelIndex px = batch.pixels[begin + i];
          const std::size_t at = static_cast<std::size_t>(px.row) * static_cast<std::size_t>(t.width) +
                                 static_cast<std::size_t>(px.col);
          std::copy_n(t.feats.begin() + static_cast<std::ptrdiff_t>(at * k * F), k * F,
                      feats.begin() + static_cast<std::ptrdiff_t>(i * k * F));
          std::copy_n(t.sigma.begin() + static_cast<std::ptrdiff_t>(at * k), k,
                      sigma.begin() + static_cast<std::ptrdiff_t>(i * k));
          std::copy_n(t.deltas.begin() + static_cast<std::ptrdiff_t>(at * k), k,
                      sel.deltas.begin() + static_cast<std::ptrdiff_t>(i * k));
        }
        sel.feats = Tensor::constant({n, k, F}, std::move(feats));
        sel.sigma = Tensor::constant({n, k}, std::move(sigma));
        // CNN features are gathered per view, then put back in batch order.
        Tensor cnn_feat;
        if (uses_cnn(variant)) {
          std::vector<std::size_t> views(batch.views.begin() + static_cast<std::ptrdiff_t>(begin),
                                         batch.views.begin() + static_cast<std::ptrdiff_t>(end));
          std::sort(views.begin(), views.end());
          views.erase(std::unique(views.begin(), views.end()), views.end());
          std::vector<Tensor> parts;
          std::vector<std::size_t> slot(n);
          std::size_t row = 0;
          for (std::size_t v : views) {
            std::vector<PixelIndex> index;
            for (std::size_t i = 0; i < n; ++i) {
              if (batch.views[begin + i] != v) continue;
              slot[i] = row++;
              index.push_back(batch.pixels[begin + i]);
            }
            parts.push_back(gather_ray_features(cnn_forward(p, m.cnn, images[v]), index));
          }
          cnn_feat = ops::gather_rows(ops::concat_rows(parts), slot);
        }

        const std::vector<int> labels(batch.labels.begin() + static_cast<std::ptrdiff_t>(begin),
                                      batch.labels.begin() + static_cast<std::ptrdiff_t>(end));
        const SemanticOutput out = semantic_forward(p, m, variant, sel, cnn_feat);
        const Tensor loss = seg_loss(out.logits, out.cnn_logits, one_hot(labels, L));
        check_finite(loss, "segmentation loss");
        tape.backward(loss);
        grads[w] = bind.gradients();
        losses[w] = loss.item();
        const std::vector<int> pred = argmax_rows(out.logits);
        std::copy(pred.begin(), pred.end(), predicted.begin() + static_cast<std::ptrdiff_t>(begin));
      });
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kNumeric) throw;
      fail(ErrorCode::kNumeric, "seg training aborted at step " + std::to_string(step) + ", " +
                                    batch_description(batch) + ": " + e.what());
    }
    adam.step(params, reduce_gradients(grads));

    ConfusionMatrix cm(L);
    cm.add(batch.labels, predicted);
    const StepRecord rec{step, std::accumulate(losses.begin(), losses.end(), 0.0) / static_cast<double>(B),
                         miou(cm).mean};
    outcome.steps.push_back(rec);
    if (due(step, tc.log_every, tc.iterations_2)) write_step(options.log, rec);
    if (tc.eval_every > 0 && !eval_views.empty() && due(step, tc.eval_every, tc.iterations_2)) {
      const EvalRecord ev{step, evaluate()};
      outcome.evals.push_back(ev);
      write_eval(options.log, ev, "miou");
    }
    if (!options.out_dir.empty() && tc.checkpoint_every > 0 && step % tc.checkpoint_every == 0) {
      periodic_save(make_checkpoint(kSegStage, step, config, man, params, &adam), options.out_dir, step);
    }
  }
  if (hash_params(params, "field/") != frozen_hash) {
    fail(ErrorCode::kContract, "frozen trunk changed during seg training");
  }
  outcome.checkpoint = make_checkpoint(kSegStage, std::max(start, tc.iterations_2), config, man,
                                       params, adam.steps_taken() > 0 ? &adam : nullptr);
  return outcome;
}

// ---------------------------------------------------------------- rendering

RenderMode parse_render_mode(const std::string& name) {
  if (name == "rgb") return RenderMode::kRgb;
  if (name == "semantic") return RenderMode::kSemantic;
  if (name == "depth") return RenderMode::kDepth;
  fail(ErrorCode::kUsage, "unknown render mode '" + name + "' (expected rgb, semantic or depth)");
}

Renderer::Renderer(const Checkpoint& checkpoint, const DatasetManifest& manifest)
    : model_(checkpoint_model(checkpoint)),
      params_(deep_copy(checkpoint.tensors, false)),
      norm_(SceneNormalization::from_bounds(manifest.bounds_min, manifest.bounds_max)),
      near_(manifest.near),
      far_(manifest.far),
      num_classes_(manifest.num_classes()) {
  check_bounds(checkpoint, manifest);
  has_semantics_ = meta_string(checkpoint, "stage") == kSegStage;
  if (has_semantics_) variant_ = parse_variant(meta_string(checkpoint, "variant"));
}

RenderedFrame Renderer::render(const Camera& camera, RenderMode mode, const Image* texture) const {
  if (mode == RenderMode::kSemantic && !has_semantics_) {
    fail(ErrorCode::kCapability, "semantic rendering needs a seg checkpoint; this one is color-only");
  }
  camera.validate();
  const bool semantic = mode == RenderMode::kSemantic;
  const ViewTrace t = trace_view(model_, params_, norm_, camera, near_, far_, semantic);
  RenderedFrame f;
  f.width = t.width;
  f.height = t.height;
  f.rgb = t.rgb;
  f.depth = t.depth;
  if (semantic) {
    if (texture != nullptr && (texture->width != t.width || texture->height != t.height)) {
      fail(ErrorCode::kDimension, "render: texture image does not match the camera size");
    }
    f.num_classes = num_classes_;
    f.labels = classify_view(params_, model_, variant_, t, texture ? texture->rgb : t.rgb, &f.logits);
  }
  return f;
}

double heldout_psnr(const Dataset& data, const Checkpoint& checkpoint, std::size_t limit) {
  const Renderer r(checkpoint, data.manifest);
  const auto views = heldout_views(data.manifest, limit);
  if (views.empty()) fail(ErrorCode::kConfiguration, "no held-out views to evaluate");
  double total = 0.0;
  for (std::size_t v : views) {
    total += psnr(r.render(data.manifest.views[v].camera, RenderMode::kRgb).rgb, data.images[v].rgb);
  }
  return total / static_cast<double>(views.size());
}

ConfusionMatrix heldout_confusion(const Dataset& data, const Checkpoint& checkpoint,
                                  std::size_t limit) {
  const Renderer r(checkpoint, data.manifest);
  ConfusionMatrix cm(data.manifest.num_classes());
  for (std::size_t v : heldout_views(data.manifest, limit)) {
    if (!data.eval_labels[v]) continue;
    const RenderedFrame f = r.render(data.manifest.views[v].camera, RenderMode::kSemantic, &data.images[v]);
    cm.add(data.eval_labels[v]->ids, f.labels);
  }
  if (cm.total() == 0) fail(ErrorCode::kConfiguration, "no held-out views carry evaluation labels");
  return cm;
}

}  // namespace irt
