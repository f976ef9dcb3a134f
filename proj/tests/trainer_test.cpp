#include "irt/trainer.hpp"

#include <gtest/gtest.h>
#include <unistd.h>

#include <cmath>
#include <sstream>

#include "irt/errors.hpp"

namespace irt {
namespace {

namespace fs = std::filesystem;

std::vector<double> vec(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

RunConfig tiny_run() {
  RunConfig c;
  FieldConfig& f = c.model.field;
  f.encoding.num_freqs_pos = 2;
  f.encoding.num_freqs_dir = 1;
  f.trunk_depth = 2;
  f.trunk_width = 16;
  f.skip_layer = 1;
  f.feature_dim = 8;
  f.dir_width = 8;
  c.model.num_coarse = 8;
  c.model.num_fine = 8;
  c.model.rt = {4, 8, 2, 1, 2, 4};
  c.model.cnn = {4, 4, 2};
  c.train.iterations_1 = 6;
  c.train.iterations_2 = 6;
  c.train.batch_rays = 8;
  c.train.eval_every = 0;
  c.train.log_every = 1;
  c.train.seed = 11;
  return c;
}

void expect_same_tensors(const ParamStore& a, const ParamStore& b) {
  ASSERT_EQ(a.names(), b.names());
  for (const auto& n : a.names()) EXPECT_EQ(vec(a.get(n)), vec(b.get(n))) << n;
}

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  return ErrorCode::kOk;
}

class TrainerTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = fs::temp_directory_path() / ("irt_trainer_" + std::to_string(::getpid()));
    MicroTownOptions o;
    o.width = o.height = 12;
    const SceneOracle s = micro_town();
    make_scene_dataset(s, micro_town_rig(s, o), root_);
    data_ = new Dataset(load_dataset(root_));
    color_ = new Checkpoint(train_color(*data_, tiny_run()).checkpoint);
  }
  static void TearDownTestSuite() {
    delete color_;
    delete data_;
    fs::remove_all(root_);
  }

  static fs::path root_;
  static Dataset* data_;
  static Checkpoint* color_;
};

fs::path TrainerTest::root_;
Dataset* TrainerTest::data_ = nullptr;
Checkpoint* TrainerTest::color_ = nullptr;

TEST_F(TrainerTest, ZeroIterationsEqualsInitialization) {
  RunConfig c = tiny_run();
  c.train.iterations_1 = 0;
  const StageOutcome r = train_color(*data_, c);
  expect_same_tensors(r.checkpoint.tensors, init_color_params(c.model, c.train.seed));
  EXPECT_TRUE(r.steps.empty());
}

TEST_F(TrainerTest, ColorRerunIsBitwiseIdentical) {
  const StageOutcome again = train_color(*data_, tiny_run());
  expect_same_tensors(again.checkpoint.tensors, color_->tensors);
}

TEST_F(TrainerTest, ColorResumeMatchesStraightRun) {
  RunConfig half = tiny_run();
  half.train.iterations_1 = 3;
  const fs::path path = root_ / "half.ckpt";
  save_checkpoint(train_color(*data_, half).checkpoint, path);
  const Checkpoint loaded = load_checkpoint(path);
  TrainOptions o;
  o.resume = &loaded;
  const StageOutcome rest = train_color(*data_, tiny_run(), o);
  ASSERT_EQ(rest.steps.size(), 3u);
  EXPECT_EQ(rest.steps.front().step, 4);
  expect_same_tensors(rest.checkpoint.tensors, color_->tensors);
}

TEST_F(TrainerTest, SegResumeMatchesStraightRun) {
  const RunConfig c = tiny_run();
  const StageOutcome full = train_seg(*data_, *color_, c);
  RunConfig half = c;
  half.train.iterations_2 = 3;
  const Checkpoint mid = train_seg(*data_, *color_, half).checkpoint;
  TrainOptions o;
  o.resume = &mid;
  const StageOutcome rest = train_seg(*data_, *color_, c, o);
  expect_same_tensors(rest.checkpoint.tensors, full.checkpoint.tensors);
  expect_same_tensors(train_seg(*data_, *color_, c).checkpoint.tensors, full.checkpoint.tensors);
}

TEST_F(TrainerTest, TrunkIsFrozenThroughSegTraining) {
  for (Variant v : kAllVariants) {
    RunConfig c = tiny_run();
    c.train.variant = v;
    const StageOutcome r = train_seg(*data_, *color_, c);
    EXPECT_EQ(hash_params(r.checkpoint.tensors, "field/"), hash_params(color_->tensors, "field/"))
        << variant_name(v);
    EXPECT_EQ(hash_params(r.checkpoint.tensors, kTrunkPrefix), hash_params(color_->tensors, kTrunkPrefix));
    EXPECT_TRUE(r.checkpoint.tensors.names_with_prefix("adam/m/field/").empty());
  }
}

TEST_F(TrainerTest, UnusedBranchesKeepTheirInitialValues) {
  RunConfig c = tiny_run();
  c.train.variant = Variant::kB;
  const StageOutcome r = train_seg(*data_, *color_, c);
  const ParamStore init = init_seg_params(c.model, data_->manifest.num_classes(), c.train.seed);
  for (const auto& n : init.names_with_prefix(kCnnPrefix)) {
    EXPECT_EQ(vec(r.checkpoint.tensors.get(n)), vec(init.get(n))) << n;
  }
  EXPECT_EQ(vec(r.checkpoint.tensors.get(kSegPrefix + "Wc")), vec(init.get(kSegPrefix + "Wc")));
  EXPECT_NE(vec(r.checkpoint.tensors.get(kSegPrefix + "Ws")), vec(init.get(kSegPrefix + "Ws")));
}

TEST_F(TrainerTest, SemanticLogitsIgnoreViewDirection) {
  RunConfig c = tiny_run();
  const Checkpoint seg = train_seg(*data_, *color_, c).checkpoint;
  const NeuralField field(c.model.field);
  const Binding p(seg.tensors, nullptr, {});
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-0.9, 0.9);
  std::vector<double> pos(4 * 12 * 3);
  for (auto& x : pos) x = u(rng);
  const Tensor positions = Tensor::constant({4, 12, 3}, pos);
  std::vector<double> deltas(4 * 12, 0.05);
  std::vector<double> d1, d2;
  for (int r = 0; r < 4; ++r) {
    d1.insert(d1.end(), {0.0, 0.0, 1.0});
    d2.insert(d2.end(), {1.0, 0.0, 0.0});
  }
  const Tensor cnn = Tensor::constant({4, c.model.cnn.feature_channels}, std::vector<double>(16, 0.3));
  auto logits = [&](const std::vector<double>& dirs) {
    const FieldOutput out = field.forward(p, positions, Tensor::constant({4, 3}, dirs));
    const Selection sel = select_valid(out.sigma, out.feat, deltas, c.model.rt.k);
    const Tensor pts = ray_transform(p, c.model.rt, sel.feats, cnn, Variant::kRTTC);
    return vec(fuse_and_classify(p, render_semantic(pts, sel.sigma, sel.deltas), cnn, Variant::kRTTC));
  };
  EXPECT_EQ(logits(d1), logits(d2));
}

TEST_F(TrainerTest, RendersAreDeterministic) {
  RunConfig c = tiny_run();
  const Checkpoint seg = train_seg(*data_, *color_, c).checkpoint;
  const Renderer r(seg, data_->manifest);
  const Camera& cam = data_->manifest.views[9].camera;
  const RenderedFrame a = r.render(cam, RenderMode::kSemantic, &data_->images[9]);
  const RenderedFrame b = r.render(cam, RenderMode::kSemantic, &data_->images[9]);
  EXPECT_EQ(a.rgb, b.rgb);
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_EQ(a.logits, b.logits);
  EXPECT_EQ(a.labels.size(), 144u);
  EXPECT_EQ(a.logits.size(), 144u * data_->manifest.num_classes());
  EXPECT_EQ(Renderer(*color_, data_->manifest).render(cam, RenderMode::kRgb).rgb, a.rgb);
}

TEST_F(TrainerTest, SemanticModeNeedsSegCheckpoint) {
  const Renderer r(*color_, data_->manifest);
  EXPECT_FALSE(r.has_semantics());
  EXPECT_EQ(code_of([&] { r.render(data_->manifest.views[0].camera, RenderMode::kSemantic); }),
            ErrorCode::kCapability);
  EXPECT_EQ(code_of([&] { parse_render_mode("normals"); }), ErrorCode::kUsage);
}

TEST_F(TrainerTest, IncompatibleCheckpointsAreRejected) {
  Checkpoint moved = *color_;
  moved.meta["bounds"]["max"][0] = 9.0;
  EXPECT_EQ(code_of([&] { train_seg(*data_, moved, tiny_run()); }), ErrorCode::kCheckpoint);

  RunConfig wider = tiny_run();
  wider.model.field.trunk_width = 32;
  EXPECT_EQ(code_of([&] { train_seg(*data_, *color_, wider); }), ErrorCode::kConfiguration);

  RunConfig half = tiny_run();
  half.train.iterations_2 = 2;
  const Checkpoint rt = train_seg(*data_, *color_, half).checkpoint;
  RunConfig other = tiny_run();
  other.train.variant = Variant::kB;
  TrainOptions o;
  o.resume = &rt;
  EXPECT_EQ(code_of([&] { train_seg(*data_, *color_, other, o); }), ErrorCode::kConfiguration);
  // A seg checkpoint cannot resume stage 1.
  EXPECT_EQ(code_of([&] { train_color(*data_, tiny_run(), o); }), ErrorCode::kCheckpoint);
}

TEST_F(TrainerTest, NonFiniteStepAbortsWithDiagnostic) {
  Checkpoint broken = train_color(*data_, [] {
                        RunConfig c = tiny_run();
                        c.train.iterations_1 = 1;
                        return c;
                      }()).checkpoint;
  for (auto& v : broken.tensors.get(kTrunkPrefix + "l1/W").mutable_values()) v = 1e308;
  TrainOptions o;
  o.resume = &broken;
  try {
    train_color(*data_, tiny_run(), o);
    FAIL() << "expected a numeric abort";
  } catch (const Error& e) {
    const std::string msg = e.what();
    EXPECT_EQ(e.code(), ErrorCode::kNumeric);
    EXPECT_NE(msg.find("step 2"), std::string::npos) << msg;
    EXPECT_NE(msg.find("views {"), std::string::npos) << msg;
    EXPECT_NE(msg.find("layer 1"), std::string::npos) << msg;
  }
}

TEST_F(TrainerTest, WorkerCountIsDeterministic) {
  RunConfig c = tiny_run();
  c.train.workers = 3;
  const StageOutcome a = train_color(*data_, c);
  const StageOutcome b = train_color(*data_, c);
  expect_same_tensors(a.checkpoint.tensors, b.checkpoint.tensors);
  c.train.variant = Variant::kRTTC;
  expect_same_tensors(train_seg(*data_, *color_, c).checkpoint.tensors,
                      train_seg(*data_, *color_, c).checkpoint.tensors);
}

TEST_F(TrainerTest, LogAndPeriodicCheckpoints) {
  RunConfig c = tiny_run();
  c.train.checkpoint_every = 2;
  c.train.eval_every = 3;
  c.train.eval_views = 1;
  std::ostringstream log;
  TrainOptions o;
  o.out_dir = root_ / "run";
  o.log = &log;
  const StageOutcome r = train_color(*data_, c, o);
  for (int s : {2, 4, 6}) {
    char name[16];
    std::snprintf(name, sizeof name, "step-%06d", s);
    EXPECT_TRUE(fs::exists(o.out_dir / "ckpt" / name)) << name;
  }
  expect_same_tensors(load_checkpoint(o.out_dir / "ckpt" / "step-000006").tensors,
                      r.checkpoint.tensors);
  ASSERT_EQ(r.evals.size(), 2u);
  std::istringstream in(log.str());
  std::string line;
  int records = 0;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream f(line);
    long long step;
    double loss, psnr;
    ASSERT_TRUE(f >> step >> loss >> psnr) << line;
    EXPECT_EQ(step, ++records);
    EXPECT_TRUE(std::isfinite(loss) && loss > 0.0);
  }
  EXPECT_EQ(records, 6);
}

TEST(TrainConfigTest, JsonRoundTripAndValidation) {
  RunConfig c = micro_town_config();
  c.train.variant = Variant::kRTC;
  c.train.seed = 99;
  const RunConfig back = nlohmann::json(c).get<RunConfig>();
  EXPECT_EQ(nlohmann::json(back), nlohmann::json(c));
  const RunConfig partial = nlohmann::json::parse(R"({"train": {"iterations_1": 7}})").get<RunConfig>();
  EXPECT_EQ(partial.train.iterations_1, 7);
  EXPECT_EQ(partial.train.iterations_2, 5000);
  TrainConfig bad;
  bad.iterations_2 = -1;
  EXPECT_EQ(code_of([&] { bad.validate(); }), ErrorCode::kConfiguration);
  bad = TrainConfig{};
  bad.batch_rays = 0;
  EXPECT_EQ(code_of([&] { bad.validate(); }), ErrorCode::kConfiguration);
  EXPECT_EQ(code_of([] { nlohmann::json(R"({"train": {"variant": "XL"}})"_json).get<RunConfig>(); }),
            ErrorCode::kUsage);
}

TEST(TrainConfigTest, ShippedMicroTownConfigMatchesBuiltIn) {
  const RunConfig shipped = load_run_config(IRT_CONFIG_DIR "/micro_town.json");
  EXPECT_EQ(nlohmann::json(shipped), nlohmann::json(micro_town_config()));
  EXPECT_EQ(code_of([] { load_run_config(IRT_CONFIG_DIR "/missing.json"); }), ErrorCode::kIo);
}

}  // namespace
}  // namespace irt
