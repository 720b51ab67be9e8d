#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>

#include "test_util.hpp"
#include "vasplat/error.hpp"
#include "vasplat/synth.hpp"
#include "vasplat/trainer.hpp"

using namespace vasplat;
using namespace vasplat::testing;
namespace fs = std::filesystem;

namespace {

SynthSpec small_spec() {
  SynthSpec s;
  s.width = 32;
  s.height = 32;
  s.frames = 8;
  s.neutral_frames = 2;
  s.emotional_stride = 4;
  s.audio_only = 6;
  s.clone_margin = 3;
  return s;
}

const SynthResult& small_synth() {
  static const SynthResult r = synth_dataset(3, small_spec());
  return r;
}

// Stage lengths given directly (desk factor 1).
TrainConfig small_config(int canonical, int branch, int finetune) {
  TrainConfig c;
  c.desk_factor = 1.0;
  c.canonical_steps = canonical;
  c.branch_steps = branch;
  c.finetune_steps = finetune;
  c.half_life = 1000.0;
  c.deformation.hidden = {16, 16};
  c.deformation.hash.log2_table_size = 10;
  c.deformation.hash.levels = 4;
  c.densify.interval = 1000;
  c.seed = 11;
  return c;
}

std::vector<double> field_values(const GaussianField& f) {
  std::vector<double> out;
  for (const GaussianParams& g : f.gaussians) {
    out.insert(out.end(), g.position.data(), g.position.data() + 3);
    out.insert(out.end(), g.log_scale.data(), g.log_scale.data() + 3);
    out.insert(out.end(), g.rotation.data(), g.rotation.data() + 4);
    out.push_back(g.opacity_logit);
    out.insert(out.end(), g.color.data(), g.color.data() + 3);
    out.insert(out.end(), g.normal_residual.data(), g.normal_residual.data() + 3);
  }
  return out;
}

std::vector<double> branch_values(const DeformationModel& m, const std::string& prefix) {
  std::vector<double> out;
  for (const NamedTensor& t : m.tensors()) {
    if (t.name.rfind(prefix + ".", 0) == 0) out.insert(out.end(), t.values.begin(), t.values.end());
  }
  return out;
}

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("vasplat_trainer_" + name);
  fs::remove_all(p);
  return p;
}

double mean_composite_l1(const Model& model, const Dataset& ds) {
  double s = 0.0;
  for (std::size_t t = 0; t < ds.size(); ++t) {
    const FrameConditions& c = ds.conditions[t];
    const FrameRender fr = render_frame(model, c.audio, c.action_units, c.emotion, c.camera);
    s += l1_loss(fr.composite.image, ds.frames[t]);
  }
  return s / ds.size();
}

}  // namespace

// ---- Optimizer ----------------------------------------------------------------------

TEST(Schedule, InitialRateIsBaseRate) { EXPECT_EQ(exp_schedule(5e-4, 0.999, 0), 5e-4); }

TEST(Schedule, HalvingPerThousandGivesQuarterAtTwoThousand) {
  EXPECT_NEAR(exp_schedule(1.0, decay_for_half_life(1000.0), 2000), 0.25, 1e-12);
}

TEST(Adam, ThreeStepsMatchHandRecursion) {
  const double g = 0.3, lr = 0.01;
  AdamConfig c;
  double x = 1.0;
  AdamState s;
  double m = 0, v = 0, ref = 1.0;
  for (int t = 1; t <= 3; ++t) {
    adam_update(&x, &g, 1, s, lr, c, "scalar");
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    ref -= lr * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.999, t))) + 1e-15);
    EXPECT_NEAR(x, ref, 1e-15) << "step " << t;
  }
}

TEST(Adam, WeightDecayIsDecoupled) {
  AdamConfig c;
  c.weight_decay = 0.1;
  const double g = 0.4;
  double plain = 2.0, decayed = 2.0;
  AdamState s1, s2;
  adam_update(&plain, &g, 1, s1, 0.5, {}, "plain");
  adam_update(&decayed, &g, 1, s2, 0.5, c, "decay");
  EXPECT_NEAR(plain - decayed, 0.5 * 0.1 * 2.0, 1e-15);
}

TEST(Adam, NonFiniteGradientNamesGroup) {
  double x = 1.0;
  const double g = std::nan("");
  AdamState s;
  try {
    adam_update(&x, &g, 1, s, 0.1, {}, "face.encoder");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kNonFinite);
    EXPECT_NE(std::string(e.what()).find("face.encoder"), std::string::npos);
  }
  EXPECT_EQ(x, 1.0);
}

// ---- Config -------------------------------------------------------------------------

TEST(TrainConfig, PublishedDefaults) {
  const TrainConfig c;
  EXPECT_EQ(c.lr_encoder, 5e-3);
  EXPECT_EQ(c.lr_network, 5e-4);
  EXPECT_EQ(c.branch_steps, 50000);
  EXPECT_EQ(c.finetune_steps, 20000);
  EXPECT_EQ(c.adam.beta1, 0.9);
  EXPECT_EQ(c.adam.beta2, 0.999);
  EXPECT_EQ(c.adam.eps, 1e-15);
  EXPECT_EQ(c.scaled(c.branch_steps), 2000);
  EXPECT_EQ(c.scaled(c.finetune_steps), 800);
  EXPECT_EQ(c.densify.interval, 500);
  EXPECT_EQ(c.densify.grad_threshold, 2e-4);
  EXPECT_EQ(c.densify.opacity_floor, 0.005);
}

TEST(TrainConfig, JsonRoundTrip) {
  TrainConfig c = small_config(3, 4, 5);
  c.weights.beta[5] = 0.07;
  c.seed = 99;
  const TrainConfig back = train_config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
  EXPECT_EQ(config_hash(back), config_hash(c));
  c.seed = 100;
  EXPECT_NE(config_hash(back), config_hash(c));
}

TEST(TrainConfig, RejectsUnknownKeysAndBadRates) {
  EXPECT_THROW(train_config_from_json({{"learning_rate", 1}}), Error);
  EXPECT_THROW(train_config_from_json({{"lr", {{"encoder", 0.0}}}}), Error);
  EXPECT_THROW(train_config_from_json({{"densify", {{"opacity_floor", 1.5}}}}), Error);
  EXPECT_THROW(train_config_from_json({{"weights", {{"gamma", {1, 2}}}}}), Error);
}

// ---- Densification ------------------------------------------------------------------

TEST(Densify, LowOpacityGaussianIsPruned) {
  GaussianField f = random_field(5, 6);
  f.gaussians[2].opacity_logit = std::log(0.004 / 0.996);
  const DensifyResult r = densify_and_prune(f, std::vector<double>(6, 0.0), DensifyConfig{});
  EXPECT_EQ(r.pruned, 1);
  ASSERT_EQ(f.size(), 5u);
  EXPECT_EQ(r.source, (std::vector<long>{0, 1, 3, 4, 5}));
}

TEST(Densify, CloneConservesRender) {
  const Camera cam = test_camera(32, 32);
  GaussianField f = random_field(6, 5);
  const Image before = render(f, cam).color;
  std::vector<double> grad(5, 0.0);
  grad[1] = 1.0;
  DensifyConfig cfg;
  cfg.percent_dense = 100.0;  // everything counts as small
  const DensifyResult r = densify_and_prune(f, grad, cfg);
  EXPECT_EQ(r.cloned, 1);
  ASSERT_EQ(f.size(), 6u);
  EXPECT_LT(l1_loss(render(f, cam).color, before), 1e-3);
}

TEST(Densify, SplitConservesRender) {
  const Camera cam = test_camera(32, 32);
  for (std::uint64_t seed : {7u, 8u, 9u}) {
    GaussianField f = random_field(seed, 6);
    const Image before = render(f, cam).color;
    std::vector<double> grad(6, 0.0);
    grad[seed % 6] = 1.0;
    DensifyConfig cfg;
    cfg.percent_dense = 1e-6;  // everything counts as large
    const DensifyResult r = densify_and_prune(f, grad, cfg);
    EXPECT_EQ(r.split, 1);
    EXPECT_LT(l1_loss(render(f, cam).color, before), 1e-3) << "seed " << seed;
  }
}

TEST(Densify, RespectsMaxCount) {
  GaussianField f = random_field(10, 4);
  DensifyConfig cfg;
  cfg.max_gaussians = 5;
  const DensifyResult r = densify_and_prune(f, std::vector<double>(4, 1.0), cfg);
  EXPECT_EQ(f.size(), 5u);
  EXPECT_EQ(r.split + r.cloned, 1);
}

// ---- Synthetic rig -------------------------------------------------------------------

TEST(Synth, FixedSeedIsByteIdentical) {
  const fs::path a = temp_dir("synth_a"), b = temp_dir("synth_b");
  save_dataset(synth_dataset(3, small_spec()).dataset, a);
  save_dataset(synth_dataset(3, small_spec()).dataset, b);
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(a))
    if (e.is_regular_file()) files.push_back(fs::relative(e.path(), a));
  EXPECT_GT(files.size(), 30u);
  for (const fs::path& f : files) EXPECT_EQ(read_file(a / f), read_file(b / f)) << f;
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(Synth, NeutralEmotionEqualsActionUnitOnlyFrames) {
  const SynthResult& s = small_synth();
  for (std::size_t t = 0; t < s.dataset.size(); ++t) {
    EXPECT_EQ(s.rig.render(s.latents[t], Vec2::Zero()).image.data, s.dataset.frames[t].data);
  }
}

TEST(Synth, OffsetsScaleLinearlyWithConditions) {
  const SynthRig& rig = small_synth().rig;
  const GaussianField base = rig.face();
  const GaussianField one = rig.deform_face({0.3, 0.2}, Vec2(0.1, -0.2));
  const GaussianField two = rig.deform_face({0.6, 0.4}, Vec2(0.2, -0.4));
  for (std::size_t i = 0; i < base.size(); ++i) {
    const Vec3 d1 = one.gaussians[i].position - base.gaussians[i].position;
    const Vec3 d2 = two.gaussians[i].position - base.gaussians[i].position;
    EXPECT_LT((d2 - 2.0 * d1).norm(), 1e-12);
    const Vec3 s1 = one.gaussians[i].log_scale - base.gaussians[i].log_scale;
    const Vec3 s2 = two.gaussians[i].log_scale - base.gaussians[i].log_scale;
    EXPECT_LT((s2 - 2.0 * s1).norm(), 1e-12);
  }
}

TEST(Synth, LayoutAndHeldOutPoints) {
  const Dataset& ds = small_synth().dataset;
  EXPECT_EQ(ds.size(), 8u);
  EXPECT_EQ(ds.neutral_frames, (std::vector<int>{0, 1}));
  EXPECT_EQ(ds.emotional_targets.size(), 2u * 8u);
  EXPECT_EQ(synth_train_emotions().size(), 8u);
  EXPECT_EQ(synth_heldout_emotions().size(), 4u);
  for (const Vec2& e : synth_heldout_emotions()) EXPECT_NEAR(e.norm(), 0.495, 0.01);
  for (const EmotionalTarget& t : ds.emotional_targets) {
    EXPECT_NEAR(t.emotion.norm(), 0.8, 0.01);
  }
}

// ---- Stages --------------------------------------------------------------------------

TEST(Trainer, ZeroIterationsLeaveFieldsUnchanged) {
  const Dataset& ds = small_synth().dataset;
  Trainer tr(small_config(0, 0, 0), ds);
  const auto mouth = field_values(tr.model().mouth), face = field_values(tr.model().face);
  tr.optimize_canonical();
  tr.finetune_border();
  EXPECT_EQ(field_values(tr.model().mouth), mouth);
  EXPECT_EQ(field_values(tr.model().face), face);
  EXPECT_EQ(field_values(tr.model().face), field_values(*ds.init_face));
}

TEST(Trainer, CanonicalPrunesAtDensifyBoundary) {
  Dataset ds = small_synth().dataset;
  ds.init_face->gaussians[0].opacity_logit = -12.0;
  TrainConfig c = small_config(4, 0, 0);
  c.densify.interval = 2;
  c.densify.grad_threshold = 1e9;  // prune only
  Trainer tr(c, ds);
  const std::size_t before = tr.model().face.size();
  tr.optimize_canonical();
  EXPECT_EQ(tr.model().face.size(), before - 1);
}

TEST(Trainer, CanonicalReducesLossAndLeavesNetworks) {
  const Dataset& ds = small_synth().dataset;
  Trainer tr(small_config(60, 0, 0), ds);
  const auto nets = tr.model().deformation.tensors();
  tr.optimize_canonical();
  const auto& log = tr.log();
  ASSERT_EQ(log.size(), 60u);
  double head = 0, tail = 0;
  for (int i = 0; i < 10; ++i) {
    head += log[i].losses.at("total");
    tail += log[log.size() - 1 - i].losses.at("total");
  }
  EXPECT_LT(tail, head);
  const auto after = tr.model().deformation.tensors();
  for (std::size_t i = 0; i < nets.size(); ++i) {
    if (nets[i].name.rfind("bounds.", 0) == 0) continue;  // recomputed from the trained fields
    EXPECT_EQ(nets[i].values, after[i].values) << nets[i].name;
  }
}

TEST(Trainer, EachBranchStageUpdatesOnlyItsBranch) {
  const Dataset& ds = small_synth().dataset;
  Trainer tr(small_config(0, 6, 0), ds);
  const auto mouth_c = field_values(tr.model().mouth), face_c = field_values(tr.model().face);
  for (BranchKind kind : {BranchKind::kMouth, BranchKind::kFace, BranchKind::kEmotion}) {
    const DeformationModel& dm = tr.model().deformation;
    const auto m = branch_values(dm, "mouth"), f = branch_values(dm, "face"),
               e = branch_values(dm, "emotion");
    tr.train_branch(kind);
    EXPECT_EQ(branch_values(dm, "mouth") == m, kind != BranchKind::kMouth) << to_string(kind);
    EXPECT_EQ(branch_values(dm, "face") == f, kind != BranchKind::kFace) << to_string(kind);
    EXPECT_EQ(branch_values(dm, "emotion") == e, kind != BranchKind::kEmotion) << to_string(kind);
    EXPECT_EQ(field_values(tr.model().mouth), mouth_c);
    EXPECT_EQ(field_values(tr.model().face), face_c);
  }
}

TEST(Trainer, EmotionBranchNeedsTargets) {
  Dataset ds = small_synth().dataset;
  ds.emotional_targets.clear();
  Trainer tr(small_config(0, 2, 0), ds);
  try {
    tr.train_branch(BranchKind::kEmotion);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kMissingData);
  }
}

TEST(Trainer, BorderFinetuneTouchesOnlyOpacityAndColor) {
  const Dataset& ds = small_synth().dataset;
  Trainer tr(small_config(0, 0, 5), ds);
  const GaussianField before = tr.model().face;
  tr.finetune_border();
  const GradientBuffer& g = tr.last_border_gradient();
  ASSERT_EQ(g.size(), before.size());
  double opacity_color = 0.0;
  for (const GaussianGrad& gg : g.grads) {
    EXPECT_EQ(gg.position, Vec3::Zero());
    EXPECT_EQ(gg.log_scale, Vec3::Zero());
    EXPECT_EQ(gg.rotation, Vec4::Zero());
    EXPECT_EQ(gg.normal_residual, Vec3::Zero());
    opacity_color += std::abs(gg.opacity_logit) + gg.color.cwiseAbs().sum();
  }
  EXPECT_GT(opacity_color, 0.0);
  bool color_moved = false;
  for (std::size_t i = 0; i < before.size(); ++i) {
    const GaussianParams &a = before.gaussians[i], &b = tr.model().face.gaussians[i];
    EXPECT_EQ(a.position, b.position);
    EXPECT_EQ(a.log_scale, b.log_scale);
    EXPECT_EQ(a.rotation, b.rotation);
    EXPECT_EQ(a.normal_residual, b.normal_residual);
    color_moved = color_moved || a.color != b.color;
  }
  EXPECT_TRUE(color_moved);
}

TEST(Trainer, BorderFinetuneDoesNotIncreaseCompositeLoss) {
  const Dataset& ds = small_synth().dataset;
  Trainer tr(small_config(0, 0, 40), ds);
  const double before = mean_composite_l1(tr.model(), ds);
  tr.finetune_border();
  EXPECT_LE(mean_composite_l1(tr.model(), ds), before);
}

TEST(Trainer, PlainL1DecreasesOverWindows) {
  const Dataset& ds = small_synth().dataset;
  TrainConfig c = small_config(0, 400, 0);
  c.weights.beta = {0, 0, 0, 0, 0, 0};
  c.sync_interval = 0;
  Trainer tr(c, ds);
  tr.train_branch(BranchKind::kFace);
  std::vector<double> medians;
  for (std::size_t w = 0; w + 100 <= tr.log().size(); w += 100) {
    std::vector<double> v;
    for (std::size_t i = w; i < w + 100; ++i) v.push_back(tr.log()[i].losses.at("l1"));
    std::nth_element(v.begin(), v.begin() + 50, v.end());
    medians.push_back(v[50]);
  }
  ASSERT_EQ(medians.size(), 4u);
  int violations = 0;
  for (std::size_t i = 1; i < medians.size(); ++i) violations += medians[i] > medians[i - 1];
  EXPECT_LE(violations, 1);
  EXPECT_LT(medians.back(), medians.front());
}

TEST(Trainer, FixedSeedGivesIdenticalTrajectoryAndCheckpoint) {
  const Dataset& ds = small_synth().dataset;
  std::vector<std::uint64_t> digests;
  std::vector<std::vector<double>> losses;
  for (int run = 0; run < 2; ++run) {
    TrainConfig c = small_config(5, 4, 3);
    c.output = temp_dir("det").string();  // same path: config.json records it
    Trainer tr(c, ds);
    tr.run();
    std::vector<double> l;
    for (const LogEntry& e : tr.log()) l.push_back(e.losses.at("total"));
    losses.push_back(l);
    digests.push_back(checkpoint_digest(c.output));
    fs::remove_all(c.output);
  }
  EXPECT_EQ(losses[0], losses[1]);
  EXPECT_EQ(digests[0], digests[1]);
}

// ---- Checkpoints ---------------------------------------------------------------------

TEST(Checkpoint, RoundTripRendersTheSameFrame) {
  const Dataset& ds = small_synth().dataset;
  Trainer tr(small_config(0, 3, 0), ds);
  tr.train_branch(BranchKind::kFace);
  const fs::path dir = temp_dir("ckpt");
  save_checkpoint(dir, tr.model(), tr.config(), tr.optimizer_tensors());
  EXPECT_FALSE(fs::exists(dir.string() + ".tmp"));
  const Checkpoint ck = load_checkpoint(dir);
  EXPECT_EQ(ck.model.conditions.size(), ds.size());
  EXPECT_EQ(ck.meta.at("condition_dims").at("a"), 32);
  EXPECT_EQ(ck.meta.at("condition_dims").at("u"), 7);
  EXPECT_EQ(ck.meta.at("condition_dims").at("e"), 2);
  const FrameConditions& c = ds.conditions[5];
  const Image a = render_frame(tr.model(), c.audio, c.action_units, Vec2(0.3, 0.1), c.camera).composite.image;
  const Image b = render_frame(ck.model, c.audio, c.action_units, Vec2(0.3, 0.1), c.camera).composite.image;
  EXPECT_LT(l1_loss(a, b), 1e-4);  // parameters are stored as float32
  // Saving the loaded model again reproduces the same files.
  const fs::path again = temp_dir("ckpt_again");
  save_checkpoint(again, ck.model, ck.config, tr.optimizer_tensors());
  EXPECT_EQ(checkpoint_digest(dir), checkpoint_digest(again));
  fs::remove_all(dir);
  fs::remove_all(again);
}

TEST(Checkpoint, MissingDirectoryIsAnIoError) {
  try {
    load_checkpoint("/nonexistent/vasplat");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kIo);
  }
}
