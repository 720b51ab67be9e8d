#include <gtest/gtest.h>

#include <filesystem>
#include <set>
#include <sstream>

#include "vasplat/cli.hpp"
#include "vasplat/composite.hpp"
#include "vasplat/error.hpp"
#include "vasplat/losses.hpp"

using namespace vasplat;
namespace fs = std::filesystem;

namespace {

SynthSpec small_spec() {
  SynthSpec spec;
  spec.width = spec.height = 32;
  spec.frames = 8;
  spec.neutral_frames = 2;
  spec.audio_only = 4;
  spec.clone_margin = 3;
  return spec;
}

struct Fixture {
  SynthResult synth;
  fs::path dataset_dir, untrained, trained;

  Fixture() : synth(synth_dataset(5, small_spec())) {
    const fs::path root = fs::temp_directory_path() / "vasplat_cli_test";
    fs::remove_all(root);
    dataset_dir = root / "dataset";
    untrained = root / "untrained";
    trained = root / "trained";
    save_dataset(synth.dataset, dataset_dir);

    TrainConfig c;
    c.desk_factor = 1.0;
    c.canonical_steps = 10;
    c.branch_steps = 4;
    c.finetune_steps = 2;
    c.deformation.hidden = {16, 16};
    c.deformation.hash.log2_table_size = 10;
    c.deformation.hash.levels = 4;
    c.dataset = dataset_dir.string();
    c.output = untrained.string();
    Trainer fresh(c, synth.dataset);
    save_checkpoint(untrained, fresh.model(), fresh.config());
    c.output = trained.string();
    Trainer tr(c, synth.dataset);
    tr.run();
  }
};

const Fixture& fixture() {
  static const Fixture f;
  return f;
}

std::string capture_stderr(const std::function<int()>& fn, int* rc) {
  std::ostringstream err;
  auto* old = std::cerr.rdbuf(err.rdbuf());
  *rc = run_command(fn);
  std::cerr.rdbuf(old);
  return err.str();
}

}  // namespace

TEST(RenderRequest, ParsesAndValidates) {
  const RenderRequest r = RenderRequest::from_json({{"frame", 2}, {"v", 0.5}, {"w", 16}});
  EXPECT_EQ(r.frame, 2);
  ASSERT_TRUE(r.emotion);
  EXPECT_EQ(*r.emotion, Vec2(0.5, 0.0));
  EXPECT_EQ(r.width, 16);
  EXPECT_FALSE(RenderRequest::from_json(nlohmann::json::object()).emotion);
  EXPECT_THROW(RenderRequest::from_json({{"valence", 0.5}}), Error);
  EXPECT_THROW(RenderRequest::from_json({{"frame", 0.5}}), Error);
  EXPECT_THROW(RenderRequest::from_json({{"v", "high"}}), Error);
  EXPECT_THROW(RenderRequest::from_json({{"w", 10000}}), Error);
  EXPECT_THROW(RenderRequest::from_json(nlohmann::json::array()), Error);
}

TEST(RenderRequest, OutOfRangeEmotionIsClampedAndReported) {
  const Model& m = load_checkpoint(fixture().trained).model;
  RenderRequest r;
  r.emotion = Vec2(1.5, 0.2);
  const RenderedFrame over = render_request(m, r);
  EXPECT_TRUE(over.clamped);
  r.emotion = Vec2(1.0, 0.2);
  const RenderedFrame edge = render_request(m, r);
  EXPECT_FALSE(edge.clamped);
  EXPECT_EQ(over.image.data, edge.image.data);
}

TEST(RenderRequest, UnknownFrameIsNotFound) {
  const Model& m = load_checkpoint(fixture().trained).model;
  RenderRequest r;
  r.frame = 8;
  try {
    render_request(m, r);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kNotFound);
  }
}

TEST(RenderRequest, UntrainedCheckpointRendersCanonicalFields) {
  const Checkpoint ck = load_checkpoint(fixture().untrained);
  const Model& m = ck.model;
  RenderRequest r;
  r.emotion = Vec2::Zero();
  const Image got = render_request(m, r).image;
  const Camera& cam = m.conditions[0].camera;
  const Image want = compose(render(m.mouth, cam), render(m.face, cam), m.background).image;
  EXPECT_EQ(got.data, want.data);
}

TEST(RenderRequest, OrbitKeepsThePivotFixed) {
  const Camera base = bench_camera(32, 32);
  const Vec3 pivot(0.1, -0.2, 0.05);
  const Camera cam = orbit_camera(base, pivot, 25.0, -10.0);
  EXPECT_NO_THROW(cam.validate());
  EXPECT_NEAR((cam.to_view(pivot) - base.to_view(pivot)).norm(), 0.0, 1e-12);
  EXPECT_NEAR((cam.center() - pivot).norm(), (base.center() - pivot).norm(), 1e-12);
  EXPECT_GT((cam.center() - base.center()).norm(), 0.1);
  const Camera same = orbit_camera(base, pivot, 0.0, 0.0);
  EXPECT_LT((same.rotation - base.rotation).norm(), 1e-15);
}

TEST(RenderRequest, OutputSizeKeepsAspect) {
  const Model& m = load_checkpoint(fixture().trained).model;
  RenderRequest r;
  r.width = 48;
  const Image img = render_request(m, r).image;
  EXPECT_EQ(img.width, 48);
  EXPECT_EQ(img.height, 48);
}

TEST(Cli, EvalOfGroundTruthAgainstItself) {
  const fs::path out = fs::temp_directory_path() / "vasplat_cli_eval.json";
  ASSERT_EQ(cmd_eval({}, fixture().dataset_dir, out, fixture().dataset_dir / "frames"), 0);
  const nlohmann::json j = nlohmann::json::parse(read_file(out));
  EXPECT_EQ(j.at("psnr"), "inf");
  EXPECT_EQ(j.at("d_ssim").get<double>(), 0.0);
  EXPECT_EQ(j.at("frames"), 8);
}

TEST(Cli, EvalOfCheckpointReportsFinitePsnr) {
  const fs::path out = fs::temp_directory_path() / "vasplat_cli_eval_ck.json";
  ASSERT_EQ(cmd_eval(fixture().trained, fixture().dataset_dir, out), 0);
  const nlohmann::json j = nlohmann::json::parse(read_file(out));
  EXPECT_TRUE(j.at("psnr").is_number());
  EXPECT_GT(j.at("psnr").get<double>(), 15.0);
  EXPECT_TRUE(j.contains("emotional"));
}

TEST(Cli, VaSweepWritesTwelveDistinctFiles) {
  const fs::path dir = fs::temp_directory_path() / "vasplat_cli_sweep";
  fs::remove_all(dir);
  ASSERT_EQ(cmd_render_sweep(fixture().trained, 0, dir), 0);
  std::set<std::string> names, contents;
  for (const auto& e : fs::directory_iterator(dir)) {
    names.insert(e.path().filename().string());
    contents.insert(read_file(e.path()));
  }
  EXPECT_EQ(names.size(), 12u);
  EXPECT_EQ(contents.size(), 12u);
  EXPECT_TRUE(names.count("v0.74_a0.31.png"));
  EXPECT_TRUE(names.count("v-0.35_a-0.35.png"));
}

TEST(Cli, RenderIsByteDeterministic) {
  const fs::path a = fs::temp_directory_path() / "vasplat_cli_a.png";
  const fs::path b = fs::temp_directory_path() / "vasplat_cli_b.png";
  RenderRequest r;
  r.frame = 3;
  r.emotion = Vec2(-0.3, 0.6);
  r.yaw = 12.0;
  ASSERT_EQ(cmd_render(fixture().trained, r, a), 0);
  ASSERT_EQ(cmd_render(fixture().trained, r, b), 0);
  EXPECT_EQ(read_file(a), read_file(b));
}

TEST(Cli, FailuresPrintErrorJson) {
  int rc = 0;
  const std::string err = capture_stderr(
      [] { return cmd_render("/nonexistent/ckpt", {}, "/tmp/x.png"); }, &rc);
  EXPECT_NE(rc, 0);
  const nlohmann::json j = nlohmann::json::parse(err);
  EXPECT_EQ(j.at("error"), "io");
  EXPECT_FALSE(j.at("message").get<std::string>().empty());
}

TEST(Cli, AttentionDumpWritesOneMapPerCondition) {
  const fs::path dir = fs::temp_directory_path() / "vasplat_cli_attn";
  fs::remove_all(dir);
  ASSERT_EQ(cmd_attn_dump(fixture().trained, dir, 1), 0);
  for (const char* f : {"attn_a.png", "attn_u.png", "attn_e.png", "attn.json"}) {
    EXPECT_TRUE(fs::exists(dir / f)) << f;
  }
  const nlohmann::json j = nlohmann::json::parse(read_file(dir / "attn.json"));
  for (const char* k : {"a", "u", "e"}) {
    EXPECT_GT(j.at(k).at("min").get<double>(), 0.0);
    EXPECT_LT(j.at(k).at("max").get<double>(), 1.0);
  }
}

TEST(Cli, CloneWithLandmarksMatchesLibrary) {
  const Dataset& ds = fixture().synth.dataset;
  const fs::path root = fs::temp_directory_path() / "vasplat_cli_clone";
  fs::create_directories(root);
  write_png(root / "src.png", ds.emotional_targets[0].image, PngEncoding::kGamma22);
  write_png(root / "dst.png", ds.frames[0], PngEncoding::kGamma22);
  write_file_atomic(root / "lm.json", R"({"mouth": [[12, 18], [20, 22]]})");
  CloneCommand c;
  c.source = root / "src.png";
  c.destination = root / "dst.png";
  c.landmarks = root / "lm.json";
  c.margin = 2;
  c.out = root / "out.png";
  ASSERT_EQ(cmd_clone(c), 0);
  const Image out = read_png(c.out, 3, PngEncoding::kGamma22);
  const Image dst = read_png(c.destination, 3, PngEncoding::kGamma22);
  // Outside the dilated box the destination is untouched.
  EXPECT_EQ(out.at(2, 2, 0), dst.at(2, 2, 0));
  EXPECT_EQ(out.at(30, 5, 1), dst.at(30, 5, 1));

  c.mask = root / "lm.json";  // both given
  int rc = 0;
  capture_stderr([&] { return cmd_clone(c); }, &rc);
  EXPECT_EQ(rc, 64);
}

TEST(Cli, BenchReportsStageTimings) {
  BenchCommand b;
  b.gaussians = 300;
  b.width = b.height = 64;
  b.repetitions = 2;
  const nlohmann::json r = bench_report(b);
  EXPECT_GT(r.at("fps").get<double>(), 0.0);
  EXPECT_EQ(r.at("gaussians"), 300);
  for (const char* k : {"project_ms", "sort_ms", "blend_ms"}) EXPECT_GE(r.at(k).get<double>(), 0.0);
  EXPECT_EQ(r.at("tile_histogram").at("counts").size(), r.at("tile_histogram").at("edges").size());
}

TEST(Cli, TrainFromConfigFile) {
  const fs::path root = fs::temp_directory_path() / "vasplat_cli_train";
  fs::remove_all(root);
  fs::create_directories(root);
  const nlohmann::json cfg = {{"dataset", fixture().dataset_dir.string()},
                              {"output", (root / "ck").string()},
                              {"desk_factor", 1},
                              {"steps", {{"canonical", 3}, {"branch", 2}, {"finetune", 1}}},
                              {"deformation", {{"hidden", {8, 8}}}}};
  write_file_atomic(root / "cfg.json", cfg.dump());
  ASSERT_EQ(cmd_train(root / "cfg.json"), 0);
  EXPECT_NO_THROW(load_checkpoint(root / "ck"));
  std::istringstream log(read_file(root / "ck.log.jsonl"));
  int lines = 0;
  for (std::string line; std::getline(log, line);) {
    EXPECT_TRUE(nlohmann::json::parse(line).contains("stage"));
    ++lines;
  }
  EXPECT_EQ(lines, 3 + 2 * 3 + 1);
}
