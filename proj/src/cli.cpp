#include "vasplat/cli.hpp"

#include <cmath>
#include <fstream>
#include <iostream>
#include <numbers>

#include <Eigen/Geometry>

#include "vasplat/error.hpp"
#include "vasplat/losses.hpp"
#include "vasplat/poisson.hpp"
#include "vasplat/random.hpp"

namespace vasplat {

namespace fs = std::filesystem;

namespace {

nlohmann::json number_or_inf(double x) {
  if (std::isfinite(x)) return x;
  return std::isnan(x) ? "nan" : (x > 0 ? "inf" : "-inf");
}

nlohmann::json read_json(const fs::path& path) {
  try {
    return nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kMalformedHeader, path.string() + ": " + e.what());
  }
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  write_file_atomic(path, j.dump(2) + "\n");
}

double finite_number(const nlohmann::json& j, const char* key) {
  const nlohmann::json& v = j.at(key);
  if (!v.is_number()) fail(ErrorCode::kInvalidArgument, std::string(key) + " must be a number");
  const double x = v.get<double>();
  if (!std::isfinite(x)) fail(ErrorCode::kInvalidArgument, std::string(key) + " must be finite");
  return x;
}

std::vector<Vec2> points_from_json(const nlohmann::json& j, const char* key) {
  std::vector<Vec2> out;
  if (!j.contains(key)) return out;
  for (const auto& p : j.at(key)) out.emplace_back(p.at(0).get<double>(), p.at(1).get<double>());
  return out;
}

}  // namespace

// ---- Requests -------------------------------------------------------------------

RenderRequest RenderRequest::from_json(const nlohmann::json& j) {
  if (!j.is_object()) fail(ErrorCode::kInvalidArgument, "render request must be a JSON object");
  static const char* kKeys[] = {"frame", "v", "a", "yaw", "pitch", "w", "h"};
  for (const auto& [key, value] : j.items()) {
    if (std::find(std::begin(kKeys), std::end(kKeys), key) == std::end(kKeys)) {
      fail(ErrorCode::kInvalidArgument, "unknown request key '" + key + "'");
    }
  }
  RenderRequest r;
  auto integer = [&](const char* key) {
    const double x = finite_number(j, key);
    if (x != std::floor(x)) fail(ErrorCode::kInvalidArgument, std::string(key) + " must be an integer");
    return static_cast<int>(std::clamp(x, -1e9, 1e9));
  };
  if (j.contains("frame")) r.frame = integer("frame");
  if (j.contains("v") || j.contains("a")) {
    r.emotion = Vec2(j.contains("v") ? finite_number(j, "v") : 0.0,
                     j.contains("a") ? finite_number(j, "a") : 0.0);
  }
  if (j.contains("yaw")) r.yaw = finite_number(j, "yaw");
  if (j.contains("pitch")) r.pitch = finite_number(j, "pitch");
  if (j.contains("w")) r.width = integer("w");
  if (j.contains("h")) r.height = integer("h");
  for (int size : {r.width, r.height}) {
    if (size != 0 && (size < 1 || size > 4096)) {
      fail(ErrorCode::kInvalidArgument, "output size must be within [1, 4096]");
    }
  }
  return r;
}

Vec3 head_centroid(const Model& model) {
  Vec3 c = Vec3::Zero();
  if (model.face.size() == 0) return c;
  for (const GaussianParams& g : model.face.gaussians) c += g.position;
  return c / static_cast<double>(model.face.size());
}

Camera orbit_camera(const Camera& base, const Vec3& pivot, double yaw_deg, double pitch_deg) {
  const double to_rad = std::numbers::pi / 180.0;
  const Vec3 vertical = base.rotation.row(1).transpose();
  const Vec3 horizontal = base.rotation.row(0).transpose();
  const Mat3 orbit = (Eigen::AngleAxisd(yaw_deg * to_rad, vertical) *
                      Eigen::AngleAxisd(pitch_deg * to_rad, horizontal))
                         .toRotationMatrix();
  // Moving the camera by `orbit` about the pivot is the same as moving the
  // scene by its inverse.
  Camera cam = base;
  const Vec3 center = pivot + orbit * (base.center() - pivot);
  cam.rotation = base.rotation * orbit.transpose();
  cam.translation = -cam.rotation * center;
  return cam;
}

RenderedFrame render_request(const Model& model, const RenderRequest& request, int workers) {
  if (request.frame < 0 || request.frame >= static_cast<int>(model.conditions.size())) {
    fail(ErrorCode::kNotFound, "frame " + std::to_string(request.frame) + " does not exist (" +
                                   std::to_string(model.conditions.size()) + " frames)");
  }
  const FrameConditions& c = model.conditions[request.frame];
  const Vec2 asked = request.emotion.value_or(c.emotion);
  const Vec2 emotion = asked.cwiseMax(-1.0).cwiseMin(1.0);

  Camera camera = c.camera;
  if (request.yaw != 0.0 || request.pitch != 0.0) {
    camera = orbit_camera(camera, head_centroid(model), request.yaw, request.pitch);
  }
  if (request.width > 0 || request.height > 0) {
    int w = request.width, h = request.height;
    if (w == 0) w = std::max(1, static_cast<int>(std::lround(double(h) * camera.width / camera.height)));
    if (h == 0) h = std::max(1, static_cast<int>(std::lround(double(w) * camera.height / camera.width)));
    camera = camera.resized(w, h);
  }
  RenderSettings settings;
  settings.workers = workers;
  settings.retain = false;
  FrameRender fr = render_frame(model, c.audio, c.action_units, emotion, camera, true, settings);
  return {std::move(fr.composite.image), emotion != asked || fr.clamped};
}

// ---- Errors / metrics -----------------------------------------------------------

nlohmann::json error_json(const std::exception& e) {
  if (const auto* err = dynamic_cast<const Error*>(&e)) {
    return {{"error", to_string(err->code())}, {"message", err->what()}};
  }
  return {{"error", "internal"}, {"message", e.what()}};
}

int run_command(const std::function<int()>& fn) {
  try {
    return fn();
  } catch (const std::exception& e) {
    std::cerr << error_json(e).dump() << std::endl;
    const auto* err = dynamic_cast<const Error*>(&e);
    return err && err->code() == ErrorCode::kUsage ? 64 : 1;
  }
}

nlohmann::json image_metrics(const std::vector<Image>& predicted, const std::vector<Image>& target) {
  if (predicted.size() != target.size()) {
    fail(ErrorCode::kDimensionMismatch, "prediction and target counts differ");
  }
  if (predicted.empty()) fail(ErrorCode::kEmptyInput, "no images to evaluate");
  double psnr_sum = 0.0, ssim_sum = 0.0, l1_sum = 0.0;
  nlohmann::json frames = nlohmann::json::array();
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    const double p = psnr(predicted[i], target[i]);
    const double s = ssim(predicted[i], target[i]);
    const double l = l1_loss(predicted[i], target[i]);
    psnr_sum += p;
    ssim_sum += s;
    l1_sum += l;
    frames.push_back({{"psnr", number_or_inf(p)}, {"ssim", s}, {"l1", l}});
  }
  const double n = static_cast<double>(predicted.size());
  return {{"frames", predicted.size()},
          {"psnr", number_or_inf(psnr_sum / n)},
          {"ssim", ssim_sum / n},
          {"d_ssim", 1.0 - ssim_sum / n},
          {"l1", l1_sum / n},
          {"per_frame", frames}};
}

// ---- Commands -------------------------------------------------------------------

int cmd_train(const fs::path& config_path) {
  const TrainConfig config = train_config_from_json(read_json(config_path));
  if (config.dataset.empty()) fail(ErrorCode::kUsage, "config has no dataset path");
  const Dataset dataset = load_dataset(config.dataset);
  Trainer trainer(config, dataset);

  std::ofstream log;
  if (!config.output.empty()) {
    const fs::path log_path = fs::path(config.output).concat(".log.jsonl");
    if (log_path.has_parent_path()) fs::create_directories(log_path.parent_path());
    log.open(log_path, std::ios::trunc);
    if (!log) fail(ErrorCode::kIo, "cannot write " + log_path.string());
    trainer.set_log_sink([&log](const LogEntry& e) { log << to_json(e).dump() << '\n'; });
  }
  trainer.run();

  const Model& m = trainer.model();
  nlohmann::json summary = {{"steps", trainer.log().size()},
                            {"mouth_gaussians", m.mouth.size()},
                            {"face_gaussians", m.face.size()}};
  if (!config.output.empty()) summary["checkpoint"] = config.output;
  std::cout << summary.dump() << std::endl;
  return 0;
}

int cmd_render(const fs::path& checkpoint, const RenderRequest& request, const fs::path& out_png) {
  const Checkpoint ck = load_checkpoint(checkpoint);
  const RenderedFrame frame = render_request(ck.model, request);
  if (out_png.has_parent_path()) fs::create_directories(out_png.parent_path());
  write_png(out_png, frame.image, PngEncoding::kGamma22);
  std::cout << nlohmann::json{{"out", out_png.string()}, {"clamped", frame.clamped}}.dump()
            << std::endl;
  return 0;
}

int cmd_render_sweep(const fs::path& checkpoint, int frame, const fs::path& out_dir) {
  const Checkpoint ck = load_checkpoint(checkpoint);
  fs::create_directories(out_dir);
  nlohmann::json files = nlohmann::json::array();
  for (const VALabel& point : va_label_table()) {
    RenderRequest r;
    r.frame = frame;
    r.emotion = point.point;
    const fs::path out = out_dir / (va_tag(point.point) + ".png");
    write_png(out, render_request(ck.model, r).image, PngEncoding::kGamma22);
    files.push_back({{"file", out.filename().string()}, {"label", point.label}});
  }
  std::cout << nlohmann::json{{"files", files}}.dump() << std::endl;
  return 0;
}

int cmd_eval(const fs::path& checkpoint, const fs::path& dataset_dir, const fs::path& metrics_json,
             const std::optional<fs::path>& predictions) {
  const Dataset ds = load_dataset(dataset_dir);
  std::vector<Image> predicted;
  predicted.reserve(ds.size());
  if (predictions) {
    for (std::size_t i = 0; i < ds.size(); ++i) {
      char name[32];
      std::snprintf(name, sizeof(name), "%05zu.png", i);
      predicted.push_back(read_png(*predictions / name, 3, PngEncoding::kGamma22));
    }
  } else {
    const Checkpoint ck = load_checkpoint(checkpoint);
    RenderSettings settings;
    settings.retain = false;
    for (std::size_t i = 0; i < ds.size(); ++i) {
      const FrameConditions& c = ds.conditions[i];
      predicted.push_back(
          render_frame(ck.model, c.audio, c.action_units, c.emotion, c.camera, true, settings)
              .composite.image);
    }
  }
  nlohmann::json metrics = image_metrics(predicted, ds.frames);
  if (!predictions && !ds.emotional_targets.empty()) {
    const Checkpoint ck = load_checkpoint(checkpoint);
    std::vector<Image> pred, target;
    for (const EmotionalTarget& t : ds.emotional_targets) {
      const FrameConditions& c = ds.conditions[t.frame];
      pred.push_back(render_frame(ck.model, c.audio, c.action_units, t.emotion, c.camera)
                         .composite.image);
      target.push_back(t.image);
    }
    nlohmann::json emo = image_metrics(pred, target);
    emo.erase("per_frame");
    metrics["emotional"] = emo;
  }
  write_json(metrics_json, metrics);
  nlohmann::json brief = metrics;
  brief.erase("per_frame");
  std::cout << brief.dump() << std::endl;
  return 0;
}

int cmd_clone(const CloneCommand& cmd) {
  if (cmd.mask.has_value() == cmd.landmarks.has_value()) {
    fail(ErrorCode::kUsage, "clone needs exactly one of --mask and --landmarks");
  }
  CloneProblem problem;
  problem.source = read_png(cmd.source, 3, PngEncoding::kGamma22);
  problem.destination = read_png(cmd.destination, 3, PngEncoding::kGamma22);
  require_same_shape(problem.source, problem.destination, "clone source/destination");
  const int w = problem.source.width, h = problem.source.height;
  if (cmd.mask) {
    problem.mask = read_png(*cmd.mask, 1, PngEncoding::kLinear);
  } else {
    const nlohmann::json j = read_json(*cmd.landmarks);
    std::vector<RegionBox> boxes;
    // Any subset of the regions may be given.
    for (const auto& [key, tag] : {std::pair{"left_eye", RegionTag::kLeftEye},
                                   std::pair{"right_eye", RegionTag::kRightEye},
                                   std::pair{"mouth", RegionTag::kMouth}}) {
      const std::vector<Vec2> points = points_from_json(j, key);
      if (!points.empty()) boxes.push_back(region_box(points, tag, cmd.margin, w, h));
    }
    if (boxes.empty()) fail(ErrorCode::kEmptyInput, "landmark file has no regions");
    problem.mask = box_mask(boxes, w, h);
  }
  CloneOptions options;
  options.tolerance = cmd.tolerance;
  const CloneResult result = seamless_clone(problem, options);
  if (cmd.out.has_parent_path()) fs::create_directories(cmd.out.parent_path());
  write_png(cmd.out, result.image, PngEncoding::kGamma22);
  std::cout << nlohmann::json{{"iterations", result.iterations}, {"residuals", result.residuals}}.dump()
            << std::endl;
  return 0;
}

Camera bench_camera(int width, int height) {
  return Camera::look_at(Vec3(0, 0, 3), Vec3::Zero(), Vec3::UnitY(), 1.5 * width, width, height);
}

GaussianField bench_field(int count, std::uint64_t seed) {
  Rng rng(seed);
  GaussianField f;
  f.role = LayerRole::kFace;
  f.gaussians.reserve(count);
  for (int i = 0; i < count; ++i) {
    // Rejection-sample the unit ball, then stretch to head proportions.
    Vec3 p;
    do {
      p = Vec3(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
    } while (p.squaredNorm() > 1.0);
    GaussianParams g;
    g.position = p.cwiseProduct(Vec3(0.8, 0.9, 0.6));
    for (int k = 0; k < 3; ++k) g.log_scale[k] = std::log(rng.uniform(0.01, 0.05));
    g.rotation = Vec4(rng.normal(), rng.normal(), rng.normal(), rng.normal());
    if (g.rotation.norm() < 1e-6) g.rotation = Vec4(1, 0, 0, 0);
    g.opacity_logit = rng.uniform(-2.0, 3.0);
    g.color = Vec3(rng.uniform(), rng.uniform(), rng.uniform());
    f.gaussians.push_back(g);
  }
  return f;
}

nlohmann::json bench_report(const BenchCommand& cmd) {
  GaussianField field;
  Camera camera = bench_camera(cmd.width, cmd.height);
  if (cmd.checkpoint) {
    const Checkpoint ck = load_checkpoint(*cmd.checkpoint);
    field = ck.model.face;
    if (ck.model.conditions.empty()) fail(ErrorCode::kMissingData, "checkpoint has no frames");
    camera = ck.model.conditions.front().camera.resized(cmd.width, cmd.height);
  } else {
    field = bench_field(cmd.gaussians, cmd.seed);
  }
  RenderSettings settings;
  settings.workers = cmd.workers;
  settings.retain = false;
  const BenchmarkReport r = benchmark(field, camera, cmd.repetitions, settings);
  return {{"gaussians", field.size()},
          {"width", cmd.width},
          {"height", cmd.height},
          {"workers", r.workers},
          {"repetitions", r.repetitions},
          {"fps", r.fps},
          {"project_ms", r.project_ms},
          {"sort_ms", r.sort_ms},
          {"blend_ms", r.blend_ms},
          {"tile_histogram", {{"edges", r.tile_histogram_edges}, {"counts", r.tile_histogram}}}};
}

int cmd_bench(const BenchCommand& cmd) {
  const nlohmann::json report = bench_report(cmd);
  if (cmd.out) write_json(*cmd.out, report);
  std::cout << report.dump() << std::endl;
  return 0;
}

int cmd_synth(std::uint64_t seed, const fs::path& out_dir, const SynthSpec& spec) {
  const SynthResult r = synth_dataset(seed, spec);
  save_dataset(r.dataset, out_dir);
  std::cout << nlohmann::json{{"out", out_dir.string()},
                              {"frames", r.dataset.size()},
                              {"emotional_targets", r.dataset.emotional_targets.size()},
                              {"face_gaussians", r.rig.face().size()},
                              {"mouth_gaussians", r.rig.mouth().size()}}
                   .dump()
            << std::endl;
  return 0;
}

int cmd_attn_dump(const fs::path& checkpoint, const fs::path& out_dir, int frame) {
  const Checkpoint ck = load_checkpoint(checkpoint);
  const Model& m = ck.model;
  if (frame < 0 || frame >= static_cast<int>(m.conditions.size())) {
    fail(ErrorCode::kNotFound, "frame " + std::to_string(frame) + " does not exist");
  }
  const FrameConditions& c = m.conditions[frame];
  const Deformed face = deform_face(m.deformation, m.face, c.audio, c.action_units);
  const Deformed emo = deform_emotion(m.deformation, face.field, c.emotion);

  struct Map {
    const char* name;
    const MatX* gates;
  };
  const Map maps[] = {{"a", &face.cache.gate_values.at(0)},
                      {"u", &face.cache.gate_values.at(1)},
                      {"e", &emo.cache.gate_values.at(0)}};
  fs::create_directories(out_dir);
  RenderSettings settings;
  settings.retain = false;
  nlohmann::json stats;
  for (const Map& map : maps) {
    const Eigen::VectorXd level = map.gates->colwise().mean().transpose();
    GaussianField gray = emo.field;
    for (std::size_t i = 0; i < gray.size(); ++i) gray.gaussians[i].color = Vec3::Constant(level[i]);
    // Premultiplied color over black is the composite itself.
    const RenderOutput out = render(gray, c.camera, settings);
    write_png(out_dir / (std::string("attn_") + map.name + ".png"), out.color, PngEncoding::kLinear);
    stats[map.name] = {{"mean", level.mean()}, {"min", level.minCoeff()}, {"max", level.maxCoeff()}};
  }
  write_json(out_dir / "attn.json", stats);
  std::cout << stats.dump() << std::endl;
  return 0;
}

}  // namespace vasplat
