#pragma once

// Command implementations behind the `vasplat` tool and the render service.
// Every cmd_* returns a process exit code; failures surface as exceptions
// that run_command() turns into a JSON line on stderr.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vasplat/dataset.hpp"
#include "vasplat/synth.hpp"
#include "vasplat/trainer.hpp"

namespace vasplat {

struct RenderRequest {
  int frame = 0;
  std::optional<Vec2> emotion;  // defaults to the frame's own (v, a)
  double yaw = 0.0;             // degrees, orbit about the head centroid
  double pitch = 0.0;
  int width = 0;  // 0 keeps the checkpoint resolution
  int height = 0;

  /// Keys: frame, v, a, yaw, pitch, w, h. Throws kInvalidArgument on
  /// unknown keys, wrong types or sizes outside [1, 4096].
  static RenderRequest from_json(const nlohmann::json& j);
};

struct RenderedFrame {
  Image image;
  bool clamped = false;  // (v, a) was outside the unit square
};

/// Throws kNotFound when the frame does not exist.
RenderedFrame render_request(const Model& model, const RenderRequest& request, int workers = 1);

/// Mean canonical face position; the orbit pivot.
Vec3 head_centroid(const Model& model);
/// `base` rotated about `pivot` by yaw (around the camera's vertical axis)
/// then pitch (around its horizontal axis).
Camera orbit_camera(const Camera& base, const Vec3& pivot, double yaw_deg, double pitch_deg);

/// {"error": code, "message": ...}
nlohmann::json error_json(const std::exception& e);
/// Runs fn, printing error JSON to stderr and returning nonzero on failure.
int run_command(const std::function<int()>& fn);

/// Mean PSNR / SSIM / D-SSIM / L1 over image pairs, plus per-frame values.
/// Infinite PSNR is written as the string "inf".
nlohmann::json image_metrics(const std::vector<Image>& predicted, const std::vector<Image>& target);

// ---- Commands ---------------------------------------------------------------------

/// Trains from a config JSON (see train_config_from_json); writes the
/// checkpoint to config.output and one JSON line per step to <output>.log.jsonl.
int cmd_train(const std::filesystem::path& config_path);

int cmd_render(const std::filesystem::path& checkpoint, const RenderRequest& request,
               const std::filesystem::path& out_png);
/// One PNG per evaluation point, named v{v}_a{a}.png.
int cmd_render_sweep(const std::filesystem::path& checkpoint, int frame,
                     const std::filesystem::path& out_dir);

/// Renders every dataset frame at its own conditions (or reads
/// `predictions`/NNNNN.png instead) and writes metrics JSON.
int cmd_eval(const std::filesystem::path& checkpoint, const std::filesystem::path& dataset,
             const std::filesystem::path& metrics_json,
             const std::optional<std::filesystem::path>& predictions = std::nullopt);

struct CloneCommand {
  std::filesystem::path source, destination, out;
  std::optional<std::filesystem::path> mask;
  std::optional<std::filesystem::path> landmarks;  // {"left_eye": [[x,y],..], "right_eye", "mouth"}
  int margin = 4;
  double tolerance = 1e-6;
};
int cmd_clone(const CloneCommand& command);

struct BenchCommand {
  std::optional<std::filesystem::path> checkpoint;  // else a random field
  int gaussians = 10000;
  int width = 256;
  int height = 256;
  int repetitions = 10;
  int workers = 1;
  std::uint64_t seed = 0;
  std::optional<std::filesystem::path> out;  // JSON report; stdout when unset
};
nlohmann::json bench_report(const BenchCommand& command);
int cmd_bench(const BenchCommand& command);

/// Random head-sized field in front of bench_camera().
GaussianField bench_field(int count, std::uint64_t seed);
Camera bench_camera(int width, int height);

int cmd_synth(std::uint64_t seed, const std::filesystem::path& out_dir, const SynthSpec& spec = {});

/// attn_a.png, attn_u.png, attn_e.png: the deformed face field splatted with
/// each Gaussian's mean gate value as a gray level, on black.
int cmd_attn_dump(const std::filesystem::path& checkpoint, const std::filesystem::path& out_dir,
                  int frame = 0);

}  // namespace vasplat
