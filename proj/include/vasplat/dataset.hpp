#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vasplat/image.hpp"
#include "vasplat/scene.hpp"

namespace vasplat {

// ---- Gaussian field files ---------------------------------------------------
//
// "SPLATF1\n", u64 count, u8 role, then per Gaussian 17 little-endian float32:
// position(3) log_scale(3) rotation(4) opacity_logit(1) color(3) normal_residual(3).

std::string serialize_field(const GaussianField& field);
GaussianField deserialize_field(const std::string& bytes);
void save_field(const GaussianField& field, const std::filesystem::path& path);
GaussianField load_field(const std::filesystem::path& path);

// ---- Datasets -----------------------------------------------------------------

struct EmotionalTarget {
  int frame = 0;
  Vec2 emotion = Vec2::Zero();
  Image image;
  std::optional<Image> normals;  // face-region normals of the emotional frame
};

/// A training sequence. `dataset.json` carries the header
/// {width, height, frame_count, audio_dim, au_dim} and optionally
/// `neutral_frames`. Optional extras: `audio_only.jsonl` (audio windows with
/// no paired frames, for the sync loss) and `init_face.splatf` /
/// `init_mouth.splatf` (starting fields for the canonical stage).
struct Dataset {
  int width = 0;
  int height = 0;
  int audio_dim = 32;
  int au_dim = 7;
  std::vector<Image> frames;
  std::vector<FrameConditions> conditions;
  std::vector<Image> face_masks;
  std::vector<Image> mouth_masks;
  std::vector<Image> normal_targets;  // already masked by the face mask
  std::vector<EmotionalTarget> emotional_targets;
  Image background;
  std::vector<int> neutral_frames;
  std::vector<VecX> audio_only;
  std::optional<GaussianField> init_face;
  std::optional<GaussianField> init_mouth;

  std::size_t size() const { return frames.size(); }

  /// Checks the cross-array invariants (lengths, resolution, disjoint masks,
  /// condition dimensions). Throws kDimensionMismatch / kResolutionMismatch.
  void validate() const;

  Image masked_face(std::size_t frame) const;
  Image masked_mouth(std::size_t frame) const;
};

Dataset load_dataset(const std::filesystem::path& dir);
void save_dataset(const Dataset& dataset, const std::filesystem::path& dir);

/// "v0.74_a-0.31" style tag used in emotional and sweep file names.
std::string va_tag(const Vec2& emotion);

nlohmann::json camera_to_json(const Camera& camera);
Camera camera_from_json(const nlohmann::json& j);
nlohmann::json conditions_to_json(const FrameConditions& c);
FrameConditions conditions_from_json(const nlohmann::json& j);

}  // namespace vasplat
