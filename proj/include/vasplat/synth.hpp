#pragma once

// Synthetic head-proxy scene with analytic deformation rules, used for
// closed-loop tests. The rules are linear in the condition scalars:
//   jaw  s      lowers the chin/lower-lip cluster and the lower teeth
//   brow b      raises the brows (AU channel 0)
//   valence     lifts the lip corners
//   arousal     raises the brows and widens the eyes

#include <cstdint>
#include <vector>

#include "vasplat/dataset.hpp"
#include "vasplat/poisson.hpp"
#include "vasplat/render.hpp"

namespace vasplat {

struct SynthSpec {
  int width = 64;
  int height = 64;
  int frames = 40;
  int neutral_frames = 6;
  int audio_dim = 32;
  int au_dim = 7;
  int emotional_stride = 4;  // every k-th frame gets emotional targets
  int audio_only = 20;
  int clone_margin = 6;
  bool emotional = true;
  double init_jitter = 1.0;  // scales the jitter applied to the init fields
};

struct SynthLatent {
  double jaw = 0.0;
  double brow = 0.0;
};

enum class SynthPart : std::uint8_t {
  kSkin, kEyeWhite, kPupil, kBrow, kNose, kLip, kCavity, kUpperTeeth, kLowerTeeth
};

class SynthRig {
 public:
  SynthRig(std::uint64_t seed, int width, int height);

  const GaussianField& face() const { return face_; }
  const GaussianField& mouth() const { return mouth_; }
  const Camera& camera() const { return camera_; }
  const Image& background() const { return background_; }

  GaussianField deform_face(const SynthLatent& latent, const Vec2& emotion) const;
  GaussianField deform_mouth(const SynthLatent& latent) const;

  struct Frame {
    Image image;
    Image face_mask;
    Image mouth_mask;
    Image normals;  // masked by the face mask
    GaussianField face;
  };
  Frame render(const SynthLatent& latent, const Vec2& emotion) const;

  /// Projected eye (with brow) and lip Gaussian centers of a deformed face.
  RegionLandmarks landmarks(const GaussianField& face) const;

  /// Audio and AU features encoding the latent; `noise` is per frame.
  VecX audio_features(double jaw, const VecX& noise) const;
  VecX action_units(double brow, const VecX& noise) const;

 private:
  Camera camera_;
  Image background_;
  GaussianField face_;
  GaussianField mouth_;
  std::vector<SynthPart> face_parts_;
  std::vector<SynthPart> mouth_parts_;
};

struct SynthResult {
  Dataset dataset;
  SynthRig rig;
  std::vector<SynthLatent> latents;
};

/// Same seed and spec give a byte-identical dataset.
SynthResult synth_dataset(std::uint64_t seed, const SynthSpec& spec = {});

/// Held-out evaluation conditions: the 0.5-radius points of the VA table.
std::vector<Vec2> synth_train_emotions();
std::vector<Vec2> synth_heldout_emotions();

}  // namespace vasplat
