#include "vasplat/synth.hpp"

#include <algorithm>
#include <cmath>

#include "vasplat/composite.hpp"
#include "vasplat/error.hpp"
#include "vasplat/losses.hpp"
#include "vasplat/random.hpp"

namespace vasplat {

namespace {

// Head proxy: front of an ellipsoid centred behind the origin.
const Vec3 kCenter(0.0, 0.0, -0.3);
const Vec3 kRadii(0.8, 0.88, 0.8);
constexpr double kFaceRx = 0.62, kFaceRy = 0.7;
constexpr double kMouthY = -0.28;

// Rule magnitudes, in world units (about 40 px per unit at 64 px).
constexpr double kJaw = 0.1;
constexpr double kBrow = 0.06;
constexpr double kArousalBrow = 0.1;
constexpr double kArousalEye = 0.35;  // log-scale, eye height
constexpr double kValence = 0.09;

double surface_z(double x, double y) {
  const double r = 1.0 - (x / kRadii.x()) * (x / kRadii.x()) - (y / kRadii.y()) * (y / kRadii.y());
  return kCenter.z() + kRadii.z() * std::sqrt(std::max(r, 0.0));
}

Vec3 surface_normal(double x, double y) {
  const double z = surface_z(x, y);
  return Vec3(x / (kRadii.x() * kRadii.x()), y / (kRadii.y() * kRadii.y()),
              (z - kCenter.z()) / (kRadii.z() * kRadii.z()))
      .normalized();
}

// Quaternion (w, x, y, z) of the shortest rotation taking +z to n.
Vec4 align_z(const Vec3& n) {
  const Vec3 axis = Vec3::UnitZ().cross(n);
  const double c = Vec3::UnitZ().dot(n);
  Vec4 q(1.0 + c, axis.x(), axis.y(), axis.z());
  return q.normalized();
}

double logit(double p) { return std::log(p / (1.0 - p)); }

GaussianParams splat(double x, double y, double depth_offset, const Vec3& sigma, double opacity,
                     const Vec3& color) {
  GaussianParams g;
  const Vec3 n = surface_normal(x, y);
  g.position = Vec3(x, y, surface_z(x, y)) + depth_offset * n;
  g.log_scale = sigma.array().log();
  g.rotation = align_z(n);
  g.opacity_logit = logit(opacity);
  g.color = color;
  return g;
}

double smoothstep(double e0, double e1, double x) {
  const double t = std::clamp((x - e0) / (e1 - e0), 0.0, 1.0);
  return t * t * (3.0 - 2.0 * t);
}

// Weight of the jaw cluster at a canonical position.
double jaw_weight(const Vec3& p) {
  return (1.0 - smoothstep(-0.34, -0.26, p.y())) * (1.0 - smoothstep(0.3, 0.5, std::abs(p.x())));
}

Image layer_mask(const Image& alpha, const Image* exclude) {
  Image m(alpha.width, alpha.height, 1);
  for (std::size_t p = 0; p < m.pixel_count(); ++p) {
    const bool in = alpha.data[p] >= 0.5 && (exclude == nullptr || exclude->data[p] < 0.5);
    m.data[p] = in ? 1.0 : 0.0;
  }
  return m;
}

GaussianField jittered(const GaussianField& field, Rng& rng, double amount) {
  GaussianField out = field;
  for (GaussianParams& g : out.gaussians) {
    for (int k = 0; k < 3; ++k) g.position[k] += amount * 0.01 * rng.normal();
    for (int k = 0; k < 3; ++k) g.log_scale[k] += amount * 0.1 * rng.normal();
    for (int k = 0; k < 4; ++k) g.rotation[k] += amount * 0.02 * rng.normal();
    g.opacity_logit += amount * 0.3 * rng.normal();
    for (int k = 0; k < 3; ++k) g.color[k] += amount * 0.03 * rng.normal();
  }
  return out;
}

}  // namespace

SynthRig::SynthRig(std::uint64_t seed, int width, int height)
    : camera_(Camera::look_at(Vec3(0, 0, 3), Vec3::Zero(), Vec3::UnitY(), 1.5 * width, width,
                              height)),
      background_(width, height, 3) {
  for (std::size_t p = 0; p < background_.pixel_count(); ++p) {
    background_.data[p * 3 + 0] = 0.08;
    background_.data[p * 3 + 1] = 0.1;
    background_.data[p * 3 + 2] = 0.14;
  }
  Rng rng(seed);
  face_.role = LayerRole::kFace;
  mouth_.role = LayerRole::kInsideMouth;
  auto add_face = [&](SynthPart part, const GaussianParams& g) {
    face_.gaussians.push_back(g);
    face_parts_.push_back(part);
  };
  auto add_mouth = [&](SynthPart part, const GaussianParams& g) {
    mouth_.gaussians.push_back(g);
    mouth_parts_.push_back(part);
  };

  // Skin on a hexagonal grid, with a hole around the mouth.
  const Vec3 light = Vec3(-0.35, 0.45, 0.82).normalized();
  const Vec3 skin(0.82, 0.6, 0.48);
  const double h = 0.1;
  int row = 0;
  for (double y = -kFaceRy; y <= kFaceRy + 1e-9; y += h * 0.866, ++row) {
    for (double x = -kFaceRx + (row % 2) * h * 0.5; x <= kFaceRx + 1e-9; x += h) {
      if ((x / kFaceRx) * (x / kFaceRx) + (y / kFaceRy) * (y / kFaceRy) > 1.0) continue;
      const double mx = x / 0.3, my = (y - kMouthY) / 0.16;
      if (mx * mx + my * my < 1.0) continue;
      const double shade = 0.55 + 0.45 * std::max(0.0, surface_normal(x, y).dot(light));
      const Vec3 color = skin * shade + Vec3::Constant(0.04 * (rng.uniform() - 0.5));
      add_face(SynthPart::kSkin, splat(x, y, 0.0, Vec3(0.06, 0.06, 0.015), 0.9, color));
    }
  }
  // Ring of skin-toned filler around the mouth hole.
  for (int k = 0; k < 10; ++k) {
    const double t = 2.0 * 3.14159265358979 * (k + 0.5) / 10.0;
    const double x = 0.3 * std::cos(t), y = kMouthY + 0.15 * std::sin(t);
    const double shade = 0.55 + 0.45 * std::max(0.0, surface_normal(x, y).dot(light));
    add_face(SynthPart::kSkin, splat(x, y, 0.004, Vec3(0.06, 0.045, 0.015), 0.9, skin * shade));
  }
  for (double side : {-1.0, 1.0}) {
    add_face(SynthPart::kEyeWhite,
             splat(side * 0.25, 0.15, 0.006, Vec3(0.08, 0.045, 0.01), 0.95, Vec3(0.92, 0.92, 0.9)));
    add_face(SynthPart::kPupil,
             splat(side * 0.25, 0.15, 0.012, Vec3(0.032, 0.032, 0.008), 0.97, Vec3(0.1, 0.08, 0.08)));
    for (double bx : {0.15, 0.25, 0.35}) {
      add_face(SynthPart::kBrow, splat(side * bx, 0.32 + 0.03 * (1.0 - std::abs(bx - 0.25) * 10.0),
                                       0.008, Vec3(0.055, 0.022, 0.01), 0.95, Vec3(0.3, 0.18, 0.12)));
    }
  }
  add_face(SynthPart::kNose, splat(0.0, 0.02, 0.01, Vec3(0.045, 0.1, 0.015), 0.8, Vec3(0.7, 0.48, 0.38)));
  add_face(SynthPart::kNose, splat(0.0, -0.08, 0.014, Vec3(0.06, 0.035, 0.012), 0.85, Vec3(0.62, 0.42, 0.34)));
  for (double y : {-0.2, -0.36}) {
    for (double x : {-0.2, -0.1, 0.0, 0.1, 0.2}) {
      add_face(SynthPart::kLip, splat(x, y, 0.008, Vec3(0.06, 0.035, 0.012), 0.95, Vec3(0.7, 0.28, 0.3)));
    }
  }

  for (double x : {-0.14, 0.0, 0.14}) {
    add_mouth(SynthPart::kCavity,
              splat(x, kMouthY, -0.12, Vec3(0.1, 0.09, 0.02), 0.97, Vec3(0.22, 0.05, 0.06)));
  }
  for (double x : {-0.06, 0.06}) {
    add_mouth(SynthPart::kUpperTeeth,
              splat(x, -0.245, -0.05, Vec3(0.05, 0.02, 0.01), 0.95, Vec3(0.9, 0.88, 0.82)));
    add_mouth(SynthPart::kLowerTeeth,
              splat(x, -0.32, -0.05, Vec3(0.05, 0.02, 0.01), 0.95, Vec3(0.85, 0.83, 0.78)));
  }
}

GaussianField SynthRig::deform_face(const SynthLatent& latent, const Vec2& e) const {
  GaussianField out = face_;
  out.stage = FieldStage::kDeformed;
  for (std::size_t i = 0; i < out.size(); ++i) {
    GaussianParams& g = out.gaussians[i];
    const Vec3 p = face_.gaussians[i].position;
    const SynthPart part = face_parts_[i];
    double dy = -kJaw * latent.jaw * jaw_weight(p);
    if (part == SynthPart::kBrow) dy += kBrow * latent.brow + kArousalBrow * e[1];
    if (part == SynthPart::kLip) {
      dy += kValence * e[0] * smoothstep(0.05, 0.2, std::abs(p.x()));
    }
    if (part == SynthPart::kEyeWhite) g.log_scale[1] += kArousalEye * e[1];
    g.position.y() += dy;
  }
  return out;
}

GaussianField SynthRig::deform_mouth(const SynthLatent& latent) const {
  GaussianField out = mouth_;
  out.stage = FieldStage::kDeformed;
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (mouth_parts_[i] == SynthPart::kLowerTeeth) out.gaussians[i].position.y() -= kJaw * latent.jaw;
  }
  return out;
}

SynthRig::Frame SynthRig::render(const SynthLatent& latent, const Vec2& e) const {
  RenderSettings settings;
  settings.retain = false;
  Frame f;
  f.face = deform_face(latent, e);
  const RenderOutput face = vasplat::render(f.face, camera_, settings);
  const RenderOutput mouth = vasplat::render(deform_mouth(latent), camera_, settings);
  f.image = compose(mouth, face, background_).image;
  f.face_mask = layer_mask(face.alpha, nullptr);
  f.mouth_mask = layer_mask(mouth.alpha, &f.face_mask);
  f.normals = apply_mask(face.normal, f.face_mask);
  return f;
}

RegionLandmarks SynthRig::landmarks(const GaussianField& face) const {
  RegionLandmarks lm;
  for (std::size_t i = 0; i < face.size(); ++i) {
    const SynthPart part = face_parts_[i];
    const Vec3 v = camera_.to_view(face.gaussians[i].position);
    const double d = -v.z();
    const Vec2 px(camera_.cx + camera_.fx * v.x() / d, camera_.cy - camera_.fy * v.y() / d);
    if (part == SynthPart::kEyeWhite || part == SynthPart::kBrow || part == SynthPart::kPupil) {
      (px.x() < camera_.cx ? lm.left_eye : lm.right_eye).push_back(px);
    } else if (part == SynthPart::kLip) {
      lm.mouth.push_back(px);
    }
  }
  return lm;
}

VecX SynthRig::audio_features(double jaw, const VecX& noise) const {
  VecX a(noise.size());
  for (Eigen::Index k = 0; k < a.size(); ++k) {
    a[k] = jaw * (0.6 + 0.4 * std::cos(0.5 * static_cast<double>(k))) + 0.02 * noise[k];
  }
  return a;
}

VecX SynthRig::action_units(double brow, const VecX& noise) const {
  VecX u = 0.05 * noise;
  u[0] = brow;
  return u;
}

std::vector<Vec2> synth_train_emotions() {
  std::vector<Vec2> out;
  for (const VALabel& l : va_label_table()) {
    if (l.point.norm() > 0.65) out.push_back(l.point);
  }
  return out;
}

std::vector<Vec2> synth_heldout_emotions() {
  std::vector<Vec2> out;
  for (const VALabel& l : va_label_table()) {
    if (l.point.norm() <= 0.65) out.push_back(l.point);
  }
  return out;
}

SynthResult synth_dataset(std::uint64_t seed, const SynthSpec& spec) {
  if (spec.frames < 1 || spec.neutral_frames > spec.frames || spec.width < 16 || spec.height < 16) {
    fail(ErrorCode::kInvalidArgument, "synth spec: bad frame counts or resolution");
  }
  SynthResult out{Dataset{}, SynthRig(seed, spec.width, spec.height), {}};
  const SynthRig& rig = out.rig;
  Dataset& ds = out.dataset;
  ds.width = spec.width;
  ds.height = spec.height;
  ds.audio_dim = spec.audio_dim;
  ds.au_dim = spec.au_dim;
  ds.background = rig.background();
  Rng rng(seed ^ 0x9E3779B97F4A7C15ull);

  auto noise = [&](int n) {
    VecX v(n);
    for (int k = 0; k < n; ++k) v[k] = rng.normal();
    return v;
  };

  const double phase = rng.uniform(0.0, 6.283);
  for (int t = 0; t < spec.frames; ++t) {
    SynthLatent l;
    if (t >= spec.neutral_frames) {
      l.jaw = std::clamp(0.5 + 0.45 * std::sin(0.9 * t + phase) + 0.1 * rng.normal(), 0.0, 1.0);
      l.brow = std::clamp(0.5 + 0.5 * std::sin(0.37 * t + 2.0 * phase), 0.0, 1.0);
    } else {
      ds.neutral_frames.push_back(t);
    }
    out.latents.push_back(l);
    FrameConditions c;
    c.audio = rig.audio_features(l.jaw, noise(spec.audio_dim));
    c.action_units = rig.action_units(l.brow, noise(spec.au_dim));
    c.emotion = Vec2::Zero();
    c.camera = rig.camera();
    const SynthRig::Frame f = rig.render(l, Vec2::Zero());
    ds.frames.push_back(f.image);
    ds.face_masks.push_back(f.face_mask);
    ds.mouth_masks.push_back(f.mouth_mask);
    ds.normal_targets.push_back(f.normals);
    ds.conditions.push_back(std::move(c));
  }
  for (int i = 0; i < spec.audio_only; ++i) {
    const double jaw = 0.5 + 0.5 * std::sin(0.7 * i + phase);
    ds.audio_only.push_back(rig.audio_features(jaw, noise(spec.audio_dim)));
  }
  if (spec.emotional) {
    for (int t = 0; t < spec.frames; t += spec.emotional_stride) {
      for (const Vec2& e : synth_train_emotions()) {
        const SynthRig::Frame emo = rig.render(out.latents[t], e);
        const AugmentResult aug = augment_frame(ds.frames[t], emo.image, rig.landmarks(emo.face),
                                                spec.clone_margin);
        ds.emotional_targets.push_back({t, e, aug.cloned, emo.normals});
      }
    }
  }
  Rng jitter(seed + 17);
  ds.init_face = jittered(rig.face(), jitter, spec.init_jitter);
  ds.init_mouth = jittered(rig.mouth(), jitter, spec.init_jitter);
  ds.validate();
  return out;
}

}  // namespace vasplat
