#pragma once

// Gaussian field types, cameras and per-frame conditions.
//
// Camera convention: right-handed view space, the camera looks down -z,
// +y is up. Pixel (i, j) has its center at continuous image coordinate
// (i, j); image rows grow downward.

#include <cstdint>
#include <vector>

#include <Eigen/Dense>

namespace vasplat {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;
using Mat2 = Eigen::Matrix2d;
using Mat3 = Eigen::Matrix3d;
using VecX = Eigen::VectorXd;
using MatX = Eigen::MatrixXd;

/// Unconstrained per-Gaussian parameters. Rotation is a raw (w, x, y, z)
/// quaternion; it is normalized whenever it is used.
struct GaussianParams {
  Vec3 position = Vec3::Zero();
  Vec3 log_scale = Vec3::Zero();
  Vec4 rotation = Vec4(1.0, 0.0, 0.0, 0.0);
  double opacity_logit = 0.0;
  Vec3 color = Vec3::Zero();
  Vec3 normal_residual = Vec3::Zero();
};

enum class LayerRole : std::uint8_t { kInsideMouth = 0, kFace = 1 };
enum class FieldStage : std::uint8_t { kCanonical = 0, kDeformed = 1 };

const char* to_string(LayerRole role);

struct GaussianField {
  std::vector<GaussianParams> gaussians;
  LayerRole role = LayerRole::kFace;
  FieldStage stage = FieldStage::kCanonical;

  std::size_t size() const { return gaussians.size(); }
  bool empty() const { return gaussians.empty(); }
  bool has_normal_residual() const { return role == LayerRole::kFace; }
};

struct Camera {
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.0;
  double cy = 0.0;
  Mat3 rotation = Mat3::Identity();  // world -> view
  Vec3 translation = Vec3::Zero();   // world -> view
  int width = 1;
  int height = 1;

  Vec3 to_view(const Vec3& world) const { return rotation * world + translation; }
  Vec3 center() const { return -rotation.transpose() * translation; }

  /// Throws kInvalidArgument when the rotation is not orthonormal within
  /// 1e-6 or the image size is empty.
  void validate() const;

  /// Camera at `eye` looking at `target`; principal point at the image
  /// center.
  static Camera look_at(const Vec3& eye, const Vec3& target, const Vec3& up,
                        double focal, int width, int height);

  /// Same view with the image resampled to a new size (intrinsics scale).
  Camera resized(int new_width, int new_height) const;
};

struct FrameConditions {
  VecX audio;         // a, dimension D_a
  VecX action_units;  // u, dimension D_u
  Vec2 emotion = Vec2::Zero();  // (valence, arousal)
  Camera camera;
};

/// Parameters after activation: positive scales, unit rotation and an
/// opacity in (0, 1).
struct ActivatedGaussian {
  Vec3 position;
  Vec3 scale;
  Mat3 rotation;
  Vec4 unit_quaternion;
  double quaternion_norm = 1.0;
  double opacity = 0.5;
  Vec3 color;
  Vec3 normal_residual;
};

double logistic(double x);

/// Rotation matrix of a unit (w, x, y, z) quaternion.
Mat3 rotation_from_quaternion(const Vec4& unit_q);

/// Gradient of a loss w.r.t. a unit quaternion, given dL/dR.
Vec4 rotation_vjp(const Vec4& unit_q, const Mat3& d_rotation);

/// Gradient w.r.t. the raw quaternion q given the gradient w.r.t. q/|q|.
Vec4 normalize_vjp(const Vec4& raw_q, const Vec4& d_unit);

/// Sigma = R diag(s^2) R^T with R from q/|q| and s = exp(log_scale).
/// Throws kDegenerateRotation when |q| == 0.
Mat3 build_covariance(const Vec3& log_scale, const Vec4& q);

ActivatedGaussian activate(const GaussianParams& params);

/// Throws kNonFinite naming the first Gaussian with a non-finite entry.
void check_finite(const GaussianField& field);

/// Head-relative normalization box: axis-aligned bounds of the canonical
/// positions, padded by 5% of the extent on every side.
struct SceneBounds {
  Vec3 lower = Vec3::Zero();
  Vec3 upper = Vec3::Ones();

  static SceneBounds from_field(const GaussianField& field, double padding = 0.05);
  Vec3 normalize(const Vec3& position) const;
  Vec3 extent() const { return upper - lower; }
};

}  // namespace vasplat
