#include "vasplat/scene.hpp"

#include <cmath>
#include <limits>
#include <string>

#include <Eigen/Geometry>

#include "vasplat/error.hpp"

namespace vasplat {

const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidArgument: return "invalid_argument";
    case ErrorCode::kDegenerateRotation: return "degenerate_rotation";
    case ErrorCode::kMalformedHeader: return "malformed_header";
    case ErrorCode::kDimensionMismatch: return "dimension_mismatch";
    case ErrorCode::kTruncatedFile: return "truncated_file";
    case ErrorCode::kIo: return "io";
    case ErrorCode::kNonFinite: return "non_finite";
    case ErrorCode::kUsage: return "usage";
    case ErrorCode::kResolutionMismatch: return "resolution_mismatch";
    case ErrorCode::kEmptyInput: return "empty_input";
    case ErrorCode::kNonConvergence: return "non_convergence";
    case ErrorCode::kNotFound: return "not_found";
    case ErrorCode::kDivergence: return "divergence";
    case ErrorCode::kMissingData: return "missing_data";
  }
  return "unknown";
}

const char* to_string(LayerRole role) {
  return role == LayerRole::kFace ? "face" : "inside-mouth";
}

void Camera::validate() const {
  if (width < 1 || height < 1) {
    fail(ErrorCode::kInvalidArgument, "camera image size must be at least 1x1");
  }
  const double err = (rotation * rotation.transpose() - Mat3::Identity()).cwiseAbs().maxCoeff();
  if (!(err <= 1e-6)) {
    fail(ErrorCode::kInvalidArgument, "camera rotation is not orthonormal");
  }
}

Camera Camera::look_at(const Vec3& eye, const Vec3& target, const Vec3& up, double focal,
                       int width, int height) {
  // View axes: +x right, +y up, camera looks down -z.
  const Vec3 back = (eye - target).normalized();
  const Vec3 right = up.cross(back).normalized();
  const Vec3 true_up = back.cross(right);
  Camera cam;
  cam.rotation.row(0) = right.transpose();
  cam.rotation.row(1) = true_up.transpose();
  cam.rotation.row(2) = back.transpose();
  cam.translation = -cam.rotation * eye;
  cam.fx = focal;
  cam.fy = focal;
  cam.width = width;
  cam.height = height;
  cam.cx = 0.5 * (width - 1);
  cam.cy = 0.5 * (height - 1);
  return cam;
}

Camera Camera::resized(int new_width, int new_height) const {
  Camera out = *this;
  const double sx = static_cast<double>(new_width) / width;
  const double sy = static_cast<double>(new_height) / height;
  out.fx = fx * sx;
  out.fy = fy * sy;
  out.cx = (cx + 0.5) * sx - 0.5;
  out.cy = (cy + 0.5) * sy - 0.5;
  out.width = new_width;
  out.height = new_height;
  return out;
}

double logistic(double x) {
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

Mat3 rotation_from_quaternion(const Vec4& q) {
  const double w = q[0], x = q[1], y = q[2], z = q[3];
  Mat3 r;
  r << 1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y),
      2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x),
      2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y);
  return r;
}

Vec4 rotation_vjp(const Vec4& q, const Mat3& g) {
  const double w = q[0], x = q[1], y = q[2], z = q[3];
  Mat3 dw, dx, dy, dz;
  dw << 0, -2 * z, 2 * y,  //
      2 * z, 0, -2 * x,    //
      -2 * y, 2 * x, 0;
  dx << 0, 2 * y, 2 * z,   //
      2 * y, -4 * x, -2 * w,  //
      2 * z, 2 * w, -4 * x;
  dy << -4 * y, 2 * x, 2 * w,  //
      2 * x, 0, 2 * z,         //
      -2 * w, 2 * z, -4 * y;
  dz << -4 * z, -2 * w, 2 * x,  //
      2 * w, -4 * z, 2 * y,     //
      2 * x, 2 * y, 0;
  return Vec4(g.cwiseProduct(dw).sum(), g.cwiseProduct(dx).sum(), g.cwiseProduct(dy).sum(),
              g.cwiseProduct(dz).sum());
}

Vec4 normalize_vjp(const Vec4& raw_q, const Vec4& d_unit) {
  const double n = raw_q.norm();
  const Vec4 u = raw_q / n;
  return (d_unit - u * u.dot(d_unit)) / n;
}

namespace {

Vec4 unit_quaternion(const Vec4& q, double* norm_out) {
  const double n = q.norm();
  if (!(n > 0.0) || !std::isfinite(n)) {
    fail(ErrorCode::kDegenerateRotation, "quaternion has zero or non-finite norm");
  }
  if (norm_out != nullptr) {
    *norm_out = n;
  }
  return q / n;
}

}  // namespace

Mat3 build_covariance(const Vec3& log_scale, const Vec4& q) {
  const Mat3 r = rotation_from_quaternion(unit_quaternion(q, nullptr));
  const Vec3 s = log_scale.array().exp();
  const Mat3 m = r * s.asDiagonal();
  return m * m.transpose();
}

ActivatedGaussian activate(const GaussianParams& p) {
  ActivatedGaussian a;
  a.position = p.position;
  a.scale = p.log_scale.array().exp();
  a.unit_quaternion = unit_quaternion(p.rotation, &a.quaternion_norm);
  a.rotation = rotation_from_quaternion(a.unit_quaternion);
  a.opacity = logistic(p.opacity_logit);
  a.color = p.color;
  a.normal_residual = p.normal_residual;
  return a;
}

void check_finite(const GaussianField& field) {
  for (std::size_t i = 0; i < field.gaussians.size(); ++i) {
    const GaussianParams& g = field.gaussians[i];
    const bool ok = g.position.allFinite() && g.log_scale.allFinite() &&
                    g.rotation.allFinite() && std::isfinite(g.opacity_logit) &&
                    g.color.allFinite() && g.normal_residual.allFinite();
    if (!ok) {
      fail(ErrorCode::kNonFinite, "non-finite parameter in Gaussian " + std::to_string(i));
    }
  }
}

SceneBounds SceneBounds::from_field(const GaussianField& field, double padding) {
  SceneBounds b;
  if (field.empty()) {
    return b;
  }
  Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity());
  Vec3 hi = -lo;
  for (const GaussianParams& g : field.gaussians) {
    lo = lo.cwiseMin(g.position);
    hi = hi.cwiseMax(g.position);
  }
  Vec3 extent = (hi - lo).cwiseMax(Vec3::Constant(1e-6));
  // Flat axes borrow the largest extent so the encoder still sees a cube-ish box.
  const double largest = extent.maxCoeff();
  for (int k = 0; k < 3; ++k) {
    if (extent[k] < 1e-3 * largest) {
      extent[k] = largest;
      const double mid = 0.5 * (lo[k] + hi[k]);
      lo[k] = mid - 0.5 * largest;
      hi[k] = mid + 0.5 * largest;
    }
  }
  b.lower = lo - padding * extent;
  b.upper = hi + padding * extent;
  return b;
}

Vec3 SceneBounds::normalize(const Vec3& position) const {
  return (position - lower).cwiseQuotient(upper - lower);
}

}  // namespace vasplat
