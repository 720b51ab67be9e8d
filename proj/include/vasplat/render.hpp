#pragma once

// Tile-parallel differentiable Gaussian rasterizer.
//
// Per pixel x, with contributors i sorted by increasing view depth:
//   C(x) = sum_i c_i a_i prod_{j<i} (1 - a_j)
//   A(x) = sum_i     a_i prod_{j<i} (1 - a_j)
//   a_i  = min(clamp, opacity_i * exp(-1/2 d^T cov2d^-1 d)),  d = x - mean2d_i
// Color and normal buffers are premultiplied by coverage; the normal buffer
// is renormalized per pixel where A > 0.

#include <limits>
#include <memory>
#include <optional>
#include <vector>

#include "vasplat/image.hpp"
#include "vasplat/scene.hpp"

namespace vasplat {

struct RenderSettings {
  double near_plane = 0.01;
  double dilation = 0.3;         // isotropic px^2 added to cov2d
  double footprint_sigma = 3.0;  // infinity disables the elliptical cutoff
  double alpha_clamp = 0.99;
  double transmittance_floor = 1e-4;  // 0 disables early termination
  int tile_size = 16;
  int workers = 1;
  bool retain = true;  // keep state for backward()

  /// Settings without cutoffs or early termination, so the image is a smooth
  /// function of the parameters (used by finite-difference checks).
  static RenderSettings smooth() {
    RenderSettings s;
    s.footprint_sigma = std::numeric_limits<double>::infinity();
    s.transmittance_floor = 0.0;
    return s;
  }
};

struct ProjectedGaussian {
  Vec2 mean2d = Vec2::Zero();
  Mat2 cov2d = Mat2::Identity();
  Mat2 conic = Mat2::Identity();  // cov2d^-1
  double depth = 0.0;
  Vec3 color = Vec3::Zero();
  double opacity = 0.0;
  Vec3 normal_view = Vec3::UnitZ();
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // footprint, half-open pixel box

  // Kept for the backward pass.
  Vec3 view_position = Vec3::Zero();
  Eigen::Matrix<double, 2, 3> jacobian = Eigen::Matrix<double, 2, 3>::Zero();
  Mat3 view_covariance = Mat3::Identity();
  int normal_axis = 2;
  double normal_sign = 1.0;
  Vec3 normal_unnormalized = Vec3::UnitZ();  // world-space base + residual
};

/// Returns nullopt when the Gaussian is behind the near plane or its
/// footprint misses the image.
std::optional<ProjectedGaussian> project(const ActivatedGaussian& g, const Camera& camera,
                                         const RenderSettings& settings = {});

struct RenderState;

struct RenderOutput {
  Image color;   // H x W x 3, premultiplied
  Image alpha;   // H x W x 1
  Image normal;  // H x W x 3, view space, unit length where alpha > 0
  Image depth;   // H x W x 1, coverage-weighted view depth
  std::shared_ptr<const RenderState> state;

  int width() const { return color.width; }
  int height() const { return color.height; }
};

RenderOutput render(const GaussianField& field, const Camera& camera,
                    const RenderSettings& settings = {});

struct GaussianGrad {
  Vec3 position = Vec3::Zero();
  Vec3 log_scale = Vec3::Zero();
  Vec4 rotation = Vec4::Zero();
  double opacity_logit = 0.0;
  Vec3 color = Vec3::Zero();
  Vec3 normal_residual = Vec3::Zero();

  GaussianGrad& operator+=(const GaussianGrad& o);
};

struct GradientBuffer {
  std::vector<GaussianGrad> grads;
  /// |dL/d mean2d| in normalized device units, used by densification.
  std::vector<double> screen_grad_norm;

  explicit GradientBuffer(std::size_t n = 0) : grads(n), screen_grad_norm(n, 0.0) {}
  std::size_t size() const { return grads.size(); }
  GradientBuffer& operator+=(const GradientBuffer& o);
  bool all_finite() const;
};

/// Any upstream buffer may be null (treated as zero). Throws kUsage when
/// the output was rendered without retained state.
GradientBuffer backward(const RenderOutput& output, const Image* d_color, const Image* d_alpha,
                        const Image* d_normal);

struct BenchmarkReport {
  double fps = 0.0;
  double project_ms = 0.0;
  double sort_ms = 0.0;
  double blend_ms = 0.0;
  int repetitions = 0;
  int workers = 1;
  std::vector<int> tile_histogram;  // bucketed Gaussians-per-tile counts
  std::vector<int> tile_histogram_edges;
  Image last_color;
};

/// Throws kEmptyInput when repetitions == 0.
BenchmarkReport benchmark(const GaussianField& field, const Camera& camera, int repetitions,
                          RenderSettings settings = {});

}  // namespace vasplat
