#include "vasplat/render.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <numeric>

#include "vasplat/error.hpp"
#include "vasplat/parallel.hpp"

namespace vasplat {

struct RenderState {
  Camera camera;
  RenderSettings settings;
  LayerRole role = LayerRole::kFace;
  int width = 0;
  int height = 0;
  int tiles_x = 0;
  int tiles_y = 0;
  std::vector<ActivatedGaussian> activated;
  std::vector<ProjectedGaussian> projected;
  std::vector<std::uint8_t> visible;
  std::vector<std::uint32_t> tile_offsets;  // CSR over tiles
  std::vector<std::uint32_t> tile_ids;      // Gaussian indices, depth order per tile
  std::vector<double> final_transmittance;  // per pixel
  std::vector<std::uint32_t> contributor_end;  // per pixel, exclusive end in the tile list
  Image normal_raw;
};

GaussianGrad& GaussianGrad::operator+=(const GaussianGrad& o) {
  position += o.position;
  log_scale += o.log_scale;
  rotation += o.rotation;
  opacity_logit += o.opacity_logit;
  color += o.color;
  normal_residual += o.normal_residual;
  return *this;
}

GradientBuffer& GradientBuffer::operator+=(const GradientBuffer& o) {
  if (o.size() != size()) {
    fail(ErrorCode::kDimensionMismatch, "gradient buffers differ in size");
  }
  for (std::size_t i = 0; i < grads.size(); ++i) {
    grads[i] += o.grads[i];
    screen_grad_norm[i] += o.screen_grad_norm[i];
  }
  return *this;
}

bool GradientBuffer::all_finite() const {
  for (const GaussianGrad& g : grads) {
    if (!(g.position.allFinite() && g.log_scale.allFinite() && g.rotation.allFinite() &&
          std::isfinite(g.opacity_logit) && g.color.allFinite() && g.normal_residual.allFinite())) {
      return false;
    }
  }
  return true;
}

namespace {

// Pixel coverage for one projected Gaussian. Returns false when the pixel
// lies outside the footprint ellipse.
struct Coverage {
  double power;
  double falloff;
  Vec2 offset;
};

inline bool evaluate_coverage(const ProjectedGaussian& g, double px, double py, double cutoff_power,
                              Coverage& out) {
  const double dx = px - g.mean2d[0];
  const double dy = py - g.mean2d[1];
  const double power =
      -0.5 * (g.conic(0, 0) * dx * dx + 2.0 * g.conic(0, 1) * dx * dy + g.conic(1, 1) * dy * dy);
  if (power < cutoff_power) {
    return false;
  }
  out.power = power;
  out.falloff = std::exp(power);
  out.offset = Vec2(dx, dy);
  return true;
}

int smallest_axis(const Vec3& scale) {
  int k = 0;
  for (int i = 1; i < 3; ++i) {
    if (scale[i] < scale[k]) k = i;
  }
  return k;
}

struct StageTimes {
  double project_ms = 0.0;
  double sort_ms = 0.0;
  double blend_ms = 0.0;
};

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

}  // namespace

std::optional<ProjectedGaussian> project(const ActivatedGaussian& g, const Camera& cam,
                                         const RenderSettings& settings) {
  ProjectedGaussian out;
  const Vec3 p = cam.to_view(g.position);
  const double depth = -p.z();
  if (!(depth > settings.near_plane)) {
    return std::nullopt;
  }
  const double inv_d = 1.0 / depth;
  out.view_position = p;
  out.depth = depth;
  out.mean2d = Vec2(cam.cx + cam.fx * p.x() * inv_d, cam.cy - cam.fy * p.y() * inv_d);

  Eigen::Matrix<double, 2, 3> j;
  j << cam.fx * inv_d, 0.0, cam.fx * p.x() * inv_d * inv_d,  //
      0.0, -cam.fy * inv_d, -cam.fy * p.y() * inv_d * inv_d;
  out.jacobian = j;

  const Mat3 m = g.rotation * g.scale.asDiagonal();
  const Mat3 sigma = m * m.transpose();
  out.view_covariance = cam.rotation * sigma * cam.rotation.transpose();
  out.cov2d = j * out.view_covariance * j.transpose() + settings.dilation * Mat2::Identity();
  const double det = out.cov2d.determinant();
  if (!(det > 0.0)) {
    return std::nullopt;
  }
  out.conic = out.cov2d.inverse();

  const int w = cam.width;
  const int h = cam.height;
  if (std::isinf(settings.footprint_sigma)) {
    out.x0 = 0;
    out.y0 = 0;
    out.x1 = w;
    out.y1 = h;
  } else {
    const double mid = 0.5 * (out.cov2d(0, 0) + out.cov2d(1, 1));
    const double lambda_max = mid + std::sqrt(std::max(0.0, mid * mid - det));
    const double r = settings.footprint_sigma * std::sqrt(lambda_max);
    out.x0 = std::max(0, static_cast<int>(std::ceil(out.mean2d[0] - r)));
    out.x1 = std::min(w, static_cast<int>(std::floor(out.mean2d[0] + r)) + 1);
    out.y0 = std::max(0, static_cast<int>(std::ceil(out.mean2d[1] - r)));
    out.y1 = std::min(h, static_cast<int>(std::floor(out.mean2d[1] + r)) + 1);
  }
  if (out.x0 >= out.x1 || out.y0 >= out.y1) {
    return std::nullopt;
  }

  out.color = g.color;
  out.opacity = g.opacity;

  // Normal: smallest-scale axis, flipped to face the camera, plus residual.
  out.normal_axis = smallest_axis(g.scale);
  const Vec3 base = g.rotation.col(out.normal_axis);
  out.normal_sign = (cam.rotation * base).dot(-p) < 0.0 ? -1.0 : 1.0;
  out.normal_unnormalized = out.normal_sign * base + g.normal_residual;
  const double len = out.normal_unnormalized.norm();
  const Vec3 n_world = len > 1e-12 ? Vec3(out.normal_unnormalized / len) : Vec3(out.normal_sign * base);
  out.normal_view = cam.rotation * n_world;
  return out;
}

namespace {

RenderOutput render_impl(const GaussianField& field, const Camera& camera,
                         const RenderSettings& settings, StageTimes* times) {
  camera.validate();
  check_finite(field);
  if (settings.tile_size < 1) {
    fail(ErrorCode::kInvalidArgument, "tile size must be positive");
  }
  auto state = std::make_shared<RenderState>();
  RenderState& st = *state;
  st.camera = camera;
  st.settings = settings;
  st.role = field.role;
  st.width = camera.width;
  st.height = camera.height;
  const std::size_t n = field.size();
  const int workers = std::max(1, settings.workers);

  auto t0 = Clock::now();
  st.activated.resize(n);
  st.projected.resize(n);
  st.visible.assign(n, 0);
  parallel_for(n, workers, [&](std::size_t i) {
    st.activated[i] = activate(field.gaussians[i]);
    if (auto proj = project(st.activated[i], camera, settings)) {
      st.projected[i] = *proj;
      st.visible[i] = 1;
    }
  });
  if (times != nullptr) times->project_ms += ms_since(t0);

  t0 = Clock::now();
  std::vector<std::uint32_t> order;
  order.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (st.visible[i]) order.push_back(static_cast<std::uint32_t>(i));
  }
  std::sort(order.begin(), order.end(), [&](std::uint32_t a, std::uint32_t b) {
    const double da = st.projected[a].depth;
    const double db = st.projected[b].depth;
    return da < db || (da == db && a < b);
  });
  const int ts = settings.tile_size;
  st.tiles_x = (st.width + ts - 1) / ts;
  st.tiles_y = (st.height + ts - 1) / ts;
  const std::size_t tile_count = static_cast<std::size_t>(st.tiles_x) * st.tiles_y;
  std::vector<std::uint32_t> counts(tile_count, 0);
  for (std::uint32_t id : order) {
    const ProjectedGaussian& g = st.projected[id];
    for (int ty = g.y0 / ts; ty <= (g.y1 - 1) / ts; ++ty)
      for (int tx = g.x0 / ts; tx <= (g.x1 - 1) / ts; ++tx) ++counts[ty * st.tiles_x + tx];
  }
  st.tile_offsets.assign(tile_count + 1, 0);
  for (std::size_t t = 0; t < tile_count; ++t) st.tile_offsets[t + 1] = st.tile_offsets[t] + counts[t];
  st.tile_ids.resize(st.tile_offsets.back());
  std::vector<std::uint32_t> cursor(st.tile_offsets.begin(), st.tile_offsets.end() - 1);
  for (std::uint32_t id : order) {
    const ProjectedGaussian& g = st.projected[id];
    for (int ty = g.y0 / ts; ty <= (g.y1 - 1) / ts; ++ty)
      for (int tx = g.x0 / ts; tx <= (g.x1 - 1) / ts; ++tx)
        st.tile_ids[cursor[ty * st.tiles_x + tx]++] = id;
  }
  if (times != nullptr) times->sort_ms += ms_since(t0);

  t0 = Clock::now();
  RenderOutput out;
  out.color = Image(st.width, st.height, 3);
  out.alpha = Image(st.width, st.height, 1);
  out.normal = Image(st.width, st.height, 3);
  out.depth = Image(st.width, st.height, 1);
  st.normal_raw = Image(st.width, st.height, 3);
  st.final_transmittance.assign(out.alpha.pixel_count(), 1.0);
  st.contributor_end.assign(out.alpha.pixel_count(), 0);
  const double cutoff_power = std::isinf(settings.footprint_sigma)
                                  ? -std::numeric_limits<double>::infinity()
                                  : -0.5 * settings.footprint_sigma * settings.footprint_sigma;

  parallel_for(tile_count, workers, [&](std::size_t tile) {
    const int tx = static_cast<int>(tile % st.tiles_x);
    const int ty = static_cast<int>(tile / st.tiles_x);
    const std::uint32_t begin = st.tile_offsets[tile];
    const std::uint32_t end = st.tile_offsets[tile + 1];
    for (int y = ty * ts; y < std::min(st.height, (ty + 1) * ts); ++y) {
      for (int x = tx * ts; x < std::min(st.width, (tx + 1) * ts); ++x) {
        double transmittance = 1.0;
        Vec3 color = Vec3::Zero();
        Vec3 normal = Vec3::Zero();
        double alpha = 0.0;
        double depth = 0.0;
        std::uint32_t last = begin;
        for (std::uint32_t k = begin; k < end; ++k) {
          const ProjectedGaussian& g = st.projected[st.tile_ids[k]];
          if (x < g.x0 || x >= g.x1 || y < g.y0 || y >= g.y1) continue;
          Coverage cov;
          if (!evaluate_coverage(g, x, y, cutoff_power, cov)) continue;
          const double a = std::min(settings.alpha_clamp, g.opacity * cov.falloff);
          const double weight = a * transmittance;
          color += weight * g.color;
          normal += weight * g.normal_view;
          alpha += weight;
          depth += weight * g.depth;
          transmittance *= 1.0 - a;
          last = k + 1;
          if (transmittance < settings.transmittance_floor) break;
        }
        const std::size_t p = static_cast<std::size_t>(y) * st.width + x;
        st.final_transmittance[p] = transmittance;
        st.contributor_end[p] = last;
        for (int c = 0; c < 3; ++c) {
          out.color.data[p * 3 + c] = color[c];
          st.normal_raw.data[p * 3 + c] = normal[c];
        }
        out.alpha.data[p] = alpha;
        out.depth.data[p] = depth;
        const double len = normal.norm();
        if (alpha > 0.0 && len > 1e-12) {
          for (int c = 0; c < 3; ++c) out.normal.data[p * 3 + c] = normal[c] / len;
        }
      }
    }
  });
  if (times != nullptr) times->blend_ms += ms_since(t0);

  if (settings.retain) {
    out.state = std::move(state);
  }
  return out;
}

// Per-(tile entry) gradient of the screen-space quantities.
struct ScreenGrad {
  Vec2 mean = Vec2::Zero();
  Mat2 conic = Mat2::Zero();
  double opacity = 0.0;
  Vec3 color = Vec3::Zero();
  Vec3 normal = Vec3::Zero();

  ScreenGrad& operator+=(const ScreenGrad& o) {
    mean += o.mean;
    conic += o.conic;
    opacity += o.opacity;
    color += o.color;
    normal += o.normal;
    return *this;
  }
};

}  // namespace

RenderOutput render(const GaussianField& field, const Camera& camera,
                    const RenderSettings& settings) {
  return render_impl(field, camera, settings, nullptr);
}

GradientBuffer backward(const RenderOutput& output, const Image* d_color, const Image* d_alpha,
                        const Image* d_normal) {
  if (!output.state) {
    fail(ErrorCode::kUsage, "backward() needs a render retained with settings.retain = true");
  }
  const RenderState& st = *output.state;
  if (d_color != nullptr) require_same_shape(*d_color, output.color, "backward d_color");
  if (d_alpha != nullptr) require_same_shape(*d_alpha, output.alpha, "backward d_alpha");
  if (d_normal != nullptr) require_same_shape(*d_normal, output.normal, "backward d_normal");

  const std::size_t n = st.activated.size();
  const std::size_t tile_count = st.tile_offsets.size() - 1;
  const RenderSettings& settings = st.settings;
  const int ts = settings.tile_size;
  const int workers = std::max(1, settings.workers);
  const double cutoff_power = std::isinf(settings.footprint_sigma)
                                  ? -std::numeric_limits<double>::infinity()
                                  : -0.5 * settings.footprint_sigma * settings.footprint_sigma;

  std::vector<ScreenGrad> partial(st.tile_ids.size());
  parallel_for(tile_count, workers, [&](std::size_t tile) {
    const int tx = static_cast<int>(tile % st.tiles_x);
    const int ty = static_cast<int>(tile / st.tiles_x);
    const std::uint32_t begin = st.tile_offsets[tile];
    for (int y = ty * ts; y < std::min(st.height, (ty + 1) * ts); ++y) {
      for (int x = tx * ts; x < std::min(st.width, (tx + 1) * ts); ++x) {
        const std::size_t p = static_cast<std::size_t>(y) * st.width + x;
        Vec3 g_color = Vec3::Zero();
        Vec3 g_normal = Vec3::Zero();
        double g_alpha = 0.0;
        if (d_color != nullptr) g_color = Eigen::Map<const Vec3>(&d_color->data[p * 3]);
        if (d_alpha != nullptr) g_alpha = d_alpha->data[p];
        if (d_normal != nullptr && output.alpha.data[p] > 0.0) {
          const Eigen::Map<const Vec3> raw(&st.normal_raw.data[p * 3]);
          const double len = raw.norm();
          if (len > 1e-12) {
            const Vec3 unit = raw / len;
            const Vec3 up = Eigen::Map<const Vec3>(&d_normal->data[p * 3]);
            g_normal = (up - unit * unit.dot(up)) / len;
          }
        }
        if (g_color.isZero(0.0) && g_normal.isZero(0.0) && g_alpha == 0.0) continue;

        double transmittance = st.final_transmittance[p];
        double behind = 0.0;  // sum over later contributors of v_k * w_k
        for (std::uint32_t k = st.contributor_end[p]; k-- > begin;) {
          const ProjectedGaussian& g = st.projected[st.tile_ids[k]];
          if (x < g.x0 || x >= g.x1 || y < g.y0 || y >= g.y1) continue;
          Coverage cov;
          if (!evaluate_coverage(g, x, y, cutoff_power, cov)) continue;
          const double raw_alpha = g.opacity * cov.falloff;
          const bool clamped = raw_alpha > settings.alpha_clamp;
          const double a = clamped ? settings.alpha_clamp : raw_alpha;
          transmittance /= 1.0 - a;
          const double weight = a * transmittance;
          const double value = g.color.dot(g_color) + g_alpha + g.normal_view.dot(g_normal);
          ScreenGrad& sg = partial[k];
          sg.color += weight * g_color;
          sg.normal += weight * g_normal;
          const double d_a = transmittance * value - behind / (1.0 - a);
          behind += value * weight;
          if (clamped) continue;
          const double d_power = d_a * a;
          sg.opacity += d_a * cov.falloff;
          sg.mean += d_power * (g.conic * cov.offset);
          sg.conic += (-0.5 * d_power) * (cov.offset * cov.offset.transpose());
        }
      }
    }
  });

  // Fixed-order reduction keeps gradients bit-identical for any worker count.
  std::vector<ScreenGrad> screen(n);
  for (std::size_t k = 0; k < st.tile_ids.size(); ++k) {
    screen[st.tile_ids[k]] += partial[k];
  }

  GradientBuffer out(n);
  const Camera& cam = st.camera;
  parallel_for(n, workers, [&](std::size_t i) {
    if (!st.visible[i]) return;
    const ScreenGrad& sg = screen[i];
    const ProjectedGaussian& g = st.projected[i];
    const ActivatedGaussian& a = st.activated[i];
    GaussianGrad& gg = out.grads[i];

    gg.color = sg.color;
    gg.opacity_logit = sg.opacity * a.opacity * (1.0 - a.opacity);

    const Mat2 d_cov = -g.conic * sg.conic * g.conic;
    const Eigen::Matrix<double, 2, 3>& j = g.jacobian;
    Vec3 d_view = j.transpose() * sg.mean;
    const Eigen::Matrix<double, 2, 3> d_j = 2.0 * d_cov * j * g.view_covariance;
    const Vec3& p = g.view_position;
    const double inv_d = 1.0 / g.depth;
    const double inv_d2 = inv_d * inv_d;
    const double inv_d3 = inv_d2 * inv_d;
    // J entries as functions of the view position (depth = -p.z).
    d_view.z() += d_j(0, 0) * cam.fx * inv_d2;
    d_view.x() += d_j(0, 2) * cam.fx * inv_d2;
    d_view.z() += d_j(0, 2) * 2.0 * cam.fx * p.x() * inv_d3;
    d_view.z() += d_j(1, 1) * (-cam.fy * inv_d2);
    d_view.y() += d_j(1, 2) * (-cam.fy * inv_d2);
    d_view.z() += d_j(1, 2) * (-2.0 * cam.fy * p.y() * inv_d3);

    const Mat3 d_view_cov = j.transpose() * d_cov * j;
    const Mat3 d_sigma = cam.rotation.transpose() * d_view_cov * cam.rotation;
    const Mat3 m = a.rotation * a.scale.asDiagonal();
    const Mat3 d_m = (d_sigma + d_sigma.transpose()) * m;
    Mat3 d_rot = d_m * a.scale.asDiagonal();
    for (int k = 0; k < 3; ++k) {
      gg.log_scale[k] = a.scale[k] * d_m.col(k).dot(a.rotation.col(k));
    }

    const double len = g.normal_unnormalized.norm();
    if (len > 1e-12 && !sg.normal.isZero(0.0)) {
      const Vec3 n_world = g.normal_unnormalized / len;
      const Vec3 d_n_world = cam.rotation.transpose() * sg.normal;
      const Vec3 d_unnorm = (d_n_world - n_world * n_world.dot(d_n_world)) / len;
      gg.normal_residual = d_unnorm;
      d_rot.col(g.normal_axis) += g.normal_sign * d_unnorm;
    }
    gg.rotation = normalize_vjp(a.unit_quaternion * a.quaternion_norm,
                                rotation_vjp(a.unit_quaternion, d_rot));
    gg.position = cam.rotation.transpose() * d_view;
    out.screen_grad_norm[i] =
        std::hypot(sg.mean.x() * 0.5 * st.width, sg.mean.y() * 0.5 * st.height);
  });
  return out;
}

BenchmarkReport benchmark(const GaussianField& field, const Camera& camera, int repetitions,
                          RenderSettings settings) {
  if (repetitions <= 0) {
    fail(ErrorCode::kEmptyInput, "benchmark needs at least one repetition");
  }
  settings.retain = true;
  BenchmarkReport report;
  report.repetitions = repetitions;
  report.workers = settings.workers;
  StageTimes times;
  const auto t0 = Clock::now();
  RenderOutput last;
  for (int r = 0; r < repetitions; ++r) {
    last = render_impl(field, camera, settings, &times);
  }
  const double total_ms = ms_since(t0);
  report.fps = repetitions / (total_ms / 1000.0);
  report.project_ms = times.project_ms / repetitions;
  report.sort_ms = times.sort_ms / repetitions;
  report.blend_ms = times.blend_ms / repetitions;
  report.tile_histogram_edges = {0, 1, 2, 4, 8, 16, 32, 64, 128, 256, 512, 1024};
  report.tile_histogram.assign(report.tile_histogram_edges.size(), 0);
  const auto& offsets = last.state->tile_offsets;
  for (std::size_t t = 0; t + 1 < offsets.size(); ++t) {
    const int count = static_cast<int>(offsets[t + 1] - offsets[t]);
    std::size_t bucket = 0;
    while (bucket + 1 < report.tile_histogram_edges.size() &&
           count >= report.tile_histogram_edges[bucket + 1]) {
      ++bucket;
    }
    ++report.tile_histogram[bucket];
  }
  report.last_color = last.color;
  return report;
}

}  // namespace vasplat
