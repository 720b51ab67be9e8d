#include "vasplat/poisson.hpp"

#include <algorithm>
#include <cmath>

#include "vasplat/error.hpp"
#include "vasplat/parallel.hpp"

namespace vasplat {

const char* to_string(RegionTag tag) {
  switch (tag) {
    case RegionTag::kLeftEye:
      return "left_eye";
    case RegionTag::kRightEye:
      return "right_eye";
    case RegionTag::kMouth:
      return "mouth";
  }
  return "unknown";
}

RegionBox region_box(const std::vector<Vec2>& points, RegionTag tag, int margin, int width,
                     int height) {
  if (points.empty()) {
    fail(ErrorCode::kEmptyInput, std::string("no landmarks for region ") + to_string(tag));
  }
  if (margin < 0) fail(ErrorCode::kInvalidArgument, "margin must be non-negative");
  double lo_x = points[0].x(), hi_x = lo_x, lo_y = points[0].y(), hi_y = lo_y;
  for (const Vec2& p : points) {
    lo_x = std::min(lo_x, p.x());
    hi_x = std::max(hi_x, p.x());
    lo_y = std::min(lo_y, p.y());
    hi_y = std::max(hi_y, p.y());
  }
  const int min_x = std::clamp(static_cast<int>(std::floor(lo_x)), 0, width - 1);
  const int max_x = std::clamp(static_cast<int>(std::ceil(hi_x)), 0, width - 1);
  const int min_y = std::clamp(static_cast<int>(std::floor(lo_y)), 0, height - 1);
  const int max_y = std::clamp(static_cast<int>(std::ceil(hi_y)), 0, height - 1);
  RegionBox b;
  b.tag = tag;
  b.x0 = std::max(min_x - margin, std::min(min_x, 1));
  b.y0 = std::max(min_y - margin, std::min(min_y, 1));
  b.x1 = std::min(max_x + margin, std::max(max_x, width - 2));
  b.y1 = std::min(max_y + margin, std::max(max_y, height - 2));
  if (b.x1 <= b.x0 || b.y1 <= b.y0) {
    fail(ErrorCode::kInvalidArgument, std::string("degenerate ") + to_string(tag) + " box");
  }
  return b;
}

std::vector<RegionBox> region_boxes(const RegionLandmarks& lm, int margin, int width, int height) {
  return {region_box(lm.left_eye, RegionTag::kLeftEye, margin, width, height),
          region_box(lm.right_eye, RegionTag::kRightEye, margin, width, height),
          region_box(lm.mouth, RegionTag::kMouth, margin, width, height)};
}

Image box_mask(const std::vector<RegionBox>& boxes, int width, int height) {
  Image m(width, height, 1);
  for (const RegionBox& b : boxes)
    for (int y = std::max(0, b.y0); y <= std::min(height - 1, b.y1); ++y)
      for (int x = std::max(0, b.x0); x <= std::min(width - 1, b.x1); ++x) m.at(x, y) = 1.0;
  return m;
}

Image cut_paste(const Image& source, const Image& destination,
                const std::vector<RegionBox>& boxes) {
  require_same_shape(source, destination, "cut_paste");
  const Image m = box_mask(boxes, source.width, source.height);
  Image out = destination;
  for (std::size_t p = 0; p < out.pixel_count(); ++p) {
    if (m.data[p] == 0.0) continue;
    for (int c = 0; c < out.channels; ++c) {
      out.data[p * out.channels + c] = source.data[p * out.channels + c];
    }
  }
  return out;
}

namespace {

struct Region {
  int width = 0, height = 0;
  std::vector<int> pixels;  // flat pixel index per unknown
  std::vector<int> index;   // pixel -> unknown, -1 outside
};

constexpr int kDx[4] = {1, -1, 0, 0};
constexpr int kDy[4] = {0, 0, 1, -1};

Region build_region(const CloneProblem& pr) {
  require_same_shape(pr.source, pr.destination, "seamless_clone images");
  require_same_shape(pr.source, pr.mask, "seamless_clone mask", false);
  if (pr.mask.channels != 1) fail(ErrorCode::kDimensionMismatch, "clone mask must be one channel");
  Region r;
  r.width = pr.mask.width;
  r.height = pr.mask.height;
  r.index.assign(pr.mask.pixel_count(), -1);
  for (int y = 0; y < r.height; ++y) {
    for (int x = 0; x < r.width; ++x) {
      if (pr.mask.at(x, y) <= 0.5) continue;
      if (x == 0 || y == 0 || x == r.width - 1 || y == r.height - 1) {
        fail(ErrorCode::kInvalidArgument, "clone mask touches the image border");
      }
      const int p = y * r.width + x;
      r.index[p] = static_cast<int>(r.pixels.size());
      r.pixels.push_back(p);
    }
  }
  if (r.pixels.empty()) fail(ErrorCode::kEmptyInput, "clone mask is empty");
  return r;
}

// Right-hand side: boundary values plus divergence of the source guidance.
Eigen::VectorXd rhs(const CloneProblem& pr, const Region& r, int c) {
  const int ch = pr.source.channels;
  Eigen::VectorXd b(r.pixels.size());
  for (std::size_t k = 0; k < r.pixels.size(); ++k) {
    const int p = r.pixels[k];
    const int x = p % r.width, y = p / r.width;
    double v = 0.0;
    for (int d = 0; d < 4; ++d) {
      const int q = (y + kDy[d]) * r.width + (x + kDx[d]);
      v += pr.source.data[p * ch + c] - pr.source.data[q * ch + c];
      if (r.index[q] < 0) v += pr.destination.data[q * ch + c];
    }
    b[static_cast<Eigen::Index>(k)] = v;
  }
  return b;
}

// A f: 4 f_p minus unknown neighbours.
Eigen::VectorXd apply(const Region& r, const Eigen::VectorXd& f) {
  Eigen::VectorXd out(f.size());
  for (std::size_t k = 0; k < r.pixels.size(); ++k) {
    const int p = r.pixels[k];
    double v = 4.0 * f[static_cast<Eigen::Index>(k)];
    for (int d = 0; d < 4; ++d) {
      const int q = p + kDy[d] * r.width + kDx[d];
      if (r.index[q] >= 0) v -= f[r.index[q]];
    }
    out[static_cast<Eigen::Index>(k)] = v;
  }
  return out;
}

}  // namespace

CloneResult seamless_clone(const CloneProblem& pr, const CloneOptions& opt) {
  const Region r = build_region(pr);
  const int ch = pr.source.channels;
  const int n = static_cast<int>(r.pixels.size());
  const int max_iters = opt.max_iterations > 0
                            ? opt.max_iterations
                            : static_cast<int>(std::ceil(100.0 * std::sqrt(n)));
  CloneResult res;
  res.image = pr.destination;
  res.iterations.assign(ch, 0);
  res.residuals.assign(ch, 0.0);
  std::vector<std::string> failures(ch);

  parallel_for(ch, opt.workers, [&](std::size_t c) {
    const Eigen::VectorXd b = rhs(pr, r, static_cast<int>(c));
    Eigen::VectorXd x(n);
    for (int k = 0; k < n; ++k) x[k] = pr.destination.data[r.pixels[k] * ch + c];
    const double inv_diag = 0.25;  // every unknown has four neighbours
    Eigen::VectorXd res_vec = b - apply(r, x);
    Eigen::VectorXd z = inv_diag * res_vec;
    Eigen::VectorXd p = z;
    double rz = res_vec.dot(z);
    int it = 0;
    double norm = res_vec.lpNorm<Eigen::Infinity>();
    while (norm >= opt.tolerance && it < max_iters) {
      const Eigen::VectorXd ap = apply(r, p);
      const double alpha = rz / p.dot(ap);
      x += alpha * p;
      res_vec -= alpha * ap;
      ++it;
      norm = res_vec.lpNorm<Eigen::Infinity>();
      if (norm < opt.tolerance) {
        // Confirm against the true residual; restart if the recurrence drifted.
        res_vec = b - apply(r, x);
        norm = res_vec.lpNorm<Eigen::Infinity>();
        if (norm < opt.tolerance) break;
        z = inv_diag * res_vec;
        p = z;
        rz = res_vec.dot(z);
        continue;
      }
      z = inv_diag * res_vec;
      const double rz_next = res_vec.dot(z);
      p = z + (rz_next / rz) * p;
      rz = rz_next;
    }
    res.iterations[c] = it;
    res.residuals[c] = norm;
    for (int k = 0; k < n; ++k) res.image.data[r.pixels[k] * ch + c] = x[k];
  });
  const auto worst = std::max_element(res.residuals.begin(), res.residuals.end());
  if (*worst >= opt.tolerance) {
    const int c = static_cast<int>(worst - res.residuals.begin());
    throw SolverError("seamless clone did not converge: residual " + std::to_string(*worst) +
                          " after " + std::to_string(res.iterations[c]) + " iterations",
                      *worst, res.iterations[c]);
  }
  return res;
}

double clone_residual(const CloneProblem& pr, const Image& result) {
  require_same_shape(result, pr.destination, "clone_residual");
  const Region r = build_region(pr);
  const int ch = pr.source.channels;
  double worst = 0.0;
  for (int c = 0; c < ch; ++c) {
    const Eigen::VectorXd b = rhs(pr, r, c);
    Eigen::VectorXd f(r.pixels.size());
    for (std::size_t k = 0; k < r.pixels.size(); ++k) f[k] = result.data[r.pixels[k] * ch + c];
    worst = std::max(worst, (apply(r, f) - b).lpNorm<Eigen::Infinity>());
  }
  return worst;
}

AugmentResult augment_frame(const Image& source, const Image& emotional,
                            const RegionLandmarks& landmarks, int margin,
                            const CloneOptions& options) {
  require_same_shape(source, emotional, "augment_frame");
  AugmentResult out;
  out.boxes = region_boxes(landmarks, margin, source.width, source.height);
  out.cut_paste = cut_paste(emotional, source, out.boxes);
  CloneProblem pr{emotional, source, box_mask(out.boxes, source.width, source.height)};
  // Box pixels on the image border cannot be solved for and stay as the destination.
  for (int y = 0; y < source.height; ++y)
    for (int x = 0; x < source.width; ++x)
      if (x == 0 || y == 0 || x == source.width - 1 || y == source.height - 1) pr.mask.at(x, y) = 0;
  out.cloned = seamless_clone(pr, options).image;
  return out;
}

}  // namespace vasplat
