#pragma once

// Independent reference implementations shared by the unit tests and the
// acceptance harness. They follow the definitions directly and favor
// clarity over speed.

#include <algorithm>
#include <cmath>
#include <utility>
#include <vector>

#include "vasplat/poisson.hpp"
#include "vasplat/render.hpp"

namespace vasplat::testing {

inline double max_abs_diff(const Image& a, const Image& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) m = std::max(m, std::abs(a.data[i] - b.data[i]));
  return m;
}

// Straightforward per-pixel compositor written against the definitions,
// without tiling, CSR lists or cached projections.
struct Reference {
  Image color, alpha;
  Image transmittance;  // final product of (1 - a_i) per pixel
};

inline Reference reference_render(const GaussianField& field, const Camera& cam, double k_sigma,
                           double t_floor) {
  struct Item {
    double depth;
    std::size_t id;
    Vec2 mean;
    Mat2 inv;
    double opacity;
    Vec3 color;
  };
  std::vector<Item> items;
  for (std::size_t i = 0; i < field.size(); ++i) {
    const GaussianParams& g = field.gaussians[i];
    const Vec4 q = g.rotation.normalized();
    const double w = q[0], x = q[1], y = q[2], z = q[3];
    Mat3 r;
    r << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),  //
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),   //
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
    const Vec3 s = g.log_scale.array().exp();
    const Mat3 sigma = r * s.array().square().matrix().asDiagonal() * r.transpose();
    const Vec3 p = cam.rotation * g.position + cam.translation;
    const double d = -p.z();
    if (d <= 0.01) continue;
    Eigen::Matrix<double, 2, 3> j;
    j << cam.fx / d, 0, cam.fx * p.x() / (d * d), 0, -cam.fy / d, -cam.fy * p.y() / (d * d);
    const Mat2 cov = j * cam.rotation * sigma * cam.rotation.transpose() * j.transpose() +
                     0.3 * Mat2::Identity();
    items.push_back({d, i, Vec2(cam.cx + cam.fx * p.x() / d, cam.cy - cam.fy * p.y() / d),
                     cov.inverse(), 1.0 / (1.0 + std::exp(-g.opacity_logit)), g.color});
  }
  std::stable_sort(items.begin(), items.end(),
                   [](const Item& a, const Item& b) { return a.depth < b.depth; });
  Reference out{Image(cam.width, cam.height, 3), Image(cam.width, cam.height, 1),
                Image(cam.width, cam.height, 1)};
  for (int py = 0; py < cam.height; ++py) {
    for (int px = 0; px < cam.width; ++px) {
      double t = 1.0;
      for (const Item& it : items) {
        const Vec2 dd = Vec2(px, py) - it.mean;
        const double m2 = dd.dot(it.inv * dd);
        if (std::isfinite(k_sigma) && m2 > k_sigma * k_sigma) continue;
        const double a = std::min(0.99, it.opacity * std::exp(-0.5 * m2));
        for (int c = 0; c < 3; ++c) out.color.at(px, py, c) += it.color[c] * a * t;
        out.alpha.at(px, py) += a * t;
        t *= 1.0 - a;
        if (t < t_floor) break;
      }
      out.transmittance.at(px, py) = t;
    }
  }
  return out;
}

inline Image rect_mask(int w, int h, int x0, int y0, int x1, int y1) {
  Image m(w, h, 1);
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) m.at(x, y) = 1.0;
  return m;
}

inline Image disc_mask(int size, double radius) {
  Image m(size, size, 1);
  const double c = 0.5 * (size - 1);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x)
      if (std::hypot(x - c, y - c) <= radius) m.at(x, y) = 1.0;
  return m;
}

// Builds the dense 5-point system for one channel from the definition and
// solves it by Gaussian elimination with partial pivoting.
inline Image dense_clone(const CloneProblem& pr) {
  const int w = pr.mask.width, h = pr.mask.height, ch = pr.source.channels;
  std::vector<int> id(w * h, -1);
  std::vector<std::pair<int, int>> px;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (pr.mask.at(x, y) > 0.5) {
        id[y * w + x] = static_cast<int>(px.size());
        px.push_back({x, y});
      }
  const int n = static_cast<int>(px.size());
  Image out = pr.destination;
  for (int c = 0; c < ch; ++c) {
    std::vector<std::vector<double>> a(n, std::vector<double>(n + 1, 0.0));
    for (int k = 0; k < n; ++k) {
      const auto [x, y] = px[k];
      a[k][k] = 4.0;
      const int nb[4][2] = {{x + 1, y}, {x - 1, y}, {x, y + 1}, {x, y - 1}};
      for (const auto& q : nb) {
        a[k][n] += pr.source.at(x, y, c) - pr.source.at(q[0], q[1], c);
        const int j = id[q[1] * w + q[0]];
        if (j >= 0) {
          a[k][j] -= 1.0;
        } else {
          a[k][n] += pr.destination.at(q[0], q[1], c);
        }
      }
    }
    for (int col = 0; col < n; ++col) {
      int piv = col;
      for (int r = col + 1; r < n; ++r)
        if (std::abs(a[r][col]) > std::abs(a[piv][col])) piv = r;
      std::swap(a[col], a[piv]);
      for (int r = col + 1; r < n; ++r) {
        const double f = a[r][col] / a[col][col];
        if (f == 0.0) continue;
        for (int k = col; k <= n; ++k) a[r][k] -= f * a[col][k];
      }
    }
    std::vector<double> sol(n);
    for (int r = n - 1; r >= 0; --r) {
      double s = a[r][n];
      for (int k = r + 1; k < n; ++k) s -= a[r][k] * sol[k];
      sol[r] = s / a[r][r];
    }
    for (int k = 0; k < n; ++k) out.at(px[k].first, px[k].second, c) = sol[k];
  }
  return out;
}

// Gauss-Seidel sweeps on the same equations, as a second reference.
inline Image gauss_seidel_clone(const CloneProblem& pr, int sweeps) {
  Image f = pr.destination;
  const int w = pr.mask.width, h = pr.mask.height;
  for (int s = 0; s < sweeps; ++s)
    for (int c = 0; c < f.channels; ++c)
      for (int y = 1; y < h - 1; ++y)
        for (int x = 1; x < w - 1; ++x) {
          if (pr.mask.at(x, y) <= 0.5) continue;
          const int nb[4][2] = {{x + 1, y}, {x - 1, y}, {x, y + 1}, {x, y - 1}};
          double v = 0.0;
          for (const auto& q : nb) {
            v += f.at(q[0], q[1], c) + pr.source.at(x, y, c) - pr.source.at(q[0], q[1], c);
          }
          f.at(x, y, c) = 0.25 * v;
        }
  return f;
}

}  // namespace vasplat::testing
