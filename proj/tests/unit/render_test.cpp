#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "oracles.hpp"
#include "test_util.hpp"
#include "vasplat/error.hpp"
#include "vasplat/render.hpp"

using namespace vasplat;
using namespace vasplat::testing;

TEST(Render, MatchesReferenceCompositor) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const GaussianField f = random_field(seed, 12);
    const Camera cam = test_camera(40, 28);
    const RenderOutput out = render(f, cam);
    const Reference ref = reference_render(f, cam, 3.0, 1e-4);
    EXPECT_LT(max_abs_diff(out.color, ref.color), 1e-12) << seed;
    EXPECT_LT(max_abs_diff(out.alpha, ref.alpha), 1e-12) << seed;
  }
}

TEST(Render, SmoothSettingsMatchReferenceWithoutCutoffs) {
  const GaussianField f = random_field(7, 10);
  const Camera cam = test_camera(24, 24);
  const RenderOutput out = render(f, cam, RenderSettings::smooth());
  const Reference ref =
      reference_render(f, cam, std::numeric_limits<double>::infinity(), 0.0);
  EXPECT_LT(max_abs_diff(out.color, ref.color), 1e-12);
}

TEST(Render, IsotropicCovarianceClosedForm) {
  // Isotropic Gaussian of scale s straight ahead at depth d: cov2d = (f s / d)^2 I + 0.3 I.
  const Camera cam = test_camera(32, 32);
  ActivatedGaussian g = activate(GaussianParams{});
  g.position = Vec3(0, 0, 0.5);
  g.scale = Vec3::Constant(0.1);
  const auto p = project(g, cam);
  ASSERT_TRUE(p.has_value());
  const double expect = std::pow(cam.fx * 0.1 / 2.5, 2) + 0.3;
  EXPECT_NEAR(p->cov2d(0, 0), expect, 1e-12);
  EXPECT_NEAR(p->cov2d(1, 1), expect, 1e-12);
  EXPECT_NEAR(p->cov2d(0, 1), 0.0, 1e-12);
  EXPECT_NEAR(p->mean2d.x(), 15.5, 1e-12);
  EXPECT_NEAR(p->depth, 2.5, 1e-12);
}

TEST(Render, BehindCameraIsCulled) {
  const Camera cam = test_camera();
  ActivatedGaussian g = activate(GaussianParams{});
  g.position = Vec3(0, 0, 4);
  EXPECT_FALSE(project(g, cam).has_value());
}

TEST(Render, TelescopingIdentity) {
  // 1 - A equals the product of (1 - a_i) over contributors, i.e. the final
  // transmittance, whenever no early stop occurs.
  const GaussianField f = random_field(11, 8);
  const Camera cam = test_camera();
  RenderSettings s;
  s.transmittance_floor = 0.0;
  const RenderOutput out = render(f, cam, s);
  // Brute-force product of (1 - a_i) per pixel.
  const Reference ref = reference_render(f, cam, 3.0, 0.0);
  for (std::size_t p = 0; p < out.alpha.pixel_count(); ++p) {
    EXPECT_NEAR(out.alpha.data[p], ref.alpha.data[p], 1e-12);
    EXPECT_GE(out.alpha.data[p], 0.0);
    EXPECT_LE(out.alpha.data[p], 1.0);
  }
}

TEST(Render, WorkerCountIsBitInvariant) {
  const GaussianField f = random_field(5, 60);
  const Camera cam = test_camera(48, 40);
  RenderSettings one;
  one.tile_size = 8;
  RenderSettings many = one;
  many.workers = 4;
  const RenderOutput a = render(f, cam, one);
  const RenderOutput b = render(f, cam, many);
  EXPECT_EQ(a.color.data, b.color.data);
  EXPECT_EQ(a.normal.data, b.normal.data);
  const Image g = random_image(3, 48, 40, 3);
  const GradientBuffer ga = backward(a, &g, nullptr, &g);
  const GradientBuffer gb = backward(b, &g, nullptr, &g);
  for (std::size_t i = 0; i < ga.size(); ++i) {
    EXPECT_EQ(ga.grads[i].position, gb.grads[i].position);
    EXPECT_EQ(ga.grads[i].rotation, gb.grads[i].rotation);
    EXPECT_EQ(ga.screen_grad_norm[i], gb.screen_grad_norm[i]);
  }
}

TEST(Render, NormalsAreUnitAndFaceCamera) {
  const GaussianField f = random_field(9, 20);
  const RenderOutput out = render(f, test_camera());
  for (std::size_t p = 0; p < out.alpha.pixel_count(); ++p) {
    if (out.alpha.data[p] <= 0.0) continue;
    const Vec3 n(out.normal.data[p * 3], out.normal.data[p * 3 + 1], out.normal.data[p * 3 + 2]);
    EXPECT_NEAR(n.norm(), 1.0, 1e-9);
  }
}

TEST(Render, BackwardWithoutStateIsUsageError) {
  RenderSettings s;
  s.retain = false;
  const RenderOutput out = render(random_field(1, 3), test_camera(), s);
  try {
    backward(out, nullptr, nullptr, nullptr);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kUsage);
  }
}

TEST(Render, NonFiniteParameterIsRejected) {
  GaussianField f = random_field(1, 3);
  f.gaussians[1].color[0] = std::nan("");
  EXPECT_THROW(render(f, test_camera()), Error);
}

TEST(Render, BenchmarkZeroRepetitions) {
  try {
    benchmark(random_field(1, 3), test_camera(), 0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kEmptyInput);
  }
}

TEST(Render, BenchmarkHistogramCoversAllTiles) {
  const BenchmarkReport r = benchmark(random_field(2, 50), test_camera(64, 64), 2);
  EXPECT_GT(r.fps, 0.0);
  EXPECT_EQ(std::accumulate(r.tile_histogram.begin(), r.tile_histogram.end(), 0), 16);
}

// Finite-difference check of every parameter against a random linear
// functional of color, alpha and normals.
TEST(RenderGradient, MatchesCentralDifferences) {
  for (std::uint64_t seed : {21u, 22u, 23u}) {
    GaussianField f = random_field(seed, 6);
    const Camera cam = test_camera(20, 18);
    const RenderSettings s = RenderSettings::smooth();
    const Image wc = random_image(seed + 100, 20, 18, 3);
    const Image wa = random_image(seed + 200, 20, 18, 1);
    const Image wn = random_image(seed + 300, 20, 18, 3);
    auto loss = [&]() {
      const RenderOutput o = render(f, cam, s);
      return dot(o.color, wc) + dot(o.alpha, wa) + dot(o.normal, wn);
    };
    const GradientBuffer g = backward(render(f, cam, s), &wc, &wa, &wn);
    for (std::size_t i = 0; i < f.size(); ++i) {
      GaussianParams& p = f.gaussians[i];
      const GaussianGrad& gg = g.grads[i];
      for (int k = 0; k < 3; ++k) {
        EXPECT_PRED2(gradient_close, gg.position[k], central_difference(p.position[k], loss));
        EXPECT_PRED2(gradient_close, gg.log_scale[k], central_difference(p.log_scale[k], loss));
        EXPECT_PRED2(gradient_close, gg.color[k], central_difference(p.color[k], loss));
        EXPECT_PRED2(gradient_close, gg.normal_residual[k],
                     central_difference(p.normal_residual[k], loss));
      }
      for (int k = 0; k < 4; ++k) {
        EXPECT_PRED2(gradient_close, gg.rotation[k], central_difference(p.rotation[k], loss));
      }
      EXPECT_PRED2(gradient_close, gg.opacity_logit, central_difference(p.opacity_logit, loss));
    }
  }
}
