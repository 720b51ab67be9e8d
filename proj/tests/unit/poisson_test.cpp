#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"
#include "test_util.hpp"
#include "vasplat/error.hpp"
#include "vasplat/poisson.hpp"

using namespace vasplat;
using namespace vasplat::testing;

namespace {

double seam_max_gradient(const Image& img, const std::vector<RegionBox>& boxes) {
  // Largest neighbour difference across any box edge.
  double m = 0.0;
  for (const RegionBox& b : boxes) {
    for (int y = b.y0; y <= b.y1; ++y)
      for (int c = 0; c < img.channels; ++c) {
        m = std::max(m, std::abs(img.at(b.x0, y, c) - img.at(b.x0 - 1, y, c)));
        m = std::max(m, std::abs(img.at(b.x1, y, c) - img.at(b.x1 + 1, y, c)));
      }
    for (int x = b.x0; x <= b.x1; ++x)
      for (int c = 0; c < img.channels; ++c) {
        m = std::max(m, std::abs(img.at(x, b.y0, c) - img.at(x, b.y0 - 1, c)));
        m = std::max(m, std::abs(img.at(x, b.y1, c) - img.at(x, b.y1 + 1, c)));
      }
  }
  return m;
}

RegionLandmarks fixture_landmarks() {
  RegionLandmarks lm;
  lm.left_eye = {{8, 10}, {12, 9}, {14, 11}};
  lm.right_eye = {{24, 10}, {28, 9}, {30, 11}};
  lm.mouth = {{14, 26}, {19, 24}, {24, 27}};
  return lm;
}

}  // namespace

TEST(RegionBoxes, DilationAndBounds) {
  EXPECT_EQ(region_box({{10, 10}}, RegionTag::kMouth, 2, 64, 64),
            (RegionBox{8, 8, 12, 12, RegionTag::kMouth}));
  EXPECT_EQ(region_box({{0, 0}, {5, 5}, {2, 3}}, RegionTag::kMouth, 0, 64, 64),
            (RegionBox{0, 0, 5, 5, RegionTag::kMouth}));
  // Margin past the border clamps one pixel inside it.
  EXPECT_EQ(region_box({{10, 20}}, RegionTag::kLeftEye, 100, 40, 30),
            (RegionBox{1, 1, 38, 28, RegionTag::kLeftEye}));
}

TEST(RegionBoxes, Errors) {
  try {
    region_box({}, RegionTag::kMouth, 2, 32, 32);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kEmptyInput);
  }
  try {
    region_box({{5, 5}, {9, 5}}, RegionTag::kMouth, 0, 32, 32);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kInvalidArgument);
  }
}

TEST(CutPaste, Provenance) {
  const Image src = random_image(1, 10, 8, 3), dst = random_image(2, 10, 8, 3);
  EXPECT_EQ(cut_paste(src, dst, {}).data, dst.data);
  EXPECT_EQ(cut_paste(src, dst, {{0, 0, 9, 7, RegionTag::kMouth}}).data, src.data);
  const std::vector<RegionBox> boxes = {{1, 1, 3, 2, RegionTag::kLeftEye},
                                        {6, 4, 8, 6, RegionTag::kMouth}};
  const Image out = cut_paste(src, dst, boxes);
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 10; ++x) {
      const bool inside = boxes[0].contains(x, y) || boxes[1].contains(x, y);
      for (int c = 0; c < 3; ++c) EXPECT_EQ(out.at(x, y, c), (inside ? src : dst).at(x, y, c));
    }
  EXPECT_THROW(cut_paste(src, Image(9, 8, 3), boxes), Error);
}

TEST(SeamlessClone, FixedPointWhenSourceEqualsDestination) {
  const Image img = random_image(3, 20, 20, 3, 0, 1);
  const CloneProblem pr{img, img, disc_mask(20, 7)};
  const CloneResult r = seamless_clone(pr);
  EXPECT_LT(max_abs_diff(r.image, img), 1e-5);
}

TEST(SeamlessClone, ConstantBoundaryIsHarmonicConstant) {
  const CloneProblem pr{Image(24, 24, 3, 0.8), Image(24, 24, 3, 0.3), disc_mask(24, 9)};
  const CloneResult r = seamless_clone(pr);
  for (double v : r.image.data) EXPECT_NEAR(v, 0.3, 1e-5);
}

TEST(SeamlessClone, MatchesDenseSolveOn16x16Region) {
  const CloneProblem pr{random_image(4, 20, 20, 3, 0, 1), random_image(5, 20, 20, 3, 0, 1),
                        rect_mask(20, 20, 2, 2, 17, 17)};
  const CloneResult r = seamless_clone(pr);
  EXPECT_LT(max_abs_diff(r.image, dense_clone(pr)), 1e-5);
  EXPECT_LT(max_abs_diff(r.image, gauss_seidel_clone(pr, 3000)), 1e-5);
}

TEST(SeamlessClone, ResidualCertificateAndOutsideUntouched) {
  const CloneProblem pr{random_image(6, 30, 26, 3, 0, 1), random_image(7, 30, 26, 3, 0, 1),
                        rect_mask(30, 26, 3, 4, 20, 18)};
  const CloneResult r = seamless_clone(pr);
  EXPECT_LT(clone_residual(pr, r.image), 1e-6);
  for (int y = 0; y < 26; ++y)
    for (int x = 0; x < 30; ++x)
      if (pr.mask.at(x, y) == 0.0)
        for (int c = 0; c < 3; ++c) EXPECT_EQ(r.image.at(x, y, c), pr.destination.at(x, y, c));
}

TEST(SeamlessClone, Linearity) {
  const Image s = random_image(8, 18, 18, 3, 0, 1), d = random_image(9, 18, 18, 3, 0, 1);
  const Image m = disc_mask(18, 6);
  Image s2 = s, d2 = d;
  s2 *= 0.4;
  d2 *= 0.4;
  Image base = seamless_clone({s, d, m}).image;
  base *= 0.4;
  EXPECT_LT(max_abs_diff(seamless_clone({s2, d2, m}).image, base), 1e-5);
}

TEST(SeamlessClone, Errors) {
  const Image img = random_image(1, 12, 12, 3);
  try {
    seamless_clone({img, img, Image(12, 12, 1)});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kEmptyInput);
  }
  EXPECT_THROW(seamless_clone({img, img, rect_mask(12, 12, 0, 3, 5, 5)}), Error);
  CloneOptions opt;
  opt.max_iterations = 1;
  try {
    seamless_clone({random_image(2, 20, 20, 3), random_image(3, 20, 20, 3),
                    disc_mask(20, 8)},
                   opt);
    FAIL();
  } catch (const SolverError& e) {
    EXPECT_EQ(e.code(), ErrorCode::kNonConvergence);
    EXPECT_GT(e.residual(), 1e-6);
    EXPECT_EQ(e.iterations(), 1);
  }
}

TEST(SeamlessClone, IterationsGrowSublinearly) {
  auto iters = [](int size) {
    const CloneProblem pr{random_image(10, size, size, 1, 0, 1), random_image(11, size, size, 1, 0, 1),
                          disc_mask(size, 0.45 * size)};
    return seamless_clone(pr).iterations[0];
  };
  const int small = iters(24), large = iters(96);  // 16x the pixels
  EXPECT_LT(large, 8 * small);
}

TEST(Augment, IdenticalFramesAreUnchanged) {
  const Image img = random_image(12, 40, 36, 3, 0, 1);
  const AugmentResult r = augment_frame(img, img, fixture_landmarks());
  EXPECT_LT(max_abs_diff(r.cloned, img), 1e-5);
  EXPECT_EQ(r.cut_paste.data, img.data);
}

TEST(Augment, CloningSoftensTheSeam) {
  Image src(40, 36, 3);
  for (int y = 0; y < 36; ++y)
    for (int x = 0; x < 40; ++x)
      for (int c = 0; c < 3; ++c) src.at(x, y, c) = 0.3 + 0.005 * x + 0.003 * y;
  Image emo = src;
  const RegionLandmarks lm = fixture_landmarks();
  const RegionBox mouth = region_box(lm.mouth, RegionTag::kMouth, 4, 40, 36);
  // The brightened patch extends past the pasted box, as a generator's
  // global color shift would.
  for (int y = mouth.y0 - 3; y <= mouth.y1 + 3; ++y)
    for (int x = mouth.x0 - 3; x <= mouth.x1 + 3; ++x)
      for (int c = 0; c < 3; ++c) emo.at(x, y, c) += 0.25;
  const AugmentResult r = augment_frame(src, emo, lm);
  EXPECT_LT(seam_max_gradient(r.cloned, r.boxes), seam_max_gradient(r.cut_paste, r.boxes));
}
