#pragma once

// Emotional training-target compositing: landmark boxes, cut-and-paste and
// Poisson seamless cloning.

#include <vector>

#include "vasplat/image.hpp"
#include "vasplat/scene.hpp"

namespace vasplat {

enum class RegionTag { kLeftEye, kRightEye, kMouth };

const char* to_string(RegionTag tag);

/// Inclusive pixel rectangle.
struct RegionBox {
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  RegionTag tag = RegionTag::kMouth;

  bool contains(int x, int y) const { return x >= x0 && x <= x1 && y >= y0 && y <= y1; }
  bool operator==(const RegionBox&) const = default;
};

struct RegionLandmarks {
  std::vector<Vec2> left_eye;
  std::vector<Vec2> right_eye;
  std::vector<Vec2> mouth;
};

/// Bounding box of the points dilated by `margin`. The dilation stops one
/// pixel short of the image border (the solver margin) unless the points
/// themselves are closer. Throws kEmptyInput for no points and
/// kInvalidArgument for a box that is one pixel thin.
RegionBox region_box(const std::vector<Vec2>& points, RegionTag tag, int margin, int width,
                     int height);
std::vector<RegionBox> region_boxes(const RegionLandmarks& landmarks, int margin, int width,
                                    int height);

Image box_mask(const std::vector<RegionBox>& boxes, int width, int height);

/// Destination with every pixel inside any box taken from the source.
Image cut_paste(const Image& source, const Image& destination, const std::vector<RegionBox>& boxes);

struct CloneProblem {
  Image source;       // guidance: its gradients are reproduced inside the mask
  Image destination;  // boundary values and everything outside the mask
  Image mask;         // one channel; pixels > 0.5 form the solve region
};

struct CloneOptions {
  double tolerance = 1e-6;
  int max_iterations = 0;  // 0: 100 * sqrt(|region|)
  int workers = 1;
};

struct CloneResult {
  Image image;
  std::vector<int> iterations;     // per channel
  std::vector<double> residuals;   // final |b - A f|_inf per channel
};

/// Solves the 5-point Poisson equation per channel with Jacobi-preconditioned
/// conjugate gradients. Throws SolverError when max_iterations is reached.
CloneResult seamless_clone(const CloneProblem& problem, const CloneOptions& options = {});

/// |A f - b|_inf over all channels, rebuilt from the problem definition.
double clone_residual(const CloneProblem& problem, const Image& result);

struct AugmentResult {
  std::vector<RegionBox> boxes;
  Image cut_paste;
  Image cloned;
};

/// Pastes the eye and mouth regions of `emotional` onto `source` and blends
/// them in with seamless cloning.
AugmentResult augment_frame(const Image& source, const Image& emotional,
                            const RegionLandmarks& landmarks, int margin = 4,
                            const CloneOptions& options = {});

}  // namespace vasplat
