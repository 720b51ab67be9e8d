#pragma once

// Layer compositing: inside-mouth over background, then face over that.
// Layers arrive premultiplied; with straight color C = P / A,
//   out = C * A + under * (1 - A) = P + under * (1 - A)
// and pixels whose alpha is below kMinAlpha take the under layer as is.

#include "vasplat/image.hpp"
#include "vasplat/render.hpp"

namespace vasplat {

inline constexpr double kMinAlpha = 1e-6;

/// Straight color of a premultiplied buffer (0 where alpha < kMinAlpha).
Image unpremultiply(const Image& premult, const Image& alpha);

Image blend_over(const Image& premult, const Image& alpha, const Image& under);

struct BlendGrad {
  Image d_color;  // w.r.t. the premultiplied color
  Image d_alpha;
  Image d_under;
};

BlendGrad blend_over_backward(const Image& premult, const Image& alpha, const Image& under,
                              const Image& d_out);

Image blend_mouth_background(const RenderOutput& mouth, const Image& background);
Image blend_face(const RenderOutput& face, const Image& under);

struct Composite {
  Image mouth_background;
  Image image;
};

Composite compose(const RenderOutput& mouth, const RenderOutput& face, const Image& background);

struct CompositeGrad {
  Image d_mouth_color, d_mouth_alpha;
  Image d_face_color, d_face_alpha;
  Image d_background;
};

CompositeGrad compose_backward(const RenderOutput& mouth, const RenderOutput& face,
                               const Image& background, const Composite& forward,
                               const Image& d_image);

/// Pixel-wise product with a single-channel mask broadcast over channels.
Image apply_mask(const Image& image, const Image& mask);

}  // namespace vasplat
