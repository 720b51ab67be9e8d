#include "vasplat/composite.hpp"

#include "vasplat/error.hpp"

namespace vasplat {

namespace {

void check_layer(const Image& premult, const Image& alpha, const Image& under) {
  require_same_shape(premult, under, "composite layer vs under");
  require_same_shape(premult, alpha, "composite alpha", false);
  if (alpha.channels != 1) {
    fail(ErrorCode::kDimensionMismatch, "alpha buffers must have one channel");
  }
}

}  // namespace

Image unpremultiply(const Image& premult, const Image& alpha) {
  require_same_shape(premult, alpha, "unpremultiply", false);
  Image out(premult.width, premult.height, premult.channels);
  const int ch = premult.channels;
  for (std::size_t p = 0; p < premult.pixel_count(); ++p) {
    const double a = alpha.data[p];
    if (a < kMinAlpha) continue;
    for (int c = 0; c < ch; ++c) out.data[p * ch + c] = premult.data[p * ch + c] / a;
  }
  return out;
}

Image blend_over(const Image& premult, const Image& alpha, const Image& under) {
  check_layer(premult, alpha, under);
  Image out = under;
  const int ch = under.channels;
  for (std::size_t p = 0; p < under.pixel_count(); ++p) {
    const double a = alpha.data[p];
    if (a < kMinAlpha) continue;
    for (int c = 0; c < ch; ++c) {
      const std::size_t i = p * ch + c;
      out.data[i] = premult.data[i] + under.data[i] * (1.0 - a);
    }
  }
  return out;
}

BlendGrad blend_over_backward(const Image& premult, const Image& alpha, const Image& under,
                              const Image& d_out) {
  check_layer(premult, alpha, under);
  require_same_shape(d_out, under, "composite gradient");
  BlendGrad g{Image(under.width, under.height, under.channels),
              Image(under.width, under.height, 1), d_out};
  const int ch = under.channels;
  for (std::size_t p = 0; p < under.pixel_count(); ++p) {
    const double a = alpha.data[p];
    if (a < kMinAlpha) continue;
    double da = 0.0;
    for (int c = 0; c < ch; ++c) {
      const std::size_t i = p * ch + c;
      g.d_color.data[i] = d_out.data[i];
      g.d_under.data[i] = d_out.data[i] * (1.0 - a);
      da -= d_out.data[i] * under.data[i];
    }
    g.d_alpha.data[p] = da;
  }
  return g;
}

Image blend_mouth_background(const RenderOutput& mouth, const Image& background) {
  return blend_over(mouth.color, mouth.alpha, background);
}

Image blend_face(const RenderOutput& face, const Image& under) {
  return blend_over(face.color, face.alpha, under);
}

Composite compose(const RenderOutput& mouth, const RenderOutput& face, const Image& background) {
  Composite c;
  c.mouth_background = blend_mouth_background(mouth, background);
  c.image = blend_face(face, c.mouth_background);
  return c;
}

CompositeGrad compose_backward(const RenderOutput& mouth, const RenderOutput& face,
                               const Image& background, const Composite& forward,
                               const Image& d_image) {
  BlendGrad top = blend_over_backward(face.color, face.alpha, forward.mouth_background, d_image);
  BlendGrad low = blend_over_backward(mouth.color, mouth.alpha, background, top.d_under);
  return {std::move(low.d_color), std::move(low.d_alpha), std::move(top.d_color),
          std::move(top.d_alpha), std::move(low.d_under)};
}

Image apply_mask(const Image& image, const Image& mask) {
  require_same_shape(image, mask, "apply_mask", false);
  if (mask.channels != 1) {
    fail(ErrorCode::kDimensionMismatch, "masks must have one channel");
  }
  Image out = image;
  const int ch = image.channels;
  for (std::size_t p = 0; p < image.pixel_count(); ++p) {
    for (int c = 0; c < ch; ++c) out.data[p * ch + c] *= mask.data[p];
  }
  return out;
}

}  // namespace vasplat
