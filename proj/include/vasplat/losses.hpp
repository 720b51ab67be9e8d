#pragma once

// Training losses and evaluation metrics. Every loss that sits on the
// training chain takes an optional gradient buffer for dL/d(prediction).

#include <array>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "vasplat/image.hpp"
#include "vasplat/render.hpp"
#include "vasplat/scene.hpp"

namespace vasplat {

struct LossWeights {
  std::array<double, 4> gamma{0.2, 0.05, 0.005, 0.001};            // canonical stage
  std::array<double, 6> beta{0.2, 0.2, 0.05, 0.005, 0.001, 0.05};  // mouth / face branches
  std::array<double, 5> kappa{0.2, 0.2, 0.05, 0.005, 0.001};       // emotion branch
  double kappa_sync = 0.001;
  std::array<double, 5> lambda{1.0, 5.0, 0.03, 0.2, 1.5};  // emotional generator
  std::array<double, 2> eta{0.2, 0.5};                     // border fine-tune

  /// Throws kInvalidArgument on a negative or non-finite weight.
  void validate() const;
};

// ---- Photometric ---------------------------------------------------------------

double l1_loss(const Image& pred, const Image& target, Image* grad = nullptr);
double mse(const Image& pred, const Image& target, Image* grad = nullptr);

/// Mean SSIM over pixels and channels: 11x11 Gaussian window (sigma 1.5),
/// zero padding, C1 = 0.01^2, C2 = 0.03^2.
double ssim(const Image& a, const Image& b, Image* grad_a = nullptr);
/// 1 - SSIM.
double d_ssim(const Image& pred, const Image& target, Image* grad = nullptr);

/// Mean squared horizontal forward difference plus mean squared vertical
/// forward difference.
double tv_loss(const Image& map, Image* grad = nullptr);

/// Sum over Gaussians of |normal_residual|^2.
double residual_norm_sq(const GaussianField& field, GradientBuffer* grad = nullptr,
                        double scale = 1.0);

struct NormalLossTerms {
  double l1 = 0.0;
  double tv = 0.0;
  double residual = 0.0;
  double total = 0.0;
};

/// w_l1 * L1(pred, target) + w_tv * TV(pred) + w_res * sum |dn|^2.
NormalLossTerms normal_loss(const Image& pred, const Image& target, const GaussianField& field,
                            double w_l1, double w_tv, double w_res, Image* grad_pred = nullptr,
                            GradientBuffer* grad_field = nullptr);

// ---- Perceptual slot ------------------------------------------------------------

class PerceptualMetric {
 public:
  virtual ~PerceptualMetric() = default;
  virtual double loss(const Image& pred, const Image& target, Image* grad) const = 0;
};

/// Multi-scale (1x, 2x, 4x average pooled) 3x3 patches projected onto a
/// fixed random basis; the loss is the mean squared feature distance
/// averaged over scales.
class RandomProjectionPerceptual : public PerceptualMetric {
 public:
  explicit RandomProjectionPerceptual(int channels = 3, int features = 16,
                                      std::uint64_t seed = 0x5EED);
  double loss(const Image& pred, const Image& target, Image* grad) const override;

 private:
  int channels_;
  MatX projection_;  // features x (9 * channels)
};

// ---- Sync ---------------------------------------------------------------------

/// Stand-in for a pretrained audio-visual sync network.
class SyncEmbedder {
 public:
  virtual ~SyncEmbedder() = default;
  virtual VecX embed_images(const std::vector<Image>& window) const = 0;
  virtual VecX embed_audio(const std::vector<VecX>& window) const = 0;
  /// dL/d(images) given dL/d(image embedding).
  virtual std::vector<Image> backward_images(const std::vector<Image>& window,
                                             const VecX& d_embedding) const = 0;
};

/// |S_I(images) - S_A(audio)|^2; fills d_images when non-null.
double sync_loss(const SyncEmbedder& embedder, const std::vector<Image>& images,
                 const std::vector<VecX>& audio, std::vector<Image>* d_images = nullptr);

/// Per-frame mean intensity inside a pixel box, against an affine map of
/// the mean audio feature of the same frame.
class MeanIntensitySyncEmbedder : public SyncEmbedder {
 public:
  struct Box {
    int x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // half-open
  };

  MeanIntensitySyncEmbedder(Box box, double scale, double offset)
      : box_(box), scale_(scale), offset_(offset) {}

  /// Least-squares fit of intensity = scale * mean(audio) + offset on
  /// reference frames (typically masked ground truth).
  static MeanIntensitySyncEmbedder calibrate(Box box, const std::vector<Image>& frames,
                                             const std::vector<VecX>& audio);

  VecX embed_images(const std::vector<Image>& window) const override;
  VecX embed_audio(const std::vector<VecX>& window) const override;
  std::vector<Image> backward_images(const std::vector<Image>& window,
                                     const VecX& d_embedding) const override;

  const Box& box() const { return box_; }
  double scale() const { return scale_; }
  double offset() const { return offset_; }

 private:
  Box box_;
  double scale_;
  double offset_;
};

inline constexpr int kSyncWindow = 5;

// ---- Emotional generator losses ------------------------------------------------

struct LipLosses {
  double landmark = 0.0;     // |L_hat - L|^2
  double photometric = 0.0;  // |M (.) (I_E - I)|^2
  double regularizer = 0.0;  // |d_l|^2
};

LipLosses lip_losses(const std::vector<Vec2>& landmarks, const std::vector<Vec2>& predicted,
                     const Image& image, const Image& emotional, const Image& lip_mask,
                     const VecX& displacement);

struct GeneratorTerms {
  LipLosses lip;
  double emotion = 0.0;
  double identity = 0.0;
};

double generator_loss(const GeneratorTerms& terms, const LossWeights& weights);

// ---- Metrics ------------------------------------------------------------------

/// 10 log10(1 / MSE); +infinity for identical images.
double psnr(const Image& pred, const Image& target);
/// Mean Euclidean distance between corresponding landmarks.
double landmark_distance(const std::vector<Vec2>& predicted, const std::vector<Vec2>& target);

struct VARecord {
  Vec2 predicted = Vec2::Zero();
  Vec2 target = Vec2::Zero();
  std::vector<std::string> ranking;  // predicted labels, most likely first
};

enum class VAAxis { kValence = 0, kArousal = 1 };

double va_rmse(const std::vector<VARecord>& records, VAAxis axis);
double sign_agreement(const std::vector<VARecord>& records, VAAxis axis);

struct VALabel {
  Vec2 point;
  const char* label;
};

/// The twelve evaluation points and their expected labels.
const std::vector<VALabel>& va_label_table();
/// Throws kNotFound when `point` is not one of the table points.
std::string label_for(const Vec2& point);
double top3_accuracy(const std::vector<VARecord>& records,
                     const std::vector<VALabel>& table = va_label_table());

}  // namespace vasplat
