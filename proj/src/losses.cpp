#include "vasplat/losses.hpp"

#include <algorithm>
#include <cmath>

#include "vasplat/error.hpp"
#include "vasplat/random.hpp"

namespace vasplat {

void LossWeights::validate() const {
  auto check = [](double w, const char* name) {
    if (!(std::isfinite(w) && w >= 0.0)) {
      fail(ErrorCode::kInvalidArgument, std::string("loss weight ") + name + " must be >= 0");
    }
  };
  for (double w : gamma) check(w, "gamma");
  for (double w : beta) check(w, "beta");
  for (double w : kappa) check(w, "kappa");
  check(kappa_sync, "kappa_sync");
  for (double w : lambda) check(w, "lambda");
  for (double w : eta) check(w, "eta");
}

namespace {

void prepare_grad(Image* grad, const Image& like) {
  if (grad != nullptr) *grad = Image(like.width, like.height, like.channels);
}

// ---- separable Gaussian window -------------------------------------------------

constexpr int kWindow = 11;
constexpr double kSigma = 1.5;
constexpr double kC1 = 0.01 * 0.01;
constexpr double kC2 = 0.03 * 0.03;

const std::array<double, kWindow>& window_1d() {
  static const std::array<double, kWindow> w = [] {
    std::array<double, kWindow> k{};
    double sum = 0.0;
    for (int i = 0; i < kWindow; ++i) {
      const double x = i - kWindow / 2;
      k[i] = std::exp(-x * x / (2.0 * kSigma * kSigma));
      sum += k[i];
    }
    for (double& v : k) v /= sum;
    return k;
  }();
  return w;
}

// Zero-padded "same" filtering of a w x h plane. The kernel is symmetric,
// so this is also its own adjoint.
std::vector<double> blur(const std::vector<double>& in, int w, int h) {
  const auto& k = window_1d();
  constexpr int r = kWindow / 2;
  std::vector<double> tmp(in.size(), 0.0), out(in.size(), 0.0);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double s = 0.0;
      for (int t = -r; t <= r; ++t) {
        const int xx = x + t;
        if (xx >= 0 && xx < w) s += k[t + r] * in[static_cast<std::size_t>(y) * w + xx];
      }
      tmp[static_cast<std::size_t>(y) * w + x] = s;
    }
  }
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double s = 0.0;
      for (int t = -r; t <= r; ++t) {
        const int yy = y + t;
        if (yy >= 0 && yy < h) s += k[t + r] * tmp[static_cast<std::size_t>(yy) * w + x];
      }
      out[static_cast<std::size_t>(y) * w + x] = s;
    }
  }
  return out;
}

std::vector<double> plane(const Image& img, int c) {
  std::vector<double> p(img.pixel_count());
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = img.data[i * img.channels + c];
  return p;
}

}  // namespace

double l1_loss(const Image& pred, const Image& target, Image* grad) {
  require_same_shape(pred, target, "l1_loss");
  prepare_grad(grad, pred);
  const double n = static_cast<double>(pred.size());
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = pred.data[i] - target.data[i];
    s += std::abs(d);
    if (grad != nullptr) grad->data[i] = (d > 0.0 ? 1.0 : d < 0.0 ? -1.0 : 0.0) / n;
  }
  return s / n;
}

double mse(const Image& pred, const Image& target, Image* grad) {
  require_same_shape(pred, target, "mse");
  prepare_grad(grad, pred);
  const double n = static_cast<double>(pred.size());
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = pred.data[i] - target.data[i];
    s += d * d;
    if (grad != nullptr) grad->data[i] = 2.0 * d / n;
  }
  return s / n;
}

double ssim(const Image& a, const Image& b, Image* grad_a) {
  require_same_shape(a, b, "ssim");
  prepare_grad(grad_a, a);
  const int w = a.width, h = a.height;
  const std::size_t np = a.pixel_count();
  const double norm = 1.0 / static_cast<double>(a.size());
  double total = 0.0;
  for (int c = 0; c < a.channels; ++c) {
    const std::vector<double> x = plane(a, c);
    const std::vector<double> y = plane(b, c);
    std::vector<double> xx(np), yy(np), xy(np);
    for (std::size_t i = 0; i < np; ++i) {
      xx[i] = x[i] * x[i];
      yy[i] = y[i] * y[i];
      xy[i] = x[i] * y[i];
    }
    const auto mx = blur(x, w, h), my = blur(y, w, h);
    const auto exx = blur(xx, w, h), eyy = blur(yy, w, h), exy = blur(xy, w, h);
    std::vector<double> d_mx(np), d_exx(np), d_exy(np);
    for (std::size_t i = 0; i < np; ++i) {
      const double a1 = 2.0 * mx[i] * my[i] + kC1;
      const double a2 = 2.0 * (exy[i] - mx[i] * my[i]) + kC2;
      const double b1 = mx[i] * mx[i] + my[i] * my[i] + kC1;
      const double b2 = (exx[i] - mx[i] * mx[i]) + (eyy[i] - my[i] * my[i]) + kC2;
      const double den = b1 * b2;
      const double s = a1 * a2 / den;
      total += s;
      if (grad_a == nullptr) continue;
      // Partials with E[x^2] and E[xy] held fixed.
      const double da1 = 2.0 * my[i], da2 = -2.0 * my[i];
      const double db1 = 2.0 * mx[i], db2 = -2.0 * mx[i];
      d_mx[i] = norm * ((da1 * a2 + a1 * da2) - s * (db1 * b2 + b1 * db2)) / den;
      d_exx[i] = norm * (-s / b2);
      d_exy[i] = norm * (2.0 * a1 / den);
    }
    if (grad_a == nullptr) continue;
    const auto g_mx = blur(d_mx, w, h), g_exx = blur(d_exx, w, h), g_exy = blur(d_exy, w, h);
    for (std::size_t i = 0; i < np; ++i) {
      grad_a->data[i * a.channels + c] = g_mx[i] + 2.0 * x[i] * g_exx[i] + y[i] * g_exy[i];
    }
  }
  return total * norm;
}

double d_ssim(const Image& pred, const Image& target, Image* grad) {
  const double s = ssim(pred, target, grad);
  if (grad != nullptr) *grad *= -1.0;
  return 1.0 - s;
}

double tv_loss(const Image& map, Image* grad) {
  prepare_grad(grad, map);
  const int w = map.width, h = map.height, ch = map.channels;
  const double nh = static_cast<double>(h) * (w - 1) * ch;
  const double nv = static_cast<double>(h - 1) * w * ch;
  double sh = 0.0, sv = 0.0;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < ch; ++c) {
        if (x + 1 < w) {
          const double d = map.at(x + 1, y, c) - map.at(x, y, c);
          sh += d * d;
          if (grad != nullptr) {
            grad->at(x + 1, y, c) += 2.0 * d / nh;
            grad->at(x, y, c) -= 2.0 * d / nh;
          }
        }
        if (y + 1 < h) {
          const double d = map.at(x, y + 1, c) - map.at(x, y, c);
          sv += d * d;
          if (grad != nullptr) {
            grad->at(x, y + 1, c) += 2.0 * d / nv;
            grad->at(x, y, c) -= 2.0 * d / nv;
          }
        }
      }
    }
  }
  return (nh > 0 ? sh / nh : 0.0) + (nv > 0 ? sv / nv : 0.0);
}

double residual_norm_sq(const GaussianField& field, GradientBuffer* grad, double scale) {
  if (grad != nullptr && grad->size() != field.size()) {
    fail(ErrorCode::kDimensionMismatch, "gradient buffer does not match the field");
  }
  double s = 0.0;
  for (std::size_t i = 0; i < field.size(); ++i) {
    const Vec3& dn = field.gaussians[i].normal_residual;
    s += dn.squaredNorm();
    if (grad != nullptr) grad->grads[i].normal_residual += 2.0 * scale * dn;
  }
  return s;
}

NormalLossTerms normal_loss(const Image& pred, const Image& target, const GaussianField& field,
                            double w_l1, double w_tv, double w_res, Image* grad_pred,
                            GradientBuffer* grad_field) {
  require_same_shape(pred, target, "normal_loss");
  NormalLossTerms t;
  Image g_l1, g_tv;
  t.l1 = l1_loss(pred, target, grad_pred != nullptr ? &g_l1 : nullptr);
  t.tv = tv_loss(pred, grad_pred != nullptr ? &g_tv : nullptr);
  t.residual = residual_norm_sq(field, grad_field, w_res);
  t.total = w_l1 * t.l1 + w_tv * t.tv + w_res * t.residual;
  if (grad_pred != nullptr) {
    *grad_pred = Image(pred.width, pred.height, pred.channels);
    grad_pred->add_scaled(g_l1, w_l1);
    grad_pred->add_scaled(g_tv, w_tv);
  }
  return t;
}

// ---- Perceptual slot ------------------------------------------------------------

RandomProjectionPerceptual::RandomProjectionPerceptual(int channels, int features,
                                                       std::uint64_t seed)
    : channels_(channels), projection_(features, 9 * channels) {
  Rng rng(seed);
  const double s = 1.0 / std::sqrt(9.0 * channels);
  for (Eigen::Index i = 0; i < projection_.size(); ++i) projection_.data()[i] = s * rng.normal();
}

double RandomProjectionPerceptual::loss(const Image& pred, const Image& target, Image* grad) const {
  require_same_shape(pred, target, "perceptual loss");
  if (pred.channels != channels_) {
    fail(ErrorCode::kDimensionMismatch, "perceptual metric channel count differs");
  }
  prepare_grad(grad, pred);
  const int ch = channels_;
  const int nf = static_cast<int>(projection_.rows());
  double total = 0.0;
  int scales = 0;
  for (int s : {1, 2, 4}) {
    const int w = pred.width / s, h = pred.height / s;
    if (w < 3 || h < 3) continue;
    ++scales;
    // Pooled difference image.
    Image d(w, h, ch);
    const double inv_area = 1.0 / (s * s);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        for (int c = 0; c < ch; ++c) {
          double acc = 0.0;
          for (int dy = 0; dy < s; ++dy)
            for (int dx = 0; dx < s; ++dx)
              acc += pred.at(x * s + dx, y * s + dy, c) - target.at(x * s + dx, y * s + dy, c);
          d.at(x, y, c) = acc * inv_area;
        }
    const double norm = 1.0 / (static_cast<double>(w) * h * nf);
    Image d_grad(w, h, ch);
    VecX patch(9 * ch);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        int k = 0;
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx)
            for (int c = 0; c < ch; ++c, ++k) {
              const int xx = x + dx, yy = y + dy;
              patch[k] = (xx >= 0 && xx < w && yy >= 0 && yy < h) ? d.at(xx, yy, c) : 0.0;
            }
        const VecX f = projection_ * patch;
        total += f.squaredNorm() * norm;
        if (grad == nullptr) continue;
        const VecX gp = projection_.transpose() * (2.0 * norm * f);
        k = 0;
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx)
            for (int c = 0; c < ch; ++c, ++k) {
              const int xx = x + dx, yy = y + dy;
              if (xx >= 0 && xx < w && yy >= 0 && yy < h) d_grad.at(xx, yy, c) += gp[k];
            }
      }
    }
    if (grad == nullptr) continue;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        for (int c = 0; c < ch; ++c)
          for (int dy = 0; dy < s; ++dy)
            for (int dx = 0; dx < s; ++dx)
              grad->at(x * s + dx, y * s + dy, c) += d_grad.at(x, y, c) * inv_area;
  }
  if (scales == 0) return 0.0;
  if (grad != nullptr) *grad *= 1.0 / scales;
  return total / scales;
}

// ---- Sync ---------------------------------------------------------------------

double sync_loss(const SyncEmbedder& embedder, const std::vector<Image>& images,
                 const std::vector<VecX>& audio, std::vector<Image>* d_images) {
  const VecX si = embedder.embed_images(images);
  const VecX sa = embedder.embed_audio(audio);
  if (si.size() != sa.size()) {
    fail(ErrorCode::kDimensionMismatch, "sync embeddings differ in dimension (" +
                                            std::to_string(si.size()) + " vs " +
                                            std::to_string(sa.size()) + ")");
  }
  const VecX diff = si - sa;
  if (d_images != nullptr) *d_images = embedder.backward_images(images, 2.0 * diff);
  return diff.squaredNorm();
}

namespace {

double box_mean(const Image& img, const MeanIntensitySyncEmbedder::Box& b) {
  double s = 0.0;
  for (int y = b.y0; y < b.y1; ++y)
    for (int x = b.x0; x < b.x1; ++x)
      for (int c = 0; c < img.channels; ++c) s += img.at(x, y, c);
  return s / (static_cast<double>(b.x1 - b.x0) * (b.y1 - b.y0) * img.channels);
}

void check_box(const MeanIntensitySyncEmbedder::Box& b, const Image& img) {
  if (b.x0 < 0 || b.y0 < 0 || b.x1 > img.width || b.y1 > img.height || b.x0 >= b.x1 ||
      b.y0 >= b.y1) {
    fail(ErrorCode::kInvalidArgument, "sync box lies outside the image");
  }
}

}  // namespace

MeanIntensitySyncEmbedder MeanIntensitySyncEmbedder::calibrate(Box box,
                                                               const std::vector<Image>& frames,
                                                               const std::vector<VecX>& audio) {
  if (frames.size() != audio.size() || frames.empty()) {
    fail(ErrorCode::kDimensionMismatch, "sync calibration needs one audio vector per frame");
  }
  const std::size_t n = frames.size();
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    check_box(box, frames[i]);
    const double x = audio[i].mean();
    const double y = box_mean(frames[i], box);
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  const double var = sxx - sx * sx / n;
  const double scale = var > 1e-12 ? (sxy - sx * sy / n) / var : 0.0;
  return MeanIntensitySyncEmbedder(box, scale, (sy - scale * sx) / n);
}

VecX MeanIntensitySyncEmbedder::embed_images(const std::vector<Image>& window) const {
  VecX e(static_cast<Eigen::Index>(window.size()));
  for (std::size_t k = 0; k < window.size(); ++k) {
    check_box(box_, window[k]);
    e[static_cast<Eigen::Index>(k)] = box_mean(window[k], box_);
  }
  return e;
}

VecX MeanIntensitySyncEmbedder::embed_audio(const std::vector<VecX>& window) const {
  VecX e(static_cast<Eigen::Index>(window.size()));
  for (std::size_t k = 0; k < window.size(); ++k) {
    e[static_cast<Eigen::Index>(k)] = scale_ * window[k].mean() + offset_;
  }
  return e;
}

std::vector<Image> MeanIntensitySyncEmbedder::backward_images(const std::vector<Image>& window,
                                                              const VecX& d_embedding) const {
  std::vector<Image> out;
  for (std::size_t k = 0; k < window.size(); ++k) {
    const Image& img = window[k];
    Image g(img.width, img.height, img.channels);
    const double v = d_embedding[static_cast<Eigen::Index>(k)] /
                     (static_cast<double>(box_.x1 - box_.x0) * (box_.y1 - box_.y0) * img.channels);
    for (int y = box_.y0; y < box_.y1; ++y)
      for (int x = box_.x0; x < box_.x1; ++x)
        for (int c = 0; c < img.channels; ++c) g.at(x, y, c) = v;
    out.push_back(std::move(g));
  }
  return out;
}

// ---- Generator losses -----------------------------------------------------------

LipLosses lip_losses(const std::vector<Vec2>& landmarks, const std::vector<Vec2>& predicted,
                     const Image& image, const Image& emotional, const Image& lip_mask,
                     const VecX& displacement) {
  if (landmarks.size() != predicted.size()) {
    fail(ErrorCode::kDimensionMismatch, "landmark arrays differ in length");
  }
  require_same_shape(image, emotional, "lip_losses images");
  require_same_shape(image, lip_mask, "lip_losses mask", false);
  LipLosses out;
  for (std::size_t i = 0; i < landmarks.size(); ++i) {
    out.landmark += (predicted[i] - landmarks[i]).squaredNorm();
  }
  for (std::size_t p = 0; p < image.pixel_count(); ++p) {
    const double m = lip_mask.data[p];
    for (int c = 0; c < image.channels; ++c) {
      const std::size_t i = p * image.channels + c;
      const double d = m * (emotional.data[i] - image.data[i]);
      out.photometric += d * d;
    }
  }
  out.regularizer = displacement.squaredNorm();
  return out;
}

double generator_loss(const GeneratorTerms& t, const LossWeights& w) {
  return w.lambda[0] * t.lip.landmark + w.lambda[1] * t.lip.photometric +
         w.lambda[2] * t.lip.regularizer + w.lambda[3] * t.emotion + w.lambda[4] * t.identity;
}

// ---- Metrics ------------------------------------------------------------------

double psnr(const Image& pred, const Image& target) {
  const double m = mse(pred, target);
  if (m == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / m);
}

double landmark_distance(const std::vector<Vec2>& predicted, const std::vector<Vec2>& target) {
  if (predicted.size() != target.size()) {
    fail(ErrorCode::kDimensionMismatch, "landmark arrays differ in length");
  }
  if (predicted.empty()) fail(ErrorCode::kEmptyInput, "no landmarks");
  double s = 0.0;
  for (std::size_t i = 0; i < predicted.size(); ++i) s += (predicted[i] - target[i]).norm();
  return s / predicted.size();
}

namespace {

void require_records(const std::vector<VARecord>& records) {
  if (records.empty()) fail(ErrorCode::kEmptyInput, "no valence/arousal records");
}

int sign_of(double v) { return (v > 0.0) - (v < 0.0); }

}  // namespace

double va_rmse(const std::vector<VARecord>& records, VAAxis axis) {
  require_records(records);
  const int k = static_cast<int>(axis);
  double s = 0.0;
  for (const VARecord& r : records) {
    const double d = r.predicted[k] - r.target[k];
    s += d * d;
  }
  return std::sqrt(s / records.size());
}

double sign_agreement(const std::vector<VARecord>& records, VAAxis axis) {
  require_records(records);
  const int k = static_cast<int>(axis);
  std::size_t agree = 0;
  for (const VARecord& r : records) {
    agree += sign_of(r.predicted[k]) == sign_of(r.target[k]);
  }
  return static_cast<double>(agree) / records.size();
}

const std::vector<VALabel>& va_label_table() {
  static const std::vector<VALabel> table = {
      {{0.74, 0.31}, "Happy"},     {{0.31, 0.74}, "Surprise"},  {{-0.31, 0.74}, "Angry"},
      {{-0.74, 0.31}, "Disgust"},  {{-0.74, -0.31}, "Sad"},     {{-0.31, -0.74}, "Sad"},
      {{0.31, -0.74}, "Contempt"}, {{0.74, -0.31}, "Contempt"}, {{0.35, 0.35}, "Happy"},
      {{-0.35, 0.35}, "Angry"},    {{-0.35, -0.35}, "Sad"},     {{0.35, -0.35}, "Contempt"},
  };
  return table;
}

namespace {

const VALabel* find_label(const Vec2& point, const std::vector<VALabel>& table) {
  for (const VALabel& l : table) {
    if ((l.point - point).cwiseAbs().maxCoeff() < 1e-6) return &l;
  }
  return nullptr;
}

}  // namespace

std::string label_for(const Vec2& point) {
  const VALabel* l = find_label(point, va_label_table());
  if (l == nullptr) {
    fail(ErrorCode::kNotFound, "no label for VA point (" + std::to_string(point.x()) + ", " +
                                   std::to_string(point.y()) + ")");
  }
  return l->label;
}

double top3_accuracy(const std::vector<VARecord>& records, const std::vector<VALabel>& table) {
  require_records(records);
  std::size_t hits = 0;
  for (const VARecord& r : records) {
    const VALabel* l = find_label(r.target, table);
    if (l == nullptr) {
      fail(ErrorCode::kNotFound, "record target is not a labelled VA point");
    }
    const std::size_t n = std::min<std::size_t>(3, r.ranking.size());
    hits += std::find(r.ranking.begin(), r.ranking.begin() + n, l->label) != r.ranking.begin() + n;
  }
  return static_cast<double>(hits) / records.size();
}

}  // namespace vasplat
