#include <algorithm>
#include <cmath>

#include "vasplat/error.hpp"
#include "vasplat/trainer.hpp"

namespace vasplat {

const char* to_string(BranchKind kind) {
  switch (kind) {
    case BranchKind::kMouth: return "mouth";
    case BranchKind::kFace: return "face";
    case BranchKind::kEmotion: return "emotion";
  }
  return "?";
}

nlohmann::json to_json(const LogEntry& e) {
  nlohmann::json losses = nlohmann::json::object();
  for (const auto& [k, v] : e.losses) {
    if (std::isfinite(v)) {
      losses[k] = v;
    } else {
      losses[k] = std::isnan(v) ? "nan" : (v > 0 ? "inf" : "-inf");
    }
  }
  return {{"step", e.step}, {"stage", e.stage}, {"losses", losses}, {"lr", e.lr},
          {"gaussian_count", e.gaussian_count}};
}

namespace {

// Back-projects pixels of the first frame's layer mask onto the plane
// through the look-at distance; used when the dataset has no init fields.
GaussianField init_from_masks(const Dataset& ds, LayerRole role, std::size_t count, Rng& rng) {
  GaussianField field;
  field.role = role;
  const Image& mask = role == LayerRole::kFace ? ds.face_masks[0] : ds.mouth_masks[0];
  const Camera& cam = ds.conditions[0].camera;
  std::vector<std::pair<int, int>> pixels;
  for (int y = 0; y < mask.height; ++y)
    for (int x = 0; x < mask.width; ++x)
      if (mask.at(x, y) > 0.5) pixels.emplace_back(x, y);
  if (pixels.empty()) {
    for (int y = 0; y < mask.height; ++y)
      for (int x = 0; x < mask.width; ++x) pixels.emplace_back(x, y);
  }
  const double depth = cam.center().norm();
  const double footprint = depth / cam.fx;
  const double stride = std::max(1.0, std::sqrt(static_cast<double>(pixels.size()) / count));
  const Mat3 to_world = cam.rotation.transpose();
  for (std::size_t k = 0; k < std::min(count, pixels.size()); ++k) {
    const auto [x, y] = pixels[rng.next() % pixels.size()];
    const Vec3 view((x - cam.cx) / cam.fx * depth, -(y - cam.cy) / cam.fy * depth, -depth);
    GaussianParams g;
    g.position = to_world * (view - cam.translation);
    g.log_scale = Vec3::Constant(std::log(footprint * stride));
    g.log_scale[2] = std::log(footprint * stride * 0.25);
    g.opacity_logit = 0.0;
    for (int c = 0; c < 3; ++c) g.color[c] = ds.frames[0].at(x, y, c);
    field.gaussians.push_back(g);
  }
  return field;
}

MeanIntensitySyncEmbedder::Box mouth_box(const Dataset& ds) {
  int x0 = ds.width, y0 = ds.height, x1 = 0, y1 = 0;
  for (const Image& m : ds.mouth_masks) {
    for (int y = 0; y < m.height; ++y)
      for (int x = 0; x < m.width; ++x)
        if (m.at(x, y) > 0.5) {
          x0 = std::min(x0, x);
          y0 = std::min(y0, y);
          x1 = std::max(x1, x + 1);
          y1 = std::max(y1, y + 1);
        }
  }
  if (x1 <= x0 || y1 <= y0) return {0, 0, ds.width, ds.height};
  return {std::max(0, x0 - 2), std::max(0, y0 - 2), std::min(ds.width, x1 + 2),
          std::min(ds.height, y1 + 2)};
}

MeanIntensitySyncEmbedder calibrated(const Dataset& ds, const std::vector<Image>& layer) {
  std::vector<VecX> audio;
  for (const FrameConditions& c : ds.conditions) audio.push_back(c.audio);
  return MeanIntensitySyncEmbedder::calibrate(mouth_box(ds), layer, audio);
}

std::vector<Image> masked(const Dataset& ds, bool face) {
  std::vector<Image> out;
  for (std::size_t t = 0; t < ds.size(); ++t) {
    out.push_back(face ? ds.masked_face(t) : ds.masked_mouth(t));
  }
  return out;
}

void zero_grads(const std::vector<ParamSlot>& slots) {
  for (const ParamSlot& s : slots) std::fill(s.grad, s.grad + s.size, 0.0);
}

// Masks a normal map by the pixels where the target normal is set.
Image target_mask(const Image& normals) {
  Image m(normals.width, normals.height, 1);
  for (std::size_t p = 0; p < m.pixel_count(); ++p) {
    const double n2 = normals.data[p * 3] * normals.data[p * 3] +
                      normals.data[p * 3 + 1] * normals.data[p * 3 + 1] +
                      normals.data[p * 3 + 2] * normals.data[p * 3 + 2];
    m.data[p] = n2 > 0.25 ? 1.0 : 0.0;
  }
  return m;
}

}  // namespace

Trainer::Trainer(TrainConfig config, const Dataset& dataset)
    : config_(std::move(config)),
      dataset_(dataset),
      masked_face_(masked(dataset, true)),
      masked_mouth_(masked(dataset, false)),
      mouth_sync_(calibrated(dataset, masked_mouth_)),
      face_sync_(calibrated(dataset, masked_face_)),
      net_opt_(config_.adam),
      rng_(config_.seed) {
  config_.validate();
  dataset_.validate();
  if (dataset_.size() == 0) fail(ErrorCode::kEmptyInput, "training needs at least one frame");
  Rng init_rng(config_.seed + 1);
  GaussianField mouth = dataset_.init_mouth ? *dataset_.init_mouth
                                            : init_from_masks(dataset_, LayerRole::kInsideMouth, 64, init_rng);
  GaussianField face = dataset_.init_face ? *dataset_.init_face
                                          : init_from_masks(dataset_, LayerRole::kFace, 512, init_rng);
  model_ = make_model(config_, dataset_, std::move(mouth), std::move(face));
  mouth_opt_ = FieldOptimizer(model_.mouth.size(), config_.gaussian_lr, config_.adam);
  face_opt_ = FieldOptimizer(model_.face.size(), config_.gaussian_lr, config_.adam);
}

void Trainer::record(const std::string& stage, long step, std::map<std::string, double> losses,
                     double lr, std::size_t count) {
  LogEntry e{step, stage, std::move(losses), lr, count};
  if (sink_) sink_(e);
  log_.push_back(std::move(e));
}

void Trainer::check_finite(const std::string& stage, double loss) {
  if (std::isfinite(loss)) return;
  if (!config_.output.empty()) {
    save_checkpoint(config_.output + ".diverged", model_, config_, optimizer_tensors());
  }
  fail(ErrorCode::kDivergence, stage + " loss became non-finite");
}

std::vector<int> Trainer::canonical_frames() const {
  if (config_.canonical_neutral_only && !dataset_.neutral_frames.empty()) {
    return dataset_.neutral_frames;
  }
  std::vector<int> all(dataset_.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<int>(i);
  return all;
}

double Trainer::rgb_loss(const Image& pred, const Image& target, double w_dssim,
                         double w_perceptual, Image* grad, std::map<std::string, double>& terms) const {
  Image g1, g2, g3;
  const double l1 = l1_loss(pred, target, grad ? &g1 : nullptr);
  const double ds = w_dssim != 0.0 ? d_ssim(pred, target, grad ? &g2 : nullptr) : 0.0;
  const double pc = w_perceptual != 0.0 ? perceptual_.loss(pred, target, grad ? &g3 : nullptr) : 0.0;
  if (grad) {
    *grad = g1;
    if (w_dssim != 0.0) grad->add_scaled(g2, w_dssim);
    if (w_perceptual != 0.0) grad->add_scaled(g3, w_perceptual);
  }
  terms["l1"] = l1;
  terms["d_ssim"] = ds;
  terms["perceptual"] = pc;
  return l1 + w_dssim * ds + w_perceptual * pc;
}

// ---- Canonical stage ------------------------------------------------------------------

void Trainer::optimize_canonical() {
  const int steps = config_.scaled(config_.canonical_steps);
  const std::vector<int> frames = canonical_frames();
  const auto& gamma = config_.weights.gamma;
  const double decay = config_.decay();
  RenderSettings settings;
  settings.workers = config_.workers;
  std::vector<double> mouth_sum(model_.mouth.size(), 0.0), face_sum(model_.face.size(), 0.0);
  std::vector<double> mouth_hits(model_.mouth.size(), 0.0), face_hits(model_.face.size(), 0.0);

  for (int step = 0; step < steps; ++step) {
    const int t = frames[rng_.next() % frames.size()];
    const double sched = exp_schedule(1.0, decay, step);
    const Camera& cam = dataset_.conditions[t].camera;
    std::map<std::string, double> terms, mouth_terms;

    const RenderOutput mo = render(model_.mouth, cam, settings);
    Image dm;
    const double lm = rgb_loss(mo.color, masked_mouth_[t], gamma[0], 0.0, &dm, mouth_terms);
    const GradientBuffer gm = backward(mo, &dm, nullptr, nullptr);

    const RenderOutput fo = render(model_.face, cam, settings);
    Image df, dn;
    const double lf = rgb_loss(fo.color, masked_face_[t], gamma[0], 0.0, &df, terms);
    GradientBuffer gres(model_.face.size());
    const NormalLossTerms nl =
        normal_loss(apply_mask(fo.normal, dataset_.face_masks[t]), dataset_.normal_targets[t],
                    model_.face, gamma[1], gamma[2], gamma[3], &dn, &gres);
    dn = apply_mask(dn, dataset_.face_masks[t]);
    GradientBuffer gf = backward(fo, &df, nullptr, &dn);
    gf += gres;

    const double total = lm + lf + nl.total;
    check_finite("canonical", total);
    mouth_opt_.step(model_.mouth, gm, sched);
    face_opt_.step(model_.face, gf, sched);
    for (std::size_t i = 0; i < gm.size(); ++i) {
      if (gm.screen_grad_norm[i] > 0.0) {
        mouth_sum[i] += gm.screen_grad_norm[i];
        mouth_hits[i] += 1.0;
      }
    }
    for (std::size_t i = 0; i < gf.size(); ++i) {
      if (gf.screen_grad_norm[i] > 0.0) {
        face_sum[i] += gf.screen_grad_norm[i];
        face_hits[i] += 1.0;
      }
    }
    record("canonical", step,
           {{"total", total}, {"mouth", lm}, {"face", lf}, {"normal", nl.total},
            {"face_l1", terms["l1"]}, {"face_d_ssim", terms["d_ssim"]}},
           config_.gaussian_lr.position * sched, model_.mouth.size() + model_.face.size());

    const int done = step + 1;
    if (done % config_.densify.interval == 0 && done < config_.densify.stop_fraction * steps) {
      auto densify = [&](GaussianField& field, FieldOptimizer& opt, std::vector<double>& sum,
                         std::vector<double>& hits) {
        std::vector<double> mean(field.size());
        for (std::size_t i = 0; i < mean.size(); ++i) mean[i] = hits[i] > 0 ? sum[i] / hits[i] : 0.0;
        const DensifyResult r = densify_and_prune(field, mean, config_.densify);
        std::vector<long> remap = r.source;
        for (std::size_t i = 0; i < remap.size(); ++i)
          if (r.fresh[i]) remap[i] = -1;
        opt.remap(remap);
        sum.assign(field.size(), 0.0);
        hits.assign(field.size(), 0.0);
      };
      densify(model_.mouth, mouth_opt_, mouth_sum, mouth_hits);
      densify(model_.face, face_opt_, face_sum, face_hits);
    }
  }
  // Branch encoders normalize by the final canonical bounds.
  model_ = make_model(config_, dataset_, model_.mouth, model_.face);
}

// ---- Branch stages ---------------------------------------------------------------------

double Trainer::sync_step(BranchKind branch, long step, DeformationModel& grad, double weight) {
  const bool audio_only = !dataset_.audio_only.empty() &&
                          dataset_.audio_only.size() >= static_cast<std::size_t>(kSyncWindow) &&
                          (step / config_.sync_interval) % 2 == 1;
  const std::size_t pool = audio_only ? dataset_.audio_only.size() : dataset_.size();
  if (pool < static_cast<std::size_t>(kSyncWindow)) return 0.0;
  const std::size_t start = rng_.next() % (pool - kSyncWindow + 1);
  RenderSettings settings;
  settings.workers = config_.workers;
  const Camera& cam = dataset_.conditions[0].camera;
  const DeformationModel& dm = model_.deformation;

  std::vector<VecX> audio;
  std::vector<Image> images;
  std::vector<Deformed> deformed;
  std::vector<RenderOutput> outputs;
  for (int k = 0; k < kSyncWindow; ++k) {
    const std::size_t i = start + k;
    const VecX a = audio_only ? dataset_.audio_only[i] : dataset_.conditions[i].audio;
    const VecX u = audio_only ? VecX::Zero(dataset_.au_dim) : dataset_.conditions[i].action_units;
    const Vec2 e = audio_only ? Vec2::Zero() : dataset_.conditions[i].emotion;
    const Camera& c = audio_only ? cam : dataset_.conditions[i].camera;
    Deformed d;
    if (branch == BranchKind::kMouth) {
      d = deform_mouth(dm, model_.mouth, a);
    } else {
      d = deform_face(dm, model_.face, a, u);
      if (branch == BranchKind::kEmotion) d = deform_emotion(dm, d.field, e);
    }
    outputs.push_back(render(d.field, c, settings));
    images.push_back(outputs.back().color);
    deformed.push_back(std::move(d));
    audio.push_back(a);
  }
  const MeanIntensitySyncEmbedder& embedder = branch == BranchKind::kMouth ? mouth_sync_ : face_sync_;
  std::vector<Image> d_images;
  const double loss = sync_loss(embedder, images, audio, &d_images);
  for (int k = 0; k < kSyncWindow; ++k) {
    d_images[k] *= weight;
    const GradientBuffer gb = backward(outputs[k], &d_images[k], nullptr, nullptr);
    switch (branch) {
      case BranchKind::kMouth: deform_mouth_backward(dm, deformed[k], gb, grad, nullptr); break;
      case BranchKind::kFace: deform_face_backward(dm, deformed[k], gb, grad, nullptr); break;
      case BranchKind::kEmotion: deform_emotion_backward(dm, deformed[k], gb, grad, nullptr); break;
    }
  }
  return loss;
}

void Trainer::train_branch(BranchKind branch) {
  if (branch == BranchKind::kEmotion && dataset_.emotional_targets.empty()) {
    fail(ErrorCode::kMissingData, "emotion branch needs emotional targets");
  }
  const int steps = config_.scaled(config_.branch_steps);
  const std::string stage = std::string(to_string(branch)) + "_branch";
  const double decay = config_.decay();
  const auto& beta = config_.weights.beta;
  const auto& kappa = config_.weights.kappa;
  RenderSettings settings;
  settings.workers = config_.workers;
  RenderSettings frozen = settings;
  frozen.retain = false;

  DeformationModel& dm = model_.deformation;
  DeformationModel grad = dm.zeros_like();
  const std::vector<ParamSlot> slots =
      dm.slots(grad, branch == BranchKind::kMouth, branch == BranchKind::kFace,
               branch == BranchKind::kEmotion);

  for (int step = 0; step < steps; ++step) {
    zero_grads(slots);
    const double sched = exp_schedule(1.0, decay, step);
    std::map<std::string, double> terms;
    double total = 0.0;

    if (branch == BranchKind::kMouth || branch == BranchKind::kFace) {
      const std::size_t t = rng_.next() % dataset_.size();
      const FrameConditions& c = dataset_.conditions[t];
      if (branch == BranchKind::kMouth) {
        const Deformed d = deform_mouth(dm, model_.mouth, c.audio);
        const RenderOutput ro = render(d.field, c.camera, settings);
        Image dc;
        total = rgb_loss(ro.color, masked_mouth_[t], beta[0], beta[1], &dc, terms);
        deform_mouth_backward(dm, d, backward(ro, &dc, nullptr, nullptr), grad, nullptr);
      } else {
        const Deformed d = deform_face(dm, model_.face, c.audio, c.action_units);
        const RenderOutput ro = render(d.field, c.camera, settings);
        Image dc, dn;
        total = rgb_loss(ro.color, masked_face_[t], beta[0], beta[1], &dc, terms);
        GradientBuffer gres(d.field.size());
        const NormalLossTerms nl =
            normal_loss(apply_mask(ro.normal, dataset_.face_masks[t]), dataset_.normal_targets[t],
                        d.field, beta[2], beta[3], beta[4], &dn, &gres);
        dn = apply_mask(dn, dataset_.face_masks[t]);
        GradientBuffer gb = backward(ro, &dc, nullptr, &dn);
        gb += gres;
        deform_face_backward(dm, d, gb, grad, nullptr);
        terms["normal"] = nl.total;
        total += nl.total;
      }
    } else {
      // Original frames (with their own e) mixed with emotional targets.
      const bool original = rng_.uniform() < config_.emotion_original_fraction;
      std::size_t t;
      Vec2 e;
      const Image* target;
      const Image* normals = nullptr;
      Image normal_mask;
      if (original) {
        t = rng_.next() % dataset_.size();
        e = dataset_.conditions[t].emotion;
        target = &dataset_.frames[t];
        normals = &dataset_.normal_targets[t];
        normal_mask = dataset_.face_masks[t];
      } else {
        const EmotionalTarget& et =
            dataset_.emotional_targets[rng_.next() % dataset_.emotional_targets.size()];
        t = static_cast<std::size_t>(et.frame);
        e = et.emotion;
        target = &et.image;
        if (et.normals) {
          normals = &*et.normals;
          normal_mask = target_mask(*et.normals);
        }
      }
      const FrameConditions& c = dataset_.conditions[t];
      const RenderOutput mo = render(deform_mouth(dm, model_.mouth, c.audio).field, c.camera, frozen);
      const Deformed df = deform_face(dm, model_.face, c.audio, c.action_units);
      const Deformed de = deform_emotion(dm, df.field, e);
      const RenderOutput fo = render(de.field, c.camera, settings);
      const Composite comp = compose(mo, fo, dataset_.background);
      Image di;
      total = rgb_loss(comp.image, *target, kappa[0], kappa[1], &di, terms);
      const CompositeGrad cg = compose_backward(mo, fo, dataset_.background, comp, di);
      Image dn(fo.normal.width, fo.normal.height, 3);
      GradientBuffer gres(de.field.size());
      if (normals != nullptr) {
        const NormalLossTerms nl = normal_loss(apply_mask(fo.normal, normal_mask), *normals,
                                               de.field, kappa[2], kappa[3], kappa[4], &dn, &gres);
        dn = apply_mask(dn, normal_mask);
        terms["normal"] = nl.total;
        total += nl.total;
      }
      GradientBuffer gb = backward(fo, &cg.d_face_color, &cg.d_face_alpha, &dn);
      gb += gres;
      deform_emotion_backward(dm, de, gb, grad, nullptr);
    }

    if (config_.sync_interval > 0 && step % config_.sync_interval == 0) {
      const double w = branch == BranchKind::kEmotion ? config_.weights.kappa_sync : beta[5];
      const double s = sync_step(branch, step, grad, w);
      terms["sync"] = s;
      total += w * s;
    }
    check_finite(stage, total);
    terms["total"] = total;
    net_opt_.step(slots, {{".encoder", config_.lr_encoder * sched}}, config_.lr_network * sched);
    record(stage, step, std::move(terms), config_.lr_network * sched,
           model_.mouth.size() + model_.face.size());
  }
}

// ---- Border fine-tune ---------------------------------------------------------------------

void Trainer::finetune_border() {
  const int steps = config_.scaled(config_.finetune_steps);
  const auto& eta = config_.weights.eta;
  const double decay = config_.decay();
  RenderSettings settings;
  settings.workers = config_.workers;
  RenderSettings frozen = settings;
  frozen.retain = false;
  const DeformationModel& dm = model_.deformation;
  DeformationModel scratch = dm.zeros_like();
  FieldOptimizer opt(model_.face.size(), config_.gaussian_lr, config_.adam);

  for (int step = 0; step < steps; ++step) {
    const std::size_t t = rng_.next() % dataset_.size();
    const FrameConditions& c = dataset_.conditions[t];
    const double sched = exp_schedule(1.0, decay, step);
    const RenderOutput mo = render(deform_mouth(dm, model_.mouth, c.audio).field, c.camera, frozen);
    // Same path as the final render: face, then emotion at the frame's e.
    const Deformed df = deform_face(dm, model_.face, c.audio, c.action_units);
    const Deformed de = deform_emotion(dm, df.field, c.emotion);
    const RenderOutput fo = render(de.field, c.camera, settings);
    const Composite comp = compose(mo, fo, dataset_.background);
    std::map<std::string, double> terms;
    Image di;
    const double total = rgb_loss(comp.image, dataset_.frames[t], eta[0], eta[1], &di, terms);
    check_finite("border", total);
    const CompositeGrad cg = compose_backward(mo, fo, dataset_.background, comp, di);
    const GradientBuffer gb = backward(fo, &cg.d_face_color, &cg.d_face_alpha, nullptr);
    GradientBuffer d_face(model_.face.size()), d_canonical(model_.face.size());
    deform_emotion_backward(dm, de, gb, scratch, &d_face);
    deform_face_backward(dm, df, d_face, scratch, &d_canonical);
    // Only opacity and color are optimized here.
    for (GaussianGrad& g : d_canonical.grads) {
      g.position.setZero();
      g.log_scale.setZero();
      g.rotation.setZero();
      g.normal_residual.setZero();
    }
    opt.step(model_.face, d_canonical, sched, kGroupOpacity | kGroupColor);
    last_border_grad_ = std::move(d_canonical);
    terms["total"] = total;
    record("border", step, std::move(terms), config_.gaussian_lr.opacity * sched,
           model_.mouth.size() + model_.face.size());
  }
}

void Trainer::run() {
  optimize_canonical();
  train_branch(BranchKind::kMouth);
  train_branch(BranchKind::kFace);
  if (!dataset_.emotional_targets.empty()) train_branch(BranchKind::kEmotion);
  finetune_border();
  if (!config_.output.empty()) {
    save_checkpoint(config_.output, model_, config_, optimizer_tensors());
  }
}

std::vector<NamedTensor> Trainer::optimizer_tensors() const {
  std::vector<NamedTensor> out = mouth_opt_.state_tensors("mouth");
  for (NamedTensor& t : face_opt_.state_tensors("face")) out.push_back(std::move(t));
  for (NamedTensor& t : net_opt_.state_tensors()) out.push_back(std::move(t));
  return out;
}

}  // namespace vasplat
