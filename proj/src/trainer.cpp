#include "vasplat/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>
#include <sstream>

#include "vasplat/error.hpp"

namespace vasplat {

namespace fs = std::filesystem;
using json = nlohmann::json;

// ---- Config -----------------------------------------------------------------------

void DensifyConfig::validate() const {
  if (interval < 1) fail(ErrorCode::kInvalidArgument, "densify interval must be >= 1");
  if (!(opacity_floor > 0.0 && opacity_floor < 1.0)) {
    fail(ErrorCode::kInvalidArgument, "densify opacity floor must lie in (0, 1)");
  }
  if (!(grad_threshold > 0.0) || !(percent_dense > 0.0) || max_gaussians == 0) {
    fail(ErrorCode::kInvalidArgument, "densify thresholds must be positive");
  }
}

int TrainConfig::scaled(int full_steps) const {
  return static_cast<int>(std::lround(full_steps / desk_factor));
}

double TrainConfig::decay() const { return decay_for_half_life(half_life / desk_factor); }

void TrainConfig::validate() const {
  if (!(desk_factor >= 1.0)) fail(ErrorCode::kInvalidArgument, "desk_factor must be >= 1");
  if (canonical_steps < 0 || branch_steps < 0 || finetune_steps < 0) {
    fail(ErrorCode::kInvalidArgument, "stage lengths must be non-negative");
  }
  const std::vector<double> rates = {lr_encoder,          lr_network,          gaussian_lr.position,
                                     gaussian_lr.log_scale, gaussian_lr.rotation, gaussian_lr.opacity,
                                     gaussian_lr.color,   gaussian_lr.normal_residual};
  for (double r : rates) {
    if (!(r > 0.0) || !std::isfinite(r)) {
      fail(ErrorCode::kInvalidArgument, "learning rates must be positive");
    }
  }
  if (!(half_life > 0.0)) fail(ErrorCode::kInvalidArgument, "half_life must be positive");
  if (!(adam.beta1 >= 0 && adam.beta1 < 1 && adam.beta2 >= 0 && adam.beta2 < 1 && adam.eps > 0)) {
    fail(ErrorCode::kInvalidArgument, "adam moments must lie in [0, 1) and eps > 0");
  }
  if (sync_interval < 0) fail(ErrorCode::kInvalidArgument, "sync_interval must be >= 0");
  if (emotion_original_fraction < 0.0 || emotion_original_fraction > 1.0) {
    fail(ErrorCode::kInvalidArgument, "emotion_original_fraction must lie in [0, 1]");
  }
  if (workers < 1) fail(ErrorCode::kInvalidArgument, "workers must be >= 1");
  weights.validate();
  densify.validate();
}

namespace {

void reject_unknown(const json& j, std::initializer_list<const char*> keys, const std::string& where) {
  if (!j.is_object()) fail(ErrorCode::kMalformedHeader, "config: " + where + " must be an object");
  std::set<std::string> allowed(keys.begin(), keys.end());
  for (const auto& [k, v] : j.items()) {
    if (!allowed.count(k)) fail(ErrorCode::kMalformedHeader, "config: unknown key " + where + k);
  }
}

template <typename T>
void read(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

template <std::size_t N>
void read_array(const json& j, const char* key, std::array<double, N>& out) {
  if (!j.contains(key)) return;
  const auto v = j.at(key).get<std::vector<double>>();
  if (v.size() != N) {
    fail(ErrorCode::kMalformedHeader, std::string("config: weights.") + key + " needs " +
                                          std::to_string(N) + " entries");
  }
  std::copy(v.begin(), v.end(), out.begin());
}

}  // namespace

json to_json(const TrainConfig& c) {
  const GaussianLearningRates& g = c.gaussian_lr;
  const HashEncoderConfig& h = c.deformation.hash;
  return json{
      {"dataset", c.dataset},
      {"output", c.output},
      {"desk_factor", c.desk_factor},
      {"steps", {{"canonical", c.canonical_steps}, {"branch", c.branch_steps}, {"finetune", c.finetune_steps}}},
      {"lr",
       {{"encoder", c.lr_encoder},
        {"network", c.lr_network},
        {"gaussian",
         {{"position", g.position},
          {"log_scale", g.log_scale},
          {"rotation", g.rotation},
          {"opacity", g.opacity},
          {"color", g.color},
          {"normal_residual", g.normal_residual}}}}},
      {"half_life", c.half_life},
      {"adam", {{"beta1", c.adam.beta1}, {"beta2", c.adam.beta2}, {"eps", c.adam.eps}, {"weight_decay", c.adam.weight_decay}}},
      {"weights",
       {{"gamma", c.weights.gamma},
        {"beta", c.weights.beta},
        {"kappa", c.weights.kappa},
        {"kappa_sync", c.weights.kappa_sync},
        {"lambda", c.weights.lambda},
        {"eta", c.weights.eta}}},
      {"densify",
       {{"interval", c.densify.interval},
        {"grad_threshold", c.densify.grad_threshold},
        {"opacity_floor", c.densify.opacity_floor},
        {"max_gaussians", c.densify.max_gaussians},
        {"percent_dense", c.densify.percent_dense},
        {"stop_fraction", c.densify.stop_fraction}}},
      {"deformation",
       {{"hidden", c.deformation.hidden},
        {"hash",
         {{"levels", h.levels},
          {"features", h.features},
          {"log2_table_size", h.log2_table_size},
          {"base_resolution", h.base_resolution},
          {"growth", h.growth}}}}},
      {"sync_interval", c.sync_interval},
      {"canonical_neutral_only", c.canonical_neutral_only},
      {"emotion_full_gradient", c.emotion_full_gradient},
      {"emotion_original_fraction", c.emotion_original_fraction},
      {"workers", c.workers},
      {"seed", c.seed}};
}

TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  try {
    reject_unknown(j,
                   {"dataset", "output", "desk_factor", "steps", "lr", "half_life", "adam", "weights",
                    "densify", "deformation", "sync_interval", "canonical_neutral_only",
                    "emotion_full_gradient", "emotion_original_fraction", "workers", "seed"},
                   "");
    read(j, "dataset", c.dataset);
    read(j, "output", c.output);
    read(j, "desk_factor", c.desk_factor);
    if (j.contains("steps")) {
      const json& s = j.at("steps");
      reject_unknown(s, {"canonical", "branch", "finetune"}, "steps.");
      read(s, "canonical", c.canonical_steps);
      read(s, "branch", c.branch_steps);
      read(s, "finetune", c.finetune_steps);
    }
    if (j.contains("lr")) {
      const json& l = j.at("lr");
      reject_unknown(l, {"encoder", "network", "gaussian"}, "lr.");
      read(l, "encoder", c.lr_encoder);
      read(l, "network", c.lr_network);
      if (l.contains("gaussian")) {
        const json& g = l.at("gaussian");
        reject_unknown(g, {"position", "log_scale", "rotation", "opacity", "color", "normal_residual"},
                       "lr.gaussian.");
        read(g, "position", c.gaussian_lr.position);
        read(g, "log_scale", c.gaussian_lr.log_scale);
        read(g, "rotation", c.gaussian_lr.rotation);
        read(g, "opacity", c.gaussian_lr.opacity);
        read(g, "color", c.gaussian_lr.color);
        read(g, "normal_residual", c.gaussian_lr.normal_residual);
      }
    }
    read(j, "half_life", c.half_life);
    if (j.contains("adam")) {
      const json& a = j.at("adam");
      reject_unknown(a, {"beta1", "beta2", "eps", "weight_decay"}, "adam.");
      read(a, "beta1", c.adam.beta1);
      read(a, "beta2", c.adam.beta2);
      read(a, "eps", c.adam.eps);
      read(a, "weight_decay", c.adam.weight_decay);
    }
    if (j.contains("weights")) {
      const json& w = j.at("weights");
      reject_unknown(w, {"gamma", "beta", "kappa", "kappa_sync", "lambda", "eta"}, "weights.");
      read_array(w, "gamma", c.weights.gamma);
      read_array(w, "beta", c.weights.beta);
      read_array(w, "kappa", c.weights.kappa);
      read(w, "kappa_sync", c.weights.kappa_sync);
      read_array(w, "lambda", c.weights.lambda);
      read_array(w, "eta", c.weights.eta);
    }
    if (j.contains("densify")) {
      const json& d = j.at("densify");
      reject_unknown(d, {"interval", "grad_threshold", "opacity_floor", "max_gaussians", "percent_dense", "stop_fraction"},
                     "densify.");
      read(d, "interval", c.densify.interval);
      read(d, "grad_threshold", c.densify.grad_threshold);
      read(d, "opacity_floor", c.densify.opacity_floor);
      read(d, "max_gaussians", c.densify.max_gaussians);
      read(d, "percent_dense", c.densify.percent_dense);
      read(d, "stop_fraction", c.densify.stop_fraction);
    }
    if (j.contains("deformation")) {
      const json& d = j.at("deformation");
      reject_unknown(d, {"hidden", "hash"}, "deformation.");
      read(d, "hidden", c.deformation.hidden);
      if (d.contains("hash")) {
        const json& h = d.at("hash");
        reject_unknown(h, {"levels", "features", "log2_table_size", "base_resolution", "growth"},
                       "deformation.hash.");
        read(h, "levels", c.deformation.hash.levels);
        read(h, "features", c.deformation.hash.features);
        read(h, "log2_table_size", c.deformation.hash.log2_table_size);
        read(h, "base_resolution", c.deformation.hash.base_resolution);
        read(h, "growth", c.deformation.hash.growth);
      }
    }
    read(j, "sync_interval", c.sync_interval);
    read(j, "canonical_neutral_only", c.canonical_neutral_only);
    read(j, "emotion_full_gradient", c.emotion_full_gradient);
    read(j, "emotion_original_fraction", c.emotion_original_fraction);
    read(j, "workers", c.workers);
    read(j, "seed", c.seed);
  } catch (const json::exception& e) {
    fail(ErrorCode::kMalformedHeader, std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

namespace {

// FNV-1a, 64 bit.
std::uint64_t fnv1a(const std::string& bytes, std::uint64_t h = 0xcbf29ce484222325ull) {
  for (unsigned char ch : bytes) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace

std::uint64_t config_hash(const TrainConfig& config) {
  json j = to_json(config);
  // Paths do not change what is trained.
  j.erase("dataset");
  j.erase("output");
  return fnv1a(j.dump());
}

// ---- Rendering --------------------------------------------------------------------

namespace {

Image resize_bilinear(const Image& src, int w, int h) {
  if (src.width == w && src.height == h) return src;
  Image out(w, h, src.channels);
  for (int y = 0; y < h; ++y) {
    const double sy = std::clamp((y + 0.5) * src.height / h - 0.5, 0.0, src.height - 1.0);
    const int y0 = static_cast<int>(sy), y1 = std::min(y0 + 1, src.height - 1);
    const double fy = sy - y0;
    for (int x = 0; x < w; ++x) {
      const double sx = std::clamp((x + 0.5) * src.width / w - 0.5, 0.0, src.width - 1.0);
      const int x0 = static_cast<int>(sx), x1 = std::min(x0 + 1, src.width - 1);
      const double fx = sx - x0;
      for (int c = 0; c < src.channels; ++c) {
        out.at(x, y, c) = (1 - fy) * ((1 - fx) * src.at(x0, y0, c) + fx * src.at(x1, y0, c)) +
                          fy * ((1 - fx) * src.at(x0, y1, c) + fx * src.at(x1, y1, c));
      }
    }
  }
  return out;
}

}  // namespace

FrameRender render_frame(const Model& model, const VecX& audio, const VecX& action_units,
                         const Vec2& emotion, const Camera& camera, bool use_emotion,
                         RenderSettings settings) {
  const Deformed mouth = deform_mouth(model.deformation, model.mouth, audio);
  Deformed face = deform_face(model.deformation, model.face, audio, action_units);
  FrameRender out;
  if (use_emotion) {
    Deformed emo = deform_emotion(model.deformation, face.field, emotion);
    out.clamped = emo.clamped;
    face = std::move(emo);
  }
  out.mouth = render(mouth.field, camera, settings);
  out.face = render(face.field, camera, settings);
  out.composite = compose(out.mouth, out.face,
                          resize_bilinear(model.background, camera.width, camera.height));
  return out;
}

// ---- Densification ----------------------------------------------------------------

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
double logit(double p) { return std::log(p / (1.0 - p)); }

constexpr double kSplitOffset = 0.2;  // child centers at +-0.2 sigma along the major axis
constexpr double kSplitShrink = 0.95;

// Child opacity whose pair composite best matches the parent coverage in
// L1, on a 2D slice through the major axis.
double fit_split_opacity(double alpha) {
  auto error = [alpha](double a) {
    double e = 0.0;
    for (int iy = -20; iy <= 20; ++iy) {
      const double y = iy * 0.2;
      for (int ix = -20; ix <= 20; ++ix) {
        const double x = ix * 0.2;
        const double gy = std::exp(-0.5 * y * y);
        const double g1 = std::exp(-0.5 * std::pow((x - kSplitOffset) / kSplitShrink, 2)) * gy;
        const double g2 = std::exp(-0.5 * std::pow((x + kSplitOffset) / kSplitShrink, 2)) * gy;
        const double pair = 1.0 - (1.0 - a * g1) * (1.0 - a * g2);
        e += std::abs(pair - alpha * std::exp(-0.5 * x * x) * gy);
      }
    }
    return e;
  };
  // Golden-section search on (0, alpha].
  const double phi = 0.5 * (std::sqrt(5.0) - 1.0);
  double lo = 0.0, hi = alpha;
  double m1 = hi - phi * (hi - lo), m2 = lo + phi * (hi - lo);
  double e1 = error(m1), e2 = error(m2);
  for (int it = 0; it < 40; ++it) {
    if (e1 < e2) {
      hi = m2;
      m2 = m1;
      e2 = e1;
      m1 = hi - phi * (hi - lo);
      e1 = error(m1);
    } else {
      lo = m1;
      m1 = m2;
      e1 = e2;
      m2 = lo + phi * (hi - lo);
      e2 = error(m2);
    }
  }
  return 0.5 * (lo + hi);
}

}  // namespace

std::pair<GaussianParams, GaussianParams> split_gaussian(const GaussianParams& g) {
  Eigen::Index k = 0;
  g.log_scale.maxCoeff(&k);
  const Mat3 r = rotation_from_quaternion(g.rotation);
  const Vec3 axis = r.col(k) * std::exp(g.log_scale[k]);
  const double a = std::clamp(fit_split_opacity(sigmoid(g.opacity_logit)), 1e-6, 1.0 - 1e-6);
  GaussianParams c1 = g, c2 = g;
  c1.position += kSplitOffset * axis;
  c2.position -= kSplitOffset * axis;
  c1.log_scale[k] += std::log(kSplitShrink);
  c2.log_scale[k] += std::log(kSplitShrink);
  c1.opacity_logit = c2.opacity_logit = logit(a);
  return {c1, c2};
}

std::pair<GaussianParams, GaussianParams> clone_gaussian(const GaussianParams& g) {
  const double alpha = sigmoid(g.opacity_logit);
  // Two stacked copies: 1 - (1 - a)^2 = alpha at the center, close elsewhere.
  const double a = std::clamp(1.0 - std::sqrt(1.0 - alpha), 1e-9, 1.0 - 1e-9);
  GaussianParams c = g;
  c.opacity_logit = logit(a);
  return {c, c};
}

DensifyResult densify_and_prune(GaussianField& field, const std::vector<double>& mean_grad,
                                const DensifyConfig& config) {
  config.validate();
  if (mean_grad.size() != field.size()) {
    fail(ErrorCode::kDimensionMismatch, "densify: gradient statistics do not match the field");
  }
  DensifyResult out;
  if (field.size() == 0) return out;
  const SceneBounds bounds = SceneBounds::from_field(field, 0.0);
  const double split_scale = config.percent_dense * 0.5 * bounds.extent().norm();
  std::vector<GaussianParams> next;
  std::size_t budget = config.max_gaussians > field.size() ? config.max_gaussians - field.size() : 0;
  auto emit = [&](const GaussianParams& g, long parent, bool fresh) {
    next.push_back(g);
    out.source.push_back(parent);
    out.fresh.push_back(fresh);
  };
  for (std::size_t i = 0; i < field.size(); ++i) {
    const GaussianParams& g = field.gaussians[i];
    const long parent = static_cast<long>(i);
    if (sigmoid(g.opacity_logit) < config.opacity_floor) {
      ++out.pruned;
      continue;
    }
    if (mean_grad[i] > config.grad_threshold && budget > 0) {
      --budget;
      const bool large = std::exp(g.log_scale.maxCoeff()) > split_scale;
      const auto [c1, c2] = large ? split_gaussian(g) : clone_gaussian(g);
      ++(large ? out.split : out.cloned);
      emit(c1, parent, true);
      emit(c2, parent, true);
      continue;
    }
    emit(g, parent, false);
  }
  field.gaussians = std::move(next);
  return out;
}

// ---- Model / checkpoint -------------------------------------------------------------

Model make_model(const TrainConfig& config, const Dataset& dataset, GaussianField mouth,
                 GaussianField face) {
  Model m;
  DeformationConfig dc = config.deformation;
  dc.audio_dim = dataset.audio_dim;
  dc.au_dim = dataset.au_dim;
  dc.seed = config.seed;
  mouth.role = LayerRole::kInsideMouth;
  face.role = LayerRole::kFace;
  m.deformation = DeformationModel(dc, mouth, face);
  m.deformation.emotion_full_gradient = config.emotion_full_gradient;
  m.mouth = std::move(mouth);
  m.face = std::move(face);
  m.background = dataset.background;
  m.conditions = dataset.conditions;
  m.audio_dim = dataset.audio_dim;
  m.au_dim = dataset.au_dim;
  return m;
}

void save_checkpoint(const fs::path& dir, const Model& model, const TrainConfig& config,
                     const std::vector<NamedTensor>& optimizer) {
  const fs::path tmp = dir.string() + ".tmp";
  const fs::path old = dir.string() + ".old";
  fs::remove_all(tmp);
  fs::create_directories(tmp);
  save_field(model.mouth, tmp / "mouth.splatf");
  save_field(model.face, tmp / "face.splatf");
  std::vector<NamedTensor> tensors = model.deformation.tensors();
  tensors.push_back({"background",
                     {static_cast<std::uint64_t>(model.background.height),
                      static_cast<std::uint64_t>(model.background.width), 3},
                     model.background.data});
  write_file_atomic(tmp / "networks.splatn", serialize_tensors(tensors));
  write_file_atomic(tmp / "optimizer.splatn", serialize_tensors(optimizer));
  write_file_atomic(tmp / "config.json", to_json(config).dump(2) + "\n");
  const json meta{{"format", 1},
                  {"config_hash", hex64(config_hash(config))},
                  {"frame_count", model.conditions.size()},
                  {"width", model.background.width},
                  {"height", model.background.height},
                  {"condition_dims", {{"a", model.audio_dim}, {"u", model.au_dim}, {"e", 2}}},
                  {"gaussian_count", {{"mouth", model.mouth.size()}, {"face", model.face.size()}}}};
  write_file_atomic(tmp / "meta.json", meta.dump(2) + "\n");
  std::string lines;
  for (const FrameConditions& c : model.conditions) lines += conditions_to_json(c).dump() + "\n";
  write_file_atomic(tmp / "conditions.jsonl", lines);
  fs::remove_all(old);
  if (fs::exists(dir)) fs::rename(dir, old);
  fs::rename(tmp, dir);
  fs::remove_all(old);
}

Checkpoint load_checkpoint(const fs::path& dir) {
  if (!fs::is_directory(dir)) fail(ErrorCode::kIo, "checkpoint not found: " + dir.string());
  Checkpoint ck;
  json config;
  try {
    config = json::parse(read_file(dir / "config.json"));
    ck.meta = json::parse(read_file(dir / "meta.json"));
  } catch (const json::exception& e) {
    fail(ErrorCode::kMalformedHeader, std::string("checkpoint: ") + e.what());
  }
  ck.config = train_config_from_json(config);
  Dataset shape;
  try {
    shape.audio_dim = ck.meta.at("condition_dims").at("a").get<int>();
    shape.au_dim = ck.meta.at("condition_dims").at("u").get<int>();
  } catch (const json::exception& e) {
    fail(ErrorCode::kMalformedHeader, std::string("checkpoint meta: ") + e.what());
  }
  {
    std::istringstream lines(read_file(dir / "conditions.jsonl"));
    std::string line;
    while (std::getline(lines, line)) {
      if (line.empty()) continue;
      try {
        shape.conditions.push_back(conditions_from_json(json::parse(line)));
      } catch (const json::exception& e) {
        fail(ErrorCode::kMalformedHeader, std::string("checkpoint conditions: ") + e.what());
      }
    }
  }
  const std::vector<NamedTensor> tensors = deserialize_tensors(read_file(dir / "networks.splatn"));
  const auto bg = std::find_if(tensors.begin(), tensors.end(),
                               [](const NamedTensor& t) { return t.name == "background"; });
  if (bg == tensors.end() || bg->shape.size() != 3 || bg->shape[2] != 3) {
    fail(ErrorCode::kMissingData, "checkpoint lacks a background tensor");
  }
  shape.background = Image(static_cast<int>(bg->shape[1]), static_cast<int>(bg->shape[0]), 3);
  shape.background.data = bg->values;
  ck.model = make_model(ck.config, shape, load_field(dir / "mouth.splatf"),
                        load_field(dir / "face.splatf"));
  ck.model.deformation.load_tensors(tensors);
  return ck;
}

std::uint64_t checkpoint_digest(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file()) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const fs::path& f : files) {
    h = fnv1a(f.filename().string(), h);
    h = fnv1a(read_file(f), h);
  }
  return h;
}

}  // namespace vasplat
