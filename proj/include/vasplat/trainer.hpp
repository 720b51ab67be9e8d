#pragma once

// Staged optimization: canonical fields, then the mouth, face and emotion
// branches one at a time, then a border fine-tune of the face canonical
// opacity and color.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vasplat/composite.hpp"
#include "vasplat/dataset.hpp"
#include "vasplat/deformation.hpp"
#include "vasplat/losses.hpp"
#include "vasplat/optim.hpp"
#include "vasplat/random.hpp"

namespace vasplat {

struct DensifyConfig {
  int interval = 500;
  double grad_threshold = 2e-4;  // mean screen-space position gradient
  double opacity_floor = 0.005;
  std::size_t max_gaussians = 20000;
  double percent_dense = 0.01;  // split above this fraction of the scene extent
  double stop_fraction = 0.75;  // no densification in the tail of the stage

  void validate() const;
};

struct TrainConfig {
  std::string dataset;
  std::string output;
  double desk_factor = 25.0;  // divides every stage length
  int canonical_steps = 50000;
  int branch_steps = 50000;
  int finetune_steps = 20000;
  double lr_encoder = 5e-3;
  double lr_network = 5e-4;
  GaussianLearningRates gaussian_lr;
  double half_life = 25000.0;  // in full-schedule steps; divided by desk_factor
  AdamConfig adam;
  LossWeights weights;
  DensifyConfig densify;
  DeformationConfig deformation;
  int sync_interval = 4;  // 0 disables the sync term
  bool canonical_neutral_only = true;
  bool emotion_full_gradient = false;
  double emotion_original_fraction = 0.25;
  int workers = 1;
  std::uint64_t seed = 0;

  int scaled(int full_steps) const;
  /// Per-step decay of the schedule, after desk scaling.
  double decay() const;
  void validate() const;
};

nlohmann::json to_json(const TrainConfig& config);
/// Missing keys keep their defaults; unknown keys are rejected.
TrainConfig train_config_from_json(const nlohmann::json& j);
std::uint64_t config_hash(const TrainConfig& config);

/// Everything needed to render: canonical fields, branch networks and the
/// per-frame conditions of the training sequence.
struct Model {
  GaussianField mouth;
  GaussianField face;
  DeformationModel deformation;
  Image background;
  std::vector<FrameConditions> conditions;
  int audio_dim = 32;
  int au_dim = 7;
};

struct FrameRender {
  RenderOutput mouth;
  RenderOutput face;
  Composite composite;
  bool clamped = false;
};

/// Full composite for one set of conditions. With `use_emotion` false the
/// emotion branch is skipped.
FrameRender render_frame(const Model& model, const VecX& audio, const VecX& action_units,
                         const Vec2& emotion, const Camera& camera, bool use_emotion = true,
                         RenderSettings settings = {});

// ---- Densification --------------------------------------------------------------

/// Two children along the major axis, with opacity fitted so the pair
/// reproduces the parent's coverage footprint.
std::pair<GaussianParams, GaussianParams> split_gaussian(const GaussianParams& g);
/// Two identical copies with opacity 1 - sqrt(1 - a): the stack matches the
/// parent at its center and stays close elsewhere.
std::pair<GaussianParams, GaussianParams> clone_gaussian(const GaussianParams& g);

struct DensifyResult {
  std::vector<long> source;  // new index -> parent index
  std::vector<bool> fresh;   // true for split or clone children
  int split = 0;
  int cloned = 0;
  int pruned = 0;
};

DensifyResult densify_and_prune(GaussianField& field, const std::vector<double>& mean_grad,
                                const DensifyConfig& config);

// ---- Trainer ----------------------------------------------------------------------

enum class BranchKind { kMouth, kFace, kEmotion };
const char* to_string(BranchKind kind);

struct LogEntry {
  long step = 0;
  std::string stage;
  std::map<std::string, double> losses;  // "total" always present
  double lr = 0.0;
  std::size_t gaussian_count = 0;
};

nlohmann::json to_json(const LogEntry& entry);

class Trainer {
 public:
  /// Initial fields come from the dataset's init fields when present,
  /// otherwise from back-projected mask pixels.
  Trainer(TrainConfig config, const Dataset& dataset);

  void optimize_canonical();
  void train_branch(BranchKind branch);
  void finetune_border();
  /// All stages in order; writes the checkpoint when config.output is set.
  void run();

  const Model& model() const { return model_; }
  Model& model() { return model_; }
  const TrainConfig& config() const { return config_; }
  const std::vector<LogEntry>& log() const { return log_; }
  void set_log_sink(std::function<void(const LogEntry&)> sink) { sink_ = std::move(sink); }

  /// Gradient w.r.t. the face canonical field from the latest fine-tune step
  /// (after masking).
  const GradientBuffer& last_border_gradient() const { return last_border_grad_; }

  std::vector<NamedTensor> optimizer_tensors() const;

 private:
  void record(const std::string& stage, long step, std::map<std::string, double> losses,
              double lr, std::size_t count);
  void check_finite(const std::string& stage, double loss);
  std::vector<int> canonical_frames() const;
  double rgb_loss(const Image& pred, const Image& target, double w_dssim, double w_perceptual,
                  Image* grad, std::map<std::string, double>& terms) const;
  double sync_step(BranchKind branch, long step, DeformationModel& grad, double weight);

  TrainConfig config_;
  const Dataset& dataset_;
  Model model_;
  std::vector<Image> masked_face_, masked_mouth_;
  RandomProjectionPerceptual perceptual_;
  MeanIntensitySyncEmbedder mouth_sync_;
  MeanIntensitySyncEmbedder face_sync_;
  FieldOptimizer mouth_opt_, face_opt_;
  SlotOptimizer net_opt_;
  std::vector<LogEntry> log_;
  std::function<void(const LogEntry&)> sink_;
  GradientBuffer last_border_grad_;
  Rng rng_;
};

// ---- Checkpoints ----------------------------------------------------------------

struct Checkpoint {
  Model model;
  TrainConfig config;
  nlohmann::json meta;
};

/// Bundle directory: mouth.splatf, face.splatf, networks.splatn,
/// optimizer.splatn, config.json, meta.json, conditions.jsonl. Written to a
/// sibling temp directory, then renamed into place.
void save_checkpoint(const std::filesystem::path& dir, const Model& model,
                     const TrainConfig& config, const std::vector<NamedTensor>& optimizer = {});
Checkpoint load_checkpoint(const std::filesystem::path& dir);

/// Model with untrained branches over the given canonical fields.
Model make_model(const TrainConfig& config, const Dataset& dataset, GaussianField mouth,
                 GaussianField face);

/// Deterministic digest of every file in a checkpoint bundle.
std::uint64_t checkpoint_digest(const std::filesystem::path& dir);

}  // namespace vasplat
