#pragma once

// Adam/AdamW updates and the exponential learning-rate schedule.

#include <array>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "vasplat/encoders.hpp"
#include "vasplat/render.hpp"
#include "vasplat/scene.hpp"

namespace vasplat {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-15;
  double weight_decay = 0.0;  // decoupled (AdamW); 0 makes it plain Adam
};

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  long step = 0;
};

/// One update of `n` values in place. Throws kNonFinite naming `group` when
/// a gradient is NaN or infinite.
void adam_update(double* value, const double* grad, std::size_t n, AdamState& state, double lr,
                 const AdamConfig& config, const std::string& group);

/// lr(t) = lr0 * decay^t.
double exp_schedule(double lr0, double decay, long step);
/// Per-step decay factor that halves the rate every `half_life` steps.
double decay_for_half_life(double half_life);

/// Adam over named parameter slots (network weights, hash tables).
class SlotOptimizer {
 public:
  explicit SlotOptimizer(AdamConfig config = {}) : config_(config) {}

  void step(const std::vector<ParamSlot>& slots, const std::map<std::string, double>& lr_by_prefix,
            double default_lr);

  std::vector<NamedTensor> state_tensors() const;

 private:
  AdamConfig config_;
  std::map<std::string, AdamState> states_;
};

struct GaussianLearningRates {
  double position = 1.6e-4;
  double log_scale = 5e-3;
  double rotation = 1e-3;
  double opacity = 0.05;
  double color = 2.5e-3;
  double normal_residual = 1e-3;
};

enum GaussianGroup : unsigned {
  kGroupPosition = 1u << 0,
  kGroupScale = 1u << 1,
  kGroupRotation = 1u << 2,
  kGroupOpacity = 1u << 3,
  kGroupColor = 1u << 4,
  kGroupNormal = 1u << 5,
  kGroupAll = 0x3f,
};

/// Adam over the per-Gaussian attributes of one field, with one parameter
/// group per attribute.
class FieldOptimizer {
 public:
  FieldOptimizer() = default;
  FieldOptimizer(std::size_t count, GaussianLearningRates rates, AdamConfig config = {});

  /// `lr_scale` multiplies every group rate (the schedule); `groups` masks
  /// which attributes move.
  void step(GaussianField& field, const GradientBuffer& grads, double lr_scale,
            unsigned groups = kGroupAll);

  /// After densification: new_index -> old index (or -1 for a fresh
  /// Gaussian, which starts with zero moments).
  void remap(const std::vector<long>& source);

  std::size_t size() const { return count_; }
  std::vector<NamedTensor> state_tensors(const std::string& prefix) const;

 private:
  std::size_t count_ = 0;
  GaussianLearningRates rates_;
  AdamConfig config_;
  // position, log_scale, rotation, opacity, color, normal_residual
  std::array<AdamState, 6> states_;
};

}  // namespace vasplat
