#pragma once

// Condition-driven deformation of the canonical fields.
//
//   mouth:   d = f_M(H_M(mu) ++ a)                    -> mu + d_mu
//   face:    d = f_F(H_F(mu) ++ g_a*a ++ g_u*u)       -> mu + d_mu, log_s + d_s, q + d_q
//   emotion: d = f_E(H_E(mu_F) ++ g_e*e) on the face result, added the same way
//
// Offsets act on unconstrained parameters; activation happens at render
// time, so every deformed Gaussian stays valid.

#include <string>
#include <vector>

#include "vasplat/encoders.hpp"
#include "vasplat/render.hpp"
#include "vasplat/scene.hpp"

namespace vasplat {

struct ConditionInput {
  std::string name;
  int dim = 0;
  bool gated = false;
};

class Branch {
 public:
  struct Cache {
    MatX positions;  // 3 x N, normalized
    MatX features;   // hash features, F x N
    std::vector<MatX> gate_values;
    std::vector<VecX> conditions;
    Mlp::Cache network;
  };

  Branch() = default;
  Branch(const HashEncoderConfig& hash, std::vector<ConditionInput> inputs,
         const std::vector<int>& hidden, int out_dim, std::uint64_t seed);

  int out_dim() const { return network.out_dim(); }
  const std::vector<ConditionInput>& inputs() const { return inputs_; }

  /// Offsets (out_dim x N) for normalized positions (3 x N).
  MatX forward(const MatX& positions, const std::vector<VecX>& conditions, Cache* cache) const;
  /// Accumulates into `grad`; returns dL/d normalized positions (3 x N).
  MatX backward(const Cache& cache, const MatX& d_offsets, Branch& grad) const;

  Branch zeros_like() const;
  void collect(const std::string& prefix, Branch& grad, std::vector<ParamSlot>& out);
  /// Weight matrices are stored column-major with shape {rows, cols}.
  void append_tensors(const std::string& prefix, std::vector<NamedTensor>& out) const;
  void load_tensors(const std::string& prefix, const std::vector<NamedTensor>& tensors);

  HashEncoder encoder;
  std::vector<AttentionGate> gates;  // one per gated input, in input order
  Mlp network;

 private:
  std::vector<ConditionInput> inputs_;
};

struct DeformationConfig {
  int audio_dim = 32;
  int au_dim = 7;
  HashEncoderConfig hash;
  std::vector<int> hidden = {64, 64};
  std::uint64_t seed = 0;
};

struct DeformationModel {
  DeformationConfig config;
  Branch mouth;
  Branch face;
  Branch emotion;
  SceneBounds mouth_bounds;
  SceneBounds face_bounds;
  /// When false (the default) the emotion encoder input is treated as a
  /// constant, so no gradient reaches the face branch through it.
  bool emotion_full_gradient = false;

  DeformationModel() = default;
  DeformationModel(const DeformationConfig& config, const GaussianField& mouth_canonical,
                   const GaussianField& face_canonical);

  DeformationModel zeros_like() const;
  std::vector<ParamSlot> slots(DeformationModel& grad, bool mouth_branch, bool face_branch,
                               bool emotion_branch);
  std::vector<NamedTensor> tensors() const;
  void load_tensors(const std::vector<NamedTensor>& tensors);
};

struct Deformed {
  GaussianField field;
  MatX offsets;
  Branch::Cache cache;
  bool clamped = false;  // emotion input clamped to [-1, 1]
};

Deformed deform_mouth(const DeformationModel& model, const GaussianField& canonical,
                      const VecX& audio);
Deformed deform_face(const DeformationModel& model, const GaussianField& canonical,
                     const VecX& audio, const VecX& action_units);
/// `face` is the output of deform_face. Emotion components outside [-1, 1]
/// are clamped and reported through Deformed::clamped.
Deformed deform_emotion(const DeformationModel& model, const GaussianField& face,
                        const Vec2& emotion);

/// Each backward takes dL/d(deformed parameters), accumulates network
/// gradients into `grad` and, when `d_input` is non-null, writes
/// dL/d(input field parameters) there.
void deform_mouth_backward(const DeformationModel& model, const Deformed& deformed,
                           const GradientBuffer& d_field, DeformationModel& grad,
                           GradientBuffer* d_input);
void deform_face_backward(const DeformationModel& model, const Deformed& deformed,
                          const GradientBuffer& d_field, DeformationModel& grad,
                          GradientBuffer* d_input);
void deform_emotion_backward(const DeformationModel& model, const Deformed& deformed,
                             const GradientBuffer& d_field, DeformationModel& grad,
                             GradientBuffer* d_input);

}  // namespace vasplat
