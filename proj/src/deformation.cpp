#include "vasplat/deformation.hpp"

#include <cmath>
#include <algorithm>

#include "vasplat/error.hpp"

namespace vasplat {

namespace {

constexpr int kMouthOut = 3;
constexpr int kFullOut = 10;  // d_mu(3) d_log_scale(3) d_rotation(4)

MatX normalized_positions(const GaussianField& field, const SceneBounds& bounds) {
  MatX out(3, static_cast<Eigen::Index>(field.size()));
  for (std::size_t i = 0; i < field.size(); ++i) {
    out.col(static_cast<Eigen::Index>(i)) = bounds.normalize(field.gaussians[i].position);
  }
  return out;
}

void apply_offsets(GaussianField& field, const MatX& offsets) {
  for (std::size_t i = 0; i < field.size(); ++i) {
    GaussianParams& g = field.gaussians[i];
    const auto col = offsets.col(static_cast<Eigen::Index>(i));
    g.position += col.segment<3>(0);
    if (offsets.rows() == kFullOut) {
      g.log_scale += col.segment<3>(3);
      g.rotation += col.segment<4>(6);
    }
  }
}

MatX offset_gradient(const GradientBuffer& d_field, int rows) {
  MatX d(rows, static_cast<Eigen::Index>(d_field.size()));
  for (std::size_t i = 0; i < d_field.size(); ++i) {
    const GaussianGrad& g = d_field.grads[i];
    auto col = d.col(static_cast<Eigen::Index>(i));
    col.segment<3>(0) = g.position;
    if (rows == kFullOut) {
      col.segment<3>(3) = g.log_scale;
      col.segment<4>(6) = g.rotation;
    }
  }
  return d;
}

void check_sizes(const Deformed& deformed, const GradientBuffer& d_field) {
  if (d_field.size() != deformed.field.size()) {
    fail(ErrorCode::kDimensionMismatch, "deformation gradient does not match the field size");
  }
}

// Pass-through gradient plus the encoder path into the input positions.
void input_gradient(const GradientBuffer& d_field, const MatX* d_normalized,
                    const SceneBounds& bounds, GradientBuffer* d_input) {
  if (d_input == nullptr) return;
  *d_input = d_field;
  if (d_normalized == nullptr) return;
  const Vec3 extent = bounds.extent();
  for (std::size_t i = 0; i < d_field.size(); ++i) {
    d_input->grads[i].position +=
        Vec3(d_normalized->col(static_cast<Eigen::Index>(i))).cwiseQuotient(extent);
  }
}

}  // namespace

// ---- Branch ---------------------------------------------------------------------

Branch::Branch(const HashEncoderConfig& hash, std::vector<ConditionInput> inputs,
               const std::vector<int>& hidden, int out_dim, std::uint64_t seed)
    : encoder(hash, seed), inputs_(std::move(inputs)) {
  int in = encoder.output_dim();
  std::uint64_t sub = seed;
  for (const ConditionInput& c : inputs_) {
    in += c.dim;
    if (c.gated) gates.emplace_back(encoder.output_dim(), c.dim, ++sub * 0x9E3779B97F4A7C15ull);
  }
  network = Mlp(in, hidden, out_dim, seed ^ 0xD1B54A32D192ED03ull);
}

MatX Branch::forward(const MatX& positions, const std::vector<VecX>& conditions,
                     Cache* cache) const {
  if (conditions.size() != inputs_.size()) {
    fail(ErrorCode::kDimensionMismatch, "branch expects " + std::to_string(inputs_.size()) +
                                            " condition vectors");
  }
  for (std::size_t k = 0; k < inputs_.size(); ++k) {
    if (conditions[k].size() != inputs_[k].dim) {
      fail(ErrorCode::kDimensionMismatch,
           inputs_[k].name + " condition has dimension " + std::to_string(conditions[k].size()) +
               ", expected " + std::to_string(inputs_[k].dim));
    }
  }
  const Eigen::Index n = positions.cols();
  const int fdim = encoder.output_dim();
  MatX features(fdim, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    encoder.encode(positions.col(i), features.col(i).data());
  }
  MatX input(network.in_dim(), n);
  input.topRows(fdim) = features;
  Eigen::Index row = fdim;
  std::vector<MatX> gate_values;
  std::size_t gate = 0;
  for (std::size_t k = 0; k < inputs_.size(); ++k) {
    const Eigen::Index dim = inputs_[k].dim;
    if (inputs_[k].gated) {
      gate_values.push_back(gates[gate].gate(features));
      input.middleRows(row, dim) = gates[gate].apply(gate_values.back(), conditions[k]);
      ++gate;
    } else {
      input.middleRows(row, dim) = conditions[k].replicate(1, n);
    }
    row += dim;
  }
  MatX out = network.forward(input, cache != nullptr ? &cache->network : nullptr);
  if (cache != nullptr) {
    cache->positions = positions;
    cache->features = std::move(features);
    cache->gate_values = std::move(gate_values);
    cache->conditions = conditions;
  }
  return out;
}

MatX Branch::backward(const Cache& cache, const MatX& d_offsets, Branch& grad) const {
  const MatX d_input = network.backward(cache.network, d_offsets, grad.network);
  const int fdim = encoder.output_dim();
  MatX d_features = d_input.topRows(fdim);
  Eigen::Index row = fdim;
  std::size_t gate = 0;
  for (std::size_t k = 0; k < inputs_.size(); ++k) {
    const Eigen::Index dim = inputs_[k].dim;
    if (inputs_[k].gated) {
      d_features += gates[gate].backward(cache.features, cache.gate_values[gate],
                                         cache.conditions[k], d_input.middleRows(row, dim),
                                         grad.gates[gate]);
      ++gate;
    }
    row += dim;
  }
  MatX d_positions(3, cache.positions.cols());
  for (Eigen::Index i = 0; i < cache.positions.cols(); ++i) {
    d_positions.col(i) = encoder.backward(cache.positions.col(i), d_features.col(i).data(),
                                          grad.encoder.table.data());
  }
  return d_positions;
}

Branch Branch::zeros_like() const {
  Branch z = *this;
  std::fill(z.encoder.table.begin(), z.encoder.table.end(), 0.0);
  for (AttentionGate& g : z.gates) g.dense.setZero();
  z.network = network.zeros_like();
  return z;
}

void Branch::collect(const std::string& prefix, Branch& grad, std::vector<ParamSlot>& out) {
  out.push_back({prefix + ".encoder", encoder.table.data(), grad.encoder.table.data(),
                 encoder.table.size()});
  for (std::size_t g = 0; g < gates.size(); ++g) {
    gates[g].collect(prefix + ".gate" + std::to_string(g), grad.gates[g], out);
  }
  network.collect(prefix + ".net", grad.network, out);
}

namespace {

NamedTensor matrix_tensor(const std::string& name, const MatX& m) {
  return {name,
          {static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())},
          std::vector<double>(m.data(), m.data() + m.size())};
}

NamedTensor vector_tensor(const std::string& name, const VecX& v) {
  return {name, {static_cast<std::uint64_t>(v.size())},
          std::vector<double>(v.data(), v.data() + v.size())};
}

const NamedTensor& find_tensor(const std::vector<NamedTensor>& tensors, const std::string& name,
                               std::size_t expected) {
  for (const NamedTensor& t : tensors) {
    if (t.name == name) {
      if (t.values.size() != expected) {
        fail(ErrorCode::kDimensionMismatch, "tensor " + name + " has " +
                                                std::to_string(t.values.size()) +
                                                " values, expected " + std::to_string(expected));
      }
      return t;
    }
  }
  fail(ErrorCode::kMissingData, "network checkpoint lacks tensor " + name);
}

void load_into(double* dst, const NamedTensor& t) {
  std::copy(t.values.begin(), t.values.end(), dst);
}

}  // namespace

void Branch::append_tensors(const std::string& prefix, std::vector<NamedTensor>& out) const {
  const HashEncoderConfig& c = encoder.config();
  out.push_back({prefix + ".encoder",
                 {3, static_cast<std::uint64_t>(c.levels),
                  static_cast<std::uint64_t>(encoder.table_size()),
                  static_cast<std::uint64_t>(c.features)},
                 encoder.table});
  for (std::size_t g = 0; g < gates.size(); ++g) {
    const std::string name = prefix + ".gate" + std::to_string(g);
    out.push_back(matrix_tensor(name + ".weight", gates[g].dense.weight));
    out.push_back(vector_tensor(name + ".bias", gates[g].dense.bias));
  }
  for (std::size_t l = 0; l < network.layers.size(); ++l) {
    const std::string name = prefix + ".net.layer" + std::to_string(l);
    out.push_back(matrix_tensor(name + ".weight", network.layers[l].weight));
    out.push_back(vector_tensor(name + ".bias", network.layers[l].bias));
  }
}

void Branch::load_tensors(const std::string& prefix, const std::vector<NamedTensor>& tensors) {
  load_into(encoder.table.data(),
            find_tensor(tensors, prefix + ".encoder", encoder.table.size()));
  for (std::size_t g = 0; g < gates.size(); ++g) {
    const std::string name = prefix + ".gate" + std::to_string(g);
    Dense& d = gates[g].dense;
    load_into(d.weight.data(), find_tensor(tensors, name + ".weight", d.weight.size()));
    load_into(d.bias.data(), find_tensor(tensors, name + ".bias", d.bias.size()));
  }
  for (std::size_t l = 0; l < network.layers.size(); ++l) {
    const std::string name = prefix + ".net.layer" + std::to_string(l);
    Dense& d = network.layers[l];
    load_into(d.weight.data(), find_tensor(tensors, name + ".weight", d.weight.size()));
    load_into(d.bias.data(), find_tensor(tensors, name + ".bias", d.bias.size()));
  }
}

// ---- DeformationModel -------------------------------------------------------------

DeformationModel::DeformationModel(const DeformationConfig& cfg,
                                   const GaussianField& mouth_canonical,
                                   const GaussianField& face_canonical)
    : config(cfg),
      mouth(cfg.hash, {{"audio", cfg.audio_dim, false}}, cfg.hidden, kMouthOut, cfg.seed * 3 + 1),
      face(cfg.hash, {{"audio", cfg.audio_dim, true}, {"action_units", cfg.au_dim, true}},
           cfg.hidden, kFullOut, cfg.seed * 3 + 2),
      emotion(cfg.hash, {{"emotion", 2, true}}, cfg.hidden, kFullOut, cfg.seed * 3 + 3),
      mouth_bounds(SceneBounds::from_field(mouth_canonical)),
      face_bounds(SceneBounds::from_field(face_canonical)) {}

DeformationModel DeformationModel::zeros_like() const {
  DeformationModel z;
  z.config = config;
  z.mouth = mouth.zeros_like();
  z.face = face.zeros_like();
  z.emotion = emotion.zeros_like();
  z.mouth_bounds = mouth_bounds;
  z.face_bounds = face_bounds;
  z.emotion_full_gradient = emotion_full_gradient;
  return z;
}

std::vector<ParamSlot> DeformationModel::slots(DeformationModel& grad, bool mouth_branch,
                                               bool face_branch, bool emotion_branch) {
  std::vector<ParamSlot> out;
  if (mouth_branch) mouth.collect("mouth", grad.mouth, out);
  if (face_branch) face.collect("face", grad.face, out);
  if (emotion_branch) emotion.collect("emotion", grad.emotion, out);
  return out;
}

std::vector<NamedTensor> DeformationModel::tensors() const {
  std::vector<NamedTensor> out;
  mouth.append_tensors("mouth", out);
  face.append_tensors("face", out);
  emotion.append_tensors("emotion", out);
  for (const auto& [name, b] : {std::pair{"bounds.mouth", &mouth_bounds}, std::pair{"bounds.face", &face_bounds}}) {
    out.push_back({name, {2, 3}, {b->lower.x(), b->lower.y(), b->lower.z(), b->upper.x(), b->upper.y(), b->upper.z()}});
  }
  return out;
}

void DeformationModel::load_tensors(const std::vector<NamedTensor>& tensors) {
  mouth.load_tensors("mouth", tensors);
  face.load_tensors("face", tensors);
  emotion.load_tensors("emotion", tensors);
  for (const auto& [name, b] : {std::pair{"bounds.mouth", &mouth_bounds}, std::pair{"bounds.face", &face_bounds}}) {
    const NamedTensor& t = find_tensor(tensors, name, 6);
    b->lower = Vec3(t.values[0], t.values[1], t.values[2]);
    b->upper = Vec3(t.values[3], t.values[4], t.values[5]);
  }
}

// ---- Deform / backward ------------------------------------------------------------

Deformed deform_mouth(const DeformationModel& model, const GaussianField& canonical,
                      const VecX& audio) {
  if (canonical.role != LayerRole::kInsideMouth) {
    fail(ErrorCode::kInvalidArgument, "deform_mouth needs an inside-mouth field");
  }
  Deformed out;
  out.offsets = model.mouth.forward(normalized_positions(canonical, model.mouth_bounds), {audio},
                                    &out.cache);
  out.field = canonical;
  out.field.stage = FieldStage::kDeformed;
  apply_offsets(out.field, out.offsets);
  return out;
}

Deformed deform_face(const DeformationModel& model, const GaussianField& canonical,
                     const VecX& audio, const VecX& action_units) {
  if (canonical.role != LayerRole::kFace) {
    fail(ErrorCode::kInvalidArgument, "deform_face needs a face field");
  }
  Deformed out;
  out.offsets = model.face.forward(normalized_positions(canonical, model.face_bounds),
                                   {audio, action_units}, &out.cache);
  out.field = canonical;
  out.field.stage = FieldStage::kDeformed;
  apply_offsets(out.field, out.offsets);
  return out;
}

Deformed deform_emotion(const DeformationModel& model, const GaussianField& face,
                        const Vec2& emotion) {
  if (face.role != LayerRole::kFace) {
    fail(ErrorCode::kInvalidArgument, "deform_emotion needs a face field");
  }
  if (!emotion.allFinite()) {
    fail(ErrorCode::kNonFinite, "emotion coordinates must be finite");
  }
  Deformed out;
  const Vec2 e = emotion.cwiseMax(-1.0).cwiseMin(1.0);
  out.clamped = e != emotion;
  out.offsets = model.emotion.forward(normalized_positions(face, model.face_bounds),
                                      {VecX(e)}, &out.cache);
  out.field = face;
  out.field.stage = FieldStage::kDeformed;
  apply_offsets(out.field, out.offsets);
  return out;
}

void deform_mouth_backward(const DeformationModel& model, const Deformed& deformed,
                           const GradientBuffer& d_field, DeformationModel& grad,
                           GradientBuffer* d_input) {
  check_sizes(deformed, d_field);
  const MatX d_pos =
      model.mouth.backward(deformed.cache, offset_gradient(d_field, kMouthOut), grad.mouth);
  input_gradient(d_field, &d_pos, model.mouth_bounds, d_input);
}

void deform_face_backward(const DeformationModel& model, const Deformed& deformed,
                          const GradientBuffer& d_field, DeformationModel& grad,
                          GradientBuffer* d_input) {
  check_sizes(deformed, d_field);
  const MatX d_pos =
      model.face.backward(deformed.cache, offset_gradient(d_field, kFullOut), grad.face);
  input_gradient(d_field, &d_pos, model.face_bounds, d_input);
}

void deform_emotion_backward(const DeformationModel& model, const Deformed& deformed,
                             const GradientBuffer& d_field, DeformationModel& grad,
                             GradientBuffer* d_input) {
  check_sizes(deformed, d_field);
  const MatX d_pos =
      model.emotion.backward(deformed.cache, offset_gradient(d_field, kFullOut), grad.emotion);
  input_gradient(d_field, model.emotion_full_gradient ? &d_pos : nullptr, model.face_bounds,
                 d_input);
}

}  // namespace vasplat
