#include "vasplat/optim.hpp"

#include <array>

#include "vasplat/error.hpp"

namespace vasplat {

void adam_update(double* value, const double* grad, std::size_t n, AdamState& s, double lr,
                 const AdamConfig& c, const std::string& group) {
  if (s.m.size() != n) {
    if (!s.m.empty()) {
      fail(ErrorCode::kDimensionMismatch, "optimizer state for " + group + " has wrong size");
    }
    s.m.assign(n, 0.0);
    s.v.assign(n, 0.0);
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::isfinite(grad[i])) {
      fail(ErrorCode::kNonFinite, "non-finite gradient in parameter group " + group);
    }
  }
  ++s.step;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(s.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(s.step));
  for (std::size_t i = 0; i < n; ++i) {
    const double g = grad[i];
    if (g == 0.0 && s.m[i] == 0.0 && s.v[i] == 0.0) continue;  // untouched entry
    s.m[i] = c.beta1 * s.m[i] + (1.0 - c.beta1) * g;
    s.v[i] = c.beta2 * s.v[i] + (1.0 - c.beta2) * g * g;
    const double m_hat = s.m[i] / bc1;
    const double v_hat = s.v[i] / bc2;
    if (c.weight_decay != 0.0) value[i] -= lr * c.weight_decay * value[i];
    value[i] -= lr * m_hat / (std::sqrt(v_hat) + c.eps);
  }
}

double exp_schedule(double lr0, double decay, long step) {
  return lr0 * std::pow(decay, static_cast<double>(step));
}

double decay_for_half_life(double half_life) {
  if (!(half_life > 0.0)) fail(ErrorCode::kInvalidArgument, "half life must be positive");
  return std::pow(0.5, 1.0 / half_life);
}

// ---- SlotOptimizer ----------------------------------------------------------------

void SlotOptimizer::step(const std::vector<ParamSlot>& slots,
                         const std::map<std::string, double>& lr_by_prefix, double default_lr) {
  for (const ParamSlot& s : slots) {
    double lr = default_lr;
    std::size_t best = 0;
    for (const auto& [prefix, rate] : lr_by_prefix) {
      if (s.name.find(prefix) != std::string::npos && prefix.size() > best) {
        lr = rate;
        best = prefix.size();
      }
    }
    adam_update(s.value, s.grad, s.size, states_[s.name], lr, config_, s.name);
  }
}

std::vector<NamedTensor> SlotOptimizer::state_tensors() const {
  std::vector<NamedTensor> out;
  for (const auto& [name, st] : states_) {
    out.push_back({"adam." + name + ".m", {st.m.size()}, st.m});
    out.push_back({"adam." + name + ".v", {st.v.size()}, st.v});
    out.push_back({"adam." + name + ".step", {1}, {static_cast<double>(st.step)}});
  }
  return out;
}

// ---- FieldOptimizer ---------------------------------------------------------------

namespace {

constexpr std::array<int, 6> kWidths = {3, 3, 4, 1, 3, 3};
constexpr std::array<const char*, 6> kNames = {"position", "log_scale", "rotation",
                                               "opacity",  "color",     "normal_residual"};

double* param_ptr(GaussianParams& g, int group) {
  switch (group) {
    case 0: return g.position.data();
    case 1: return g.log_scale.data();
    case 2: return g.rotation.data();
    case 3: return &g.opacity_logit;
    case 4: return g.color.data();
    default: return g.normal_residual.data();
  }
}

const double* grad_ptr(const GaussianGrad& g, int group) {
  switch (group) {
    case 0: return g.position.data();
    case 1: return g.log_scale.data();
    case 2: return g.rotation.data();
    case 3: return &g.opacity_logit;
    case 4: return g.color.data();
    default: return g.normal_residual.data();
  }
}

}  // namespace

FieldOptimizer::FieldOptimizer(std::size_t count, GaussianLearningRates rates, AdamConfig config)
    : count_(count), rates_(rates), config_(config) {
  for (int k = 0; k < 6; ++k) {
    states_[k].m.assign(count * kWidths[k], 0.0);
    states_[k].v.assign(count * kWidths[k], 0.0);
  }
}

void FieldOptimizer::step(GaussianField& field, const GradientBuffer& grads, double lr_scale,
                          unsigned groups) {
  if (field.size() != count_ || grads.size() != count_) {
    fail(ErrorCode::kDimensionMismatch, "field optimizer size does not match the field");
  }
  const std::array<double, 6> lrs = {rates_.position, rates_.log_scale, rates_.rotation,
                                     rates_.opacity,  rates_.color,     rates_.normal_residual};
  std::vector<double> value, grad;
  for (int k = 0; k < 6; ++k) {
    if (!(groups & (1u << k))) continue;
    const int w = kWidths[k];
    value.resize(count_ * w);
    grad.resize(count_ * w);
    for (std::size_t i = 0; i < count_; ++i) {
      const double* p = param_ptr(field.gaussians[i], k);
      const double* g = grad_ptr(grads.grads[i], k);
      for (int j = 0; j < w; ++j) {
        value[i * w + j] = p[j];
        grad[i * w + j] = g[j];
      }
    }
    adam_update(value.data(), grad.data(), value.size(), states_[k], lrs[k] * lr_scale, config_,
                std::string(kNames[k]));
    for (std::size_t i = 0; i < count_; ++i) {
      double* p = param_ptr(field.gaussians[i], k);
      for (int j = 0; j < w; ++j) p[j] = value[i * w + j];
    }
  }
}

void FieldOptimizer::remap(const std::vector<long>& source) {
  for (int k = 0; k < 6; ++k) {
    const int w = kWidths[k];
    std::vector<double> m(source.size() * w, 0.0), v(source.size() * w, 0.0);
    for (std::size_t i = 0; i < source.size(); ++i) {
      if (source[i] < 0) continue;
      for (int j = 0; j < w; ++j) {
        m[i * w + j] = states_[k].m[source[i] * w + j];
        v[i * w + j] = states_[k].v[source[i] * w + j];
      }
    }
    states_[k].m = std::move(m);
    states_[k].v = std::move(v);
  }
  count_ = source.size();
}

std::vector<NamedTensor> FieldOptimizer::state_tensors(const std::string& prefix) const {
  std::vector<NamedTensor> out;
  for (int k = 0; k < 6; ++k) {
    const std::string name = prefix + "." + kNames[k];
    out.push_back({name + ".m", {states_[k].m.size()}, states_[k].m});
    out.push_back({name + ".v", {states_[k].v.size()}, states_[k].v});
    out.push_back({name + ".step", {1}, {static_cast<double>(states_[k].step)}});
  }
  return out;
}

}  // namespace vasplat
