#include "vasplat/encoders.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>

#include "vasplat/error.hpp"
#include "vasplat/random.hpp"

namespace vasplat {

namespace {

constexpr int kPlaneAxes[3][2] = {{0, 1}, {1, 2}, {0, 2}};
constexpr std::uint32_t kPrime = 2654435761u;

void glorot(Dense& d, Rng& rng) {
  const double limit = std::sqrt(6.0 / (d.in_dim() + d.out_dim()));
  for (Eigen::Index c = 0; c < d.weight.cols(); ++c)
    for (Eigen::Index r = 0; r < d.weight.rows(); ++r) d.weight(r, c) = rng.uniform(-limit, limit);
  d.bias.setZero();
}

void collect_dense(const std::string& name, Dense& value, Dense& grad,
                   std::vector<ParamSlot>& out) {
  out.push_back({name + ".weight", value.weight.data(), grad.weight.data(),
                 static_cast<std::size_t>(value.weight.size())});
  out.push_back({name + ".bias", value.bias.data(), grad.bias.data(),
                 static_cast<std::size_t>(value.bias.size())});
}

}  // namespace

// ---- HashEncoder ----------------------------------------------------------------

HashEncoder::HashEncoder(const HashEncoderConfig& config, std::uint64_t seed) : config_(config) {
  if (config.levels < 1 || config.features < 1 || config.log2_table_size < 1 ||
      config.log2_table_size > 30 || config.base_resolution < 1 || config.growth < 1.0) {
    fail(ErrorCode::kInvalidArgument, "invalid hash encoder configuration");
  }
  Rng rng(seed);
  table.resize(static_cast<std::size_t>(3) * config.levels * table_size() * config.features);
  for (double& v : table) v = rng.uniform(-1e-4, 1e-4);
}

int HashEncoder::resolution(int level) const {
  return static_cast<int>(std::floor(config_.base_resolution * std::pow(config_.growth, level)));
}

std::size_t HashEncoder::entry_index(int plane, int level, int i, int j) const {
  const std::uint32_t h =
      (static_cast<std::uint32_t>(i) * 1u) ^ (static_cast<std::uint32_t>(j) * kPrime);
  const std::size_t entry = h & static_cast<std::uint32_t>(table_size() - 1);
  return ((static_cast<std::size_t>(plane) * config_.levels + level) * table_size() + entry) *
         config_.features;
}

namespace {

struct Cell {
  int i0, j0;
  double fu, fv;
};

inline Cell locate(double a, double b, int res) {
  const double u = a * res;
  const double v = b * res;
  Cell c;
  c.i0 = std::min(static_cast<int>(std::floor(u)), res - 1);
  c.j0 = std::min(static_cast<int>(std::floor(v)), res - 1);
  c.fu = u - c.i0;
  c.fv = v - c.j0;
  return c;
}

}  // namespace

void HashEncoder::encode(const Vec3& position, double* out) const {
  const Vec3 x = position.cwiseMax(0.0).cwiseMin(1.0);
  const int nf = config_.features;
  for (int plane = 0; plane < 3; ++plane) {
    const double a = x[kPlaneAxes[plane][0]];
    const double b = x[kPlaneAxes[plane][1]];
    for (int level = 0; level < config_.levels; ++level) {
      const Cell c = locate(a, b, resolution(level));
      const double w[4] = {(1 - c.fu) * (1 - c.fv), c.fu * (1 - c.fv), (1 - c.fu) * c.fv,
                           c.fu * c.fv};
      const std::size_t idx[4] = {entry_index(plane, level, c.i0, c.j0),
                                  entry_index(plane, level, c.i0 + 1, c.j0),
                                  entry_index(plane, level, c.i0, c.j0 + 1),
                                  entry_index(plane, level, c.i0 + 1, c.j0 + 1)};
      double* o = out + (plane * config_.levels + level) * nf;
      for (int f = 0; f < nf; ++f) {
        o[f] = w[0] * table[idx[0] + f] + w[1] * table[idx[1] + f] + w[2] * table[idx[2] + f] +
               w[3] * table[idx[3] + f];
      }
    }
  }
}

Vec3 HashEncoder::backward(const Vec3& position, const double* d_out, double* table_grad) const {
  const Vec3 x = position.cwiseMax(0.0).cwiseMin(1.0);
  const int nf = config_.features;
  Vec3 d_x = Vec3::Zero();
  for (int plane = 0; plane < 3; ++plane) {
    const int ax = kPlaneAxes[plane][0];
    const int bx = kPlaneAxes[plane][1];
    for (int level = 0; level < config_.levels; ++level) {
      const int res = resolution(level);
      const Cell c = locate(x[ax], x[bx], res);
      const double w[4] = {(1 - c.fu) * (1 - c.fv), c.fu * (1 - c.fv), (1 - c.fu) * c.fv,
                           c.fu * c.fv};
      const std::size_t idx[4] = {entry_index(plane, level, c.i0, c.j0),
                                  entry_index(plane, level, c.i0 + 1, c.j0),
                                  entry_index(plane, level, c.i0, c.j0 + 1),
                                  entry_index(plane, level, c.i0 + 1, c.j0 + 1)};
      const double* g = d_out + (plane * config_.levels + level) * nf;
      for (int f = 0; f < nf; ++f) {
        const double t00 = table[idx[0] + f], t10 = table[idx[1] + f];
        const double t01 = table[idx[2] + f], t11 = table[idx[3] + f];
        if (table_grad != nullptr) {
          for (int k = 0; k < 4; ++k) table_grad[idx[k] + f] += w[k] * g[f];
        }
        const double du = (1 - c.fv) * (t10 - t00) + c.fv * (t11 - t01);
        const double dv = (1 - c.fu) * (t01 - t00) + c.fu * (t11 - t10);
        d_x[ax] += g[f] * du * res;
        d_x[bx] += g[f] * dv * res;
      }
    }
  }
  for (int k = 0; k < 3; ++k) {
    if (position[k] < 0.0 || position[k] > 1.0) d_x[k] = 0.0;
  }
  return d_x;
}

// ---- Mlp ------------------------------------------------------------------------

Mlp::Mlp(int in, const std::vector<int>& hidden, int out, std::uint64_t seed) {
  Rng rng(seed);
  int prev = in;
  for (int h : hidden) {
    layers.emplace_back(prev, h);
    glorot(layers.back(), rng);
    prev = h;
  }
  layers.emplace_back(prev, out);
}

MatX Mlp::forward(const MatX& input, Cache* cache) const {
  if (input.rows() != in_dim()) {
    fail(ErrorCode::kDimensionMismatch, "network expects " + std::to_string(in_dim()) +
                                            " inputs, got " + std::to_string(input.rows()));
  }
  if (cache != nullptr) {
    cache->activations.clear();
    cache->activations.push_back(input);
  }
  MatX x = input;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    MatX z = layers[l].weight * x;
    z.colwise() += layers[l].bias;
    if (l + 1 < layers.size()) {
      x = z.array().tanh().matrix();
      if (cache != nullptr) cache->activations.push_back(x);
    } else {
      x = std::move(z);
    }
  }
  return x;
}

MatX Mlp::backward(const Cache& cache, const MatX& d_output, Mlp& grad) const {
  if (d_output.rows() != out_dim()) {
    fail(ErrorCode::kDimensionMismatch, "network gradient has wrong row count");
  }
  MatX d = d_output;
  for (std::size_t l = layers.size(); l-- > 0;) {
    const MatX& in = cache.activations[l];
    grad.layers[l].weight.noalias() += d * in.transpose();
    grad.layers[l].bias += d.rowwise().sum();
    MatX d_in = layers[l].weight.transpose() * d;
    if (l > 0) {
      d_in.array() *= 1.0 - in.array().square();  // tanh'
    }
    d = std::move(d_in);
  }
  return d;
}

Mlp Mlp::zeros_like() const {
  Mlp z = *this;
  for (Dense& d : z.layers) d.setZero();
  return z;
}

void Mlp::collect(const std::string& prefix, Mlp& grad, std::vector<ParamSlot>& out) {
  for (std::size_t l = 0; l < layers.size(); ++l) {
    collect_dense(prefix + ".layer" + std::to_string(l), layers[l], grad.layers[l], out);
  }
}

// ---- AttentionGate --------------------------------------------------------------

AttentionGate::AttentionGate(int feature_dim, int condition_dim, std::uint64_t seed)
    : dense(feature_dim, condition_dim) {
  Rng rng(seed);
  glorot(dense, rng);
}

MatX AttentionGate::gate(const MatX& features) const {
  MatX z = dense.weight * features;
  z.colwise() += dense.bias;
  return (1.0 / (1.0 + (-z.array()).exp())).matrix();
}

MatX AttentionGate::apply(const MatX& gate_values, const VecX& condition) const {
  if (gate_values.rows() != condition.size()) {
    fail(ErrorCode::kDimensionMismatch, "gate has " + std::to_string(gate_values.rows()) +
                                            " entries, condition has " +
                                            std::to_string(condition.size()));
  }
  return (gate_values.array().colwise() * condition.array()).matrix();
}

MatX AttentionGate::backward(const MatX& features, const MatX& gate_values, const VecX& condition,
                             const MatX& d_gated, AttentionGate& grad) const {
  // d gate = d_gated * condition; d z = d gate * g (1 - g)
  const MatX d_z = ((d_gated.array().colwise() * condition.array()) * gate_values.array() *
                    (1.0 - gate_values.array()))
                       .matrix();
  grad.dense.weight.noalias() += d_z * features.transpose();
  grad.dense.bias += d_z.rowwise().sum();
  return dense.weight.transpose() * d_z;
}

AttentionGate AttentionGate::zeros_like() const {
  AttentionGate z = *this;
  z.dense.setZero();
  return z;
}

void AttentionGate::collect(const std::string& prefix, AttentionGate& grad,
                            std::vector<ParamSlot>& out) {
  collect_dense(prefix, dense, grad.dense, out);
}

VecX gate_condition(const VecX& gate_values, const VecX& condition) {
  if (gate_values.size() != condition.size()) {
    fail(ErrorCode::kDimensionMismatch, "gate and condition dimensions differ");
  }
  return gate_values.cwiseProduct(condition);
}

// ---- Checkpoints ------------------------------------------------------------------

namespace {

constexpr char kNetMagic[8] = {'S', 'P', 'L', 'A', 'T', 'N', '1', '\n'};

static_assert(std::endian::native == std::endian::little,
              "checkpoint serialization assumes a little-endian host");

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string get_string(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) {
      fail(ErrorCode::kTruncatedFile, "network checkpoint is truncated");
    }
  }
  const std::string& bytes_;
  std::size_t pos_ = 8;
};

}  // namespace

std::string serialize_tensors(const std::vector<NamedTensor>& tensors) {
  std::string out(kNetMagic, 8);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const NamedTensor& t : tensors) {
    std::uint64_t count = 1;
    for (std::uint64_t d : t.shape) count *= d;
    if (count != t.values.size()) {
      fail(ErrorCode::kDimensionMismatch, "tensor " + t.name + " shape does not match its values");
    }
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.name.size()));
    out += t.name;
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.shape.size()));
    for (std::uint64_t d : t.shape) put<std::uint64_t>(out, d);
    for (double v : t.values) put<float>(out, static_cast<float>(v));
  }
  return out;
}

std::vector<NamedTensor> deserialize_tensors(const std::string& bytes) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kNetMagic, 8) != 0) {
    fail(ErrorCode::kMalformedHeader, "network checkpoint: bad magic");
  }
  Reader r(bytes);
  const auto n = r.get<std::uint32_t>();
  std::vector<NamedTensor> out;
  for (std::uint32_t k = 0; k < n; ++k) {
    NamedTensor t;
    t.name = r.get_string(r.get<std::uint32_t>());
    const auto rank = r.get<std::uint32_t>();
    if (rank > 8) fail(ErrorCode::kMalformedHeader, "network checkpoint: bad tensor rank");
    std::uint64_t count = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      t.shape.push_back(r.get<std::uint64_t>());
      count *= t.shape.back();
    }
    if (count > bytes.size()) fail(ErrorCode::kTruncatedFile, "network checkpoint is truncated");
    t.values.resize(count);
    for (double& v : t.values) v = r.get<float>();
    out.push_back(std::move(t));
  }
  if (!r.done()) {
    fail(ErrorCode::kDimensionMismatch, "network checkpoint: trailing bytes");
  }
  return out;
}

}  // namespace vasplat
