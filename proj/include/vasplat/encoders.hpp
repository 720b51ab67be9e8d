#pragma once

// Tri-plane hash encoding, attention gates and the small dense networks.
// Gradients are hand-written; every module owns a "grad twin" of the same
// shape that backward() accumulates into.

#include <cstdint>
#include <string>
#include <vector>

#include "vasplat/scene.hpp"

namespace vasplat {

/// A trainable array exposed to the optimizer.
struct ParamSlot {
  std::string name;
  double* value = nullptr;
  double* grad = nullptr;
  std::size_t size = 0;
};

struct HashEncoderConfig {
  int levels = 8;
  int features = 2;
  int log2_table_size = 14;
  int base_resolution = 16;
  double growth = 1.5;
};

/// Three planar hash grids over the (xy), (yz) and (xz) projections of a
/// position in [0,1]^3. Positions outside the box are clamped.
class HashEncoder {
 public:
  HashEncoder() = default;
  HashEncoder(const HashEncoderConfig& config, std::uint64_t seed);

  int output_dim() const { return 3 * config_.levels * config_.features; }
  int table_size() const { return 1 << config_.log2_table_size; }
  int resolution(int level) const;
  const HashEncoderConfig& config() const { return config_; }

  void encode(const Vec3& position, double* out) const;
  /// Accumulates dL/dtable into `table_grad` (same layout as `table`) and
  /// returns dL/dposition (zero on clamped axes).
  Vec3 backward(const Vec3& position, const double* d_out, double* table_grad) const;

  /// Index of a vertex entry (before the feature offset).
  std::size_t entry_index(int plane, int level, int i, int j) const;

  std::vector<double> table;  // [plane][level][entry][feature]

 private:
  HashEncoderConfig config_;
};

struct Dense {
  MatX weight;  // out x in
  VecX bias;

  Dense() = default;
  Dense(int in, int out) : weight(MatX::Zero(out, in)), bias(VecX::Zero(out)) {}
  int in_dim() const { return static_cast<int>(weight.cols()); }
  int out_dim() const { return static_cast<int>(weight.rows()); }
  void setZero() {
    weight.setZero();
    bias.setZero();
  }
};

/// Dense network with tanh hidden layers and a linear output layer. Inputs
/// are columns of a matrix.
class Mlp {
 public:
  struct Cache {
    std::vector<MatX> activations;  // input, then each hidden layer output
  };

  Mlp() = default;
  /// Hidden layers get Glorot-uniform weights; the output layer starts at
  /// zero so the network initially emits zeros.
  Mlp(int in, const std::vector<int>& hidden, int out, std::uint64_t seed);

  int in_dim() const { return layers.front().in_dim(); }
  int out_dim() const { return layers.back().out_dim(); }

  MatX forward(const MatX& input, Cache* cache = nullptr) const;
  /// Accumulates parameter gradients into `grad`; returns dL/dinput.
  MatX backward(const Cache& cache, const MatX& d_output, Mlp& grad) const;

  Mlp zeros_like() const;
  void collect(const std::string& prefix, Mlp& grad, std::vector<ParamSlot>& out);

  std::vector<Dense> layers;
};

/// gate = sigmoid(W h + b), applied as gate (.) condition.
class AttentionGate {
 public:
  AttentionGate() = default;
  AttentionGate(int feature_dim, int condition_dim, std::uint64_t seed);

  int condition_dim() const { return dense.out_dim(); }

  /// Gate values for a batch of hash features (columns).
  MatX gate(const MatX& features) const;
  /// condition broadcast over columns and multiplied by the gate.
  MatX apply(const MatX& gate_values, const VecX& condition) const;
  /// Given dL/d(gated), returns dL/dfeatures and accumulates into `grad`.
  MatX backward(const MatX& features, const MatX& gate_values, const VecX& condition,
                const MatX& d_gated, AttentionGate& grad) const;

  AttentionGate zeros_like() const;
  void collect(const std::string& prefix, AttentionGate& grad, std::vector<ParamSlot>& out);

  Dense dense;
};

/// Throws kDimensionMismatch unless gate and condition have equal length.
VecX gate_condition(const VecX& gate_values, const VecX& condition);

// ---- Network checkpoints ------------------------------------------------------
//
// "SPLATN1\n", u32 tensor count, then per tensor: u32 name length, name,
// u32 rank, u64 dims[rank], little-endian float32 values.

struct NamedTensor {
  std::string name;
  std::vector<std::uint64_t> shape;
  std::vector<double> values;
};

std::string serialize_tensors(const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> deserialize_tensors(const std::string& bytes);

}  // namespace vasplat
