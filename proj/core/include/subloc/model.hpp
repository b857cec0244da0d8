#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "subloc/autodiff.hpp"
#include "subloc/ops.hpp"

namespace subloc {

struct SEConfig {
  int reduction_ratio = 4;
};

struct BlockConfig {
  int in_channels = 0;
  int bottleneck_width = 0;
  int out_channels = 0;
  int cardinality = 1;
  int stride = 1;
};

// One stage of repeated blocks; `stride` applies to the first block only.
struct StageConfig {
  int out_channels = 0;
  int bottleneck_width = 0;
  int cardinality = 1;
  int repeat = 1;
  int stride = 1;
};

struct NetworkConfig {
  int in_channels = 4;
  int num_classes = 28;
  int stem_channels = 16;
  std::vector<StageConfig> stages;
  SEConfig se;
  std::uint64_t seed = 0;

  // Desk-scale default: stem 16, stages 32x2 then 64x2 (stride 2),
  // cardinality 4, SE reduction 4.
  static NetworkConfig desk_default();

  // Throws std::invalid_argument naming the violated constraint.
  void validate() const;
};

// He-scheme fill: normal with std = sqrt(2 / fan_in).
template <typename T>
void he_normal_fill(Tensor<T>& w, int fan_in, std::mt19937_64& rng);

template <typename T>
struct ConvLayer {
  Parameter<T> w;
  Parameter<T> b;
  ops::Conv2dSpec spec;

  NodePtr<T> forward(Tape<T>* tape, const NodePtr<T>& x) const {
    return ops::conv2d(tape, x, w.node, b.node, spec);
  }
};

template <typename T>
struct BatchNormLayer {
  Parameter<T> gamma;
  Parameter<T> beta;
  BatchNormState<T> state;
  T momentum = static_cast<T>(0.1);
  T eps = static_cast<T>(1e-5);

  explicit BatchNormLayer(int channels) : state(channels) {}

  NodePtr<T> forward(Tape<T>* tape, const NodePtr<T>& x, RunMode mode) {
    return ops::batch_norm(tape, x, gamma.node, beta.node, state, mode, momentum, eps);
  }
};

template <typename T>
struct DenseLayer {
  Parameter<T> w;
  Parameter<T> b;

  NodePtr<T> forward(Tape<T>* tape, const NodePtr<T>& x) const {
    return ops::dense(tape, x, w.node, b.node);
  }
};

// Squeeze (global average pool), two-layer excitation MLP, sigmoid gate,
// channel-wise rescale.
template <typename T>
struct SEBlock {
  DenseLayer<T> reduce;  // C -> C/r
  DenseLayer<T> expand;  // C/r -> C

  NodePtr<T> forward(Tape<T>* tape, const NodePtr<T>& x) const;
};

// 1x1 -> BN -> relu -> 3x3 grouped -> BN -> relu -> 1x1 -> BN, SE gate on the
// branch, residual add (projected when shape changes), post-add relu.
template <typename T>
struct AggregatedResidualBlock {
  ConvLayer<T> conv_in;
  BatchNormLayer<T> bn_in;
  ConvLayer<T> conv_group;
  BatchNormLayer<T> bn_group;
  ConvLayer<T> conv_out;
  BatchNormLayer<T> bn_out;
  SEBlock<T> se;
  std::optional<ConvLayer<T>> proj;
  std::optional<BatchNormLayer<T>> proj_bn;

  NodePtr<T> forward(Tape<T>* tape, const NodePtr<T>& x, RunMode mode);
};

// Builds an SEBlock / residual block with He-initialized parameters and
// registers them (construction order is the checkpoint order).
template <typename T>
class ParamRegistry {
 public:
  explicit ParamRegistry(std::uint64_t seed) : rng_(seed) {}

  Parameter<T> create(const std::string& name, Tensor<T> init);
  Parameter<T> create_he(const std::string& name, std::vector<int> shape, int fan_in);

  std::vector<Parameter<T>>& params() { return params_; }
  std::mt19937_64& rng() { return rng_; }

 private:
  std::mt19937_64 rng_;
  std::vector<Parameter<T>> params_;
};

template <typename T>
SEBlock<T> make_se_block(ParamRegistry<T>& reg, const std::string& prefix, int channels, int r);

template <typename T>
AggregatedResidualBlock<T> make_residual_block(ParamRegistry<T>& reg, const std::string& prefix,
                                               const BlockConfig& cfg, const SEConfig& se);

// The classifier: stem conv/BN/relu, stages of SE residual blocks, global
// average pool, dense head.
template <typename T>
class Model {
 public:
  explicit Model(const NetworkConfig& cfg);

  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  // Logits [N, num_classes].
  NodePtr<T> forward(Tape<T>* tape, const NodePtr<T>& input, RunMode mode);

  std::vector<Parameter<T>>& parameters() { return params_; }
  const NetworkConfig& config() const { return cfg_; }
  std::int64_t parameter_count() const;
  void zero_grad();

  // Checkpoint directory: manifest.json plus one little-endian float32 blob
  // per tensor (parameters and batch-norm running statistics).
  void save(const std::filesystem::path& dir) const;
  void load_weights(const std::filesystem::path& dir);
  static NetworkConfig config_from_checkpoint(const std::filesystem::path& dir);

 private:
  struct NamedBuffer {
    std::string name;
    Tensor<T>* tensor;
  };
  std::vector<NamedBuffer> named_tensors();
  std::vector<NamedBuffer> named_tensors() const;

  NetworkConfig cfg_;
  std::vector<Parameter<T>> params_;
  ConvLayer<T> stem_;
  std::unique_ptr<BatchNormLayer<T>> stem_bn_;
  std::vector<AggregatedResidualBlock<T>> blocks_;
  DenseLayer<T> head_;
};

using ModelF = Model<float>;
using ModelD = Model<double>;

}  // namespace subloc
