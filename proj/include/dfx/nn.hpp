#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dfx/kernels.hpp"
#include "dfx/numfmt.hpp"

namespace dfx {

// ---------------------------------------------------------------------------
// Model description
// ---------------------------------------------------------------------------

enum class LayerKind { kLinear, kConv2d, kBatchNorm, kLayerNorm, kReLU, kMaxPool, kAvgPool, kFlatten, kResidual };

std::string to_string(LayerKind kind);

struct LayerSpec {
  LayerKind kind = LayerKind::kReLU;
  Index in = 0;   // linear in-features, conv in-channels
  Index out = 0;  // linear out-features, conv out-channels
  Index kernel = 3;
  Index stride = 1;
  Index padding = 1;
  Index window = 2;             // pooling
  std::vector<LayerSpec> body;  // residual: y = x + body(x)

  static LayerSpec linear(Index in, Index out);
  static LayerSpec conv2d(Index in, Index out, Index kernel = 3, Index stride = 1, Index padding = 1);
  static LayerSpec batchnorm();
  static LayerSpec layernorm();
  static LayerSpec relu();
  static LayerSpec maxpool(Index window = 2);
  static LayerSpec avgpool(Index window = 2);
  static LayerSpec flatten();
  static LayerSpec residual(std::vector<LayerSpec> body);
};

struct ModelConfig {
  Shape input_shape;  // per sample, e.g. {784} or {1,28,28}
  std::vector<LayerSpec> layers;
  int bit_width = 8;
  RoundingMode forward_mode = RoundingMode::kStochastic;
  RoundingMode backward_mode = RoundingMode::kStochastic;
  std::uint64_t seed = 0;

  /// Checks k and that every layer's shape chains from the input; returns the
  /// per-sample output shape.
  Shape validate() const;
};

ModelConfig mlp_preset(Index inputs = 784, Index hidden = 256, Index classes = 10);
/// conv3x3(8)-bn-relu-maxpool, conv3x3(16)-bn-relu-maxpool, linear.
ModelConfig cnn_preset(Index channels = 1, Index height = 28, Index width = 28, Index classes = 10);

struct ParamSpec {
  enum class Init { kFanIn, kZeros, kOnes };
  std::string name;
  Shape shape;
  Init init = Init::kZeros;
  Index fan_in = 1;
};

/// Parameters in traversal order. Linear: W [in,out], b [out]. Conv: W
/// [O,C,KH,KW], b [O]. Norms: gamma, beta over the normalized features.
std::vector<ParamSpec> parameter_specs(const ModelConfig& config);

/// Fan-in uniform weights U(-1/sqrt(fan_in), 1/sqrt(fan_in)), zero biases,
/// unit gammas. Deterministic in seed.
std::vector<FloatTensor> init_parameters(const ModelConfig& config, std::uint64_t seed);

/// Number of batch-norm layers (each owns one running-statistics slot).
Index count_batchnorms(const ModelConfig& config);

/// Running batch-norm statistics, one entry per batch-norm layer.
struct NormStats {
  struct Channel {
    std::vector<float> mean;
    std::vector<float> var;
  };
  std::vector<Channel> layers;
  float momentum = 0.1f;
};

NormStats make_norm_stats(const ModelConfig& config);

enum class Phase { kTrain, kEval };

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

template <typename T>
struct NodeGrads {
  std::vector<T> inputs;                         // one per node input, same order
  std::vector<std::pair<std::size_t, T>> params;  // (parameter index, gradient)
};

template <typename T>
struct TapeNode {
  std::string op;
  std::vector<int> inputs;
  T value;  // forward output, kept for inspection
  std::function<NodeGrads<T>(const T& grad, RoundingContext& ctx)> backward;  // empty for leaves
};

/// Append-only record of a forward pass. Nodes are stored in topological
/// order, so a reverse sweep visits each node once after all its consumers.
template <typename T>
class Tape {
 public:
  int push(std::string op, std::vector<int> inputs, T value,
           std::function<NodeGrads<T>(const T&, RoundingContext&)> backward = {}) {
    const int id = static_cast<int>(nodes_.size());
    for (int in : inputs)
      if (in < 0 || in >= id) throw DfxError(ErrorCode::kShapeMismatch, "tape input must precede its consumer");
    nodes_.push_back(TapeNode<T>{std::move(op), std::move(inputs), std::move(value), std::move(backward)});
    return id;
  }

  const TapeNode<T>& node(int id) const { return nodes_.at(static_cast<std::size_t>(id)); }
  int size() const { return static_cast<int>(nodes_.size()); }
  int output() const { return size() - 1; }

  /// Reverse sweep from `from` with upstream gradient `grad`. `accumulate`
  /// merges gradients reaching a node along several paths. Returns one
  /// gradient per parameter (nullopt if none reached it).
  std::vector<std::optional<T>> backward(
      int from, T grad, std::size_t n_params, RoundingContext& ctx,
      const std::function<T(const T&, const T&, RoundingContext&)>& accumulate) const {
    std::vector<std::optional<T>> grads(nodes_.size());
    std::vector<std::optional<T>> param_grads(n_params);
    grads.at(static_cast<std::size_t>(from)) = std::move(grad);
    for (int i = from; i >= 0; --i) {
      auto& g = grads[static_cast<std::size_t>(i)];
      const TapeNode<T>& n = nodes_[static_cast<std::size_t>(i)];
      if (!g || !n.backward) continue;
      NodeGrads<T> ng = n.backward(*g, ctx);
      for (std::size_t j = 0; j < n.inputs.size(); ++j) {
        auto& slot = grads[static_cast<std::size_t>(n.inputs[j])];
        slot = slot ? accumulate(*slot, ng.inputs[j], ctx) : std::move(ng.inputs[j]);
      }
      for (auto& [p, pg] : ng.params) {
        auto& slot = param_grads.at(p);
        slot = slot ? accumulate(*slot, pg, ctx) : std::move(pg);
      }
      g.reset();
    }
    return param_grads;
  }

 private:
  std::vector<TapeNode<T>> nodes_;
};

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

template <typename T>
struct ForwardPass {
  FloatTensor logits;
  Tape<T> tape;
};

/// Integer forward: the batch is mapped to k-bit fixed point once, every layer
/// runs on integer kernels, and logits are inverse-mapped for the loss head.
/// Uses config.forward_mode for every rounding.
ForwardPass<Fxp8> forward(const ModelConfig& config, const std::vector<Fxp8>& params, const FloatTensor& batch,
                          RoundingContext& ctx, Phase phase = Phase::kTrain, NormStats* stats = nullptr);

/// Float reference forward over the same architecture.
ForwardPass<FloatTensor> forward(const ModelConfig& config, const std::vector<FloatTensor>& params,
                                 const FloatTensor& batch, Phase phase = Phase::kTrain, NormStats* stats = nullptr);

struct SoftmaxLoss {
  double loss = 0.0;
  FloatTensor grad;  // (p - y) / B
  Index correct = 0;
};

/// Mean softmax cross-entropy in float with its logits gradient.
SoftmaxLoss softmax_cross_entropy(const FloatTensor& logits, std::span<const int> labels);

struct LossAndGrad {
  double loss = 0.0;
  Fxp8 dlogits;
  Index correct = 0;
};

/// Float loss head; the gradient is mapped to k-bit fixed point with the
/// context's rounding mode before entering the integer backward pass.
LossAndGrad loss_and_grad(const FloatTensor& logits, std::span<const int> labels, int bit_width,
                          RoundingContext& ctx);

/// Integer backward with config.backward_mode. Unreached parameters get zero
/// gradients.
std::vector<Fxp8> backward(const ModelConfig& config, const Tape<Fxp8>& tape, const std::vector<Fxp8>& params,
                           const Fxp8& dlogits, RoundingContext& ctx);

std::vector<FloatTensor> backward(const Tape<FloatTensor>& tape, const std::vector<FloatTensor>& params,
                                  const FloatTensor& dlogits);

template <typename T>
struct StepResult {
  double loss = 0.0;
  Index correct = 0;
  std::vector<T> grads;
};

/// forward + loss_and_grad + backward on the integer arm. The context mode is
/// switched per pass and restored afterwards.
StepResult<Fxp8> integer_step(const ModelConfig& config, const std::vector<Fxp8>& params, const FloatTensor& batch,
                              std::span<const int> labels, RoundingContext& ctx, NormStats* stats = nullptr);

/// Same step in pure float arithmetic.
StepResult<FloatTensor> float_reference_step(const ModelConfig& config, const std::vector<FloatTensor>& params,
                                             const FloatTensor& batch, std::span<const int> labels,
                                             NormStats* stats = nullptr);

}  // namespace dfx
