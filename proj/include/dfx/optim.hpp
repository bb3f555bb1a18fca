#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "dfx/numfmt.hpp"

namespace dfx {

struct SgdConfig {
  float lr = 0.1f;
  float momentum = 0.9f;
  float weight_decay = 1e-4f;
};

/// Integer SGD state: 16-bit master weights and momentum buffers, one shared
/// exponent per tensor, hyperparameters as exact fixed-point scalars.
struct OptState {
  std::vector<Fxp16> master;
  std::vector<Fxp16> velocity;
  Wide lr;
  Wide momentum;
  Wide weight_decay;
  std::uint64_t steps = 0;
};

/// Maps float weights onto 16-bit masters (one operation id per tensor) with
/// zero velocity.
OptState make_opt_state(const std::vector<FloatTensor>& weights, const SgdConfig& config, RoundingContext& ctx);

void set_learning_rate(OptState& state, float lr);

/// v <- m*v + g + wd*w; w <- w - lr*v. Products are exact mantissa products,
/// sums are aligned with sticky shifts, and both buffers are rounded into
/// their 16-bit grids with the context's mode. A buffer keeps its shared
/// exponent while its largest magnitude stays within [2^13, 2^15 - 1].
OptState sgd_step(OptState state, const std::vector<Fxp8>& grads, RoundingContext& ctx);

/// k-bit compute weights from the masters.
std::vector<Fxp8> quantize_weights(const OptState& state, int bit_width, RoundingContext& ctx);

/// base * 0.1^(number of drop epochs <= epoch).
float scheduled_lr(float base, std::span<const int> drop_epochs, int epoch);

/// Float SGD with the same update rule, for the reference arm.
struct FloatSgd {
  std::vector<FloatTensor> weights;
  std::vector<FloatTensor> velocity;
  SgdConfig config;

  FloatSgd(std::vector<FloatTensor> w, SgdConfig c);
  void step(const std::vector<FloatTensor>& grads);
};

}  // namespace dfx
