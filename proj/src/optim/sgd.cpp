#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "dfx/optim.hpp"
#include "dfx/wide.hpp"

namespace dfx {

namespace {

constexpr int kMaxMaster = (1 << (kMasterBitWidth - 1)) - 1;

// Shared exponent to reuse for a buffer, or nullopt to re-derive it. The old
// exponent is kept when no element would saturate and the largest magnitude
// stays at or above 2^(k-3).
std::optional<int> hysteresis_exponent(const std::optional<int>& current, std::span<const Normalized> values) {
  if (!current) return std::nullopt;
  const int e = *current;
  constexpr std::uint32_t ceiling = static_cast<std::uint32_t>(kMaxMaster) << (24 - (kMasterBitWidth - 1));
  int top = std::numeric_limits<int>::min();
  for (const Normalized& n : values) {
    if (n.mantissa24 == 0) continue;
    if (n.exponent > e || (n.exponent == e && n.mantissa24 > ceiling)) return std::nullopt;
    top = std::max(top, n.exponent);
  }
  if (top < e - 1) return std::nullopt;
  return e;
}

Fxp16 round_buffer(const Shape& shape, const std::vector<Wide>& values, const std::optional<int>& current,
                   RoundingContext& ctx) {
  const std::vector<Normalized> n = normalize(values, ctx);
  Fxp16 out = map_normalized<std::int16_t>(shape, n, kMasterBitWidth, ctx, hysteresis_exponent(current, n));
  if ((out.mantissas.data().cast<int>().abs() > kMaxMaster).any())
    throw DfxError(ErrorCode::kExponentOverflow, "master mantissa out of range");
  return out;
}

Wide fixed_scalar(float v, const char* what) {
  if (!std::isfinite(v) || v < 0.0f) throw DfxError(ErrorCode::kConfigInvalid, std::string(what) + " must be finite and >= 0");
  return wide_from_float(v);
}

}  // namespace

OptState make_opt_state(const std::vector<FloatTensor>& weights, const SgdConfig& config, RoundingContext& ctx) {
  OptState s;
  for (const FloatTensor& w : weights) {
    s.master.push_back(map_to_fixed<std::int16_t>(w, kMasterBitWidth, ctx));
    s.velocity.push_back(Fxp16::zeros(w.shape(), kMasterBitWidth));
  }
  s.lr = fixed_scalar(config.lr, "learning rate");
  s.momentum = fixed_scalar(config.momentum, "momentum");
  s.weight_decay = fixed_scalar(config.weight_decay, "weight decay");
  return s;
}

void set_learning_rate(OptState& state, float lr) { state.lr = fixed_scalar(lr, "learning rate"); }

OptState sgd_step(OptState state, const std::vector<Fxp8>& grads, RoundingContext& ctx) {
  if (grads.size() != state.master.size())
    throw DfxError(ErrorCode::kShapeMismatch, "expected " + std::to_string(state.master.size()) + " gradients, got " +
                                                  std::to_string(grads.size()));
  for (std::size_t t = 0; t < grads.size(); ++t) {
    Fxp16& w = state.master[t];
    Fxp16& v = state.velocity[t];
    const Fxp8& g = grads[t];
    require_same_shape(g.shape(), w.shape(), "sgd_step gradient");
    const Index n = w.size();

    std::vector<Wide> vn(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) {
      Wide acc{0, 0};
      if (!v.is_zero()) acc = wide::mul(state.momentum, Wide{v.mantissas[i], v.unit_exponent()});
      if (!g.is_zero()) acc = wide::add(acc, Wide{g.mantissas[i], g.unit_exponent()});
      if (!w.is_zero()) acc = wide::add(acc, wide::mul(state.weight_decay, Wide{w.mantissas[i], w.unit_exponent()}));
      vn[static_cast<std::size_t>(i)] = acc;
    }
    v = round_buffer(w.shape(), vn, v.exponent, ctx);

    std::vector<Wide> wn(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) {
      Wide acc = w.is_zero() ? Wide{0, 0} : Wide{w.mantissas[i], w.unit_exponent()};
      if (!v.is_zero()) acc = wide::add(acc, wide::negate(wide::mul(state.lr, Wide{v.mantissas[i], v.unit_exponent()})));
      wn[static_cast<std::size_t>(i)] = acc;
    }
    w = round_buffer(w.shape(), wn, w.exponent, ctx);
  }
  ++state.steps;
  return state;
}

std::vector<Fxp8> quantize_weights(const OptState& state, int bit_width, RoundingContext& ctx) {
  check_bit_width(bit_width);
  std::vector<Fxp8> out;
  out.reserve(state.master.size());
  for (const Fxp16& m : state.master) out.push_back(requantize<std::int8_t>(m, bit_width, ctx));
  return out;
}

float scheduled_lr(float base, std::span<const int> drop_epochs, int epoch) {
  float lr = base;
  for (int d : drop_epochs)
    if (epoch >= d) lr *= 0.1f;
  return lr;
}

FloatSgd::FloatSgd(std::vector<FloatTensor> w, SgdConfig c) : weights(std::move(w)), config(c) {
  for (const FloatTensor& t : weights) velocity.emplace_back(t.shape());
}

void FloatSgd::step(const std::vector<FloatTensor>& grads) {
  if (grads.size() != weights.size()) throw DfxError(ErrorCode::kShapeMismatch, "gradient count mismatch");
  for (std::size_t t = 0; t < weights.size(); ++t) {
    require_same_shape(grads[t].shape(), weights[t].shape(), "float sgd gradient");
    auto& v = velocity[t].data();
    auto& w = weights[t].data();
    v = config.momentum * v + grads[t].data() + config.weight_decay * w;
    w -= config.lr * v;
  }
}

}  // namespace dfx
