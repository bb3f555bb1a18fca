#include <algorithm>
#include <cmath>

#include "dfx/theory.hpp"

namespace dfx {

UniformQuant uniform_quant_baseline(std::span<const float> x) {
  UniformQuant out;
  for (float v : x) {
    if (!std::isfinite(v)) throw DfxError(ErrorCode::kNonFiniteInput, "uniform quantization of a non-finite value");
    out.scale = std::max(out.scale, std::abs(v));
  }
  out.q.resize(x.size());
  if (out.scale == 0.0f) return out;
  const double s = out.scale;
  for (std::size_t i = 0; i < x.size(); ++i)
    out.q[i] = static_cast<std::int8_t>(std::lround(127.0 * std::clamp(static_cast<double>(x[i]), -s, s) / s));
  return out;
}

std::vector<float> uniform_dequant(const UniformQuant& u) {
  std::vector<float> out(u.q.size());
  for (std::size_t i = 0; i < u.q.size(); ++i)
    out[i] = static_cast<float>(static_cast<double>(u.q[i]) * u.scale / 127.0);
  return out;
}

}  // namespace dfx
