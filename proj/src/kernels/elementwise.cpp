#include <algorithm>
#include <limits>

#include "dfx/kernels.hpp"
#include "dfx/wide.hpp"

namespace dfx {

namespace {

// Guard bits kept below the coarser operand's unit when aligning addends.
constexpr int kAddGuardBits = 24;

Fxp8 drop_exponent_if_zero(Fxp8 t) {
  if ((t.mantissas.data() == 0).all()) t.exponent.reset();
  return t;
}

void require_nchw(const Shape& s, const char* what) {
  if (s.size() != 4) throw DfxError(ErrorCode::kShapeMismatch, std::string(what) + " expects NCHW input");
}

}  // namespace

Fxp8 fxp_add(const Fxp8& a, const Fxp8& b, RoundingContext& ctx) {
  require_same_shape(a.shape(), b.shape(), "fxp_add");
  if (b.is_zero()) return a;
  if (a.is_zero()) return b;
  const int ua = a.unit_exponent(), ub = b.unit_exponent();
  const int unit = std::max(ua, ub) - kAddGuardBits;
  std::vector<Wide> sum(static_cast<std::size_t>(a.size()));
  for (Index i = 0; i < a.size(); ++i) {
    const std::int64_t x = detail::sticky_shift(a.mantissas[i], unit - ua);
    const std::int64_t y = detail::sticky_shift(b.mantissas[i], unit - ub);
    sum[static_cast<std::size_t>(i)] = Wide{x + y, unit};
  }
  return map_wide<std::int8_t>(a.shape(), sum, std::max(a.bit_width, b.bit_width), ctx);
}

Fxp8 fxp_relu(const Fxp8& x) {
  Fxp8 y = x;
  y.mantissas.data() = y.mantissas.data().max(std::int8_t{0});
  return drop_exponent_if_zero(std::move(y));
}

Fxp8 fxp_relu_backward(const Fxp8& grad, const Fxp8& forward_input) {
  require_same_shape(grad.shape(), forward_input.shape(), "fxp_relu_backward");
  Fxp8 g = grad;
  g.mantissas.data() = (forward_input.mantissas.data() > 0).select(g.mantissas.data(), std::int8_t{0});
  return drop_exponent_if_zero(std::move(g));
}

MaxPoolResult fxp_maxpool2d(const Fxp8& x, Index window) {
  require_nchw(x.shape(), "fxp_maxpool2d");
  const Index n = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
  const Index oh = h / window, ow = w / window;
  MaxPoolResult r{Fxp8::zeros({n, c, oh, ow}, x.bit_width), {}};
  r.y.exponent = x.exponent;
  r.argmax.resize(static_cast<std::size_t>(n * c * oh * ow));
  for (Index p = 0; p < n * c; ++p)
    for (Index oy = 0; oy < oh; ++oy)
      for (Index ox = 0; ox < ow; ++ox) {
        Index best = (p * h + oy * window) * w + ox * window;
        for (Index ky = 0; ky < window; ++ky)
          for (Index kx = 0; kx < window; ++kx) {
            const Index idx = (p * h + oy * window + ky) * w + ox * window + kx;
            if (x.mantissas[idx] > x.mantissas[best]) best = idx;
          }
        const Index out = (p * oh + oy) * ow + ox;
        r.y.mantissas[out] = x.mantissas[best];
        r.argmax[static_cast<std::size_t>(out)] = best;
      }
  r.y = drop_exponent_if_zero(std::move(r.y));
  return r;
}

Fxp8 fxp_maxpool2d_backward(const Fxp8& grad, const std::vector<Index>& argmax, const Shape& input_shape) {
  if (static_cast<Index>(argmax.size()) != grad.size())
    throw DfxError(ErrorCode::kCacheMismatch, "maxpool argmax does not match gradient");
  Fxp8 dx = Fxp8::zeros(input_shape, grad.bit_width);
  dx.exponent = grad.exponent;
  // Windows do not overlap, so each input receives at most one gradient.
  for (Index i = 0; i < grad.size(); ++i) dx.mantissas[argmax[static_cast<std::size_t>(i)]] = grad.mantissas[i];
  return dx;
}

Fxp8 fxp_avgpool2d(const Fxp8& x, Index window, RoundingContext& ctx) {
  require_nchw(x.shape(), "fxp_avgpool2d");
  const Index n = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
  const Index oh = h / window, ow = w / window;
  const Wide inv = reciprocal(window * window);
  const int unit = x.is_zero() ? 0 : x.unit_exponent();
  std::vector<Wide> out(static_cast<std::size_t>(n * c * oh * ow));
  for (Index p = 0; p < n * c; ++p)
    for (Index oy = 0; oy < oh; ++oy)
      for (Index ox = 0; ox < ow; ++ox) {
        std::int64_t s = 0;
        for (Index ky = 0; ky < window; ++ky)
          for (Index kx = 0; kx < window; ++kx) s += x.mantissas[(p * h + oy * window + ky) * w + ox * window + kx];
        out[static_cast<std::size_t>((p * oh + oy) * ow + ox)] = wide::mul(Wide{s, unit}, inv);
      }
  return map_wide<std::int8_t>({n, c, oh, ow}, out, x.bit_width, ctx);
}

Fxp8 fxp_avgpool2d_backward(const Fxp8& grad, Index window, const Shape& input_shape, RoundingContext& ctx) {
  require_nchw(input_shape, "fxp_avgpool2d_backward");
  const Index n = input_shape[0], c = input_shape[1], h = input_shape[2], w = input_shape[3];
  const Index oh = h / window, ow = w / window;
  if (grad.shape() != Shape{n, c, oh, ow}) throw DfxError(ErrorCode::kShapeMismatch, "avgpool gradient shape");
  const Wide inv = reciprocal(window * window);
  const int unit = grad.is_zero() ? 0 : grad.unit_exponent();
  std::vector<Wide> out(static_cast<std::size_t>(numel(input_shape)));
  for (Index p = 0; p < n * c; ++p)
    for (Index y = 0; y < oh * window; ++y)
      for (Index x = 0; x < ow * window; ++x) {
        const std::int64_t g = grad.mantissas[(p * oh + y / window) * ow + x / window];
        out[static_cast<std::size_t>((p * h + y) * w + x)] = wide::mul(Wide{g, unit}, inv);
      }
  return map_wide<std::int8_t>(input_shape, out, grad.bit_width, ctx);
}

}  // namespace dfx
