#include <algorithm>
#include <string>

#include "dfx/kernels.hpp"
#include "dfx/wide.hpp"

namespace dfx {

namespace {

// Guard bits below the input unit when centering on the (finer) mean.
constexpr int kCenterGuardBits = 16;

Wide narrow128(unsigned __int128 v, int exp) {
  int bits = 0;
  for (unsigned __int128 t = v; t != 0; t >>= 1) ++bits;
  int shift = std::max(0, bits - 62);
  unsigned __int128 r = v >> shift;
  if (shift > 0 && (v & ((static_cast<unsigned __int128>(1) << shift) - 1)) != 0) r |= 1;
  return Wide{static_cast<std::int64_t>(r), exp + shift};
}

inline Index idx(std::size_t i) { return static_cast<Index>(i); }

struct Applied {
  Fxp8 y;
  NormCache cache;
};

// y = gamma * (x - mean) * inv_std + beta, given per-group statistics.
Applied apply_stats(const Fxp8& x, const NormLayout& layout, const Fxp8& mean, const std::vector<Wide>& var,
                       const NormParams& p, RoundingContext& ctx) {
  const int k = x.bit_width;
  const Index n = x.size();
  const int unit = x.is_zero() ? 0 : x.unit_exponent();
  const int mean_unit = mean.is_zero() ? unit : mean.unit_exponent();
  const int uc = std::max(std::min(unit, mean_unit), unit - kCenterGuardBits);

  std::vector<std::int64_t> centered(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    const std::int64_t xm = detail::sticky_shift(x.mantissas[i], uc - unit);
    const std::int64_t mm = mean.is_zero() ? 0 : detail::sticky_shift(mean.mantissas[layout.group_of(i)], uc - mean_unit);
    centered[static_cast<std::size_t>(i)] = xm - mm;
  }

  std::vector<Wide> inv_std(static_cast<std::size_t>(layout.groups));
  for (Index g = 0; g < layout.groups; ++g) {
    const Wide v = wide::add(var[static_cast<std::size_t>(g)], p.eps);
    if (v.mant <= 0) throw DfxError(ErrorCode::kNonPositiveInput, "variance + eps is not positive");
    inv_std[static_cast<std::size_t>(g)] = fxp_rsqrt(v.mant, v.exp);
  }

  std::vector<Wide> xn(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i)
    xn[static_cast<std::size_t>(i)] =
        wide::mul(Wide{centered[static_cast<std::size_t>(i)], uc}, inv_std[static_cast<std::size_t>(layout.group_of(i))]);
  Fxp8 xnorm = map_wide<std::int8_t>(x.shape(), xn, k, ctx);

  std::vector<Wide> yw(static_cast<std::size_t>(n));
  const bool has_scale = !p.gamma.is_zero() && !xnorm.is_zero();
  const int scale_unit = has_scale ? p.gamma.unit_exponent() + xnorm.unit_exponent() : 0;
  for (Index i = 0; i < n; ++i) {
    const Index q = layout.param_of(i);
    Wide v{0, 0};
    if (has_scale) v = Wide{std::int64_t{p.gamma.mantissas[q]} * xnorm.mantissas[i], scale_unit};
    if (!p.beta.is_zero()) v = wide::add(v, Wide{p.beta.mantissas[q], p.beta.unit_exponent()});
    yw[static_cast<std::size_t>(i)] = v;
  }
  Applied out;
  out.y = map_wide<std::int8_t>(x.shape(), yw, k, ctx);
  out.cache = NormCache{layout, std::move(xnorm), std::move(inv_std)};
  return out;
}

void check_params(const NormLayout& layout, const NormParams& p) {
  if (p.gamma.size() != layout.params || p.beta.size() != layout.params)
    throw DfxError(ErrorCode::kShapeMismatch, "normalization parameters do not match the feature dimension");
  if (p.eps.mant <= 0) throw DfxError(ErrorCode::kNonPositiveInput, "eps must be positive");
}

}  // namespace

NormLayout NormLayout::batch(const Shape& shape) {
  NormLayout l;
  l.kind = Kind::kBatch;
  l.shape = shape;
  if (shape.size() == 2) {
    l.groups = shape[1];
    l.group_size = shape[0];
  } else if (shape.size() == 4) {
    l.groups = shape[1];
    l.inner = shape[2] * shape[3];
    l.group_size = shape[0] * l.inner;
  } else {
    throw DfxError(ErrorCode::kShapeMismatch, "batch-norm expects [N,C] or [N,C,H,W], got " + shape_string(shape));
  }
  l.params = l.groups;
  return l;
}

NormLayout NormLayout::layer(const Shape& shape) {
  if (shape.size() < 2) throw DfxError(ErrorCode::kShapeMismatch, "layer-norm expects [N, features...]");
  NormLayout l;
  l.kind = Kind::kLayer;
  l.shape = shape;
  l.groups = shape[0];
  l.group_size = numel(shape) / shape[0];
  l.params = l.group_size;
  return l;
}

Index NormLayout::group_of(Index i) const {
  return kind == Kind::kBatch ? (i / inner) % groups : i / group_size;
}

Index NormLayout::param_of(Index i) const {
  return kind == Kind::kBatch ? (i / inner) % groups : i % group_size;
}

NormForward fxp_norm_forward(const Fxp8& x, const NormLayout& layout, const NormParams& p, RoundingContext& ctx) {
  if (layout.group_size < 2)
    throw DfxError(ErrorCode::kDegenerateBatch,
                   "normalization needs at least 2 elements per group, got " + std::to_string(layout.group_size));
  check_params(layout, p);
  const int k = x.bit_width;
  const int unit = x.is_zero() ? 0 : x.unit_exponent();
  const Wide inv_n = reciprocal(layout.group_size);

  std::vector<std::int64_t> sums(static_cast<std::size_t>(layout.groups), 0);
  for (Index i = 0; i < x.size(); ++i) sums[static_cast<std::size_t>(layout.group_of(i))] += x.mantissas[i];
  std::vector<Wide> mean_w(sums.size());
  for (std::size_t g = 0; g < sums.size(); ++g) mean_w[g] = wide::mul(Wide{sums[g], unit}, inv_n);
  Fxp8 mean = map_wide<std::int8_t>({layout.groups}, mean_w, k, ctx);

  // Sum of squared deviations from the k-bit mean, exact in 128 bits.
  const int mean_unit = mean.is_zero() ? unit : mean.unit_exponent();
  const int uc = std::max(std::min(unit, mean_unit), unit - kCenterGuardBits);
  std::vector<unsigned __int128> sq(sums.size(), 0);
  for (Index i = 0; i < x.size(); ++i) {
    const Index g = layout.group_of(i);
    const std::int64_t xm = detail::sticky_shift(x.mantissas[i], uc - unit);
    const std::int64_t mm = mean.is_zero() ? 0 : detail::sticky_shift(mean.mantissas[g], uc - mean_unit);
    const std::int64_t d = xm - mm;
    sq[static_cast<std::size_t>(g)] += static_cast<unsigned __int128>(static_cast<__int128>(d) * d);
  }
  std::vector<Wide> var(sums.size());
  for (std::size_t g = 0; g < sums.size(); ++g) var[g] = wide::mul(narrow128(sq[g], 2 * uc), inv_n);

  Applied applied = apply_stats(x, layout, mean, var, p, ctx);
  return NormForward{std::move(applied.y), std::move(applied.cache), std::move(mean), std::move(var)};
}

NormGrads fxp_norm_backward(const Fxp8& grad, const NormCache& cache, const NormParams& p, RoundingContext& ctx) {
  const NormLayout& layout = cache.layout;
  if (grad.shape() != layout.shape || cache.xnorm.shape() != layout.shape ||
      static_cast<Index>(cache.inv_std.size()) != layout.groups)
    throw DfxError(ErrorCode::kCacheMismatch,
                   "gradient " + shape_string(grad.shape()) + " does not match cached forward " +
                       shape_string(layout.shape));
  check_params(layout, p);
  const int k = grad.bit_width;
  const Fxp8& xn = cache.xnorm;
  NormGrads out{Fxp8::zeros(layout.shape, k), Fxp8::zeros(p.gamma.shape(), p.gamma.bit_width),
                Fxp8::zeros(p.beta.shape(), p.beta.bit_width)};
  if (grad.is_zero()) return out;

  const int ug = grad.unit_exponent();
  const int uxn = xn.is_zero() ? 0 : xn.unit_exponent();
  const Index n = grad.size();

  std::vector<std::int64_t> sb(static_cast<std::size_t>(layout.params), 0), sgx(sb.size(), 0);
  for (Index i = 0; i < n; ++i) {
    const auto q = static_cast<std::size_t>(layout.param_of(i));
    sb[q] += grad.mantissas[i];
    sgx[q] += std::int64_t{grad.mantissas[i]} * xn.mantissas[i];
  }
  std::vector<Wide> db(sb.size()), dg(sb.size());
  for (std::size_t q = 0; q < sb.size(); ++q) {
    db[q] = Wide{sb[q], ug};
    dg[q] = Wide{sgx[q], ug + uxn};
  }
  out.dgamma = map_wide<std::int8_t>(p.gamma.shape(), dg, p.gamma.bit_width, ctx);
  out.dbeta = map_wide<std::int8_t>(p.beta.shape(), db, p.beta.bit_width, ctx);
  if (p.gamma.is_zero()) return out;

  // h = gamma * g; dx = inv_std * (h - mean(h) - xnorm * mean(h * xnorm)).
  const int uh = p.gamma.unit_exponent() + ug;
  const Wide inv_n = reciprocal(layout.group_size);
  std::vector<std::int64_t> h(static_cast<std::size_t>(n));
  std::vector<std::int64_t> sh(static_cast<std::size_t>(layout.groups), 0), shx(sh.size(), 0);
  for (Index i = 0; i < n; ++i) {
    const auto g = static_cast<std::size_t>(layout.group_of(i));
    const std::int64_t hv = std::int64_t{p.gamma.mantissas[layout.param_of(i)]} * grad.mantissas[i];
    h[static_cast<std::size_t>(i)] = hv;
    sh[g] += hv;
    shx[g] += hv * xn.mantissas[i];
  }
  std::vector<Wide> mean_h(sh.size()), mean_hx(sh.size());
  for (std::size_t g = 0; g < sh.size(); ++g) {
    mean_h[g] = wide::mul(Wide{sh[g], uh}, inv_n);
    mean_hx[g] = wide::mul(Wide{shx[g], uh + uxn}, inv_n);
  }
  std::vector<Wide> dx(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    const auto g = static_cast<std::size_t>(layout.group_of(i));
    Wide t = wide::add(Wide{h[static_cast<std::size_t>(i)], uh}, wide::negate(mean_h[g]));
    if (!xn.is_zero()) t = wide::add(t, wide::negate(wide::mul(Wide{xn.mantissas[i], uxn}, mean_hx[g])));
    dx[static_cast<std::size_t>(i)] = wide::mul(t, cache.inv_std[g]);
  }
  out.dx = map_wide<std::int8_t>(layout.shape, dx, k, ctx);
  return out;
}

NormForward fxp_batchnorm_forward(const Fxp8& x, const NormParams& p, RoundingContext& ctx) {
  return fxp_norm_forward(x, NormLayout::batch(x.shape()), p, ctx);
}

NormGrads fxp_batchnorm_backward(const Fxp8& grad, const NormCache& cache, const NormParams& p,
                                 RoundingContext& ctx) {
  return fxp_norm_backward(grad, cache, p, ctx);
}

NormForward fxp_layernorm_forward(const Fxp8& x, const NormParams& p, RoundingContext& ctx) {
  return fxp_norm_forward(x, NormLayout::layer(x.shape()), p, ctx);
}

NormGrads fxp_layernorm_backward(const Fxp8& grad, const NormCache& cache, const NormParams& p,
                                 RoundingContext& ctx) {
  return fxp_norm_backward(grad, cache, p, ctx);
}

Fxp8 fxp_batchnorm_apply(const Fxp8& x, const Fxp8& mean, const std::vector<Wide>& var, const NormParams& p,
                         RoundingContext& ctx) {
  const NormLayout layout = NormLayout::batch(x.shape());
  check_params(layout, p);
  if (mean.size() != layout.groups || static_cast<Index>(var.size()) != layout.groups)
    throw DfxError(ErrorCode::kShapeMismatch, "running statistics do not match channel count");
  return apply_stats(x, layout, mean, var, p, ctx).y;
}

}  // namespace dfx
