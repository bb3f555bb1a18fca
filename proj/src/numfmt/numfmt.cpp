#include "dfx/numfmt.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <limits>
#include <string>

namespace dfx {

namespace {

constexpr int kMinExponent = -126;
constexpr int kMaxExponent = 127;

inline std::uint64_t low_mask(int bits) {
  return bits >= 64 ? ~std::uint64_t{0} : ((std::uint64_t{1} << bits) - 1);
}

inline std::uint64_t magnitude(std::int64_t v) {
  return v < 0 ? std::uint64_t{0} - static_cast<std::uint64_t>(v) : static_cast<std::uint64_t>(v);
}

// Rounds `mag` (bit length > 24) to 24 significant bits.
Normalized round_to_24(bool negative, int exp, std::uint64_t mag, RoundingMode mode, std::uint64_t draw) {
  const int bitlen = 64 - std::countl_zero(mag);
  int exponent = exp + bitlen - 1;
  std::uint64_t m;
  if (bitlen > 24) {
    const int s = bitlen - 24;
    const std::uint64_t lo = mag & low_mask(s);
    m = mag >> s;
    bool up;
    if (mode == RoundingMode::kStochastic) {
      up = (draw & low_mask(s)) < lo;
    } else {
      const std::uint64_t half = std::uint64_t{1} << (s - 1);
      up = lo > half || (lo == half && (m & 1));
    }
    m += up ? 1 : 0;
    if (m == (std::uint64_t{1} << 24)) {
      m >>= 1;
      ++exponent;
    }
  } else {
    m = mag << (24 - bitlen);
  }
  return Normalized{negative, exponent, static_cast<std::uint32_t>(m)};
}

std::vector<Normalized> normalize_impl(std::span<const Wide> values, RoundingMode mode, const RoundingContext& ctx,
                                       std::uint64_t op) {
  std::vector<Normalized> out(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const Wide& w = values[i];
    if (w.mant == 0) continue;
    const std::uint64_t mag = magnitude(w.mant);
    const std::uint64_t draw = mode == RoundingMode::kStochastic ? ctx.draw(op, i) : 0;
    Normalized n = round_to_24(w.mant < 0, w.exp, mag, mode, draw);
    if (n.exponent > kMaxExponent)
      throw DfxError(ErrorCode::kExponentOverflow,
                     "normalized exponent " + std::to_string(n.exponent) + " exceeds 127");
    if (n.exponent < kMinExponent) continue;  // flush to zero
    out[i] = n;
  }
  return out;
}

}  // namespace

void check_bit_width(int bit_width, int max_width) {
  if (bit_width < kMinBitWidth || bit_width > max_width)
    throw DfxError(ErrorCode::kInvalidBitWidth,
                   "bit width " + std::to_string(bit_width) + " outside [4, " + std::to_string(max_width) + "]");
}

UnpackedFloat unpack(float f) {
  std::uint32_t bits;
  std::memcpy(&bits, &f, sizeof bits);
  const std::uint32_t biased = (bits >> 23) & 0xFFu;
  const std::uint32_t frac = bits & 0x7FFFFFu;
  if (biased == 0xFFu) throw DfxError(ErrorCode::kNonFiniteInput, "NaN or Inf in tensor");
  UnpackedFloat u;
  u.sign = bits >> 31;
  if (biased == 0) {
    u.exponent = kMinExponent;
    u.mantissa24 = frac;
  } else {
    u.exponent = static_cast<std::int32_t>(biased) - 127;
    u.mantissa24 = frac | (1u << 23);
  }
  return u;
}

float pack(const UnpackedFloat& u) {
  std::uint32_t bits = u.sign << 31;
  if (u.mantissa24 != 0) {
    if (u.mantissa24 < (1u << 23)) {
      if (u.exponent != kMinExponent)
        throw DfxError(ErrorCode::kExponentOverflow, "unnormalized mantissa with exponent above -126");
      bits |= u.mantissa24;
    } else {
      if (u.exponent > kMaxExponent || u.exponent < kMinExponent || u.mantissa24 >= (1u << 24))
        throw DfxError(ErrorCode::kExponentOverflow, "value outside binary32 normal range");
      bits |= static_cast<std::uint32_t>(u.exponent + 127) << 23;
      bits |= u.mantissa24 & 0x7FFFFFu;
    }
  }
  float f;
  std::memcpy(&f, &bits, sizeof f);
  return f;
}

std::optional<int> shared_exponent(std::span<const float> values) {
  std::optional<int> e;
  for (float f : values) {
    const UnpackedFloat u = unpack(f);
    if (u.mantissa24 == 0) continue;
    e = e ? std::max(*e, u.exponent) : u.exponent;
  }
  return e;
}

std::uint32_t stochastic_round(std::uint32_t m24, int keep_bits, std::uint32_t draw) {
  const int drop = 24 - keep_bits;
  const std::uint32_t lo = m24 & static_cast<std::uint32_t>(low_mask(drop));
  const std::uint32_t hi = (m24 & 0xFFFFFFu) >> drop;
  return hi + (draw < lo ? 1u : 0u);
}

namespace detail {

std::uint64_t round_aligned(std::uint32_t m24, int shift, int keep_bits, RoundingMode mode, std::uint64_t draw) {
  // m24 occupies bits [40, 64); everything below is guard/sticky space.
  std::uint64_t x = static_cast<std::uint64_t>(m24) << 40;
  if (shift >= 64) {
    x = x != 0 ? 1 : 0;
  } else if (shift > 0) {
    const bool sticky = (x & low_mask(shift)) != 0;
    x = (x >> shift) | (sticky ? 1 : 0);
  }
  const int drop = 64 - keep_bits;
  const std::uint64_t hi = x >> drop;
  const std::uint64_t lo = x & low_mask(drop);
  bool up;
  if (mode == RoundingMode::kStochastic) {
    up = (draw & low_mask(drop)) < lo;
  } else {
    const std::uint64_t half = std::uint64_t{1} << (drop - 1);
    up = lo > half || (lo == half && (hi & 1));
  }
  return hi + (up ? 1 : 0);
}

std::int64_t sticky_shift(std::int64_t v, int shift) {
  if (shift <= 0) return v * (std::int64_t{1} << -shift);
  const std::uint64_t mag = magnitude(v);
  std::uint64_t r;
  if (shift >= 63) {
    r = mag != 0 ? 1 : 0;
  } else {
    r = (mag >> shift) | ((mag & low_mask(shift)) != 0 ? 1 : 0);
  }
  const auto s = static_cast<std::int64_t>(r);
  return v < 0 ? -s : s;
}

}  // namespace detail

std::vector<Normalized> normalize(std::span<const Wide> values, RoundingContext& ctx) {
  const std::uint64_t op = ctx.next_op();
  return normalize_impl(values, ctx.mode(), ctx, op);
}

template <typename Mantissa>
FxpTensor<Mantissa> map_normalized(Shape shape, std::span<const Normalized> values, int bit_width,
                                   RoundingContext& ctx, std::optional<int> exponent) {
  check_bit_width(bit_width, 8 * static_cast<int>(sizeof(Mantissa)));
  if (static_cast<Index>(values.size()) != numel(shape))
    throw DfxError(ErrorCode::kShapeMismatch, "value count does not match shape " + shape_string(shape));
  const std::uint64_t op = ctx.next_op();
  const RoundingMode mode = ctx.mode();

  std::optional<int> e_max;
  for (const Normalized& n : values) {
    if (n.mantissa24 == 0) continue;
    e_max = e_max ? std::max(*e_max, n.exponent) : n.exponent;
  }
  FxpTensor<Mantissa> out = FxpTensor<Mantissa>::zeros(std::move(shape), bit_width);
  if (!e_max) return out;
  if (exponent) {
    if (*exponent < *e_max)
      throw DfxError(ErrorCode::kExponentOverflow, "element exponent exceeds the forced shared exponent");
    e_max = exponent;
  }
  out.exponent = e_max;

  const int keep_bits = bit_width - 1;
  const std::uint64_t max_mag = (std::uint64_t{1} << keep_bits) - 1;
  auto& mant = out.mantissas.data();
  for (std::size_t i = 0; i < values.size(); ++i) {
    const Normalized& n = values[i];
    if (n.mantissa24 == 0) continue;
    const std::uint64_t draw = mode == RoundingMode::kStochastic ? ctx.draw(op, i) : 0;
    std::uint64_t mag = detail::round_aligned(n.mantissa24, *e_max - n.exponent, keep_bits, mode, draw);
    mag = std::min(mag, max_mag);
    const auto m = static_cast<Mantissa>(mag);
    mant[static_cast<Index>(i)] = n.negative ? static_cast<Mantissa>(-m) : m;
  }
  return out;
}

template <typename Mantissa>
FxpTensor<Mantissa> map_to_fixed(const FloatTensor& t, int bit_width, RoundingContext& ctx) {
  check_bit_width(bit_width, 8 * static_cast<int>(sizeof(Mantissa)));
  std::vector<Normalized> values(static_cast<std::size_t>(t.size()));
  for (Index i = 0; i < t.size(); ++i) {
    const UnpackedFloat u = unpack(t[i]);
    values[static_cast<std::size_t>(i)] = Normalized{u.sign != 0, u.exponent, u.mantissa24};
  }
  return map_normalized<Mantissa>(t.shape(), values, bit_width, ctx);
}

template <typename Mantissa>
std::vector<Wide> to_wide(const FxpTensor<Mantissa>& t) {
  std::vector<Wide> out(static_cast<std::size_t>(t.size()));
  if (t.is_zero()) return out;
  const int unit = t.unit_exponent();
  for (Index i = 0; i < t.size(); ++i) out[static_cast<std::size_t>(i)] = Wide{t.mantissas[i], unit};
  return out;
}

template <typename Mantissa>
FloatTensor inverse_map(const FxpTensor<Mantissa>& t) {
  FloatTensor out(t.shape());
  if (t.is_zero()) return out;
  // At most 16 significant bits: normalization never rounds.
  const RoundingContext unused;
  const auto wide = to_wide(t);
  const auto norm = normalize_impl(wide, RoundingMode::kNearest, unused, 0);
  for (std::size_t i = 0; i < norm.size(); ++i) {
    const Normalized& n = norm[i];
    out[static_cast<Index>(i)] = pack(UnpackedFloat{n.negative ? 1u : 0u, n.exponent, n.mantissa24});
  }
  return out;
}

FloatTensor inverse_map(const AccTensor& acc, RoundingContext& ctx) {
  std::vector<Wide> wide(static_cast<std::size_t>(acc.size()));
  for (Index i = 0; i < acc.size(); ++i) wide[static_cast<std::size_t>(i)] = Wide{acc.values[i], acc.scale_exponent};
  const auto norm = normalize(wide, ctx);
  FloatTensor out(acc.shape());
  for (std::size_t i = 0; i < norm.size(); ++i) {
    const Normalized& n = norm[i];
    out[static_cast<Index>(i)] = pack(UnpackedFloat{n.negative ? 1u : 0u, n.exponent, n.mantissa24});
  }
  return out;
}

template <typename Mantissa>
FxpTensor<Mantissa> map_wide(Shape shape, std::span<const Wide> values, int bit_width, RoundingContext& ctx) {
  const auto norm = normalize(values, ctx);
  return map_normalized<Mantissa>(std::move(shape), norm, bit_width, ctx);
}

template <typename Mantissa>
FxpTensor<Mantissa> renormalize(const AccTensor& acc, int bit_width, RoundingContext& ctx) {
  std::vector<Wide> wide(static_cast<std::size_t>(acc.size()));
  for (Index i = 0; i < acc.size(); ++i) wide[static_cast<std::size_t>(i)] = Wide{acc.values[i], acc.scale_exponent};
  return map_wide<Mantissa>(acc.shape(), wide, bit_width, ctx);
}

template <typename Out, typename In>
FxpTensor<Out> requantize(const FxpTensor<In>& t, int bit_width, RoundingContext& ctx) {
  return map_wide<Out>(t.shape(), to_wide(t), bit_width, ctx);
}

#define DFX_INSTANTIATE(M)                                                                                    \
  template FxpTensor<M> map_normalized<M>(Shape, std::span<const Normalized>, int, RoundingContext&,          \
                                          std::optional<int>);                                                \
  template FxpTensor<M> map_to_fixed<M>(const FloatTensor&, int, RoundingContext&);                           \
  template std::vector<Wide> to_wide<M>(const FxpTensor<M>&);                                                 \
  template FloatTensor inverse_map<M>(const FxpTensor<M>&);                                                   \
  template FxpTensor<M> map_wide<M>(Shape, std::span<const Wide>, int, RoundingContext&);                     \
  template FxpTensor<M> renormalize<M>(const AccTensor&, int, RoundingContext&);

DFX_INSTANTIATE(std::int8_t)
DFX_INSTANTIATE(std::int16_t)
#undef DFX_INSTANTIATE

template Fxp8 requantize<std::int8_t, std::int16_t>(const Fxp16&, int, RoundingContext&);
template Fxp16 requantize<std::int16_t, std::int8_t>(const Fxp8&, int, RoundingContext&);
template Fxp8 requantize<std::int8_t, std::int8_t>(const Fxp8&, int, RoundingContext&);
template Fxp16 requantize<std::int16_t, std::int16_t>(const Fxp16&, int, RoundingContext&);

Wide wide_from_float(float f) {
  const UnpackedFloat u = unpack(f);
  const auto m = static_cast<std::int64_t>(u.mantissa24);
  return Wide{u.sign ? -m : m, u.exponent - 23};
}

}  // namespace dfx
