#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "dfx/rounding.hpp"
#include "dfx/tensor.hpp"

namespace dfx {

inline constexpr int kMinBitWidth = 4;
inline constexpr int kMaxBitWidth = 8;
/// Mantissa width of optimizer master weights and momentum buffers.
inline constexpr int kMasterBitWidth = 16;

/// Sign, unbiased exponent and 24-bit mantissa (hidden bit explicit) of an
/// IEEE-754 binary32 value.
struct UnpackedFloat {
  std::uint32_t sign = 0;
  std::int32_t exponent = 0;
  std::uint32_t mantissa24 = 0;

  friend bool operator==(const UnpackedFloat&, const UnpackedFloat&) = default;
};

UnpackedFloat unpack(float f);
/// Inverse of unpack for normal values, zero and exponent -126 subnormals.
float pack(const UnpackedFloat& u);

/// Dynamic fixed-point tensor: one shared exponent, signed integer mantissas.
/// Element i represents mantissa[i] * 2^(exponent - (bit_width - 2)).
/// An all-zero tensor carries no exponent.
template <typename Mantissa>
struct FxpTensor {
  Tensor<Mantissa> mantissas;
  int bit_width = 8;
  std::optional<int> exponent;

  const Shape& shape() const { return mantissas.shape(); }
  Index size() const { return mantissas.size(); }
  bool is_zero() const { return !exponent.has_value(); }
  int max_mantissa() const { return (1 << (bit_width - 1)) - 1; }
  /// Exponent of one mantissa unit (requires a non-zero tensor).
  int unit_exponent() const { return *exponent - (bit_width - 2); }

  static FxpTensor zeros(Shape shape, int bit_width) {
    return FxpTensor{Tensor<Mantissa>(std::move(shape)), bit_width, std::nullopt};
  }
  FxpTensor reshaped(Shape shape) const { return FxpTensor{mantissas.reshaped(std::move(shape)), bit_width, exponent}; }
};

using Fxp8 = FxpTensor<std::int8_t>;
using Fxp16 = FxpTensor<std::int16_t>;

/// Integer accumulator tensor; element i represents values[i] * 2^scale_exponent.
struct AccTensor {
  Tensor<std::int32_t> values;
  int scale_exponent = 0;

  const Shape& shape() const { return values.shape(); }
  Index size() const { return values.size(); }
};

/// Exact binary value mant * 2^exp with a 64-bit signed mantissa. The
/// intermediate format for integer element-wise arithmetic.
struct Wide {
  std::int64_t mant = 0;
  int exp = 0;
};

/// Post-alignment element: unbiased exponent of the leading bit and a 24-bit
/// mantissa with the leading bit at position 23 (zero when mantissa24 == 0).
struct Normalized {
  bool negative = false;
  int exponent = 0;
  std::uint32_t mantissa24 = 0;
};

void check_bit_width(int bit_width, int max_width = kMaxBitWidth);

/// Max unbiased exponent over non-zero elements; nullopt if all are zero.
std::optional<int> shared_exponent(std::span<const float> values);
inline std::optional<int> shared_exponent(const FloatTensor& t) {
  return shared_exponent(std::span<const float>(t.data().data(), static_cast<std::size_t>(t.size())));
}

/// Rounds a 24-bit mantissa to its top `keep_bits` bits: hi + (draw < lo),
/// where lo is the discarded (24 - keep_bits)-bit remainder and draw is a
/// uniform integer of the same width. hi + 1 may reach 2^keep_bits; the
/// caller saturates.
std::uint32_t stochastic_round(std::uint32_t m24, int keep_bits, std::uint32_t draw);

/// Float -> dynamic fixed point: align every mantissa to the shared exponent,
/// then round to (k-1) magnitude bits. Claims one operation id from ctx.
template <typename Mantissa>
FxpTensor<Mantissa> map_to_fixed(const FloatTensor& t, int bit_width, RoundingContext& ctx);

/// Fixed point -> float via leading-zero normalization. Exact for k <= 16.
template <typename Mantissa>
FloatTensor inverse_map(const FxpTensor<Mantissa>& t);

/// Accumulator -> float; mantissas wider than 24 bits are rounded per
/// ctx.mode(). Claims one operation id.
FloatTensor inverse_map(const AccTensor& acc, RoundingContext& ctx);

/// Rounds wide values to 24 significant bits and normalizes them. Exponents
/// below -126 flush to zero, above 127 throw ExponentOverflow. Claims one
/// operation id.
std::vector<Normalized> normalize(std::span<const Wide> values, RoundingContext& ctx);

/// Aligns normalized elements to a shared exponent and rounds to k-bit
/// mantissas. With `exponent` unset the max element exponent is used; a
/// forced exponent must be >= every element exponent. Claims one operation id.
template <typename Mantissa>
FxpTensor<Mantissa> map_normalized(Shape shape, std::span<const Normalized> values, int bit_width,
                                   RoundingContext& ctx, std::optional<int> exponent = std::nullopt);

/// normalize followed by map_normalized.
template <typename Mantissa>
FxpTensor<Mantissa> map_wide(Shape shape, std::span<const Wide> values, int bit_width, RoundingContext& ctx);

/// Accumulator -> k-bit tensor without a float round trip. Bit-identical to
/// map_to_fixed(inverse_map(acc, ctx), k, ctx) for the same context state.
template <typename Mantissa>
FxpTensor<Mantissa> renormalize(const AccTensor& acc, int bit_width, RoundingContext& ctx);

/// Re-maps a fixed-point tensor to another bit width.
template <typename Out, typename In>
FxpTensor<Out> requantize(const FxpTensor<In>& t, int bit_width, RoundingContext& ctx);

/// Element values as Wide (mant, unit exponent).
template <typename Mantissa>
std::vector<Wide> to_wide(const FxpTensor<Mantissa>& t);

/// Real value of one mantissa of t, in double precision.
template <typename Mantissa>
double value_at(const FxpTensor<Mantissa>& t, Index i) {
  if (t.is_zero()) return 0.0;
  return std::ldexp(static_cast<double>(t.mantissas[i]), t.unit_exponent());
}

/// Exact float -> Wide conversion.
Wide wide_from_float(float f);

/// Real value of a Wide in double precision.
inline double to_double(const Wide& w) { return std::ldexp(static_cast<double>(w.mant), w.exp); }

namespace detail {

/// Core alignment-and-round step shared by every mapping path: shifts the
/// mantissa right by `shift` (keeping a sticky bit), keeps `keep_bits`
/// magnitude bits and rounds the remainder. Result may equal 2^keep_bits.
std::uint64_t round_aligned(std::uint32_t m24, int shift, int keep_bits, RoundingMode mode, std::uint64_t draw);

/// Shift right with a sticky bit on the magnitude (arithmetic on sign-magnitude);
/// non-positive shifts are exact left shifts.
std::int64_t sticky_shift(std::int64_t v, int shift);

}  // namespace detail

}  // namespace dfx
