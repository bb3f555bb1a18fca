#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>

#include "dfx/numfmt.hpp"

// Integer-only scalar arithmetic on Wide values. Narrowing uses sticky
// right shifts, so the only inexactness is a sub-LSB truncation at 31 or 62
// significant bits; final rounding happens when results are mapped back to
// a k-bit tensor.
namespace dfx::wide {

inline int bit_length(std::int64_t v) {
  const std::uint64_t mag = v < 0 ? std::uint64_t{0} - static_cast<std::uint64_t>(v) : static_cast<std::uint64_t>(v);
  return 64 - std::countl_zero(mag);
}

/// Reduces the mantissa to at most `bits` significant bits.
inline Wide narrow(Wide w, int bits) {
  const int excess = bit_length(w.mant) - bits;
  if (excess <= 0) return w;
  return Wide{detail::sticky_shift(w.mant, excess), w.exp + excess};
}

/// Exact for 31-bit operands; wider ones are narrowed first.
inline Wide mul(Wide a, Wide b) {
  a = narrow(a, 31);
  b = narrow(b, 31);
  return Wide{a.mant * b.mant, a.exp + b.exp};
}

inline Wide add(Wide a, Wide b) {
  if (a.mant == 0) return b;
  if (b.mant == 0) return a;
  // Common exponent: the finer unit, raised until both terms fit 62 bits.
  int e = std::min(a.exp, b.exp);
  e = std::max(e, a.exp + bit_length(a.mant) - 62);
  e = std::max(e, b.exp + bit_length(b.mant) - 62);
  return Wide{detail::sticky_shift(a.mant, e - a.exp) + detail::sticky_shift(b.mant, e - b.exp), e};
}

inline Wide negate(Wide a) { return Wide{-a.mant, a.exp}; }

/// Re-expresses w at unit exponent `unit` (sticky when coarser).
inline std::int64_t at_unit(Wide w, int unit) { return detail::sticky_shift(w.mant, unit - w.exp); }

}  // namespace dfx::wide
