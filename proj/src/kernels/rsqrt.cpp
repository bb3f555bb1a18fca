#include <array>
#include <cmath>
#include <string>

#include "dfx/kernels.hpp"
#include "dfx/wide.hpp"

namespace dfx {

namespace {

constexpr int kFrac = 30;
constexpr std::int64_t kOne = std::int64_t{1} << kFrac;
constexpr int kSeedEntries = 64;

// 1/sqrt of each bucket's left edge over [1, 4), Q30.
const std::array<std::int64_t, kSeedEntries>& seed_table() {
  static const auto table = [] {
    std::array<std::int64_t, kSeedEntries> t{};
    for (int i = 0; i < kSeedEntries; ++i)
      t[static_cast<std::size_t>(i)] = std::llround(std::ldexp(1.0 / std::sqrt(1.0 + 3.0 * i / kSeedEntries), kFrac));
    return t;
  }();
  return table;
}

}  // namespace

Wide fxp_rsqrt(std::int64_t mantissa, int exponent) {
  if (mantissa <= 0)
    throw DfxError(ErrorCode::kNonPositiveInput, "rsqrt of non-positive value " + std::to_string(mantissa));
  // v = x * 2^e2 with x in [1, 4) (Q30) and e2 even.
  const int b = wide::bit_length(mantissa);
  int e2 = exponent + b - 1;
  std::int64_t x = detail::sticky_shift(mantissa, b - 1 - kFrac);
  if (e2 & 1) {
    x <<= 1;
    e2 -= 1;
  }
  const auto idx = static_cast<std::size_t>(((x - kOne) * kSeedEntries) / (3 * kOne));
  std::int64_t y = seed_table()[idx];
  for (int it = 0; it < 3; ++it) {
    const std::int64_t y2 = (y * y) >> kFrac;
    const std::int64_t vy2 = (x * y2) >> kFrac;
    y = (y * (3 * kOne - vy2)) >> (kFrac + 1);
  }
  return Wide{y, -kFrac - e2 / 2};
}

Wide reciprocal(Index n) {
  if (n <= 0) throw DfxError(ErrorCode::kNonPositiveInput, "reciprocal of non-positive count");
  const int b = wide::bit_length(n);
  const std::int64_t num = std::int64_t{1} << (29 + b);
  return Wide{(num + n / 2) / n, -(29 + b)};
}

}  // namespace dfx
