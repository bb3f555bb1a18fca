#include "dfx/rounding.hpp"

#include "dfx/error.hpp"

namespace dfx {

namespace {

constexpr std::uint32_t kPhiloxM0 = 0xD2511F53;
constexpr std::uint32_t kPhiloxM1 = 0xCD9E8D57;
constexpr std::uint32_t kPhiloxW0 = 0x9E3779B9;
constexpr std::uint32_t kPhiloxW1 = 0xBB67AE85;

inline void mulhilo(std::uint32_t a, std::uint32_t b, std::uint32_t& lo, std::uint32_t& hi) {
  const std::uint64_t p = static_cast<std::uint64_t>(a) * b;
  lo = static_cast<std::uint32_t>(p);
  hi = static_cast<std::uint32_t>(p >> 32);
}

}  // namespace

Philox4x32::Counter Philox4x32::generate(Counter ctr, Key key) {
  for (int round = 0; round < 10; ++round) {
    std::uint32_t lo0, hi0, lo1, hi1;
    mulhilo(kPhiloxM0, ctr[0], lo0, hi0);
    mulhilo(kPhiloxM1, ctr[2], lo1, hi1);
    ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
    key[0] += kPhiloxW0;
    key[1] += kPhiloxW1;
  }
  return ctr;
}

std::uint64_t RoundingContext::draw(std::uint64_t seed, std::uint64_t op, std::uint64_t index) {
  const Philox4x32::Counter ctr = {static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32),
                                   static_cast<std::uint32_t>(op), static_cast<std::uint32_t>(op >> 32)};
  const Philox4x32::Key key = {static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)};
  const auto out = Philox4x32::generate(ctr, key);
  return (static_cast<std::uint64_t>(out[1]) << 32) | out[0];
}

std::string_view to_string(RoundingMode mode) {
  return mode == RoundingMode::kNearest ? "nearest" : "stochastic";
}

RoundingMode parse_rounding_mode(std::string_view text) {
  if (text == "nearest") return RoundingMode::kNearest;
  if (text == "stochastic") return RoundingMode::kStochastic;
  throw DfxError(ErrorCode::kConfigInvalid, "unknown rounding mode '" + std::string(text) + "'");
}

}  // namespace dfx
