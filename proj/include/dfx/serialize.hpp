#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <vector>

#include "dfx/numfmt.hpp"

namespace dfx {

/// DFXT little-endian layout:
///   "DFXT" | version u16 | k u8 | rank u8 | dims u32[rank] |
///   shared exponent i16 (-32768 = none) | mantissas
/// Mantissas are i8 for k <= 8 and i16 for wider (optimizer) tensors.
inline constexpr std::uint16_t kDfxtVersion = 1;
inline constexpr std::int16_t kNoExponent = -32768;

template <typename Mantissa>
void write_dfxt(std::ostream& os, const FxpTensor<Mantissa>& t);

template <typename Mantissa>
FxpTensor<Mantissa> read_dfxt(std::istream& is);

template <typename Mantissa>
void save_dfxt(const std::filesystem::path& path, const FxpTensor<Mantissa>& t);

template <typename Mantissa>
FxpTensor<Mantissa> load_dfxt(const std::filesystem::path& path);

/// One line of a rounding golden file: `m24_hex keep_bits draw_hex expected_hex`.
struct RoundingGolden {
  std::uint32_t m24 = 0;
  int keep_bits = 0;
  std::uint32_t draw = 0;
  std::uint32_t expected = 0;
};

std::vector<RoundingGolden> read_rounding_golden(std::istream& is);
void write_rounding_golden(std::ostream& os, const std::vector<RoundingGolden>& cases);

}  // namespace dfx
