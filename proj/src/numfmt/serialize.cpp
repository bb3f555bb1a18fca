#include "dfx/serialize.hpp"

#include <array>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>

namespace dfx {

namespace {

template <typename T>
void put_le(std::ostream& os, T value) {
  using U = std::make_unsigned_t<T>;
  auto u = static_cast<U>(value);
  std::array<char, sizeof(T)> bytes;
  for (std::size_t i = 0; i < sizeof(T); ++i) bytes[i] = static_cast<char>((u >> (8 * i)) & 0xFFu);
  os.write(bytes.data(), bytes.size());
}

template <typename T>
T get_le(std::istream& is) {
  std::array<unsigned char, sizeof(T)> bytes;
  is.read(reinterpret_cast<char*>(bytes.data()), bytes.size());
  if (!is) throw DfxError(ErrorCode::kMalformedFile, "truncated DFXT stream");
  std::make_unsigned_t<T> u = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) u |= static_cast<std::make_unsigned_t<T>>(bytes[i]) << (8 * i);
  return static_cast<T>(u);
}

}  // namespace

template <typename Mantissa>
void write_dfxt(std::ostream& os, const FxpTensor<Mantissa>& t) {
  os.write("DFXT", 4);
  put_le<std::uint16_t>(os, kDfxtVersion);
  put_le<std::uint8_t>(os, static_cast<std::uint8_t>(t.bit_width));
  put_le<std::uint8_t>(os, static_cast<std::uint8_t>(t.shape().size()));
  for (Index d : t.shape()) put_le<std::uint32_t>(os, static_cast<std::uint32_t>(d));
  put_le<std::int16_t>(os, t.exponent ? static_cast<std::int16_t>(*t.exponent) : kNoExponent);
  for (Index i = 0; i < t.size(); ++i) {
    if (t.bit_width <= 8)
      put_le<std::int8_t>(os, static_cast<std::int8_t>(t.mantissas[i]));
    else
      put_le<std::int16_t>(os, static_cast<std::int16_t>(t.mantissas[i]));
  }
}

template <typename Mantissa>
FxpTensor<Mantissa> read_dfxt(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "DFXT", 4) != 0) throw DfxError(ErrorCode::kMalformedFile, "bad DFXT magic");
  const auto version = get_le<std::uint16_t>(is);
  if (version != kDfxtVersion)
    throw DfxError(ErrorCode::kMalformedFile, "unsupported DFXT version " + std::to_string(version));
  const int k = get_le<std::uint8_t>(is);
  const int rank = get_le<std::uint8_t>(is);
  check_bit_width(k, 8 * static_cast<int>(sizeof(Mantissa)));
  Shape shape(static_cast<std::size_t>(rank));
  for (auto& d : shape) d = get_le<std::uint32_t>(is);
  const auto e = get_le<std::int16_t>(is);
  FxpTensor<Mantissa> t = FxpTensor<Mantissa>::zeros(shape, k);
  if (e != kNoExponent) t.exponent = e;
  for (Index i = 0; i < t.size(); ++i) {
    const int m = k <= 8 ? get_le<std::int8_t>(is) : get_le<std::int16_t>(is);
    if (m > t.max_mantissa() || m < -t.max_mantissa())
      throw DfxError(ErrorCode::kMalformedFile, "mantissa outside the k-bit range");
    t.mantissas[i] = static_cast<Mantissa>(m);
  }
  return t;
}

template <typename Mantissa>
void save_dfxt(const std::filesystem::path& path, const FxpTensor<Mantissa>& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DfxError(ErrorCode::kMalformedFile, "cannot open " + path.string() + " for writing");
  write_dfxt(os, t);
}

template <typename Mantissa>
FxpTensor<Mantissa> load_dfxt(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DfxError(ErrorCode::kMalformedFile, "cannot open " + path.string());
  return read_dfxt<Mantissa>(is);
}

template void write_dfxt<std::int8_t>(std::ostream&, const Fxp8&);
template void write_dfxt<std::int16_t>(std::ostream&, const Fxp16&);
template Fxp8 read_dfxt<std::int8_t>(std::istream&);
template Fxp16 read_dfxt<std::int16_t>(std::istream&);
template void save_dfxt<std::int8_t>(const std::filesystem::path&, const Fxp8&);
template void save_dfxt<std::int16_t>(const std::filesystem::path&, const Fxp16&);
template Fxp8 load_dfxt<std::int8_t>(const std::filesystem::path&);
template Fxp16 load_dfxt<std::int16_t>(const std::filesystem::path&);

std::vector<RoundingGolden> read_rounding_golden(std::istream& is) {
  std::vector<RoundingGolden> out;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    RoundingGolden g;
    ls >> std::hex >> g.m24 >> std::dec >> g.keep_bits >> std::hex >> g.draw >> g.expected;
    if (!ls) throw DfxError(ErrorCode::kMalformedFile, "golden line " + std::to_string(lineno) + " is malformed");
    out.push_back(g);
  }
  return out;
}

void write_rounding_golden(std::ostream& os, const std::vector<RoundingGolden>& cases) {
  for (const auto& g : cases) {
    os << std::hex << std::setw(6) << std::setfill('0') << g.m24 << ' ' << std::dec << g.keep_bits << ' '
       << std::hex << std::setw(6) << std::setfill('0') << g.draw << ' ' << std::setw(3) << std::setfill('0')
       << g.expected << '\n';
  }
  os << std::dec;
}

}  // namespace dfx
