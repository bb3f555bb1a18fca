#pragma once

#include <doctest.h>

#include <filesystem>
#include <initializer_list>
#include <optional>
#include <random>
#include <string>

#include "dfx/numfmt.hpp"

namespace dfx::test {

inline std::filesystem::path data_dir() { return std::filesystem::path(DFX_TEST_DATA) / "v1"; }

/// Fresh empty directory under the build tree's temp area.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("dfx_unit_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline Fxp8 fxp8(Shape shape, std::initializer_list<std::int8_t> m, std::optional<int> exponent, int k = 8) {
  return Fxp8{Tensor<std::int8_t>::from(std::move(shape), m), k, exponent};
}

inline FloatTensor gaussian_tensor(Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> nd(0.0, scale);
  FloatTensor t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<float>(nd(rng));
  return t;
}

/// Random k-bit tensor with mantissas over the full range and a fixed exponent.
inline Fxp8 random_fxp8(Shape shape, int k, int exponent, std::mt19937_64& rng) {
  const int hi = (1 << (k - 1)) - 1;
  std::uniform_int_distribution<int> u(-hi, hi);
  Fxp8 t = Fxp8::zeros(std::move(shape), k);
  for (Index i = 0; i < t.size(); ++i) t.mantissas[i] = static_cast<std::int8_t>(u(rng));
  t.exponent = exponent;
  return t;
}

/// Dequantized value of every element in double precision.
template <typename Mantissa>
std::vector<double> values(const FxpTensor<Mantissa>& t) {
  std::vector<double> out(static_cast<std::size_t>(t.size()));
  for (Index i = 0; i < t.size(); ++i) out[static_cast<std::size_t>(i)] = value_at(t, i);
  return out;
}

#define CHECK_THROWS_CODE(expr, expected_code)                     \
  do {                                                             \
    bool dfx_thrown_ = false;                                      \
    try {                                                          \
      (void)(expr);                                                \
    } catch (const ::dfx::DfxError& dfx_err_) {                    \
      dfx_thrown_ = true;                                          \
      CHECK_MESSAGE(dfx_err_.code() == (expected_code), dfx_err_.what()); \
    }                                                              \
    CHECK_MESSAGE(dfx_thrown_, "expected DfxError from " #expr);   \
  } while (0)

}  // namespace dfx::test
