#include <cmath>
#include <random>

#include "dfx/theory.hpp"

namespace dfx {

BiasRow measure_rounding_bias(std::uint32_t m24, int shift, int keep_bits, Index n_trials, std::uint64_t seed,
                              std::uint64_t op) {
  BiasRow row;
  row.m24 = m24;
  row.shift = shift;
  row.keep_bits = keep_bits;
  row.exact = std::ldexp(static_cast<double>(m24), keep_bits - 24 - shift);
  std::uint64_t sum = 0;
  for (Index t = 0; t < n_trials; ++t)
    sum += detail::round_aligned(m24, shift, keep_bits, RoundingMode::kStochastic,
                                 RoundingContext::draw(seed, op, static_cast<std::uint64_t>(t)));
  const double n = static_cast<double>(n_trials);
  row.mean = static_cast<double>(sum) / n;
  const double p = row.exact - std::floor(row.exact);
  row.sigma = std::sqrt(p * (1.0 - p) / n);
  const double diff = row.mean - row.exact;
  if (row.sigma > 0.0) {
    row.z = diff / row.sigma;
    row.flagged = std::abs(row.z) > 4.0;
  } else {
    row.flagged = diff != 0.0;
  }
  return row;
}

RoundingBiasReport rounding_bias_suite(Index n_mantissas, Index n_trials, std::uint64_t seed) {
  if (n_trials < 10000) throw DfxError(ErrorCode::kConfigInvalid, "rounding bias needs at least 10^4 trials");
  std::mt19937_64 gen(seed);
  std::uniform_int_distribution<std::uint32_t> mant(1u << 23, (1u << 24) - 1);
  std::uniform_int_distribution<int> bits(kMinBitWidth, kMaxBitWidth), shifts(0, 16);
  RoundingBiasReport report;
  report.trials = n_trials;
  for (Index i = 0; i < n_mantissas; ++i) {
    const std::uint32_t m = mant(gen);
    const int k = bits(gen), s = shifts(gen);
    report.rows.push_back(measure_rounding_bias(m, s, k - 1, n_trials, seed, static_cast<std::uint64_t>(i)));
    const BiasRow& r = report.rows.back();
    report.flagged += r.flagged ? 1 : 0;
    report.max_abs_z = std::max(report.max_abs_z, std::abs(r.z));
  }
  return report;
}

}  // namespace dfx
