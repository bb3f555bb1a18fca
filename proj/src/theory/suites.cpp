#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <random>
#include <sstream>

#include "dfx/app.hpp"
#include "dfx/kernels.hpp"
#include "dfx/optim.hpp"
#include "dfx/theory.hpp"

namespace dfx {

namespace {

std::string str(double v) { return fmt9(v); }

struct Checks {
  SuiteResult& r;
  void operator()(std::string name, bool ok, std::string detail = {}) {
    r.checks.push_back(SuiteCheck{std::move(name), ok, std::move(detail)});
  }
};

FloatTensor random_tensor(Shape shape, std::mt19937_64& gen, double scale = 1.0) {
  std::normal_distribution<double> normal(0.0, scale);
  FloatTensor t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<float>(normal(gen));
  return t;
}

// Rescales so max|x| = 1.5: the largest element sits on the k-bit grid
// (exponent 0) and no element can round into saturation.
FloatTensor clear_of_saturation(FloatTensor t) {
  Index at = 0;
  const float m = t.data().abs().maxCoeff(&at);
  t.data() = (t.data() * (1.5f / m)).cwiseMax(-1.5f).cwiseMin(1.5f);
  t[at] = std::copysign(1.5f, t[at]);
  return t;
}

// ---------------------------------------------------------------------------

void rounding_suite(Checks& check, const std::filesystem::path& out) {
  const RoundingBiasReport sweep = rounding_bias_suite(1000, 100000, 1);
  {
    std::ofstream os(out / "rounding_bias.csv");
    os << "m24,shift,keep_bits,exact,mean,sigma,z,flagged\n";
    for (const BiasRow& r : sweep.rows)
      os << r.m24 << ',' << r.shift << ',' << r.keep_bits << ',' << str(r.exact) << ',' << str(r.mean) << ','
         << str(r.sigma) << ',' << str(r.z) << ',' << (r.flagged ? 1 : 0) << "\n";
  }
  check("bias_sweep_within_4_sigma", sweep.flagged == 0,
        std::to_string(sweep.flagged) + " flagged of " + std::to_string(sweep.rows.size()) + "; max |z| " +
            str(sweep.max_abs_z));

  bool exact = true;
  for (int keep = 3; keep <= 7; ++keep) {
    const std::uint32_t m = 0xB40000u & ~((1u << (24 - keep)) - 1);
    exact = exact && measure_rounding_bias(m, 0, keep, 10000, 2, static_cast<std::uint64_t>(keep)).mean ==
                         std::ldexp(static_cast<double>(m), keep - 24);
  }
  check("on_grid_bias_zero", exact);

  const std::uint32_t m24 = 0x2CAAA0;  // 0.01011001010101010100000b
  const Index n = 1000000;
  Index up = 0;
  bool only_neighbours = true;
  for (Index t = 0; t < n; ++t) {
    const auto r = detail::round_aligned(m24, 0, 7, RoundingMode::kStochastic,
                                         RoundingContext::draw(3, 0, static_cast<std::uint64_t>(t)));
    only_neighbours = only_neighbours && (r == 22 || r == 23);
    up += r == 23 ? 1 : 0;
  }
  const double p = 43680.0 / 131072.0, phat = static_cast<double>(up) / static_cast<double>(n);
  const double sigma = std::sqrt(p * (1 - p) / static_cast<double>(n));
  check("worked_example_neighbours", only_neighbours, "outcomes restricted to 010110b and 010111b");
  check("worked_example_up_probability", std::abs(phat - p) <= 3 * sigma,
        "p_hat " + str(phat) + " vs " + str(p) + " (sigma " + str(sigma) + ")");

  const bool ties = detail::round_aligned(0x840000, 0, 5, RoundingMode::kNearest, 0) == 16 &&
                    detail::round_aligned(0x8C0000, 0, 5, RoundingMode::kNearest, 0) == 18 &&
                    detail::round_aligned(0x840001, 0, 5, RoundingMode::kNearest, 0) == 17;
  check("nearest_ties_to_even", ties);
}

void mapping_suite(Checks& check, const std::filesystem::path&) {
  {
    Fxp8 t = Fxp8::zeros({1}, 8);
    t.mantissas[0] = 20;  // 0.010100b at exponent 127
    t.exponent = 127;
    const UnpackedFloat u = unpack(inverse_map(t)[0]);
    check("inverse_map_worked_example", u.exponent == 125 && u.mantissa24 == 0xA00000,
          "exponent " + std::to_string(u.exponent) + ", mantissa 0x" + [&] {
            std::ostringstream os;
            os << std::hex << u.mantissa24;
            return os.str();
          }());
  }

  std::mt19937_64 gen(11);
  std::uniform_int_distribution<int> bits(kMinBitWidth, kMaxBitWidth), expo(-20, 20), size(1, 32);
  bool roundtrip = true;
  for (int trial = 0; trial < 2000 && roundtrip; ++trial) {
    const int k = bits(gen), e = expo(gen);
    const int max = (1 << (k - 1)) - 1;
    std::uniform_int_distribution<int> mant(-max, max);
    FloatTensor f({size(gen)});
    for (Index i = 0; i < f.size(); ++i) f[i] = std::ldexp(static_cast<float>(mant(gen)), e);
    for (RoundingMode mode : {RoundingMode::kStochastic, RoundingMode::kNearest}) {
      RoundingContext ctx(static_cast<std::uint64_t>(trial), mode);
      const FloatTensor back = inverse_map(map_to_fixed<std::int8_t>(f, k, ctx));
      roundtrip = roundtrip && (back.data() == f.data()).all();
    }
  }
  check("grid_exact_roundtrip", roundtrip, "2000 tensors, both modes");

  Index violations = 0, checked = 0;
  std::uniform_real_distribution<double> logscale(-10.0, 10.0);
  for (int trial = 0; trial < 100000; ++trial) {
    const int k = bits(gen);
    FloatTensor f = random_tensor({16}, gen, std::exp2(logscale(gen)));
    RoundingContext ctx(static_cast<std::uint64_t>(trial), RoundingMode::kNearest);
    const Fxp8 q = map_to_fixed<std::int8_t>(f, k, ctx);
    if (q.is_zero()) continue;
    const double bound = std::ldexp(1.0, *q.exponent - (k - 1));
    for (Index i = 0; i < f.size(); ++i) {
      if (std::abs(q.mantissas[i]) == q.max_mantissa()) continue;
      ++checked;
      if (std::abs(static_cast<double>(f[i]) - value_at(q, i)) > bound) ++violations;
    }
  }
  check("nearest_error_bound", violations == 0,
        std::to_string(violations) + " violations over " + std::to_string(checked) + " elements");
}

void gemm_suite(Checks& check, const std::filesystem::path&) {
  std::mt19937_64 gen(21);
  std::uniform_int_distribution<Index> dim(1, 64);
  std::uniform_int_distribution<int> bits(kMinBitWidth, kMaxBitWidth), expo(-8, 8);
  int mismatches = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const Index M = dim(gen), K = dim(gen), N = dim(gen);
    const int k = bits(gen);
    const int max = (1 << (k - 1)) - 1;
    std::uniform_int_distribution<int> mant(-max, max);
    Fxp8 a = Fxp8::zeros({M, K}, k), b = Fxp8::zeros({K, N}, k);
    for (Index i = 0; i < a.size(); ++i) a.mantissas[i] = static_cast<std::int8_t>(mant(gen));
    for (Index i = 0; i < b.size(); ++i) b.mantissas[i] = static_cast<std::int8_t>(mant(gen));
    a.exponent = expo(gen);
    b.exponent = expo(gen);
    const AccTensor c = fxp_gemm(a, b);
    bool ok = c.scale_exponent == a.unit_exponent() + b.unit_exponent();
    for (Index i = 0; i < M && ok; ++i)
      for (Index j = 0; j < N && ok; ++j) {
        std::int64_t ref = 0;
        for (Index t = 0; t < K; ++t) ref += std::int64_t{a.mantissas[i * K + t]} * b.mantissas[t * N + j];
        ok = c.values[i * N + j] == ref;
      }
    mismatches += ok ? 0 : 1;
  }
  check("gemm_bit_exact", mismatches == 0, std::to_string(mismatches) + " of 200 shapes differ");

  bool threw = false;
  try {
    check_accumulator_bound(max_inner_dimension(8) + 1, 127, 127);
  } catch (const DfxError& e) {
    threw = e.code() == ErrorCode::kAccumulatorOverflow;
  }
  check("accumulator_bound_enforced", threw);
}

void norm_suite(Checks& check, const std::filesystem::path& out) {
  constexpr Index N = 32, C = 4, kSeeds = 500;
  std::mt19937_64 gen(31);
  FloatTensor x = random_tensor({N, C}, gen);
  for (Index n = 0; n < N; ++n)
    for (Index c = 0; c < C; ++c) x[n * C + c] += static_cast<float>(c) - 1.5f;
  x = clear_of_saturation(x);

  const NormParams p{Fxp8::zeros({C}, 8), Fxp8::zeros({C}, 8)};
  Eigen::ArrayXd mu_sum = Eigen::ArrayXd::Zero(C), mu_sq = Eigen::ArrayXd::Zero(C);
  Eigen::ArrayXd var_sum = Eigen::ArrayXd::Zero(C), var_sq = Eigen::ArrayXd::Zero(C);
  int mean_unit = std::numeric_limits<int>::min();
  const int x_unit = -6;  // max|x| = 1.5 puts the shared exponent at 0
  for (Index s = 0; s < kSeeds; ++s) {
    RoundingContext ctx(static_cast<std::uint64_t>(s) + 1);
    const Fxp8 xq = map_to_fixed<std::int8_t>(x, 8, ctx);
    const NormForward f = fxp_batchnorm_forward(xq, p, ctx);
    if (!f.mean.is_zero()) mean_unit = std::max(mean_unit, f.mean.unit_exponent());
    for (Index c = 0; c < C; ++c) {
      const double m = value_at(f.mean, c), v = to_double(f.var[static_cast<std::size_t>(c)]);
      mu_sum[c] += m;
      mu_sq[c] += m * m;
      var_sum[c] += v;
      var_sq[c] += v * v;
    }
  }
  const double n = static_cast<double>(kSeeds);
  std::ofstream os(out / "norm_statistics.csv");
  os << "channel,mu,mu_hat_mean,mu_hat_se,var,var_hat_mean,var_hat_se,bias_bound\n";
  bool mean_ok = true, var_ok = true;
  // Rounding variance is at most ulp^2/4 per element.
  const double bound = (1.0 - 1.0 / N) * std::ldexp(1.0, 2 * x_unit) / 4.0 + std::ldexp(1.0, 2 * mean_unit) / 4.0;
  for (Index c = 0; c < C; ++c) {
    double mu = 0.0, var = 0.0;
    for (Index r = 0; r < N; ++r) mu += x[r * C + c] / static_cast<double>(N);
    for (Index r = 0; r < N; ++r) var += (x[r * C + c] - mu) * (x[r * C + c] - mu) / static_cast<double>(N);
    const double mm = mu_sum[c] / n, mse = std::sqrt(std::max(0.0, mu_sq[c] / n - mm * mm) / (n - 1));
    const double vm = var_sum[c] / n, vse = std::sqrt(std::max(0.0, var_sq[c] / n - vm * vm) / (n - 1));
    mean_ok = mean_ok && std::abs(mm - mu) <= 4 * mse + 1e-12;
    var_ok = var_ok && vm - var >= -4 * vse && vm - var <= bound + 4 * vse;
    os << c << ',' << str(mu) << ',' << str(mm) << ',' << str(mse) << ',' << str(var) << ',' << str(vm) << ','
       << str(vse) << ',' << str(bound) << "\n";
  }
  check("batch_mean_unbiased", mean_ok, "500 seeds, 4 sigma");
  check("batch_variance_bias_bounded", var_ok, "0 <= E[var_hat] - var <= " + str(bound) + " (4 SE slack)");
}

void sgd_suite(Checks& check, const std::filesystem::path& out) {
  constexpr Index n = 64, kSeeds = 10000;
  std::mt19937_64 gen(41);
  RoundingContext exact(0, RoundingMode::kNearest);
  const SgdConfig cfg{0.05f, 0.9f, 1e-4f};
  OptState base = make_opt_state({random_tensor({n}, gen)}, cfg, exact);
  base.velocity[0] = map_to_fixed<std::int16_t>(random_tensor({n}, gen, 0.5), kMasterBitWidth, exact);
  const Fxp8 g = map_to_fixed<std::int8_t>(random_tensor({n}, gen, 0.3), 8, exact);

  // Float update on the same grid values and the same float hyperparameters.
  Eigen::ArrayXd v_ref(n), w_ref(n);
  for (Index i = 0; i < n; ++i) {
    const double w = value_at(base.master[0], i), v = value_at(base.velocity[0], i), gi = value_at(g, i);
    v_ref[i] = static_cast<double>(cfg.momentum) * v + gi + static_cast<double>(cfg.weight_decay) * w;
    w_ref[i] = w - static_cast<double>(cfg.lr) * v_ref[i];
  }
  Eigen::ArrayXd ws = Eigen::ArrayXd::Zero(n), wq = ws, vs = ws, vq = ws;
  for (Index s = 0; s < kSeeds; ++s) {
    RoundingContext ctx(static_cast<std::uint64_t>(s) + 1);
    const OptState next = sgd_step(base, {g}, ctx);
    for (Index i = 0; i < n; ++i) {
      const double w = value_at(next.master[0], i), v = value_at(next.velocity[0], i);
      ws[i] += w;
      wq[i] += w * w;
      vs[i] += v;
      vq[i] += v * v;
    }
  }
  const double k = static_cast<double>(kSeeds);
  Index bad = 0;
  std::ofstream os(out / "sgd_unbiased.csv");
  os << "element,w_float,w_mean,w_se,v_float,v_mean,v_se\n";
  for (Index i = 0; i < n; ++i) {
    const double wm = ws[i] / k, wse = std::sqrt(std::max(0.0, wq[i] / k - wm * wm) / (k - 1));
    const double vm = vs[i] / k, vse = std::sqrt(std::max(0.0, vq[i] / k - vm * vm) / (k - 1));
    // A zero standard error means the update landed on the grid: require equality up to double rounding.
    const double wtol = 4 * wse + 1e-12 * std::abs(w_ref[i]), vtol = 4 * vse + 1e-12 * std::abs(v_ref[i]);
    if (std::abs(wm - w_ref[i]) > wtol || std::abs(vm - v_ref[i]) > vtol) ++bad;
    os << i << ',' << str(w_ref[i]) << ',' << str(wm) << ',' << str(wse) << ',' << str(v_ref[i]) << ',' << str(vm)
       << ',' << str(vse) << "\n";
  }
  check("sgd_step_unbiased", bad == 0, std::to_string(bad) + " of " + std::to_string(n) + " elements beyond 4 sigma");
}

void theorem1_suite(Checks& check, const std::filesystem::path& out) {
  const QuadraticProblem p = make_quadratic(ConvexProblemSpec{});
  const GradientNoise noise = measure_gradient_noise(p, 2000, 7);
  const double amax = max_learning_rate(p, noise);
  const std::vector<double> alphas{amax, amax / 2, amax / 4};
  const Theorem1Report rep = theorem1_experiment(p, noise, alphas, 2000, 64);

  {
    std::ofstream os(out / "theorem1_gaps.csv");
    os << "alpha,arm,gap,gap_stderr,bound,contraction,expected_contraction\n";
    for (const GapRow& r : rep.rows)
      os << str(r.alpha) << ',' << r.arm << ',' << str(r.gap) << ',' << str(r.gap_stderr) << ',' << str(r.bound) << ','
         << str(r.contraction) << ',' << str(r.expected_contraction) << "\n";
    std::ofstream ns(out / "theorem1_noise.txt");
    ns << "M = " << str(noise.M) << "\nM_V = " << str(noise.M_V) << "\nMq = " << str(noise.Mq)
       << "\nMq_V = " << str(noise.Mq_V) << "\nalpha_max = " << str(amax) << "\nc = " << str(p.spec.c)
       << "\nL = " << str(p.spec.L) << "\nloss_star = " << str(p.loss_star) << "\n";
  }

  auto row = [&](double a, const char* arm) -> const GapRow& {
    for (const GapRow& r : rep.rows)
      if (r.alpha == a && r.arm == arm) return r;
    throw DfxError(ErrorCode::kConfigInvalid, "missing gap row");
  };
  for (const GapRow& r : rep.rows) {
    const std::string tag = r.arm + "_alpha_" + str(r.alpha);
    check("gap_below_bound_" + tag, r.gap <= r.bound, "gap " + str(r.gap) + " bound " + str(r.bound));
    const double rel = std::abs(r.contraction - r.expected_contraction) / r.expected_contraction;
    check("contraction_" + tag, r.contraction > 0 && r.contraction < 1 && rel <= 0.15,
          "fitted " + str(r.contraction) + " vs 1 - alpha c = " + str(r.expected_contraction));
    // The gap is quadratic in the iterate error, so it decays at (1 - alpha c)^2.
    const double rate = 1.0 - r.contraction, expected_rate = 1.0 - r.expected_contraction * r.expected_contraction;
    check("gap_decay_rate_" + tag, std::abs(rate - expected_rate) <= 0.15 * expected_rate,
          "1 - fitted " + str(rate) + " vs 1 - (1 - alpha c)^2 = " + str(expected_rate));
  }
  for (const char* arm : {"fixed", "float"})
    for (std::size_t i = 0; i + 1 < alphas.size(); ++i) {
      const double ratio = row(alphas[i], arm).gap / row(alphas[i + 1], arm).gap;
      check(std::string("gap_ratio_") + arm + "_" + std::to_string(i), ratio >= 1.6 && ratio <= 2.4,
            "gap(alpha)/gap(alpha/2) = " + str(ratio));
    }
  for (double a : alphas) {
    const double excess = row(a, "fixed").gap - row(a, "float").gap;
    const double limit = a * p.spec.L * noise.Mq / (2 * p.spec.c);
    check("quantization_excess_alpha_" + str(a), excess <= 1.25 * limit,
          "excess " + str(excess) + " vs alpha L Mq / 2c = " + str(limit));
  }
  bool threw = false;
  try {
    const double too_big[] = {amax * 1.01};
    theorem1_experiment(p, noise, too_big, 1, 1);
  } catch (const DfxError& e) {
    threw = e.code() == ErrorCode::kLearningRateTooLarge;
  }
  check("learning_rate_limit_enforced", threw);
}

void variance_suite(Checks& check, const std::filesystem::path& out) {
  std::mt19937_64 gen(51);
  std::ofstream os(out / "variance_probe.csv");
  os << "instance,i,j,variance,variance_se,bound,bias\n";
  Index violations = 0;
  for (int inst = 0; inst < 20; ++inst) {
    const FloatTensor x = random_tensor({8, 8}, gen), g = random_tensor({8, 8}, gen);
    const NoiseStats s = gradient_variance_probe(x, g, 8, 1000, 1000 * static_cast<std::uint64_t>(inst) + 1);
    violations += s.violations;
    for (Index i = 0; i < 8; ++i)
      for (Index j = 0; j < 8; ++j)
        os << inst << ',' << i << ',' << j << ',' << str(s.variance(i, j)) << ',' << str(s.variance_se(i, j)) << ','
           << str(s.bound(i, j)) << ','
           << str(s.bias(i, j)) << "\n";
  }
  check("variance_bound_all_elements", violations == 0, std::to_string(violations) + " significant exceedances (4 SE) over 20 instances");

  FloatTensor grid({4, 4});
  for (Index i = 0; i < grid.size(); ++i) grid[i] = static_cast<float>(i % 7) * 0.25f - 0.5f;
  const NoiseStats z = gradient_variance_probe(grid, grid, 8, 100, 1, RoundingMode::kNearest);
  check("nearest_grid_zero_variance", z.variance.isZero(0.0) && z.sigma2_x == 0.0 && z.sigma2_g == 0.0);

  // Single inner term: V = vx g^2 + x^2 vg + vx vg with per-element rounding variances.
  const FloatTensor x1 = clear_of_saturation(random_tensor({1, 8}, gen)), g1 = clear_of_saturation(random_tensor({1, 8}, gen));
  const Index seeds = 4000;
  const NoiseStats k1 = gradient_variance_probe(x1, g1, 8, seeds, 77);
  auto rvar = [](double v) {
    const double u = std::ldexp(1.0, -6), f = v / u - std::floor(v / u);
    return f * (1 - f) * u * u;
  };
  double worst = 0.0;
  for (Index i = 0; i < 8; ++i)
    for (Index j = 0; j < 8; ++j) {
      const double xv = x1[i], gv = g1[j], vx = rvar(xv), vg = rvar(gv);
      const double expect = vx * gv * gv + xv * xv * vg + vx * vg;
      const double diff = std::abs(k1.variance(i, j) - expect);
      if (diff > 1e-15) worst = std::max(worst, k1.variance_se(i, j) > 0 ? diff / k1.variance_se(i, j) : INFINITY);
    }
  check("single_term_closed_form", k1.violations == 0 && worst <= 5.0,
        "K = 1, worst deviation from closed form " + str(worst) + " SE");
}

const std::map<std::string, std::function<void(Checks&, const std::filesystem::path&)>>& registry() {
  static const std::map<std::string, std::function<void(Checks&, const std::filesystem::path&)>> r{
      {"rounding", rounding_suite}, {"mapping", mapping_suite},   {"gemm", gemm_suite},       {"norm", norm_suite},
      {"sgd", sgd_suite},           {"theorem1", theorem1_suite}, {"variance", variance_suite}};
  return r;
}

}  // namespace

bool SuiteResult::passed() const {
  for (const SuiteCheck& c : checks)
    if (!c.passed) return false;
  return !checks.empty();
}

const std::vector<std::string>& suite_names() {
  static const std::vector<std::string> names{"rounding", "mapping", "gemm", "norm", "sgd", "theorem1", "variance"};
  return names;
}

SuiteResult run_suite(const std::string& name, const std::filesystem::path& out_dir) {
  const auto it = registry().find(name);
  if (it == registry().end()) throw DfxError(ErrorCode::kUnknownSuite, name);
  std::filesystem::create_directories(out_dir);
  SuiteResult result{name, {}};
  Checks checks{result};
  it->second(checks, out_dir);
  std::ofstream os(out_dir / ("verify_" + name + ".csv"));
  os << "check,passed,detail\n";
  for (const SuiteCheck& c : result.checks) {
    std::string detail = c.detail;
    for (char& ch : detail)
      if (ch == '"') ch = '\'';
    os << c.name << ',' << (c.passed ? 1 : 0) << ",\"" << detail << "\"\n";
  }
  return result;
}

}  // namespace dfx
