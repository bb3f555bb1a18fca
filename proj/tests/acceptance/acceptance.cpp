// Acceptance suite: one PASS/FAIL line per criterion.
//
//   dfx_acceptance [--idx DIR] [--out DIR] [criterion ...]
//
// With no criterion numbers every criterion runs. Exit status is 0 iff all
// selected criteria pass.

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "dfx/app.hpp"
#include "dfx/kernels.hpp"
#include "dfx/nn.hpp"
#include "dfx/optim.hpp"
#include "dfx/theory.hpp"

using namespace dfx;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::filesystem::path g_out;
std::string g_idx;

std::string num(double v) {
  std::ostringstream os;
  os.precision(4);
  os << v;
  return os.str();
}

FloatTensor normal_tensor(Shape shape, std::mt19937_64& gen, double scale = 1.0) {
  std::normal_distribution<double> nd(0.0, scale);
  FloatTensor t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<float>(nd(gen));
  return t;
}

// floor(log2 max|x|) from the IEEE exponent field.
int max_exponent(const FloatTensor& t) {
  int e = 0;
  std::frexp(static_cast<double>(t.data().abs().maxCoeff()), &e);
  return e - 1;
}

// Rescales so that max|x| = 1.5 exactly.
FloatTensor scale_to_one_and_half(FloatTensor t) {
  Index at = 0;
  const float m = t.data().abs().maxCoeff(&at);
  t.data() = (t.data() * (1.5f / m)).cwiseMax(-1.5f).cwiseMin(1.5f);
  t[at] = std::copysign(1.5f, t[at]);
  return t;
}

std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    rows.push_back(std::move(cells));
  }
  return rows;
}

// ---------------------------------------------------------------------------

Outcome c1_rounding_unbiased() {
  const auto t0 = std::chrono::steady_clock::now();
  const RoundingBiasReport r = rounding_bias_suite(1000, 100000);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  Index bad = 0;
  double worst = 0.0;
  for (const BiasRow& row : r.rows) {
    // Exact value of the aligned mantissa in units of the kept LSB.
    const int drop = 24 - row.keep_bits + row.shift;
    const double exact = static_cast<double>(row.m24) / std::exp2(drop);
    const double p = exact - std::floor(exact);
    const double sigma = std::sqrt(p * (1.0 - p) / static_cast<double>(r.trials));
    const double dev = std::abs(row.mean - exact);
    if (sigma == 0.0 ? dev != 0.0 : dev > 4.0 * sigma) ++bad;
    if (sigma > 0.0) worst = std::max(worst, dev / sigma);
  }
  return {r.rows.size() == 1000 && r.trials == 100000 && bad == 0 && secs < 60.0,
          std::to_string(bad) + " of 1000 mantissas beyond 4 sigma, max |z| " + num(worst) + ", " + num(secs) + " s"};
}

Outcome c2_worked_example() {
  const std::string bits = "01011001010101010100000";  // fraction bits after the binary point
  std::uint32_t m = 0;
  for (char b : bits) m = (m << 1) | static_cast<std::uint32_t>(b - '0');
  // Keeping six fraction bits drops the low 17; the up-probability is their fraction.
  const std::uint32_t low = m & ((1u << 17) - 1);
  const double p = static_cast<double>(low) / 131072.0;
  const std::uint64_t down = m >> 17, up = down + 1;  // 010110b, 010111b

  const Index n = 1000000;
  Index ups = 0, strays = 0;
  for (Index t = 0; t < n; ++t) {
    const std::uint64_t r =
        detail::round_aligned(m, 0, 7, RoundingMode::kStochastic, RoundingContext::draw(77, 5, static_cast<std::uint64_t>(t)));
    ups += r == up ? 1 : 0;
    strays += (r != up && r != down) ? 1 : 0;
  }
  const double sigma = std::sqrt(p * (1 - p) / static_cast<double>(n));
  const double phat = static_cast<double>(ups) / static_cast<double>(n);

  // Same value through the tensor mapping: with 1.0 alongside, k = 8 keeps six fraction bits.
  const float v = std::ldexp(static_cast<float>(m), -23);
  FloatTensor f({2});
  f[0] = 1.0f;
  f[1] = v;
  Index ups_map = 0, strays_map = 0;
  const Index n_map = 1000000;
  for (Index t = 0; t < n_map; ++t) {
    RoundingContext ctx(static_cast<std::uint64_t>(t) + 1);
    const Fxp8 q = map_to_fixed<std::int8_t>(f, 8, ctx);
    const double got = static_cast<double>(q.mantissas[1]) * std::ldexp(1.0, q.unit_exponent());
    ups_map += got == static_cast<double>(up) / 64.0 ? 1 : 0;
    strays_map += (got != static_cast<double>(up) / 64.0 && got != static_cast<double>(down) / 64.0) ? 1 : 0;
  }
  const double phat_map = static_cast<double>(ups_map) / static_cast<double>(n_map);
  const bool ok = strays == 0 && strays_map == 0 && std::abs(phat - p) <= 3 * sigma &&
                  std::abs(phat_map - p) <= 3 * sigma;
  return {ok, "P(up) " + num(p) + ", core " + num(phat) + ", mapped " + num(phat_map) + " (sigma " + num(sigma) +
                  "), other outcomes " + std::to_string(strays + strays_map)};
}

Outcome c3_inverse_map_example() {
  Fxp8 t = Fxp8::zeros({1}, 8);
  t.mantissas[0] = 0b010100;  // 0.0101b in units of 2^-6
  t.exponent = 127;
  const float f = inverse_map(t)[0];
  const auto bits = std::bit_cast<std::uint32_t>(f);
  // 2^125 x 1.0100b: biased exponent 252, fraction 0100b followed by zeros.
  const std::uint32_t expected = (252u << 23) | (0b0100u << 19);
  const UnpackedFloat u = unpack(f);
  const bool ok = bits == expected && u.exponent == 125 && u.mantissa24 == 0xA00000 && u.sign == 0;
  std::ostringstream os;
  os << "bits 0x" << std::hex << bits << " expected 0x" << expected << std::dec << ", unpacked exponent " << u.exponent;
  return {ok, os.str()};
}

Outcome c4_gemm_oracle() {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 gen(404);
  std::uniform_int_distribution<Index> dim(1, 64);
  std::uniform_int_distribution<int> bits(kMinBitWidth, kMaxBitWidth), expo(-10, 10);
  int mismatches = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const Index M = dim(gen), K = dim(gen), N = dim(gen);
    const int k = bits(gen), hi = (1 << (k - 1)) - 1;
    std::uniform_int_distribution<int> mant(-hi, hi);
    Fxp8 a = Fxp8::zeros({M, K}, k), b = Fxp8::zeros({K, N}, k);
    for (Index i = 0; i < a.size(); ++i) a.mantissas[i] = static_cast<std::int8_t>(mant(gen));
    for (Index i = 0; i < b.size(); ++i) b.mantissas[i] = static_cast<std::int8_t>(mant(gen));
    a.exponent = expo(gen);
    b.exponent = expo(gen);
    const AccTensor c = fxp_gemm(a, b);
    const int scale = (*a.exponent - (k - 2)) + (*b.exponent - (k - 2));
    bool ok = true;
    for (Index i = 0; i < M && ok; ++i)
      for (Index j = 0; j < N && ok; ++j) {
        std::int64_t ref = 0;
        for (Index t = 0; t < K; ++t)
          ref += static_cast<std::int64_t>(a.mantissas[i * K + t]) * static_cast<std::int64_t>(b.mantissas[t * N + j]);
        const double got = std::ldexp(static_cast<double>(c.values[i * N + j]), c.scale_exponent);
        ok = got == std::ldexp(static_cast<double>(ref), scale);
      }
    mismatches += ok ? 0 : 1;
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return {mismatches == 0 && secs < 60.0, std::to_string(mismatches) + " of 200 shapes differ, " + num(secs) + " s"};
}

Outcome c5_roundtrip_and_bound() {
  std::mt19937_64 gen(505);
  std::uniform_int_distribution<int> bits(kMinBitWidth, kMaxBitWidth), expo(-30, 30), size(1, 48);
  Index roundtrip_fail = 0;
  for (int trial = 0; trial < 5000; ++trial) {
    const int k = bits(gen), e = expo(gen), hi = (1 << (k - 1)) - 1;
    std::uniform_int_distribution<int> mant(-hi, hi);
    FloatTensor f({size(gen)});
    for (Index i = 0; i < f.size(); ++i) f[i] = std::ldexp(static_cast<float>(mant(gen)), e);
    for (RoundingMode mode : {RoundingMode::kStochastic, RoundingMode::kNearest}) {
      RoundingContext ctx(static_cast<std::uint64_t>(trial), mode);
      const FloatTensor back = inverse_map(map_to_fixed<std::int8_t>(f, k, ctx));
      for (Index i = 0; i < f.size(); ++i)
        if (std::bit_cast<std::uint32_t>(back[i]) != std::bit_cast<std::uint32_t>(f[i])) {
          ++roundtrip_fail;
          break;
        }
    }
  }

  Index violations = 0, checked = 0;
  std::uniform_real_distribution<double> logscale(-12.0, 12.0);
  for (int trial = 0; trial < 100000; ++trial) {
    const int k = bits(gen);
    const FloatTensor f = normal_tensor({16}, gen, std::exp2(logscale(gen)));
    RoundingContext ctx(static_cast<std::uint64_t>(trial), RoundingMode::kNearest);
    const Fxp8 q = map_to_fixed<std::int8_t>(f, k, ctx);
    const double bound = std::ldexp(1.0, max_exponent(f) - (k - 1));
    const double unit = std::ldexp(1.0, q.unit_exponent());
    for (Index i = 0; i < f.size(); ++i) {
      if (std::abs(q.mantissas[i]) == q.max_mantissa()) continue;
      ++checked;
      if (std::abs(static_cast<double>(f[i]) - q.mantissas[i] * unit) > bound) ++violations;
    }
  }
  return {roundtrip_fail == 0 && violations == 0,
          std::to_string(roundtrip_fail) + " roundtrip failures over 10000 mappings; " + std::to_string(violations) +
              " bound violations over " + std::to_string(checked) + " elements in 1e5 tensors"};
}

Outcome c6_batchnorm_statistics() {
  constexpr Index N = 24, C = 5, kSeeds = 500;
  std::mt19937_64 gen(606);
  FloatTensor x = normal_tensor({N, C}, gen);
  for (Index n = 0; n < N; ++n)
    for (Index c = 0; c < C; ++c) x[n * C + c] = x[n * C + c] * (0.5f + 0.25f * c) + 0.3f * (c - 2.0f);
  x = scale_to_one_and_half(x);  // shared exponent 0, 1.5 * 64 < 127: no saturation
  const double unit = std::ldexp(1.0, max_exponent(x) - 6);

  const NormParams p{Fxp8::zeros({C}, 8), Fxp8::zeros({C}, 8)};
  Eigen::ArrayXd mu_s = Eigen::ArrayXd::Zero(C), mu_q = mu_s, var_s = mu_s, var_q = mu_s;
  double mean_unit = 0.0;
  for (Index s = 0; s < kSeeds; ++s) {
    RoundingContext ctx(static_cast<std::uint64_t>(s) + 9000);
    const Fxp8 xq = map_to_fixed<std::int8_t>(x, 8, ctx);
    const NormForward f = fxp_batchnorm_forward(xq, p, ctx);
    if (!f.mean.is_zero()) mean_unit = std::max(mean_unit, std::ldexp(1.0, f.mean.unit_exponent()));
    for (Index c = 0; c < C; ++c) {
      const double m = value_at(f.mean, c), v = to_double(f.var[static_cast<std::size_t>(c)]);
      mu_s[c] += m;
      mu_q[c] += m * m;
      var_s[c] += v;
      var_q[c] += v * v;
    }
  }
  // Independent per-element rounding variance is at most unit^2 / 4; the
  // sample variance keeps a (1 - 1/N) share of it and the rounded mean adds
  // at most mean_unit^2 / 4.
  const double bound = (1.0 - 1.0 / N) * unit * unit / 4.0 + mean_unit * mean_unit / 4.0;
  const double n = kSeeds;
  bool ok = true;
  double worst_z = 0.0, worst_bias = -INFINITY, worst_se = 0.0;
  for (Index c = 0; c < C; ++c) {
    double mu = 0.0, var = 0.0;
    for (Index r = 0; r < N; ++r) mu += static_cast<double>(x[r * C + c]) / N;
    for (Index r = 0; r < N; ++r) var += (x[r * C + c] - mu) * (x[r * C + c] - mu) / N;
    const double mm = mu_s[c] / n, mse = std::sqrt(std::max(0.0, mu_q[c] / n - mm * mm) / (n - 1));
    const double vm = var_s[c] / n, vse = std::sqrt(std::max(0.0, var_q[c] / n - vm * vm) / (n - 1));
    ok = ok && std::abs(mm - mu) <= 4 * mse + 1e-12;
    ok = ok && vm - var >= -4 * vse && vm - var <= bound + 4 * vse;
    if (mse > 0) worst_z = std::max(worst_z, std::abs(mm - mu) / mse);
    if (vm - var > worst_bias) {
      worst_bias = vm - var;
      worst_se = vse;
    }
  }
  return {ok, "mean max |z| " + num(worst_z) + "; variance bias max " + num(worst_bias) + " (SE " + num(worst_se) + ") vs bound " + num(bound)};
}

Outcome c7_variance_bound() {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 gen(707);
  Index violations = 0, off_closed_form = 0;
  for (int inst = 0; inst < 20; ++inst) {
    const FloatTensor x = normal_tensor({8, 8}, gen), g = normal_tensor({8, 8}, gen);
    const NoiseStats s = gradient_variance_probe(x, g, 8, 1000, 100000 + 1000 * static_cast<std::uint64_t>(inst));
    // Stochastic rounding of v on a grid of unit u has variance f (1 - f) u^2.
    auto rvar = [](const FloatTensor& t) {
      const double u = std::ldexp(1.0, max_exponent(t) - 6);
      Eigen::MatrixXd v(t.dim(0), t.dim(1));
      for (Index i = 0; i < t.size(); ++i) {
        const double r = t[i] / u, f = r - std::floor(r);
        v(i / t.dim(1), i % t.dim(1)) = f * (1 - f) * u * u;
      }
      return v;
    };
    const Eigen::MatrixXd vx = rvar(x), vg = rvar(g);
    const Eigen::MatrixXd X = x.matrix().cast<double>(), G = g.matrix().cast<double>();
    const double mqv = vx.maxCoeff(), sg = vg.maxCoeff();
    for (Index i = 0; i < 8; ++i)
      for (Index j = 0; j < 8; ++j) {
        // X [K,M], G [K,N]: C_ij = sum_t X_ti G_tj, and C itself is deterministic.
        double exact = 0.0;
        for (Index t = 0; t < 8; ++t)
          exact += vx(t, i) * G(t, j) * G(t, j) + X(t, i) * X(t, i) * vg(t, j) + vx(t, i) * vg(t, j);
        const double bound = mqv * G.col(j).squaredNorm() + sg * X.col(i).squaredNorm() + 8 * mqv * sg;
        if (s.variance(i, j) > bound + 4.0 * s.variance_se(i, j)) ++violations;
        if (std::abs(s.variance(i, j) - exact) > 5.0 * s.variance_se(i, j)) ++off_closed_form;
      }
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return {violations == 0 && secs < 300.0,
          std::to_string(violations) + " of 1280 elements above the bound (4 SE); " + std::to_string(off_closed_form) +
              " beyond 5 SE of the closed-form variance; " + num(secs) + " s"};
}

double decay_factor(const std::vector<double>& traj, double steady) {
  // Least squares slope of log(gap - steady) while the excess is > 20x steady.
  std::vector<double> xs, ys;
  for (std::size_t k = 0; k < traj.size() && traj[k] - steady > 20.0 * steady; ++k) {
    xs.push_back(static_cast<double>(k));
    ys.push_back(std::log(traj[k] - steady));
  }
  if (xs.size() < 3) return NAN;
  const Eigen::Map<const Eigen::VectorXd> X(xs.data(), static_cast<Index>(xs.size()));
  const Eigen::Map<const Eigen::VectorXd> Y(ys.data(), static_cast<Index>(ys.size()));
  const double xm = X.mean(), ym = Y.mean();
  return std::exp(((X.array() - xm) * (Y.array() - ym)).sum() / (X.array() - xm).square().sum());
}

Outcome c8_theorem_testbed() {
  const auto t0 = std::chrono::steady_clock::now();
  ConvexProblemSpec spec;
  spec.dim = 50;
  spec.c = 0.1;
  spec.L = 1.0;
  const QuadraticProblem p = make_quadratic(spec);
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(p.A.transpose() * p.A / static_cast<double>(spec.rows));
  const bool spectrum = std::abs(eig.eigenvalues().minCoeff() - spec.c) <= 1e-9 &&
                        std::abs(eig.eigenvalues().maxCoeff() - spec.L) <= 1e-9 &&
                        p.gradient(p.w_star).norm() <= 1e-9 &&
                        std::abs(p.loss(p.w_star) - spec.residual * spec.residual / 2) <= 1e-12;

  const GradientNoise noise = measure_gradient_noise(p, 2000, 8);
  const double amax = 1.0 / (spec.L * ((1.0 + noise.M_V) + (1.0 + noise.Mq_V)));
  const std::vector<double> alphas{amax, amax / 2, amax / 4};
  const Theorem1Report rep = theorem1_experiment(p, noise, alphas, 2000, 64);

  auto row = [&](double a, const std::string& arm) -> const GapRow& {
    for (const GapRow& r : rep.rows)
      if (r.alpha == a && r.arm == arm) return r;
    throw std::runtime_error("missing row");
  };
  bool gaps = true, ratios = true, contraction = true;
  std::string detail;
  for (double a : alphas) {
    const GapRow& r = row(a, "fixed");
    const double bound = a * spec.L * (noise.M + noise.Mq) / (2 * spec.c);
    gaps = gaps && r.gap <= bound;
    const double rho = 1 - a * spec.c;
    const double g = decay_factor(r.trajectory, r.gap);
    // Gap is quadratic in the iterate error: its per-step factor is rho^2.
    const double iterate = std::sqrt(g);
    contraction = contraction && std::abs(iterate - rho) <= 0.15 * rho &&
                  std::abs((1 - g) - (1 - rho * rho)) <= 0.15 * (1 - rho * rho);
    detail += "a=" + num(a) + " gap " + num(r.gap) + "/" + num(bound) + " rate " + num(1 - iterate) + " vs " +
              num(a * spec.c) + "; ";
  }
  for (std::size_t i = 0; i + 1 < alphas.size(); ++i) {
    const double ratio = row(alphas[i], "fixed").gap / row(alphas[i + 1], "fixed").gap;
    ratios = ratios && ratio >= 1.6 && ratio <= 2.4;
    detail += "ratio " + num(ratio) + "; ";
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  detail += num(secs) + " s";
  return {spectrum && gaps && ratios && contraction && secs < 600.0,
          std::string(spectrum ? "" : "spectrum mismatch; ") + detail};
}

Outcome c9_sgd_unbiased() {
  constexpr Index n = 48, kSeeds = 10000;
  std::mt19937_64 gen(909);
  RoundingContext exact(0, RoundingMode::kNearest);
  const SgdConfig cfg{0.03f, 0.9f, 1e-4f};
  OptState base = make_opt_state({normal_tensor({n}, gen)}, cfg, exact);
  base.velocity[0] = map_to_fixed<std::int16_t>(normal_tensor({n}, gen, 0.4), kMasterBitWidth, exact);
  const Fxp8 g = map_to_fixed<std::int8_t>(normal_tensor({n}, gen, 0.2), 8, exact);

  Eigen::ArrayXd w_ref(n);
  for (Index i = 0; i < n; ++i) {
    const double w = value_at(base.master[0], i), v = value_at(base.velocity[0], i), gi = value_at(g, i);
    const double v_new = static_cast<double>(cfg.momentum) * v + gi + static_cast<double>(cfg.weight_decay) * w;
    w_ref[i] = w - static_cast<double>(cfg.lr) * v_new;
  }
  Eigen::ArrayXd s = Eigen::ArrayXd::Zero(n), q = s;
  for (Index seed = 0; seed < kSeeds; ++seed) {
    RoundingContext ctx(static_cast<std::uint64_t>(seed) + 31337);
    const OptState next = sgd_step(base, {g}, ctx);
    for (Index i = 0; i < n; ++i) {
      const double w = value_at(next.master[0], i);
      s[i] += w;
      q[i] += w * w;
    }
  }
  Index bad = 0;
  double worst = 0.0;
  for (Index i = 0; i < n; ++i) {
    const double m = s[i] / kSeeds, se = std::sqrt(std::max(0.0, q[i] / kSeeds - m * m) / (kSeeds - 1));
    const double dev = std::abs(m - w_ref[i]);
    if (dev > 4 * se + 1e-12 * std::abs(w_ref[i])) ++bad;
    if (se > 0) worst = std::max(worst, dev / se);
  }
  return {bad == 0, std::to_string(bad) + " of " + std::to_string(n) + " weights beyond 4 sigma, max |z| " + num(worst)};
}

RunConfig training_config(const std::filesystem::path& out) {
  RunConfig c;
  c.model = "mlp";
  c.hidden = 256;
  c.epochs = 5;
  c.batch_size = 64;
  c.lr = 0.2f;
  c.seed = 1;
  c.synthetic_classes = 10;
  c.synthetic_train = 10000;
  c.synthetic_test = 2000;
  c.synthetic_margin = 4.0f;
  if (!g_idx.empty()) {
    c.dataset = "idx";
    c.data_dir = g_idx;
  }
  c.out_dir = out;
  return c;
}

Outcome c10_paired_training() {
  const auto t0 = std::chrono::steady_clock::now();
  RunConfig c = training_config(g_out / "paired");
  c.paired = true;
  run_training(c);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  // Everything below comes from the written artifacts.
  std::map<std::string, std::vector<double>> loss;
  for (const auto& r : read_csv(c.out_dir / "epochs.csv"))
    if (r.size() == 6 && r[0] != "epoch") loss[r[1]].push_back(std::stod(r[2]));
  std::map<std::string, double> acc;
  for (const auto& r : read_csv(c.out_dir / "summary.txt")) {
    const std::string& line = r.at(0);
    const auto eq = line.find(" = ");
    if (line.find(".test_accuracy") != std::string::npos) acc[line.substr(0, line.find('.'))] = std::stod(line.substr(eq + 3));
  }
  const std::vector<double>& li = loss["int8"];
  const std::vector<double>& lf = loss["float"];
  if (li.size() != 5 || lf.size() != 5 || !acc.count("int8") || !acc.count("float"))
    return {false, "incomplete artifacts in " + c.out_dir.string()};
  double mean_gap = 0.0;
  for (std::size_t e = 0; e < 5; ++e) mean_gap += std::abs(li[e] - lf[e]) / 5.0;
  const double range = *std::max_element(lf.begin(), lf.end()) - *std::min_element(lf.begin(), lf.end());
  const double dacc = acc["int8"] - acc["float"];
  return {std::abs(dacc) <= 1.0 && mean_gap <= 0.05 * range && secs <= 1800.0,
          std::string(g_idx.empty() ? "synthetic" : "idx") + ": int8 " + num(acc["int8"]) + "% float " +
              num(acc["float"]) + "% (gap " + num(dacc) + "); mean epoch |dloss| " + num(mean_gap) + " vs " +
              num(0.05 * range) + "; " + num(secs) + " s"};
}

Outcome c11_bit_width_ablation() {
  const RunConfig c = training_config(g_out / "ablation");
  const std::vector<int> bits{8, 7, 6, 5, 4};
  run_ablation(c, bits);
  std::map<int, double> acc;
  std::map<int, bool> flagged;
  for (const auto& r : read_csv(c.out_dir / "ablation.csv"))
    if (r.size() == 4 && r[0] != "bits") {
      acc[std::stoi(r[0])] = std::stod(r[1]);
      flagged[std::stoi(r[0])] = r[3] == "1";
    }
  if (acc.size() != 5) return {false, "incomplete ablation.csv"};
  // Divergence evidence straight from the int4 epoch losses.
  std::vector<double> l4;
  for (const auto& r : read_csv(c.out_dir / "bits4" / "epochs.csv"))
    if (r.size() == 6 && r[0] != "epoch") l4.push_back(std::stod(r[2]));
  bool non_decreasing = l4.size() < static_cast<std::size_t>(c.epochs);
  for (std::size_t e = 1; e < l4.size(); ++e) non_decreasing = non_decreasing || !(l4[e] < l4[e - 1]);
  for (double v : l4) non_decreasing = non_decreasing || !std::isfinite(v);

  const double hi = std::max({acc[8], acc[7], acc[6]}), lo = std::min({acc[8], acc[7], acc[6]});
  const bool ok = hi - lo <= 1.5 && acc[8] - acc[5] > 2.0 && flagged[4] && non_decreasing && !flagged[8] &&
                  !flagged[7] && !flagged[6];
  return {ok, "int8 " + num(acc[8]) + " int7 " + num(acc[7]) + " int6 " + num(acc[6]) + " int5 " + num(acc[5]) +
                  " int4 " + num(acc[4]) + (flagged[4] ? " (diverged)" : " (not flagged)")};
}

// Central differences of the Nearest-mode integer forward against its integer
// backward. Per parameter tensor the allowed error is
//   max(1e-2, 8 * beta),  beta = eps / h + tau + n * 2^-(k-1) * S
// where eps is the largest observed |integer loss - float loss| at the
// perturbed points, tau the float central-difference truncation error, n the
// number of rounding operations in the backward pass and S = max |dL/dw|.
// The step h is the power-of-two multiple (4..256) of the tensor's LSB with
// the smallest beta.
Outcome c12_finite_differences() {
  using L = LayerSpec;
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<std::pair<std::string, ModelConfig>> models;
  auto add = [&](std::string name, Shape in, std::vector<LayerSpec> layers) {
    ModelConfig m;
    m.input_shape = std::move(in);
    m.layers = std::move(layers);
    m.forward_mode = m.backward_mode = RoundingMode::kNearest;
    models.emplace_back(std::move(name), std::move(m));
  };
  add("linear", {4}, {L::linear(4, 3)});
  add("relu", {4}, {L::linear(4, 6), L::relu(), L::linear(6, 3)});
  add("batchnorm", {4}, {L::linear(4, 5), L::batchnorm(), L::linear(5, 3)});
  add("layernorm", {4}, {L::linear(4, 5), L::layernorm(), L::linear(5, 3)});
  add("conv2d", {1, 4, 4}, {L::conv2d(1, 2), L::flatten(), L::linear(32, 3)});
  add("maxpool", {1, 4, 4}, {L::conv2d(1, 2), L::maxpool(), L::flatten(), L::linear(8, 3)});
  add("avgpool", {1, 4, 4}, {L::conv2d(1, 2), L::avgpool(), L::flatten(), L::linear(8, 3)});
  add("residual", {4}, {L::linear(4, 4), L::residual({L::linear(4, 4), L::relu()}), L::linear(4, 3)});

  constexpr int k = 8;
  const std::vector<int> y{0, 1, 2, 0, 1, 2};
  std::mt19937_64 gen(1212);
  std::normal_distribution<float> nd;
  bool ok = true;
  double worst_ratio = 0.0;
  std::string failures;
  for (auto& [name, m] : models) {
    RoundingContext q0(0, RoundingMode::kNearest);
    std::vector<Fxp8> p;
    for (FloatTensor t : init_parameters(m, 7)) {
      for (Index i = 0; i < t.size(); ++i) t[i] += 0.1f * nd(gen);
      p.push_back(map_to_fixed<std::int8_t>(t, k, q0));
    }
    std::vector<FloatTensor> w;
    for (const Fxp8& t : p) w.push_back(inverse_map(t));

    // Inputs whose ReLU pre-activations and pooling winners sit clear of the kinks.
    Shape xs{6};
    xs.insert(xs.end(), m.input_shape.begin(), m.input_shape.end());
    FloatTensor x(xs);
    for (bool clear = false; !clear;) {
      for (Index i = 0; i < x.size(); ++i) x[i] = nd(gen);
      const ForwardPass<FloatTensor> fp = forward(m, w, x);
      clear = true;
      for (int id = 0; id < fp.tape.size(); ++id) {
        const TapeNode<FloatTensor>& node = fp.tape.node(id);
        if (node.op != "relu" && node.op != "maxpool") continue;
        const FloatTensor& z = fp.tape.node(node.inputs[0]).value;
        const float margin = z.data().abs().maxCoeff() / 16.0f;
        if (node.op == "relu") {
          clear = clear && (z.data().abs() > margin).all();
        } else {
          const Index planes = z.dim(0) * z.dim(1), H = z.dim(2), W = z.dim(3);
          for (Index a = 0; a < planes; ++a)
            for (Index i = 0; i + 1 < H; i += 2)
              for (Index j = 0; j + 1 < W; j += 2) {
                float v[4] = {z[(a * H + i) * W + j], z[(a * H + i) * W + j + 1], z[(a * H + i + 1) * W + j],
                              z[(a * H + i + 1) * W + j + 1]};
                std::sort(v, v + 4);
                clear = clear && v[3] - v[2] > margin;
              }
        }
      }
    }

    auto int_loss = [&](const std::vector<FloatTensor>& ww) {
      RoundingContext c(1, RoundingMode::kNearest);
      std::vector<Fxp8> q;
      for (const FloatTensor& t : ww) q.push_back(map_to_fixed<std::int8_t>(t, k, c));
      return softmax_cross_entropy(forward(m, q, x, c).logits, y).loss;
    };
    auto float_loss = [&](const std::vector<FloatTensor>& ww) {
      return softmax_cross_entropy(forward(m, ww, x).logits, y).loss;
    };

    RoundingContext ctx(1, RoundingMode::kNearest);
    const ForwardPass<Fxp8> fw = forward(m, p, x, ctx);
    const std::uint64_t before = ctx.op_counter();
    const LossAndGrad lg = loss_and_grad(fw.logits, y, k, ctx);
    const std::vector<Fxp8> gi = backward(m, fw.tape, p, lg.dlogits, ctx);
    const double stages = static_cast<double>(ctx.op_counter() - before);
    const ForwardPass<FloatTensor> ff = forward(m, w, x);
    const std::vector<FloatTensor> gf = backward(ff.tape, w, softmax_cross_entropy(ff.logits, y).grad);

    for (std::size_t t = 0; t < p.size(); ++t) {
      if (p[t].is_zero()) continue;
      const double S = gf[t].data().abs().maxCoeff();
      const double backward_bound = stages * std::ldexp(1.0, -(k - 1)) * S;
      double beta = INFINITY, err = 0.0;
      for (int j = 2; j <= 8; ++j) {
        const double h = std::ldexp(1.0, p[t].unit_exponent() + j);
        double e_max = 0.0, eps = 0.0, tau = 0.0;
        for (Index i = 0; i < p[t].size(); ++i) {
          std::vector<FloatTensor> wp = w, wm = w;
          wp[t][i] = static_cast<float>(wp[t][i] + h);
          wm[t][i] = static_cast<float>(wm[t][i] - h);
          const double ip = int_loss(wp), im = int_loss(wm), fp = float_loss(wp), fm = float_loss(wm);
          eps = std::max({eps, std::abs(ip - fp), std::abs(im - fm)});
          tau = std::max(tau, std::abs((fp - fm) / (2 * h) - gf[t][i]));
          e_max = std::max(e_max, std::abs((ip - im) / (2 * h) - value_at(gi[t], i)));
        }
        const double b = eps / h + tau + backward_bound;
        if (b < beta) {
          beta = b;
          err = e_max;
        }
      }
      const double tol = std::max(1e-2, 8.0 * beta);
      worst_ratio = std::max(worst_ratio, err / tol);
      if (err > tol) {
        ok = false;
        failures += " " + name + "/param" + std::to_string(t) + " err " + num(err) + " > " + num(tol);
      }
    }
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return {ok && secs < 120.0, "8 micro-models, worst err/tolerance " + num(worst_ratio) + ", " + num(secs) + " s" + failures};
}

struct Criterion {
  int id;
  const char* title;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  g_out = std::filesystem::temp_directory_path() / "dfx_acceptance";
  std::vector<int> selected;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--idx" && i + 1 < argc) {
      g_idx = argv[++i];
    } else if (a == "--out" && i + 1 < argc) {
      g_out = argv[++i];
    } else {
      selected.push_back(std::stoi(a));
    }
  }
  const std::vector<Criterion> all{
      {1, "stochastic rounding unbiased", c1_rounding_unbiased},
      {2, "worked rounding example", c2_worked_example},
      {3, "inverse mapping example", c3_inverse_map_example},
      {4, "gemm matches exact integer reference", c4_gemm_oracle},
      {5, "roundtrip and nearest error bound", c5_roundtrip_and_bound},
      {6, "batchnorm statistics", c6_batchnorm_statistics},
      {7, "gradient variance bound", c7_variance_bound},
      {8, "convex convergence testbed", c8_theorem_testbed},
      {9, "integer SGD unbiased", c9_sgd_unbiased},
      {10, "paired int8/float training", c10_paired_training},
      {11, "bit-width ablation", c11_bit_width_ablation},
      {12, "finite-difference gradients", c12_finite_differences},
  };
  std::filesystem::remove_all(g_out);
  std::filesystem::create_directories(g_out);
  int failed = 0;
  for (const Criterion& c : all) {
    if (!selected.empty() && std::find(selected.begin(), selected.end(), c.id) == selected.end()) continue;
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += o.pass ? 0 : 1;
    std::cout << (o.pass ? "PASS" : "FAIL") << " C" << c.id << " " << c.title << ": " << o.detail << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
