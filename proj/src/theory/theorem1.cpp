#include <Eigen/QR>

#include <cmath>
#include <random>

#include "dfx/kernels.hpp"
#include "dfx/theory.hpp"

namespace dfx {

namespace {

Eigen::MatrixXd gaussian_matrix(Index rows, Index cols, std::mt19937_64& gen) {
  std::normal_distribution<double> normal;
  Eigen::MatrixXd m(rows, cols);
  for (Index j = 0; j < cols; ++j)
    for (Index i = 0; i < rows; ++i) m(i, j) = normal(gen);
  return m;
}

Eigen::MatrixXd orthonormal_columns(Index rows, Index cols, std::mt19937_64& gen) {
  const Eigen::HouseholderQR<Eigen::MatrixXd> qr(gaussian_matrix(rows, cols, gen));
  return qr.householderQ() * Eigen::MatrixXd::Identity(rows, cols);
}

// Trace of the minibatch-gradient covariance at w (rows drawn with replacement).
double sampling_variance(const QuadraticProblem& p, const Eigen::VectorXd& w) {
  const Eigen::VectorXd e = p.A * w - p.b;
  const double n = static_cast<double>(p.spec.rows);
  const double second = (p.A.rowwise().squaredNorm().array() * e.array().square()).sum() / n;
  return (second - p.gradient(w).squaredNorm()) / static_cast<double>(p.spec.batch);
}

std::vector<Index> sample_rows(const QuadraticProblem& p, std::mt19937_64& gen) {
  std::uniform_int_distribution<Index> pick(0, p.spec.rows - 1);
  std::vector<Index> rows(static_cast<std::size_t>(p.spec.batch));
  for (Index& r : rows) r = pick(gen);
  return rows;
}

// Probe points: random unit directions plus both extreme eigenvectors.
std::vector<Eigen::VectorXd> probe_directions(const QuadraticProblem& p, std::mt19937_64& gen) {
  std::vector<Eigen::VectorXd> dirs{p.eigenvectors.col(0), p.eigenvectors.col(p.spec.dim - 1)};
  for (int i = 0; i < 8; ++i) dirs.push_back(gaussian_matrix(p.spec.dim, 1, gen).col(0).normalized());
  return dirs;
}

double quantization_variance(const QuadraticProblem& p, const Eigen::VectorXd& w, Index samples, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  double total = 0.0;
  for (Index s = 0; s < samples; ++s) {
    const std::vector<Index> rows = sample_rows(p, gen);
    RoundingContext ctx(seed ^ (0x9E3779B97F4A7C15ULL * static_cast<std::uint64_t>(s + 1)));
    total += (p.fixed_point_gradient(w, rows, ctx) - p.minibatch_gradient(w, rows)).squaredNorm();
  }
  return total / static_cast<double>(samples);
}

}  // namespace

double QuadraticProblem::loss(const Eigen::VectorXd& w) const {
  return (A * w - b).squaredNorm() / (2.0 * static_cast<double>(spec.rows));
}

Eigen::VectorXd QuadraticProblem::gradient(const Eigen::VectorXd& w) const {
  return A.transpose() * (A * w - b) / static_cast<double>(spec.rows);
}

Eigen::VectorXd QuadraticProblem::minibatch_gradient(const Eigen::VectorXd& w, std::span<const Index> rows) const {
  Eigen::VectorXd g = Eigen::VectorXd::Zero(spec.dim);
  for (Index r : rows) g += A.row(r).transpose() * (A.row(r).dot(w) - b[r]);
  return g / static_cast<double>(rows.size());
}

Eigen::VectorXd QuadraticProblem::fixed_point_gradient(const Eigen::VectorXd& w, std::span<const Index> rows,
                                                       RoundingContext& ctx) const {
  const auto B = static_cast<Index>(rows.size());
  FloatTensor at({spec.dim, B}), e({B, 1});
  for (Index j = 0; j < B; ++j) {
    const Index r = rows[static_cast<std::size_t>(j)];
    for (Index i = 0; i < spec.dim; ++i) at[i * B + j] = static_cast<float>(A(r, i));
    e[j] = static_cast<float>(A.row(r).dot(w) - b[r]);
  }
  const Fxp8 aq = map_to_fixed<std::int8_t>(at, spec.bit_width, ctx);
  const Fxp8 eq = map_to_fixed<std::int8_t>(e, spec.bit_width, ctx);
  const Fxp8 g = renormalize<std::int8_t>(fxp_gemm(aq, eq), spec.bit_width, ctx);
  Eigen::VectorXd out(spec.dim);
  for (Index i = 0; i < spec.dim; ++i) out[i] = value_at(g, i) / static_cast<double>(B);
  return out;
}

QuadraticProblem make_quadratic(const ConvexProblemSpec& spec) {
  if (!(spec.c > 0.0 && spec.c <= spec.L)) throw DfxError(ErrorCode::kConfigInvalid, "need 0 < c <= L");
  if (spec.dim < 2 || spec.rows <= spec.dim || spec.batch < 1)
    throw DfxError(ErrorCode::kConfigInvalid, "need rows > dim >= 2 and batch >= 1");
  check_bit_width(spec.bit_width);
  std::mt19937_64 gen(spec.seed);
  QuadraticProblem p;
  p.spec = spec;
  const Index d = spec.dim;
  const double n = static_cast<double>(spec.rows);

  p.eigenvalues.resize(d);
  for (Index i = 0; i < d; ++i)
    p.eigenvalues[i] = spec.c * std::pow(spec.L / spec.c, static_cast<double>(i) / static_cast<double>(d - 1));
  p.eigenvalues[0] = spec.c;
  p.eigenvalues[d - 1] = spec.L;

  const Eigen::MatrixXd U = orthonormal_columns(spec.rows, d + 1, gen);
  p.eigenvectors = orthonormal_columns(d, d, gen);
  p.A = std::sqrt(n) * U.leftCols(d) * p.eigenvalues.cwiseSqrt().asDiagonal() * p.eigenvectors.transpose();
  p.w_star = gaussian_matrix(d, 1, gen).col(0);
  p.b = p.A * p.w_star + std::sqrt(n) * spec.residual * U.col(d);
  p.loss_star = spec.residual * spec.residual / 2.0;
  return p;
}

GradientNoise measure_gradient_noise(const QuadraticProblem& p, Index samples, std::uint64_t seed) {
  GradientNoise out;
  out.M = sampling_variance(p, p.w_star);
  out.Mq = quantization_variance(p, p.w_star, samples, seed);
  std::mt19937_64 gen(seed);
  const std::vector<Eigen::VectorXd> dirs = probe_directions(p, gen);
  std::uint64_t probe = 0;
  for (const Eigen::VectorXd& u : dirs)
    for (double radius : {0.1, 1.0, 10.0}) {
      const Eigen::VectorXd w = p.w_star + radius * u;
      const double grad2 = p.gradient(w).squaredNorm();
      out.M_V = std::max(out.M_V, (sampling_variance(p, w) - out.M) / grad2);
      // Quantization noise is only resolved by Monte Carlo away from w*.
      if (radius >= 1.0)
        out.Mq_V = std::max(out.Mq_V, (quantization_variance(p, w, samples / 4, seed + ++probe) - out.Mq) / grad2);
    }
  return out;
}

double max_learning_rate(const QuadraticProblem& p, const GradientNoise& noise) {
  return 1.0 / (p.spec.L * (noise.M_G() + noise.Mq_G()));
}

double fit_contraction(std::span<const double> trajectory, double steady, double floor_ratio) {
  double sk = 0, sy = 0, skk = 0, sky = 0, count = 0;
  for (std::size_t k = 0; k < trajectory.size(); ++k) {
    const double excess = trajectory[k] - steady;
    if (!(excess > floor_ratio * steady)) break;
    const double x = static_cast<double>(k), y = std::log(excess);
    sk += x;
    sy += y;
    skk += x * x;
    sky += x * y;
    count += 1;
  }
  if (count < 3) return NAN;
  return std::exp((count * sky - sk * sy) / (count * skk - sk * sk));
}

Theorem1Report theorem1_experiment(const QuadraticProblem& p, const GradientNoise& noise,
                                   std::span<const double> alphas, Index steps, Index seeds) {
  Theorem1Report report;
  report.noise = noise;
  report.alpha_max = max_learning_rate(p, noise);
  for (double alpha : alphas)
    if (!(alpha > 0.0) || alpha > report.alpha_max * (1.0 + 1e-12))
      throw DfxError(ErrorCode::kLearningRateTooLarge,
                     "learning rate " + std::to_string(alpha) + " exceeds " + std::to_string(report.alpha_max));

  const double c = p.spec.c, L = p.spec.L;
  const Eigen::MatrixXd Qt = p.eigenvectors.transpose();
  for (double alpha : alphas) {
    // Long enough for the transient to fall ~10^6 below its start before the
    // trailing 20% window.
    const auto needed = static_cast<Index>(std::ceil(std::log(1e6) / (2.0 * alpha * c) / 0.8));
    const Index T = std::max(steps, needed);
    const Index tail = T - (T * 4) / 5;
    const double bound_fixed = alpha * L * (noise.M + noise.Mq) / (2.0 * c);
    const double delta = std::sqrt(2.0 * 1000.0 * bound_fixed / c);

    for (const bool fixed : {true, false}) {
      GapRow row;
      row.alpha = alpha;
      row.arm = fixed ? "fixed" : "float";
      row.bound = fixed ? bound_fixed : alpha * L * noise.M / (2.0 * c);
      row.expected_contraction = 1.0 - alpha * c;
      row.trajectory.assign(static_cast<std::size_t>(T), 0.0);
      std::vector<double> tail_means;
      for (Index s = 0; s < seeds; ++s) {
        // Both arms see the same minibatch sequence for a given seed.
        const std::uint64_t run_seed = p.spec.seed * 1000003ULL + static_cast<std::uint64_t>(s);
        std::mt19937_64 gen(run_seed);
        RoundingContext ctx(run_seed);
        Eigen::VectorXd w = p.w_star + delta * p.eigenvectors.col(0);
        double tail_sum = 0.0;
        for (Index k = 0; k < T; ++k) {
          const double gap = 0.5 * (p.eigenvalues.array() * (Qt * (w - p.w_star)).array().square()).sum();
          row.trajectory[static_cast<std::size_t>(k)] += gap / static_cast<double>(seeds);
          if (k >= T - tail) tail_sum += gap;
          const std::vector<Index> rows = sample_rows(p, gen);
          w -= alpha * (fixed ? p.fixed_point_gradient(w, rows, ctx) : p.minibatch_gradient(w, rows));
        }
        tail_means.push_back(tail_sum / static_cast<double>(tail));
      }
      double mean = 0.0, var = 0.0;
      for (double v : tail_means) mean += v / static_cast<double>(seeds);
      if (seeds > 1)
        for (double v : tail_means) var += (v - mean) * (v - mean) / static_cast<double>(seeds - 1);
      row.gap = mean;
      row.gap_stderr = std::sqrt(var / static_cast<double>(seeds));
      row.contraction = fit_contraction(row.trajectory, row.gap);
      report.rows.push_back(std::move(row));
    }
  }
  return report;
}

}  // namespace dfx
