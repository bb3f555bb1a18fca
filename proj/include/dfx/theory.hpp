#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "dfx/numfmt.hpp"

namespace dfx {

// ---------------------------------------------------------------------------
// Stochastic-rounding bias
// ---------------------------------------------------------------------------

struct BiasRow {
  std::uint32_t m24 = 0;
  int shift = 0;      // alignment shift before rounding
  int keep_bits = 0;
  double exact = 0.0;  // m24 / 2^(24 - keep_bits + shift)
  double mean = 0.0;   // empirical mean of the rounded value
  double sigma = 0.0;  // binomial standard error of the mean
  double z = 0.0;
  bool flagged = false;  // |z| > 4
};

/// Rounds one mantissa n_trials times through the production rounding core.
BiasRow measure_rounding_bias(std::uint32_t m24, int shift, int keep_bits, Index n_trials, std::uint64_t seed,
                              std::uint64_t op);

struct RoundingBiasReport {
  std::vector<BiasRow> rows;
  Index trials = 0;
  Index flagged = 0;
  double max_abs_z = 0.0;
};

/// Random normalized 24-bit mantissas, k in [4,8] and alignment shifts in [0,16].
RoundingBiasReport rounding_bias_suite(Index n_mantissas, Index n_trials, std::uint64_t seed = 1);

// ---------------------------------------------------------------------------
// Gradient variance probe
// ---------------------------------------------------------------------------

struct NoiseStats {
  Index inner = 0;                 // K
  double sigma2_x = 0.0;           // max per-element rounding variance of X
  double sigma2_g = 0.0;           // max per-element rounding variance of G
  Eigen::MatrixXd variance;        // measured V{C^ij}
  Eigen::MatrixXd variance_se;     // standard error of `variance` (fourth-moment estimate)
  Eigen::MatrixXd bias;            // mean C^ij - Cij
  Eigen::MatrixXd bound;           // V{Cij} + Mq_V ||G_,j||^2 + Mq_i
  Eigen::VectorXd mq;              // per output row i
  double mq_v = 0.0;               // = sigma2_x
  Index violations = 0;            // elements with variance > bound + 4 SE
};

/// Monte Carlo over rounding seeds of C^ = X^T G^ with X [K,M], G [K,N]
/// mapped to k bits. V{C} is zero because X and G are fixed.
NoiseStats gradient_variance_probe(const FloatTensor& x, const FloatTensor& g, int bit_width, Index n_seeds,
                                   std::uint64_t seed = 1, RoundingMode mode = RoundingMode::kStochastic);

// ---------------------------------------------------------------------------
// Quadratic testbed
// ---------------------------------------------------------------------------

struct ConvexProblemSpec {
  Index dim = 50;
  Index rows = 1000;
  double c = 0.1;  // smallest Hessian eigenvalue
  double L = 1.0;  // largest Hessian eigenvalue
  double residual = 1.0;  // RMS of the part of b outside col(A)
  Index batch = 8;
  int bit_width = 8;
  std::uint64_t seed = 1;
};

/// Least squares 1/(2n) ||A w - b||^2 with A = sqrt(n) U diag(sqrt(lambda)) Q^T,
/// so the Hessian spectrum is exactly lambda (endpoints c and L).
struct QuadraticProblem {
  ConvexProblemSpec spec;
  Eigen::MatrixXd A;
  Eigen::VectorXd b;
  Eigen::VectorXd w_star;
  Eigen::VectorXd eigenvalues;
  Eigen::MatrixXd eigenvectors;  // columns, ascending eigenvalues
  double loss_star = 0.0;

  double loss(const Eigen::VectorXd& w) const;
  Eigen::VectorXd gradient(const Eigen::VectorXd& w) const;
  /// Minibatch gradient over the given rows, in double precision.
  Eigen::VectorXd minibatch_gradient(const Eigen::VectorXd& w, std::span<const Index> rows) const;
  /// Same gradient with A_B^T and the residual mapped to k-bit fixed point
  /// and multiplied by the integer GEMM.
  Eigen::VectorXd fixed_point_gradient(const Eigen::VectorXd& w, std::span<const Index> rows,
                                       RoundingContext& ctx) const;
};

QuadraticProblem make_quadratic(const ConvexProblemSpec& spec);

/// Plug-in estimates of the gradient-noise constants.
struct GradientNoise {
  double M = 0.0;     // V{g} at w*
  double M_V = 0.0;   // max over probes of (V{g} - M) / ||grad||^2
  double Mq = 0.0;    // E||g^ - g||^2 at w*
  double Mq_V = 0.0;  // max over probes of (E||g^ - g||^2 - Mq) / ||grad||^2
  double M_G() const { return 1.0 + M_V; }
  double Mq_G() const { return 1.0 + Mq_V; }
};

GradientNoise measure_gradient_noise(const QuadraticProblem& p, Index samples, std::uint64_t seed);

/// Largest learning rate allowed by the convergence theorem: 1 / (L (M_G + Mq_G)).
double max_learning_rate(const QuadraticProblem& p, const GradientNoise& noise);

struct GapRow {
  double alpha = 0.0;
  std::string arm;  // "fixed" or "float"
  double gap = 0.0;              // steady-state E{L(w) - L*}
  double gap_stderr = 0.0;
  double bound = 0.0;            // alpha L (M [+ Mq]) / (2c)
  double contraction = 0.0;      // fitted per-step factor of the transient
  double expected_contraction = 0.0;  // 1 - alpha c
  std::vector<double> trajectory;     // mean gap per step over seeds
};

struct Theorem1Report {
  GradientNoise noise;
  double alpha_max = 0.0;
  std::vector<GapRow> rows;
};

/// Fixed-step SGD from w* + delta q_c (q_c the c-eigenvector) with fixed-point
/// and float gradients. Throws LearningRateTooLarge if any alpha exceeds the
/// theorem's limit.
Theorem1Report theorem1_experiment(const QuadraticProblem& p, const GradientNoise& noise,
                                   std::span<const double> alphas, Index steps, Index seeds);

/// Log-linear fit of the transient excess gap (gap_k - steady) while it is
/// above `floor_ratio` times the steady gap; returns exp(slope).
double fit_contraction(std::span<const double> trajectory, double steady, double floor_ratio = 20.0);

// ---------------------------------------------------------------------------
// Baselines and probes
// ---------------------------------------------------------------------------

struct UniformQuant {
  std::vector<std::int8_t> q;
  float scale = 0.0f;  // s = max|x|; value = q * s / 127
};

UniformQuant uniform_quant_baseline(std::span<const float> x);
std::vector<float> uniform_dequant(const UniformQuant& u);

struct LandscapeGrids {
  Index n = 0;
  double scale = 0.0;
  Eigen::MatrixXd float_loss;  // [n,n], row = first direction
  Eigen::MatrixXd fixed_loss;
  double center_float = 0.0;
  double center_fixed = 0.0;
};

/// Loss on two fixed Gaussian directions around a checkpoint, evaluated by the
/// float and the k-bit forward; writes landscape_float.csv and
/// landscape_fixed.csv into out_dir.
LandscapeGrids landscape_probe(const std::filesystem::path& checkpoint, Index grid, double scale,
                               const std::filesystem::path& out_dir, Index eval_samples = 1000);

// ---------------------------------------------------------------------------
// Verification suites
// ---------------------------------------------------------------------------

struct SuiteCheck {
  std::string name;
  bool passed = false;
  std::string detail;
};

struct SuiteResult {
  std::string suite;
  std::vector<SuiteCheck> checks;
  bool passed() const;
};

const std::vector<std::string>& suite_names();

/// Runs one named suite; writes verify_<suite>.csv to out_dir. Throws
/// UnknownSuite for other names.
SuiteResult run_suite(const std::string& name, const std::filesystem::path& out_dir);

}  // namespace dfx
