#include "dfx/kernels.hpp"
#include "dfx/theory.hpp"

namespace dfx {

namespace {

// Welford accumulators, one per element.
struct Moments {
  Eigen::ArrayXd mu, m2;
  double count = 0.0;
  explicit Moments(Index n) : mu(Eigen::ArrayXd::Zero(n)), m2(Eigen::ArrayXd::Zero(n)) {}
  void add(const Eigen::ArrayXd& v) {
    count += 1.0;
    const Eigen::ArrayXd delta = v - mu;
    mu += delta / count;
    m2 += delta * (v - mu);
  }
  Eigen::ArrayXd variance() const { return m2 / (count - 1.0); }
};

template <typename Mantissa>
Eigen::ArrayXd values(const FxpTensor<Mantissa>& t) {
  Eigen::ArrayXd v(t.size());
  for (Index i = 0; i < t.size(); ++i) v[i] = value_at(t, i);
  return v;
}

}  // namespace

NoiseStats gradient_variance_probe(const FloatTensor& x, const FloatTensor& g, int bit_width, Index n_seeds,
                                   std::uint64_t seed, RoundingMode mode) {
  if (x.rank() != 2 || g.rank() != 2 || x.dim(0) != g.dim(0))
    throw DfxError(ErrorCode::kShapeMismatch, "variance probe needs X [K,M] and G [K,N]");
  if (n_seeds < 2) throw DfxError(ErrorCode::kConfigInvalid, "variance probe needs at least two seeds");
  const Index K = x.dim(0), M = x.dim(1), N = g.dim(1);
  const Eigen::MatrixXd X = x.matrix().cast<double>(), G = g.matrix().cast<double>();
  const Eigen::MatrixXd C = X.transpose() * G;

  Moments mx(K * M), mg(K * N);
  Eigen::MatrixXd samples(n_seeds, M * N);
  for (Index s = 0; s < n_seeds; ++s) {
    RoundingContext ctx(seed + static_cast<std::uint64_t>(s), mode);
    const Fxp8 xq = map_to_fixed<std::int8_t>(x, bit_width, ctx);
    const Fxp8 gq = map_to_fixed<std::int8_t>(g, bit_width, ctx);
    mx.add(values(xq));
    mg.add(values(gq));
    const AccTensor c = fxp_gemm(transpose(xq), gq);
    samples.row(s) = (c.values.data().cast<double>() * std::ldexp(1.0, c.scale_exponent)).matrix().transpose();
  }

  NoiseStats out;
  out.inner = K;
  out.sigma2_x = mx.variance().maxCoeff();
  out.sigma2_g = mg.variance().maxCoeff();
  out.mq_v = out.sigma2_x;
  const double n = static_cast<double>(n_seeds);
  const Eigen::RowVectorXd mean = samples.colwise().mean();
  const Eigen::ArrayXXd centered = samples.rowwise() - mean;
  const Eigen::ArrayXd m2 = centered.square().colwise().mean().transpose();
  const Eigen::ArrayXd m4 = centered.square().square().colwise().mean().transpose();
  const Eigen::ArrayXd var = m2 * n / (n - 1.0);
  const Eigen::ArrayXd se = ((m4 - m2.square()).max(0.0) / n).sqrt();
  out.variance.resize(M, N);
  out.variance_se.resize(M, N);
  out.bias.resize(M, N);
  out.bound.resize(M, N);
  out.mq.resize(M);
  for (Index i = 0; i < M; ++i)
    out.mq[i] = out.sigma2_g * X.col(i).squaredNorm() + static_cast<double>(K) * out.sigma2_x * out.sigma2_g;
  for (Index i = 0; i < M; ++i)
    for (Index j = 0; j < N; ++j) {
      out.variance(i, j) = var[i * N + j];
      out.variance_se(i, j) = se[i * N + j];
      out.bias(i, j) = mean[i * N + j] - C(i, j);
      out.bound(i, j) = out.mq_v * G.col(j).squaredNorm() + out.mq[i];
      if (out.variance(i, j) > out.bound(i, j) + 4.0 * out.variance_se(i, j)) ++out.violations;
    }
  return out;
}

}  // namespace dfx
