#include <fstream>
#include <numeric>
#include <random>

#include "dfx/app.hpp"
#include "dfx/theory.hpp"

namespace dfx {

namespace {

// Gaussian direction with each tensor rescaled to the norm of its weights.
std::vector<FloatTensor> direction(const std::vector<FloatTensor>& weights, std::mt19937_64& gen) {
  std::normal_distribution<float> normal;
  std::vector<FloatTensor> out;
  for (const FloatTensor& w : weights) {
    FloatTensor d(w.shape());
    for (Index i = 0; i < d.size(); ++i) d[i] = normal(gen);
    const float dn = d.data().matrix().norm(), wn = w.data().matrix().norm();
    if (dn > 0.0f) d.data() *= wn / dn;
    out.push_back(std::move(d));
  }
  return out;
}

void write_grid(const std::filesystem::path& path, const Eigen::MatrixXd& grid) {
  std::ofstream os(path);
  if (!os) throw DfxError(ErrorCode::kMalformedFile, "cannot write " + path.string());
  for (Index i = 0; i < grid.rows(); ++i) {
    for (Index j = 0; j < grid.cols(); ++j) os << (j ? "," : "") << fmt9(grid(i, j));
    os << "\n";
  }
}

}  // namespace

LandscapeGrids landscape_probe(const std::filesystem::path& checkpoint, Index grid, double scale,
                               const std::filesystem::path& out_dir, Index eval_samples) {
  if (grid < 1) throw DfxError(ErrorCode::kConfigInvalid, "landscape grid must be at least 1");
  Checkpoint ck = load_checkpoint(checkpoint);
  const RunConfig& c = ck.config;
  const DataSplit data = load_dataset(c);
  const ModelConfig model = model_config(c, data.test.sample_shape(), data.test.classes);

  std::vector<Index> idx(static_cast<std::size_t>(std::min(eval_samples, data.test.size())));
  std::iota(idx.begin(), idx.end(), Index{0});
  const FloatTensor x = data.test.gather(idx);
  std::vector<int> y;
  for (Index i : idx) y.push_back(data.test.labels[static_cast<std::size_t>(i)]);

  std::vector<FloatTensor> center;
  for (const Fxp16& m : ck.state.master) center.push_back(inverse_map(m));
  std::mt19937_64 gen(c.seed);
  const std::vector<FloatTensor> d1 = direction(center, gen), d2 = direction(center, gen);

  auto losses = [&](double a, double b) {
    std::vector<FloatTensor> w = center;
    for (std::size_t t = 0; t < w.size(); ++t)
      w[t].data() += static_cast<float>(a) * d1[t].data() + static_cast<float>(b) * d2[t].data();
    const double fl = softmax_cross_entropy(forward(model, w, x, Phase::kEval, &ck.stats).logits, y).loss;
    RoundingContext ctx(c.seed, c.forward_rounding);
    std::vector<Fxp8> q;
    for (const FloatTensor& t : w) q.push_back(map_to_fixed<std::int8_t>(t, c.bit_width, ctx));
    const double il = softmax_cross_entropy(forward(model, q, x, ctx, Phase::kEval, &ck.stats).logits, y).loss;
    return std::pair{fl, il};
  };

  LandscapeGrids out;
  out.n = grid;
  out.scale = scale;
  out.float_loss.resize(grid, grid);
  out.fixed_loss.resize(grid, grid);
  auto coord = [&](Index i) { return grid == 1 ? 0.0 : scale * (2.0 * static_cast<double>(i) / static_cast<double>(grid - 1) - 1.0); };
  for (Index i = 0; i < grid; ++i)
    for (Index j = 0; j < grid; ++j) std::tie(out.float_loss(i, j), out.fixed_loss(i, j)) = losses(coord(i), coord(j));
  std::tie(out.center_float, out.center_fixed) = losses(0.0, 0.0);

  std::filesystem::create_directories(out_dir);
  write_grid(out_dir / "landscape_float.csv", out.float_loss);
  write_grid(out_dir / "landscape_fixed.csv", out.fixed_loss);
  return out;
}

}  // namespace dfx
