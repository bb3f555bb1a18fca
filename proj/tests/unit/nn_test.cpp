#include <cmath>
#include <numeric>

#include "dfx/nn.hpp"
#include "helpers.hpp"

using namespace dfx;
using namespace dfx::test;

namespace {

std::vector<Fxp8> quantize(const std::vector<FloatTensor>& w, int k, RoundingContext& ctx) {
  std::vector<Fxp8> out;
  for (const FloatTensor& t : w) out.push_back(map_to_fixed<std::int8_t>(t, k, ctx));
  return out;
}

std::vector<FloatTensor> dequantize(const std::vector<Fxp8>& w) {
  std::vector<FloatTensor> out;
  for (const Fxp8& t : w) out.push_back(inverse_map(t));
  return out;
}

double half_ulp(const Fxp8& t) { return t.is_zero() ? 0.0 : std::ldexp(1.0, t.unit_exponent() - 1); }

ModelConfig two_layer(Index in, Index hidden, Index out) {
  ModelConfig c;
  c.input_shape = {in};
  c.layers = {LayerSpec::linear(in, hidden), LayerSpec::relu(), LayerSpec::linear(hidden, out)};
  return c;
}

double float_loss(const ModelConfig& c, const std::vector<FloatTensor>& w, const FloatTensor& x,
                  const std::vector<int>& y) {
  NormStats stats = make_norm_stats(c);
  return softmax_cross_entropy(forward(c, w, x, Phase::kTrain, &stats).logits, y).loss;
}

}  // namespace

TEST_CASE("model validation and presets") {
  const ModelConfig mlp = mlp_preset(784, 256, 10);
  CHECK(mlp.validate() == Shape{10});
  const std::vector<ParamSpec> p = parameter_specs(mlp);
  REQUIRE(p.size() == 6);
  CHECK(p[0].shape == Shape{784, 256});
  CHECK(p[1].shape == Shape{256});
  CHECK(p[2].shape == Shape{256});
  CHECK(p[0].fan_in == 784);
  CHECK(count_batchnorms(mlp) == 1);
  const ModelConfig cnn = cnn_preset(1, 28, 28, 10);
  CHECK(cnn.validate() == Shape{10});
  CHECK(count_batchnorms(cnn) == 2);
  CHECK(parameter_specs(cnn)[0].shape == Shape{8, 1, 3, 3});

  ModelConfig bad = two_layer(4, 3, 2);
  bad.layers[2] = LayerSpec::linear(5, 2);
  CHECK_THROWS_CODE(bad.validate(), ErrorCode::kConfigInvalid);
  ModelConfig badk = two_layer(4, 3, 2);
  badk.bit_width = 9;
  CHECK_THROWS(badk.validate());
  ModelConfig conv_on_vector = two_layer(4, 3, 2);
  conv_on_vector.layers.insert(conv_on_vector.layers.begin(), LayerSpec::conv2d(1, 2));
  CHECK_THROWS_CODE(conv_on_vector.validate(), ErrorCode::kConfigInvalid);
}

TEST_CASE("initialization is deterministic and fan-in scaled") {
  const ModelConfig c = mlp_preset(50, 20, 3);
  const auto a = init_parameters(c, 4), b = init_parameters(c, 4), d = init_parameters(c, 5);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK((a[i].data() == b[i].data()).all());
  CHECK((a[0].data() != d[0].data()).any());
  CHECK(a[0].data().abs().maxCoeff() <= 1.0 / std::sqrt(50.0));
  CHECK((a[1].data() == 0.0f).all());
  CHECK((a[2].data() == 1.0f).all());
  CHECK((a[3].data() == 0.0f).all());
}

TEST_CASE("tape rejects forward references") {
  Tape<FloatTensor> t;
  const int a = t.push("input", {}, FloatTensor({1}));
  CHECK(a == 0);
  CHECK_THROWS_CODE(t.push("bad", {1}, FloatTensor({1})), ErrorCode::kShapeMismatch);
}

TEST_CASE("tape visits each node once and accumulates fan-out") {
  // y = 2x + 3x through two branches joining at a sum node.
  Tape<FloatTensor> t;
  int visits = 0;
  const int x = t.push("input", {}, FloatTensor::from({1}, {1.0f}), [&](const FloatTensor& g, RoundingContext&) {
    ++visits;
    return NodeGrads<FloatTensor>{{}, {{0, g}}};
  });
  auto scale = [&](float s) {
    return [s, &visits](const FloatTensor& g, RoundingContext&) {
      ++visits;
      FloatTensor out = g;
      out.data() *= s;
      return NodeGrads<FloatTensor>{{out}, {}};
    };
  };
  const int a = t.push("two", {x}, FloatTensor::from({1}, {2.0f}), scale(2.0f));
  const int b = t.push("three", {x}, FloatTensor::from({1}, {3.0f}), scale(3.0f));
  t.push("sum", {a, b}, FloatTensor::from({1}, {5.0f}), [&](const FloatTensor& g, RoundingContext&) {
    ++visits;
    return NodeGrads<FloatTensor>{{g, g}, {}};
  });
  RoundingContext ctx;
  const auto grads = t.backward(t.output(), FloatTensor::from({1}, {1.0f}), 1, ctx,
                                [](const FloatTensor& p, const FloatTensor& q, RoundingContext&) {
                                  FloatTensor s = p;
                                  s.data() += q.data();
                                  return s;
                                });
  CHECK(visits == 4);
  REQUIRE(grads[0].has_value());
  CHECK((*grads[0])[0] == 5.0f);
}

TEST_CASE("a linear layer with identity weights returns the quantized input") {
  ModelConfig c;
  c.input_shape = {4};
  c.layers = {LayerSpec::linear(4, 4)};
  Fxp8 w = Fxp8::zeros({4, 4}, 8);
  for (Index i = 0; i < 4; ++i) w.mantissas[i * 4 + i] = 64;
  w.exponent = 0;
  std::mt19937_64 rng(1);
  const FloatTensor x = gaussian_tensor({3, 4}, rng);
  RoundingContext ctx(9), ref(9);
  const ForwardPass<Fxp8> f = forward(c, {w, Fxp8::zeros({4}, 8)}, x, ctx);
  const FloatTensor q = inverse_map(map_to_fixed<std::int8_t>(x, 8, ref));
  for (Index i = 0; i < x.size(); ++i) CHECK(f.logits[i] == q[i]);
}

TEST_CASE("integer forward equals the float forward within the composed bound") {
  const ModelConfig c = two_layer(12, 9, 4);
  std::mt19937_64 rng(2);
  RoundingContext ctx(3, RoundingMode::kNearest);
  const std::vector<Fxp8> w = quantize(init_parameters(c, 2), 8, ctx);
  std::vector<FloatTensor> wf = dequantize(w);
  wf[1] = gaussian_tensor({9}, rng, 0.3);
  wf[3] = gaussian_tensor({4}, rng, 0.3);
  std::vector<Fxp8> wq = w;
  wq[1] = map_to_fixed<std::int8_t>(wf[1], 8, ctx);
  wq[3] = map_to_fixed<std::int8_t>(wf[3], 8, ctx);
  wf[1] = inverse_map(wq[1]);
  wf[3] = inverse_map(wq[3]);
  for (int trial = 0; trial < 20; ++trial) {
    const FloatTensor x = gaussian_tensor({5, 12}, rng);
    const ForwardPass<Fxp8> f = forward(c, wq, x, ctx, Phase::kTrain);
    const ForwardPass<FloatTensor> r = forward(c, wf, x, Phase::kTrain);
    // Interval propagation: |e_out| <= |e_in| |W| + half ulp of each rounded output.
    using M = Eigen::MatrixXd;
    const M x_err = (inverse_map(f.tape.node(0).value).matrix().cast<double>() - x.matrix().cast<double>()).cwiseAbs();
    const M w1 = wf[0].matrix().cast<double>().cwiseAbs(), w2 = wf[2].matrix().cast<double>().cwiseAbs();
    const M h_err = (x_err * w1).array() + half_ulp(f.tape.node(1).value);
    const M out_err = (h_err * w2).array() + half_ulp(f.tape.node(3).value);
    for (Index i = 0; i < 5; ++i)
      for (Index j = 0; j < 4; ++j)
        CHECK(std::abs(f.logits[i * 4 + j] - r.logits[i * 4 + j]) <= out_err(i, j) * (1 + 1e-6) + 1e-6);
  }
}

TEST_CASE("integer forward is deterministic in the seed") {
  const ModelConfig c = cnn_preset(1, 8, 8, 3);
  std::mt19937_64 rng(3);
  const FloatTensor x = gaussian_tensor({4, 1, 8, 8}, rng);
  RoundingContext q(1);
  const std::vector<Fxp8> w = quantize(init_parameters(c, 1), 8, q);
  RoundingContext a(5), b(5), d(6);
  const FloatTensor la = forward(c, w, x, a).logits, lb = forward(c, w, x, b).logits, ld = forward(c, w, x, d).logits;
  CHECK((la.data() == lb.data()).all());
  CHECK((la.data() != ld.data()).any());
  CHECK_THROWS_CODE(forward(c, w, gaussian_tensor({4, 1, 8, 7}, rng), a), ErrorCode::kShapeMismatch);
}

TEST_CASE("softmax cross-entropy") {
  FloatTensor sure({2, 3});
  sure[0 * 3 + 1] = 200.0f;
  sure[1 * 3 + 2] = 200.0f;
  const std::vector<int> y{1, 2};
  const SoftmaxLoss s = softmax_cross_entropy(sure, y);
  CHECK(s.loss < 1e-30);
  CHECK(s.grad.data().abs().maxCoeff() < 1e-30);
  CHECK(s.correct == 2);

  const SoftmaxLoss u = softmax_cross_entropy(FloatTensor({4, 7}), std::vector<int>{0, 1, 2, 6});
  CHECK(u.loss == doctest::Approx(std::log(7.0)).epsilon(1e-6));

  std::mt19937_64 rng(4);
  const FloatTensor z = gaussian_tensor({5, 4}, rng, 2.0);
  const std::vector<int> lab{0, 3, 2, 1, 3};
  const SoftmaxLoss l = softmax_cross_entropy(z, lab);
  for (Index i = 0; i < z.size(); ++i) {
    FloatTensor p = z, m = z;
    const float h = 1e-2f;
    p[i] += h;
    m[i] -= h;
    const double fd = (softmax_cross_entropy(p, lab).loss - softmax_cross_entropy(m, lab).loss) / (2.0 * h);
    CHECK(std::abs(fd - l.grad[i]) <= 1e-3);
  }
  for (Index r = 0; r < 5; ++r) CHECK(std::abs(l.grad.matrix().row(r).sum()) < 1e-6);

  FloatTensor bad = z;
  bad[3] = NAN;
  CHECK_THROWS_CODE(softmax_cross_entropy(bad, lab), ErrorCode::kNonFiniteInput);
  CHECK_THROWS_CODE(softmax_cross_entropy(z, std::vector<int>{0, 1}), ErrorCode::kShapeMismatch);
  CHECK_THROWS_CODE(softmax_cross_entropy(z, std::vector<int>{0, 1, 2, 3, 4}), ErrorCode::kShapeMismatch);

  RoundingContext ctx(1, RoundingMode::kNearest);
  const LossAndGrad lg = loss_and_grad(z, lab, 8, ctx);
  CHECK(lg.loss == l.loss);
  for (Index i = 0; i < z.size(); ++i)
    if (std::abs(lg.dlogits.mantissas[i]) != 127) CHECK(std::abs(value_at(lg.dlogits, i) - l.grad[i]) <= half_ulp(lg.dlogits));
}

TEST_CASE("zero upstream gradient gives zero parameter gradients") {
  const ModelConfig c = cnn_preset(1, 8, 8, 3);
  std::mt19937_64 rng(5);
  RoundingContext ctx(1);
  const std::vector<Fxp8> w = quantize(init_parameters(c, 1), 8, ctx);
  const ForwardPass<Fxp8> f = forward(c, w, gaussian_tensor({4, 1, 8, 8}, rng), ctx);
  const std::vector<Fxp8> g = backward(c, f.tape, w, Fxp8::zeros({4, 3}, 8), ctx);
  REQUIRE(g.size() == w.size());
  for (std::size_t i = 0; i < g.size(); ++i) {
    CHECK(g[i].shape() == w[i].shape());
    CHECK((g[i].mantissas.data() == 0).all());
  }
}

TEST_CASE("linear weight gradient is X^T G rounded once") {
  ModelConfig c;
  c.input_shape = {6};
  c.layers = {LayerSpec::linear(6, 3)};
  std::mt19937_64 rng(6);
  RoundingContext ctx(1, RoundingMode::kNearest);
  const std::vector<Fxp8> w = quantize({gaussian_tensor({6, 3}, rng), gaussian_tensor({3}, rng)}, 8, ctx);
  const ForwardPass<Fxp8> f = forward(c, w, gaussian_tensor({10, 6}, rng), ctx);
  const Fxp8 g = map_to_fixed<std::int8_t>(gaussian_tensor({10, 3}, rng), 8, ctx);
  const std::vector<Fxp8> grads = backward(c, f.tape, w, g, ctx);
  const Fxp8& x = f.tape.node(0).value;
  for (Index i = 0; i < 6; ++i)
    for (Index j = 0; j < 3; ++j) {
      double s = 0.0;
      for (Index b = 0; b < 10; ++b) s += value_at(x, b * 6 + i) * value_at(g, b * 3 + j);
      if (std::abs(grads[0].mantissas[i * 3 + j]) != 127)
        CHECK(std::abs(value_at(grads[0], i * 3 + j) - s) <= half_ulp(grads[0]) * (1 + 1e-6));
    }
  for (Index j = 0; j < 3; ++j) {
    double s = 0.0;
    for (Index b = 0; b < 10; ++b) s += value_at(g, b * 3 + j);
    if (std::abs(grads[1].mantissas[j]) != 127) CHECK(std::abs(value_at(grads[1], j) - s) <= half_ulp(grads[1]));
  }
}

TEST_CASE("linear weight gradient is unbiased over rounding seeds") {
  ModelConfig c;
  c.input_shape = {4};
  c.layers = {LayerSpec::linear(4, 2)};
  std::mt19937_64 rng(7);
  const FloatTensor x = gaussian_tensor({6, 4}, rng), g = gaussian_tensor({6, 2}, rng, 0.1);
  RoundingContext wctx(1, RoundingMode::kNearest);
  const std::vector<Fxp8> w = quantize({gaussian_tensor({4, 2}, rng), gaussian_tensor({2}, rng)}, 8, wctx);
  const Eigen::MatrixXd want = x.matrix().cast<double>().transpose() * g.matrix().cast<double>();
  const int n = 10000;
  Eigen::ArrayXd sum = Eigen::ArrayXd::Zero(8), sum2 = Eigen::ArrayXd::Zero(8);
  for (int s = 0; s < n; ++s) {
    RoundingContext ctx(static_cast<std::uint64_t>(s));
    const ForwardPass<Fxp8> f = forward(c, w, x, ctx);
    const std::vector<Fxp8> grads = backward(c, f.tape, w, map_to_fixed<std::int8_t>(g, 8, ctx), ctx);
    for (Index i = 0; i < 8; ++i) {
      const double v = value_at(grads[0], i);
      sum[i] += v;
      sum2[i] += v * v;
    }
  }
  for (Index i = 0; i < 8; ++i) {
    const double mean = sum[i] / n, se = std::sqrt(std::max(sum2[i] / n - mean * mean, 0.0) / n);
    CHECK(std::abs(mean - want(i / 2, i % 2)) <= 4.0 * se + 1e-12);
  }
}

TEST_CASE("float reference gradients match finite differences") {
  std::mt19937_64 rng(8);
  std::vector<ModelConfig> models;
  {
    ModelConfig c;
    c.input_shape = {5};
    c.layers = {LayerSpec::linear(5, 6), LayerSpec::batchnorm(), LayerSpec::linear(6, 3)};
    models.push_back(c);
  }
  {
    ModelConfig c;
    c.input_shape = {5};
    c.layers = {LayerSpec::linear(5, 6), LayerSpec::layernorm(), LayerSpec::linear(6, 3)};
    models.push_back(c);
  }
  {
    ModelConfig c;
    c.input_shape = {2, 4, 4};
    c.layers = {LayerSpec::conv2d(2, 3), LayerSpec::avgpool(2), LayerSpec::flatten(), LayerSpec::linear(12, 3)};
    models.push_back(c);
  }
  {
    ModelConfig c;
    c.input_shape = {4};
    c.layers = {LayerSpec::linear(4, 4), LayerSpec::residual({LayerSpec::linear(4, 4), LayerSpec::layernorm()}),
                LayerSpec::linear(4, 3)};
    models.push_back(c);
  }
  for (const ModelConfig& c : models) {
    std::vector<FloatTensor> w = init_parameters(c, 3);
    for (FloatTensor& t : w) t.data() += gaussian_tensor(t.shape(), rng, 0.1).data();
    Shape xs{6};
    xs.insert(xs.end(), c.input_shape.begin(), c.input_shape.end());
    const FloatTensor x = gaussian_tensor(xs, rng);
    const std::vector<int> y{0, 1, 2, 0, 1, 2};
    NormStats stats = make_norm_stats(c);
    const StepResult<FloatTensor> r = float_reference_step(c, w, x, y, &stats);
    for (std::size_t p = 0; p < w.size(); ++p) {
      const double scale = std::max(1.0, static_cast<double>(r.grads[p].data().abs().maxCoeff()));
      for (Index i = 0; i < w[p].size(); ++i) {
        std::vector<FloatTensor> plus = w, minus = w;
        const float h = 1e-2f;
        plus[p][i] += h;
        minus[p][i] -= h;
        const double fd = (float_loss(c, plus, x, y) - float_loss(c, minus, x, y)) / (2.0 * h);
        INFO("model layers " << c.layers.size() << " param " << p << " index " << i);
        CHECK(std::abs(fd - r.grads[p][i]) <= 1e-3 * scale);
      }
    }
  }
}

TEST_CASE("float training decreases the loss on a separable problem") {
  const ModelConfig c = two_layer(2, 8, 2);
  std::mt19937_64 rng(9);
  FloatTensor x({32, 2});
  std::vector<int> y(32);
  for (Index i = 0; i < 32; ++i) {
    y[static_cast<std::size_t>(i)] = static_cast<int>(i % 2);
    x[i * 2] = static_cast<float>((i % 2 ? 2.0 : -2.0) + 0.3 * std::normal_distribution<double>()(rng));
    x[i * 2 + 1] = static_cast<float>(std::normal_distribution<double>()(rng));
  }
  std::vector<FloatTensor> w = init_parameters(c, 1);
  double first = 0.0, last = 0.0;
  for (int step = 0; step < 100; ++step) {
    const StepResult<FloatTensor> r = float_reference_step(c, w, x, y);
    if (step == 0) first = r.loss;
    last = r.loss;
    for (std::size_t p = 0; p < w.size(); ++p) w[p].data() -= 0.1f * r.grads[p].data();
  }
  CHECK(last < 0.2 * first);
}
