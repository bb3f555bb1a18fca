#include <array>

#include "dfx/kernels.hpp"
#include "dfx/nn.hpp"
#include "network.hpp"

namespace dfx {

namespace {

Fxp8 matmul(const Fxp8& a, const Fxp8& b, RoundingContext& ctx) {
  const Index inner = a.shape().at(1);
  if (inner <= max_inner_dimension(std::max(a.bit_width, b.bit_width)))
    return renormalize<std::int8_t>(fxp_gemm(a, b), a.bit_width, ctx);
  return fxp_gemm_tiled(a, b, ctx);
}

struct IntBackend {
  using Value = Fxp8;

  static Shape shape(const Fxp8& x) { return x.shape(); }
  static Fxp8 reshape(const Fxp8& x, const Shape& s) { return x.reshaped(s); }
  static Fxp8 add(const Fxp8& a, const Fxp8& b, RoundingContext& ctx) { return fxp_add(a, b, ctx); }

  static Fxp8 linear(const Fxp8& x, const Fxp8& w, const Fxp8& b, RoundingContext& ctx) {
    return fxp_bias_add(fxp_gemm(x, w), b, x.bit_width, ctx);
  }
  static std::array<Fxp8, 3> linear_backward(const Fxp8& g, const Fxp8& x, const Fxp8& w, RoundingContext& ctx) {
    Fxp8 dw = matmul(transpose(x), g, ctx);
    Fxp8 db = fxp_reduce_channels(g, ctx);
    Fxp8 dx = matmul(g, transpose(w), ctx);
    return {std::move(dx), std::move(dw), std::move(db)};
  }

  static Fxp8 conv(const Fxp8& x, const Fxp8& w, const Fxp8& b, const LayerSpec& s, RoundingContext& ctx) {
    return fxp_bias_add(fxp_conv2d(x, w, s.stride, s.padding), b, x.bit_width, ctx);
  }
  static std::array<Fxp8, 3> conv_backward(const Fxp8& g, const Fxp8& x, const Fxp8& w, const LayerSpec& s,
                                           RoundingContext& ctx) {
    Conv2dGrads d = fxp_conv2d_backward(g, x, w, s.stride, s.padding, ctx);
    Fxp8 db = fxp_reduce_channels(g, ctx);
    return {std::move(d.dx), std::move(d.dw), std::move(db)};
  }

  struct NormOut {
    Fxp8 y;
    NormCache cache;
    std::vector<float> mean, var;
  };
  static NormOut norm(const Fxp8& x, bool batch, const Fxp8& gamma, const Fxp8& beta, RoundingContext& ctx) {
    const NormLayout layout = batch ? NormLayout::batch(x.shape()) : NormLayout::layer(x.shape());
    NormForward f = fxp_norm_forward(x, layout, NormParams{gamma, beta}, ctx);
    NormOut out{std::move(f.y), std::move(f.cache), {}, {}};
    const FloatTensor mean = inverse_map(f.mean);
    for (Index g = 0; g < mean.size(); ++g) {
      out.mean.push_back(mean[g]);
      out.var.push_back(static_cast<float>(to_double(f.var[static_cast<std::size_t>(g)])));
    }
    return out;
  }
  static Fxp8 norm_apply(const Fxp8& x, const std::vector<float>& mean, const std::vector<float>& var,
                         const Fxp8& gamma, const Fxp8& beta, RoundingContext& ctx) {
    FloatTensor m({static_cast<Index>(mean.size())});
    for (std::size_t c = 0; c < mean.size(); ++c) m[static_cast<Index>(c)] = mean[c];
    std::vector<Wide> v;
    for (float f : var) v.push_back(wide_from_float(f));
    return fxp_batchnorm_apply(x, map_to_fixed<std::int8_t>(m, x.bit_width, ctx), v, NormParams{gamma, beta}, ctx);
  }
  static std::array<Fxp8, 3> norm_backward(const Fxp8& g, const NormCache& cache, const Fxp8& gamma,
                                           const Fxp8& beta, RoundingContext& ctx) {
    NormGrads d = fxp_norm_backward(g, cache, NormParams{gamma, beta}, ctx);
    return {std::move(d.dx), std::move(d.dgamma), std::move(d.dbeta)};
  }

  static Fxp8 relu(const Fxp8& x) { return fxp_relu(x); }
  static Fxp8 relu_backward(const Fxp8& g, const Fxp8& x) { return fxp_relu_backward(g, x); }

  static MaxPoolResult maxpool(const Fxp8& x, Index window) { return fxp_maxpool2d(x, window); }
  static Fxp8 maxpool_backward(const Fxp8& g, const std::vector<Index>& argmax, const Shape& in_shape) {
    return fxp_maxpool2d_backward(g, argmax, in_shape);
  }
  static Fxp8 avgpool(const Fxp8& x, Index window, RoundingContext& ctx) { return fxp_avgpool2d(x, window, ctx); }
  static Fxp8 avgpool_backward(const Fxp8& g, Index window, const Shape& in_shape, RoundingContext& ctx) {
    return fxp_avgpool2d_backward(g, window, in_shape, ctx);
  }
};

Shape batch_shape(const ModelConfig& config, const FloatTensor& batch) {
  Shape expect{batch.rank() > 0 ? batch.dim(0) : 0};
  expect.insert(expect.end(), config.input_shape.begin(), config.input_shape.end());
  if (batch.shape() != expect)
    throw DfxError(ErrorCode::kShapeMismatch,
                   "batch " + shape_string(batch.shape()) + " does not match model input " + shape_string(expect));
  return expect;
}

}  // namespace

ForwardPass<Fxp8> forward(const ModelConfig& config, const std::vector<Fxp8>& params, const FloatTensor& batch,
                          RoundingContext& ctx, Phase phase, NormStats* stats) {
  config.validate();
  batch_shape(config, batch);
  detail::Builder<IntBackend> b(params, ctx, phase, stats);
  const int in = b.input(map_to_fixed<std::int8_t>(batch, config.bit_width, ctx));
  b.run(config.layers, in);
  b.finish();
  ForwardPass<Fxp8> out{inverse_map(b.tape.node(b.tape.output()).value), std::move(b.tape)};
  return out;
}

std::vector<Fxp8> backward(const ModelConfig& config, const Tape<Fxp8>& tape, const std::vector<Fxp8>& params,
                           const Fxp8& dlogits, RoundingContext& ctx) {
  require_same_shape(dlogits.shape(), tape.node(tape.output()).value.shape(), "backward: logits gradient");
  auto grads = tape.backward(tape.output(), dlogits, params.size(), ctx,
                             [](const Fxp8& a, const Fxp8& b, RoundingContext& c) { return fxp_add(a, b, c); });
  std::vector<Fxp8> out;
  out.reserve(params.size());
  for (std::size_t i = 0; i < params.size(); ++i)
    out.push_back(grads[i] ? std::move(*grads[i]) : Fxp8::zeros(params[i].shape(), config.bit_width));
  return out;
}

LossAndGrad loss_and_grad(const FloatTensor& logits, std::span<const int> labels, int bit_width,
                          RoundingContext& ctx) {
  SoftmaxLoss l = softmax_cross_entropy(logits, labels);
  return LossAndGrad{l.loss, map_to_fixed<std::int8_t>(l.grad, bit_width, ctx), l.correct};
}

StepResult<Fxp8> integer_step(const ModelConfig& config, const std::vector<Fxp8>& params, const FloatTensor& batch,
                              std::span<const int> labels, RoundingContext& ctx, NormStats* stats) {
  const RoundingMode saved = ctx.mode();
  ctx.set_mode(config.forward_mode);
  ForwardPass<Fxp8> f = forward(config, params, batch, ctx, Phase::kTrain, stats);
  ctx.set_mode(config.backward_mode);
  LossAndGrad lg = loss_and_grad(f.logits, labels, config.bit_width, ctx);
  StepResult<Fxp8> out{lg.loss, lg.correct, backward(config, f.tape, params, lg.dlogits, ctx)};
  ctx.set_mode(saved);
  return out;
}

}  // namespace dfx
