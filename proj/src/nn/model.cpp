#include <cmath>
#include <functional>
#include <string>

#include "dfx/nn.hpp"

namespace dfx {

namespace {

// Operation id reserved for parameter initialization draws.
constexpr std::uint64_t kInitStream = 0x1417'0000'0000'0000ULL;

[[noreturn]] void bad_layer(const LayerSpec& s, const Shape& in, const std::string& why) {
  throw DfxError(ErrorCode::kConfigInvalid, to_string(s.kind) + " on input " + shape_string(in) + ": " + why);
}

Shape propagate(const LayerSpec& s, const Shape& in, std::vector<ParamSpec>* params, Index* norms,
                const std::string& prefix) {
  auto add = [&](const std::string& name, Shape shape, ParamSpec::Init init, Index fan_in) {
    if (params) params->push_back(ParamSpec{prefix + name, std::move(shape), init, fan_in});
  };
  switch (s.kind) {
    case LayerKind::kLinear:
      if (in.size() != 1 || in[0] != s.in) bad_layer(s, in, "expects " + std::to_string(s.in) + " features");
      if (s.out < 1) bad_layer(s, in, "no outputs");
      add("weight", {s.in, s.out}, ParamSpec::Init::kFanIn, s.in);
      add("bias", {s.out}, ParamSpec::Init::kZeros, s.in);
      return {s.out};
    case LayerKind::kConv2d: {
      if (in.size() != 3 || in[0] != s.in) bad_layer(s, in, "expects " + std::to_string(s.in) + " channels");
      if (s.out < 1 || s.kernel < 1 || s.stride < 1 || s.padding < 0) bad_layer(s, in, "invalid geometry");
      const Index oh = (in[1] + 2 * s.padding - s.kernel) / s.stride + 1;
      const Index ow = (in[2] + 2 * s.padding - s.kernel) / s.stride + 1;
      if (in[1] + 2 * s.padding < s.kernel || in[2] + 2 * s.padding < s.kernel) bad_layer(s, in, "kernel too large");
      const Index fan_in = s.in * s.kernel * s.kernel;
      add("weight", {s.out, s.in, s.kernel, s.kernel}, ParamSpec::Init::kFanIn, fan_in);
      add("bias", {s.out}, ParamSpec::Init::kZeros, fan_in);
      return {s.out, oh, ow};
    }
    case LayerKind::kBatchNorm:
      if (in.size() != 1 && in.size() != 3) bad_layer(s, in, "expects features or CHW");
      add("gamma", {in[0]}, ParamSpec::Init::kOnes, 1);
      add("beta", {in[0]}, ParamSpec::Init::kZeros, 1);
      if (norms) ++*norms;
      return in;
    case LayerKind::kLayerNorm:
      if (numel(in) < 2) bad_layer(s, in, "needs at least 2 features");
      add("gamma", {numel(in)}, ParamSpec::Init::kOnes, 1);
      add("beta", {numel(in)}, ParamSpec::Init::kZeros, 1);
      return in;
    case LayerKind::kReLU:
      return in;
    case LayerKind::kMaxPool:
    case LayerKind::kAvgPool:
      if (in.size() != 3 || s.window < 1 || in[1] < s.window || in[2] < s.window)
        bad_layer(s, in, "expects CHW at least one window wide");
      return {in[0], in[1] / s.window, in[2] / s.window};
    case LayerKind::kFlatten:
      return {numel(in)};
    case LayerKind::kResidual: {
      Shape cur = in;
      for (std::size_t i = 0; i < s.body.size(); ++i)
        cur = propagate(s.body[i], cur, params, norms, prefix + "body" + std::to_string(i) + ".");
      if (cur != in) bad_layer(s, in, "body output " + shape_string(cur) + " differs from input");
      return in;
    }
  }
  bad_layer(s, in, "unknown layer");
}

Shape walk(const ModelConfig& config, std::vector<ParamSpec>* params, Index* norms) {
  check_bit_width(config.bit_width);
  if (config.input_shape.empty() || numel(config.input_shape) < 1)
    throw DfxError(ErrorCode::kConfigInvalid, "empty model input shape");
  if (config.layers.empty()) throw DfxError(ErrorCode::kConfigInvalid, "model has no layers");
  Shape cur = config.input_shape;
  for (std::size_t i = 0; i < config.layers.size(); ++i)
    cur = propagate(config.layers[i], cur, params, norms, "layer" + std::to_string(i) + ".");
  if (cur.size() != 1) throw DfxError(ErrorCode::kConfigInvalid, "model output must be a class vector");
  return cur;
}

LayerSpec of_kind(LayerKind kind) {
  LayerSpec s;
  s.kind = kind;
  return s;
}

}  // namespace

std::string to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::kLinear: return "linear";
    case LayerKind::kConv2d: return "conv2d";
    case LayerKind::kBatchNorm: return "batchnorm";
    case LayerKind::kLayerNorm: return "layernorm";
    case LayerKind::kReLU: return "relu";
    case LayerKind::kMaxPool: return "maxpool";
    case LayerKind::kAvgPool: return "avgpool";
    case LayerKind::kFlatten: return "flatten";
    case LayerKind::kResidual: return "residual";
  }
  return "unknown";
}

LayerSpec LayerSpec::linear(Index in, Index out) {
  LayerSpec s;
  s.kind = LayerKind::kLinear;
  s.in = in;
  s.out = out;
  return s;
}

LayerSpec LayerSpec::conv2d(Index in, Index out, Index kernel, Index stride, Index padding) {
  LayerSpec s;
  s.kind = LayerKind::kConv2d;
  s.in = in;
  s.out = out;
  s.kernel = kernel;
  s.stride = stride;
  s.padding = padding;
  return s;
}

LayerSpec LayerSpec::batchnorm() { return of_kind(LayerKind::kBatchNorm); }
LayerSpec LayerSpec::layernorm() { return of_kind(LayerKind::kLayerNorm); }
LayerSpec LayerSpec::relu() { return of_kind(LayerKind::kReLU); }
LayerSpec LayerSpec::flatten() { return of_kind(LayerKind::kFlatten); }

LayerSpec LayerSpec::maxpool(Index window) {
  LayerSpec s = of_kind(LayerKind::kMaxPool);
  s.window = window;
  return s;
}

LayerSpec LayerSpec::avgpool(Index window) {
  LayerSpec s = of_kind(LayerKind::kAvgPool);
  s.window = window;
  return s;
}

LayerSpec LayerSpec::residual(std::vector<LayerSpec> body) {
  LayerSpec s = of_kind(LayerKind::kResidual);
  s.body = std::move(body);
  return s;
}

Shape ModelConfig::validate() const { return walk(*this, nullptr, nullptr); }

ModelConfig mlp_preset(Index inputs, Index hidden, Index classes) {
  ModelConfig c;
  c.input_shape = {inputs};
  c.layers = {LayerSpec::linear(inputs, hidden), LayerSpec::batchnorm(), LayerSpec::relu(),
              LayerSpec::linear(hidden, classes)};
  return c;
}

ModelConfig cnn_preset(Index channels, Index height, Index width, Index classes) {
  ModelConfig c;
  c.input_shape = {channels, height, width};
  c.layers = {LayerSpec::conv2d(channels, 8), LayerSpec::batchnorm(), LayerSpec::relu(), LayerSpec::maxpool(2),
              LayerSpec::conv2d(8, 16),       LayerSpec::batchnorm(), LayerSpec::relu(), LayerSpec::maxpool(2),
              LayerSpec::flatten(),           LayerSpec::linear(16 * (height / 4) * (width / 4), classes)};
  return c;
}

std::vector<ParamSpec> parameter_specs(const ModelConfig& config) {
  std::vector<ParamSpec> out;
  walk(config, &out, nullptr);
  return out;
}

Index count_batchnorms(const ModelConfig& config) {
  Index n = 0;
  walk(config, nullptr, &n);
  return n;
}

NormStats make_norm_stats(const ModelConfig& config) {
  NormStats stats;
  std::function<void(const std::vector<LayerSpec>&, Shape&)> visit = [&](const std::vector<LayerSpec>& layers,
                                                                          Shape& cur) {
    for (const LayerSpec& s : layers) {
      if (s.kind == LayerKind::kBatchNorm)
        stats.layers.push_back(NormStats::Channel{std::vector<float>(static_cast<std::size_t>(cur[0]), 0.0f),
                                                  std::vector<float>(static_cast<std::size_t>(cur[0]), 1.0f)});
      if (s.kind == LayerKind::kResidual) {
        Shape inner = cur;
        visit(s.body, inner);
      }
      cur = propagate(s, cur, nullptr, nullptr, "");
    }
  };
  config.validate();
  Shape cur = config.input_shape;
  visit(config.layers, cur);
  return stats;
}

std::vector<FloatTensor> init_parameters(const ModelConfig& config, std::uint64_t seed) {
  std::vector<FloatTensor> out;
  std::uint64_t stream = kInitStream;
  for (const ParamSpec& p : parameter_specs(config)) {
    FloatTensor t(p.shape);
    if (p.init == ParamSpec::Init::kOnes) t.data().setOnes();
    if (p.init == ParamSpec::Init::kFanIn) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(p.fan_in));
      for (Index i = 0; i < t.size(); ++i) {
        const double u = static_cast<double>(RoundingContext::draw(seed, stream, static_cast<std::uint64_t>(i)) >> 11) *
                         0x1.0p-53;
        t[i] = static_cast<float>((2.0 * u - 1.0) * bound);
      }
    }
    ++stream;
    out.push_back(std::move(t));
  }
  return out;
}

}  // namespace dfx
