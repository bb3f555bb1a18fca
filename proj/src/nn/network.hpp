#pragma once

#include <array>
#include <string>
#include <utility>
#include <vector>

#include "dfx/nn.hpp"

namespace dfx::detail {

/// Records a forward pass over a layer list onto a tape. Backend supplies the
/// per-layer arithmetic; this class owns parameter and statistics bookkeeping
/// so both arms traverse the model identically.
template <typename Backend>
class Builder {
 public:
  using Value = typename Backend::Value;

  Builder(const std::vector<Value>& params, RoundingContext& ctx, Phase phase, NormStats* stats)
      : params_(params), ctx_(ctx), phase_(phase), stats_(stats) {}

  int input(Value x) { return tape.push("input", {}, std::move(x)); }

  int run(const std::vector<LayerSpec>& layers, int node) {
    for (const LayerSpec& s : layers) node = layer(s, node);
    return node;
  }

  void finish() const {
    if (next_param_ != params_.size())
      throw DfxError(ErrorCode::kShapeMismatch, "model consumed " + std::to_string(next_param_) + " of " +
                                                    std::to_string(params_.size()) + " parameters");
  }

  Tape<Value> tape;

 private:
  const Value& x_of(int node) const { return tape.node(node).value; }

  std::size_t take_param() {
    if (next_param_ >= params_.size()) throw DfxError(ErrorCode::kShapeMismatch, "too few parameters for model");
    return next_param_++;
  }

  int layer(const LayerSpec& s, int node) {
    const Value& x = x_of(node);
    switch (s.kind) {
      case LayerKind::kLinear:
      case LayerKind::kConv2d: {
        const std::size_t wi = take_param(), bi = take_param();
        const Value w = params_[wi], b = params_[bi];
        const bool conv = s.kind == LayerKind::kConv2d;
        Value y = conv ? Backend::conv(x, w, b, s, ctx_) : Backend::linear(x, w, b, ctx_);
        return tape.push(to_string(s.kind), {node}, std::move(y),
                         [x, w, s, conv, wi, bi](const Value& g, RoundingContext& ctx) {
                           std::array<Value, 3> d =
                               conv ? Backend::conv_backward(g, x, w, s, ctx) : Backend::linear_backward(g, x, w, ctx);
                           NodeGrads<Value> out;
                           out.inputs.push_back(std::move(d[0]));
                           out.params.emplace_back(wi, std::move(d[1]));
                           out.params.emplace_back(bi, std::move(d[2]));
                           return out;
                         });
      }
      case LayerKind::kBatchNorm:
      case LayerKind::kLayerNorm: {
        const std::size_t gi = take_param(), bi = take_param();
        const Value gamma = params_[gi], beta = params_[bi];
        const bool batch = s.kind == LayerKind::kBatchNorm;
        NormStats::Channel* running = nullptr;
        if (batch && stats_) running = &stats_->layers.at(next_norm_);
        if (batch) ++next_norm_;
        if (batch && phase_ == Phase::kEval && running) {
          Value y = Backend::norm_apply(x, running->mean, running->var, gamma, beta, ctx_);
          return tape.push(to_string(s.kind), {node}, std::move(y));
        }
        auto r = Backend::norm(x, batch, gamma, beta, ctx_);
        if (running && phase_ == Phase::kTrain) {
          const float m = stats_->momentum;
          for (std::size_t c = 0; c < running->mean.size(); ++c) {
            running->mean[c] = (1.0f - m) * running->mean[c] + m * r.mean[c];
            running->var[c] = (1.0f - m) * running->var[c] + m * r.var[c];
          }
        }
        auto cache = std::move(r.cache);
        return tape.push(to_string(s.kind), {node}, std::move(r.y),
                         [cache, gamma, beta, gi, bi](const Value& g, RoundingContext& ctx) {
                           std::array<Value, 3> d = Backend::norm_backward(g, cache, gamma, beta, ctx);
                           NodeGrads<Value> out;
                           out.inputs.push_back(std::move(d[0]));
                           out.params.emplace_back(gi, std::move(d[1]));
                           out.params.emplace_back(bi, std::move(d[2]));
                           return out;
                         });
      }
      case LayerKind::kReLU: {
        Value y = Backend::relu(x);
        return tape.push("relu", {node}, std::move(y), [x](const Value& g, RoundingContext&) {
          return NodeGrads<Value>{{Backend::relu_backward(g, x)}, {}};
        });
      }
      case LayerKind::kMaxPool: {
        auto r = Backend::maxpool(x, s.window);
        const Shape in_shape = Backend::shape(x);
        auto argmax = std::move(r.argmax);
        return tape.push("maxpool", {node}, std::move(r.y),
                         [argmax, in_shape](const Value& g, RoundingContext&) {
                           return NodeGrads<Value>{{Backend::maxpool_backward(g, argmax, in_shape)}, {}};
                         });
      }
      case LayerKind::kAvgPool: {
        Value y = Backend::avgpool(x, s.window, ctx_);
        const Shape in_shape = Backend::shape(x);
        const Index window = s.window;
        return tape.push("avgpool", {node}, std::move(y),
                         [window, in_shape](const Value& g, RoundingContext& ctx) {
                           return NodeGrads<Value>{{Backend::avgpool_backward(g, window, in_shape, ctx)}, {}};
                         });
      }
      case LayerKind::kFlatten: {
        const Shape in_shape = Backend::shape(x);
        Value y = Backend::reshape(x, {in_shape[0], numel(in_shape) / in_shape[0]});
        return tape.push("flatten", {node}, std::move(y), [in_shape](const Value& g, RoundingContext&) {
          return NodeGrads<Value>{{Backend::reshape(g, in_shape)}, {}};
        });
      }
      case LayerKind::kResidual: {
        const int body = run(s.body, node);
        Value y = Backend::add(x_of(node), x_of(body), ctx_);
        return tape.push("residual", {node, body}, std::move(y), [](const Value& g, RoundingContext&) {
          return NodeGrads<Value>{{g, g}, {}};
        });
      }
    }
    throw DfxError(ErrorCode::kConfigInvalid, "unknown layer kind");
  }

  const std::vector<Value>& params_;
  RoundingContext& ctx_;
  Phase phase_;
  NormStats* stats_;
  std::size_t next_param_ = 0;
  std::size_t next_norm_ = 0;
};

}  // namespace dfx::detail
