#include <array>
#include <cmath>

#include "dfx/kernels.hpp"
#include "dfx/nn.hpp"
#include "network.hpp"

namespace dfx {

namespace {

using RowMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

constexpr float kNormEps = 1.0f / 1024.0f;

struct Geometry {
  Index n, c, h, w, k, oh, ow;
};

Geometry geometry(const Shape& x, Index k, const LayerSpec& s) {
  return Geometry{x[0], x[1], x[2], x[3], k, (x[2] + 2 * s.padding - k) / s.stride + 1,
                  (x[3] + 2 * s.padding - k) / s.stride + 1};
}

// [N,C,H,W] -> [N*OH*OW, C*K*K]
RowMatrix im2col(const FloatTensor& x, const Geometry& g, const LayerSpec& s) {
  const Index cols = g.c * g.k * g.k;
  RowMatrix out = RowMatrix::Zero(g.n * g.oh * g.ow, cols);
  for (Index b = 0; b < g.n; ++b)
    for (Index oy = 0; oy < g.oh; ++oy)
      for (Index ox = 0; ox < g.ow; ++ox)
        for (Index ch = 0; ch < g.c; ++ch)
          for (Index ky = 0; ky < g.k; ++ky)
            for (Index kx = 0; kx < g.k; ++kx) {
              const Index iy = oy * s.stride + ky - s.padding, ix = ox * s.stride + kx - s.padding;
              if (iy < 0 || iy >= g.h || ix < 0 || ix >= g.w) continue;
              out((b * g.oh + oy) * g.ow + ox, (ch * g.k + ky) * g.k + kx) = x[((b * g.c + ch) * g.h + iy) * g.w + ix];
            }
  return out;
}

FloatTensor col2im(const RowMatrix& cols, const Shape& in_shape, const Geometry& g, const LayerSpec& s) {
  FloatTensor out(in_shape);
  for (Index b = 0; b < g.n; ++b)
    for (Index oy = 0; oy < g.oh; ++oy)
      for (Index ox = 0; ox < g.ow; ++ox)
        for (Index ch = 0; ch < g.c; ++ch)
          for (Index ky = 0; ky < g.k; ++ky)
            for (Index kx = 0; kx < g.k; ++kx) {
              const Index iy = oy * s.stride + ky - s.padding, ix = ox * s.stride + kx - s.padding;
              if (iy < 0 || iy >= g.h || ix < 0 || ix >= g.w) continue;
              out[((b * g.c + ch) * g.h + iy) * g.w + ix] += cols((b * g.oh + oy) * g.ow + ox, (ch * g.k + ky) * g.k + kx);
            }
  return out;
}

FloatTensor rows_to_nchw(const RowMatrix& rows, Index n, Index o, Index oh, Index ow) {
  FloatTensor out({n, o, oh, ow});
  const Index hw = oh * ow;
  for (Index b = 0; b < n; ++b)
    for (Index p = 0; p < hw; ++p)
      for (Index ch = 0; ch < o; ++ch) out[(b * o + ch) * hw + p] = rows(b * hw + p, ch);
  return out;
}

RowMatrix nchw_to_rows(const FloatTensor& t) {
  const Index n = t.dim(0), o = t.dim(1), hw = t.dim(2) * t.dim(3);
  RowMatrix out(n * hw, o);
  for (Index b = 0; b < n; ++b)
    for (Index ch = 0; ch < o; ++ch)
      for (Index p = 0; p < hw; ++p) out(b * hw + p, ch) = t[(b * o + ch) * hw + p];
  return out;
}

FloatTensor channel_sums(const FloatTensor& g) {
  const Index c = g.dim(1), inner = g.rank() == 4 ? g.dim(2) * g.dim(3) : 1;
  FloatTensor out({c});
  for (Index i = 0; i < g.size(); ++i) out[(i / inner) % c] += g[i];
  return out;
}

struct FloatNormCache {
  NormLayout layout;
  std::vector<float> xnorm;
  std::vector<double> inv_std;
};

struct FloatBackend {
  using Value = FloatTensor;

  static Shape shape(const FloatTensor& x) { return x.shape(); }
  static FloatTensor reshape(const FloatTensor& x, const Shape& s) { return x.reshaped(s); }
  static FloatTensor add(const FloatTensor& a, const FloatTensor& b, RoundingContext&) {
    require_same_shape(a.shape(), b.shape(), "add");
    return FloatTensor(a.shape(), a.data() + b.data());
  }

  static FloatTensor linear(const FloatTensor& x, const FloatTensor& w, const FloatTensor& b, RoundingContext&) {
    if (x.rank() != 2 || w.dim(0) != x.dim(1))
      throw DfxError(ErrorCode::kShapeMismatch, "linear " + shape_string(x.shape()) + " x " + shape_string(w.shape()));
    FloatTensor y({x.dim(0), w.dim(1)});
    y.matrix() = x.matrix() * w.matrix();
    y.matrix().rowwise() += b.data().matrix().transpose();
    return y;
  }
  static std::array<FloatTensor, 3> linear_backward(const FloatTensor& g, const FloatTensor& x, const FloatTensor& w,
                                                    RoundingContext&) {
    FloatTensor dx(x.shape()), dw(w.shape());
    dx.matrix() = g.matrix() * w.matrix().transpose();
    dw.matrix() = x.matrix().transpose() * g.matrix();
    return {std::move(dx), std::move(dw), channel_sums(g)};
  }

  static FloatTensor conv(const FloatTensor& x, const FloatTensor& w, const FloatTensor& b, const LayerSpec& s,
                          RoundingContext&) {
    const Geometry g = geometry(x.shape(), w.dim(2), s);
    const Index o = w.dim(0);
    const RowMatrix cols = im2col(x, g, s);
    const FloatTensor wflat = w.reshaped({o, g.c * g.k * g.k});
    RowMatrix rows = cols * wflat.matrix().transpose();
    rows.rowwise() += b.data().matrix().transpose();
    return rows_to_nchw(rows, g.n, o, g.oh, g.ow);
  }
  static std::array<FloatTensor, 3> conv_backward(const FloatTensor& grad, const FloatTensor& x, const FloatTensor& w,
                                                  const LayerSpec& s, RoundingContext&) {
    const Geometry g = geometry(x.shape(), w.dim(2), s);
    const Index o = w.dim(0);
    const RowMatrix cols = im2col(x, g, s);
    const RowMatrix grows = nchw_to_rows(grad);
    const FloatTensor wflat = w.reshaped({o, g.c * g.k * g.k});
    FloatTensor dw({o, g.c * g.k * g.k});
    dw.matrix() = grows.transpose() * cols;
    const RowMatrix dcols = grows * wflat.matrix();
    return {col2im(dcols, x.shape(), g, s), dw.reshaped(w.shape()), channel_sums(grad)};
  }

  struct NormOut {
    FloatTensor y;
    FloatNormCache cache;
    std::vector<float> mean, var;
  };
  static FloatTensor normalize(const FloatTensor& x, const NormLayout& layout, const std::vector<double>& mean,
                               const std::vector<double>& var, const FloatTensor& gamma, const FloatTensor& beta,
                               FloatNormCache* cache) {
    FloatTensor y(x.shape());
    std::vector<double> inv(var.size());
    for (std::size_t g = 0; g < var.size(); ++g) inv[g] = 1.0 / std::sqrt(var[g] + kNormEps);
    std::vector<float> xn(static_cast<std::size_t>(x.size()));
    for (Index i = 0; i < x.size(); ++i) {
      const auto g = static_cast<std::size_t>(layout.group_of(i));
      const Index p = layout.param_of(i);
      const double v = (x[i] - mean[g]) * inv[g];
      xn[static_cast<std::size_t>(i)] = static_cast<float>(v);
      y[i] = static_cast<float>(gamma[p] * v + beta[p]);
    }
    if (cache) *cache = FloatNormCache{layout, std::move(xn), std::move(inv)};
    return y;
  }
  static NormOut norm(const FloatTensor& x, bool batch, const FloatTensor& gamma, const FloatTensor& beta,
                      RoundingContext&) {
    const NormLayout layout = batch ? NormLayout::batch(x.shape()) : NormLayout::layer(x.shape());
    if (layout.group_size < 2) throw DfxError(ErrorCode::kDegenerateBatch, "normalization group of size 1");
    std::vector<double> mean(static_cast<std::size_t>(layout.groups), 0.0), var(mean.size(), 0.0);
    for (Index i = 0; i < x.size(); ++i) mean[static_cast<std::size_t>(layout.group_of(i))] += x[i];
    for (double& m : mean) m /= static_cast<double>(layout.group_size);
    for (Index i = 0; i < x.size(); ++i) {
      const double d = x[i] - mean[static_cast<std::size_t>(layout.group_of(i))];
      var[static_cast<std::size_t>(layout.group_of(i))] += d * d;
    }
    for (double& v : var) v /= static_cast<double>(layout.group_size);
    NormOut out;
    out.y = normalize(x, layout, mean, var, gamma, beta, &out.cache);
    out.mean.assign(mean.begin(), mean.end());
    out.var.assign(var.begin(), var.end());
    return out;
  }
  static FloatTensor norm_apply(const FloatTensor& x, const std::vector<float>& mean, const std::vector<float>& var,
                                const FloatTensor& gamma, const FloatTensor& beta, RoundingContext&) {
    return normalize(x, NormLayout::batch(x.shape()), std::vector<double>(mean.begin(), mean.end()),
                     std::vector<double>(var.begin(), var.end()), gamma, beta, nullptr);
  }
  static std::array<FloatTensor, 3> norm_backward(const FloatTensor& g, const FloatNormCache& cache,
                                                  const FloatTensor& gamma, const FloatTensor& beta,
                                                  RoundingContext&) {
    const NormLayout& l = cache.layout;
    FloatTensor dgamma(gamma.shape()), dbeta(beta.shape()), dx(g.shape());
    std::vector<double> sh(static_cast<std::size_t>(l.groups), 0.0), shx(sh.size(), 0.0);
    for (Index i = 0; i < g.size(); ++i) {
      const auto gi = static_cast<std::size_t>(l.group_of(i));
      const Index p = l.param_of(i);
      const double xn = cache.xnorm[static_cast<std::size_t>(i)];
      dbeta[p] += g[i];
      dgamma[p] += static_cast<float>(g[i] * xn);
      const double h = gamma[p] * g[i];
      sh[gi] += h;
      shx[gi] += h * xn;
    }
    const double n = static_cast<double>(l.group_size);
    for (Index i = 0; i < g.size(); ++i) {
      const auto gi = static_cast<std::size_t>(l.group_of(i));
      const double xn = cache.xnorm[static_cast<std::size_t>(i)];
      const double h = gamma[l.param_of(i)] * g[i];
      dx[i] = static_cast<float>(cache.inv_std[gi] * (h - sh[gi] / n - xn * shx[gi] / n));
    }
    return {std::move(dx), std::move(dgamma), std::move(dbeta)};
  }

  static FloatTensor relu(const FloatTensor& x) { return FloatTensor(x.shape(), x.data().max(0.0f)); }
  static FloatTensor relu_backward(const FloatTensor& g, const FloatTensor& x) {
    return FloatTensor(g.shape(), (x.data() > 0.0f).select(g.data(), 0.0f));
  }

  struct PoolOut {
    FloatTensor y;
    std::vector<Index> argmax;
  };
  static PoolOut maxpool(const FloatTensor& x, Index window) {
    const Index n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3), oh = h / window, ow = w / window;
    PoolOut r{FloatTensor({n, c, oh, ow}), std::vector<Index>(static_cast<std::size_t>(n * c * oh * ow))};
    for (Index p = 0; p < n * c; ++p)
      for (Index oy = 0; oy < oh; ++oy)
        for (Index ox = 0; ox < ow; ++ox) {
          Index best = (p * h + oy * window) * w + ox * window;
          for (Index ky = 0; ky < window; ++ky)
            for (Index kx = 0; kx < window; ++kx) {
              const Index i = (p * h + oy * window + ky) * w + ox * window + kx;
              if (x[i] > x[best]) best = i;
            }
          const Index o = (p * oh + oy) * ow + ox;
          r.y[o] = x[best];
          r.argmax[static_cast<std::size_t>(o)] = best;
        }
    return r;
  }
  static FloatTensor maxpool_backward(const FloatTensor& g, const std::vector<Index>& argmax, const Shape& in_shape) {
    FloatTensor dx(in_shape);
    for (Index i = 0; i < g.size(); ++i) dx[argmax[static_cast<std::size_t>(i)]] += g[i];
    return dx;
  }
  static FloatTensor avgpool(const FloatTensor& x, Index window, RoundingContext&) {
    const Index n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3), oh = h / window, ow = w / window;
    FloatTensor y({n, c, oh, ow});
    const float inv = 1.0f / static_cast<float>(window * window);
    for (Index p = 0; p < n * c; ++p)
      for (Index yy = 0; yy < oh * window; ++yy)
        for (Index xx = 0; xx < ow * window; ++xx) y[(p * oh + yy / window) * ow + xx / window] += x[(p * h + yy) * w + xx] * inv;
    return y;
  }
  static FloatTensor avgpool_backward(const FloatTensor& g, Index window, const Shape& in_shape, RoundingContext&) {
    const Index n = in_shape[0], c = in_shape[1], h = in_shape[2], w = in_shape[3], oh = h / window, ow = w / window;
    FloatTensor dx(in_shape);
    const float inv = 1.0f / static_cast<float>(window * window);
    for (Index p = 0; p < n * c; ++p)
      for (Index yy = 0; yy < oh * window; ++yy)
        for (Index xx = 0; xx < ow * window; ++xx) dx[(p * h + yy) * w + xx] = g[(p * oh + yy / window) * ow + xx / window] * inv;
    return dx;
  }
};

}  // namespace

ForwardPass<FloatTensor> forward(const ModelConfig& config, const std::vector<FloatTensor>& params,
                                 const FloatTensor& batch, Phase phase, NormStats* stats) {
  config.validate();
  Shape expect{batch.rank() > 0 ? batch.dim(0) : 0};
  expect.insert(expect.end(), config.input_shape.begin(), config.input_shape.end());
  require_same_shape(batch.shape(), expect, "forward: batch");
  RoundingContext unused(0);
  detail::Builder<FloatBackend> b(params, unused, phase, stats);
  b.run(config.layers, b.input(batch));
  b.finish();
  FloatTensor logits = b.tape.node(b.tape.output()).value;
  return ForwardPass<FloatTensor>{std::move(logits), std::move(b.tape)};
}

std::vector<FloatTensor> backward(const Tape<FloatTensor>& tape, const std::vector<FloatTensor>& params,
                                  const FloatTensor& dlogits) {
  RoundingContext unused(0);
  auto grads = tape.backward(tape.output(), dlogits, params.size(), unused,
                             [](const FloatTensor& a, const FloatTensor& b, RoundingContext&) {
                               return FloatTensor(a.shape(), a.data() + b.data());
                             });
  std::vector<FloatTensor> out;
  out.reserve(params.size());
  for (std::size_t i = 0; i < params.size(); ++i)
    out.push_back(grads[i] ? std::move(*grads[i]) : FloatTensor(params[i].shape()));
  return out;
}

StepResult<FloatTensor> float_reference_step(const ModelConfig& config, const std::vector<FloatTensor>& params,
                                             const FloatTensor& batch, std::span<const int> labels,
                                             NormStats* stats) {
  ForwardPass<FloatTensor> f = forward(config, params, batch, Phase::kTrain, stats);
  SoftmaxLoss l = softmax_cross_entropy(f.logits, labels);
  return StepResult<FloatTensor>{l.loss, l.correct, backward(f.tape, params, l.grad)};
}

}  // namespace dfx
