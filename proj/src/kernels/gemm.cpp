#include <algorithm>
#include <limits>
#include <string>

#include "dfx/kernels.hpp"
#include "dfx/wide.hpp"

namespace dfx {

namespace {

constexpr std::int64_t kInt32Max = std::numeric_limits<std::int32_t>::max();

void require_rank(const Fxp8& t, Index rank, const char* what) {
  if (static_cast<Index>(t.shape().size()) != rank)
    throw DfxError(ErrorCode::kShapeMismatch, std::string(what) + ": expected rank " + std::to_string(rank) +
                                                  ", got " + shape_string(t.shape()));
}

// Row-major int8 [M,K] x [N,K]^T -> int32 [M,N].
void gemm_nt(const std::int8_t* a, const std::int8_t* bt, std::int32_t* c, Index m, Index n, Index k) {
  for (Index i = 0; i < m; ++i) {
    const std::int8_t* ar = a + i * k;
    for (Index j = 0; j < n; ++j) {
      const std::int8_t* br = bt + j * k;
      std::int32_t acc = 0;
      for (Index p = 0; p < k; ++p) {
        const auto prod = static_cast<std::int16_t>(static_cast<std::int16_t>(ar[p]) * static_cast<std::int16_t>(br[p]));
        acc += prod;
      }
      c[i * n + j] = acc;
    }
  }
}

}  // namespace

void check_accumulator_bound(Index inner, int max_a, int max_b) {
  const std::int64_t worst = static_cast<std::int64_t>(inner) * max_a * max_b;
  if (worst > kInt32Max)
    throw DfxError(ErrorCode::kAccumulatorOverflow,
                   "inner dimension " + std::to_string(inner) + " can overflow the int32 accumulator");
}

Index max_inner_dimension(int bit_width) {
  const std::int64_t m = (std::int64_t{1} << (bit_width - 1)) - 1;
  return static_cast<Index>(kInt32Max / (m * m));
}

Fxp8 transpose(const Fxp8& t) {
  require_rank(t, 2, "transpose");
  Tensor<std::int8_t> out({t.shape()[1], t.shape()[0]});
  out.matrix() = t.mantissas.matrix().transpose();
  return Fxp8{std::move(out), t.bit_width, t.exponent};
}

AccTensor fxp_gemm(const Fxp8& a, const Fxp8& b) {
  require_rank(a, 2, "fxp_gemm lhs");
  require_rank(b, 2, "fxp_gemm rhs");
  const Index m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k)
    throw DfxError(ErrorCode::kShapeMismatch,
                   "fxp_gemm inner dimensions " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  check_accumulator_bound(k, a.max_mantissa(), b.max_mantissa());

  AccTensor out{Tensor<std::int32_t>({m, n}), 0};
  if (a.is_zero() || b.is_zero()) return out;
  out.scale_exponent = a.unit_exponent() + b.unit_exponent();
  const Fxp8 bt = transpose(b);
  gemm_nt(a.mantissas.data().data(), bt.mantissas.data().data(), out.values.data().data(), m, n, k);
  return out;
}

Fxp8 fxp_gemm_tiled(const Fxp8& a, const Fxp8& b, RoundingContext& ctx, Index tile) {
  require_rank(a, 2, "fxp_gemm_tiled lhs");
  require_rank(b, 2, "fxp_gemm_tiled rhs");
  const Index m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) throw DfxError(ErrorCode::kShapeMismatch, "fxp_gemm_tiled inner dimensions");
  const Index bound = static_cast<Index>(kInt32Max / (static_cast<std::int64_t>(a.max_mantissa()) * b.max_mantissa()));
  if (tile <= 0 || tile > bound) tile = bound;

  Fxp8 sum = Fxp8::zeros({m, n}, a.bit_width);
  for (Index k0 = 0; k0 < k; k0 += tile) {
    const Index kt = std::min(tile, k - k0);
    Fxp8 at{Tensor<std::int8_t>({m, kt}), a.bit_width, a.exponent};
    at.mantissas.matrix() = a.mantissas.matrix().middleCols(k0, kt);
    Fxp8 bt{Tensor<std::int8_t>({kt, n}), b.bit_width, b.exponent};
    bt.mantissas.matrix() = b.mantissas.matrix().middleRows(k0, kt);
    const Fxp8 partial = renormalize<std::int8_t>(fxp_gemm(at, bt), a.bit_width, ctx);
    sum = fxp_add(sum, partial, ctx);
  }
  return sum;
}

Fxp8 fxp_bias_add(const AccTensor& acc, const Fxp8& bias, int bit_width, RoundingContext& ctx) {
  const Shape& s = acc.shape();
  Index channels = 0, inner = 1;
  if (s.size() == 2) {
    channels = s[1];
  } else if (s.size() == 4) {
    channels = s[1];
    inner = s[2] * s[3];
  } else {
    throw DfxError(ErrorCode::kShapeMismatch, "fxp_bias_add expects rank 2 or 4, got " + shape_string(s));
  }
  if (bias.size() != channels)
    throw DfxError(ErrorCode::kShapeMismatch, "bias length does not match channel count");

  std::vector<Wide> w(static_cast<std::size_t>(acc.size()));
  const bool has_bias = !bias.is_zero();
  for (Index i = 0; i < acc.size(); ++i) {
    const Index c = (i / inner) % channels;
    Wide v{acc.values[i], acc.scale_exponent};
    if (has_bias) v = wide::add(v, Wide{bias.mantissas[c], bias.unit_exponent()});
    w[static_cast<std::size_t>(i)] = v;
  }
  return map_wide<std::int8_t>(s, w, bit_width, ctx);
}

Fxp8 fxp_reduce_channels(const Fxp8& t, RoundingContext& ctx) {
  const Shape& s = t.shape();
  Index channels = 0, inner = 1;
  if (s.size() == 2) {
    channels = s[1];
  } else if (s.size() == 4) {
    channels = s[1];
    inner = s[2] * s[3];
  } else {
    throw DfxError(ErrorCode::kShapeMismatch, "fxp_reduce_channels expects rank 2 or 4");
  }
  std::vector<std::int64_t> sums(static_cast<std::size_t>(channels), 0);
  for (Index i = 0; i < t.size(); ++i) sums[static_cast<std::size_t>((i / inner) % channels)] += t.mantissas[i];
  std::vector<Wide> w(sums.size());
  const int unit = t.is_zero() ? 0 : t.unit_exponent();
  for (std::size_t c = 0; c < sums.size(); ++c) w[c] = Wide{sums[c], unit};
  return map_wide<std::int8_t>({channels}, w, t.bit_width, ctx);
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

namespace {

struct ConvGeometry {
  Index n, c, h, w, kh, kw, oh, ow;
};

ConvGeometry conv_geometry(const Shape& x, Index kh, Index kw, Index stride, Index padding) {
  if (x.size() != 4) throw DfxError(ErrorCode::kShapeMismatch, "convolution input must be NCHW");
  if (stride < 1 || padding < 0) throw DfxError(ErrorCode::kShapeMismatch, "invalid stride/padding");
  ConvGeometry g{x[0], x[1], x[2], x[3], kh, kw, 0, 0};
  const Index hp = g.h + 2 * padding - kh, wp = g.w + 2 * padding - kw;
  if (hp < 0 || wp < 0) throw DfxError(ErrorCode::kShapeMismatch, "kernel larger than padded input");
  g.oh = hp / stride + 1;
  g.ow = wp / stride + 1;
  return g;
}

// [N*OH*OW, O] (row-major) <-> [N, O, OH, OW]
template <typename T>
Tensor<T> rows_to_nchw(const Tensor<T>& rows, Index n, Index o, Index oh, Index ow) {
  Tensor<T> out({n, o, oh, ow});
  const Index hw = oh * ow;
  for (Index b = 0; b < n; ++b)
    for (Index p = 0; p < hw; ++p)
      for (Index ch = 0; ch < o; ++ch) out[(b * o + ch) * hw + p] = rows[(b * hw + p) * o + ch];
  return out;
}

template <typename T>
Tensor<T> nchw_to_rows(const Tensor<T>& t) {
  const Index n = t.dim(0), o = t.dim(1), hw = t.dim(2) * t.dim(3);
  Tensor<T> out({n * hw, o});
  for (Index b = 0; b < n; ++b)
    for (Index ch = 0; ch < o; ++ch)
      for (Index p = 0; p < hw; ++p) out[(b * hw + p) * o + ch] = t[(b * o + ch) * hw + p];
  return out;
}

}  // namespace

Fxp8 im2col(const Fxp8& x, Index kh, Index kw, Index stride, Index padding) {
  const ConvGeometry g = conv_geometry(x.shape(), kh, kw, stride, padding);
  const Index cols = g.c * kh * kw;
  Tensor<std::int8_t> out({g.n * g.oh * g.ow, cols});
  for (Index b = 0; b < g.n; ++b)
    for (Index oy = 0; oy < g.oh; ++oy)
      for (Index ox = 0; ox < g.ow; ++ox) {
        const Index row = (b * g.oh + oy) * g.ow + ox;
        for (Index ch = 0; ch < g.c; ++ch)
          for (Index ky = 0; ky < kh; ++ky)
            for (Index kx = 0; kx < kw; ++kx) {
              const Index iy = oy * stride + ky - padding, ix = ox * stride + kx - padding;
              std::int8_t v = 0;
              if (iy >= 0 && iy < g.h && ix >= 0 && ix < g.w) v = x.mantissas[((b * g.c + ch) * g.h + iy) * g.w + ix];
              out[row * cols + (ch * kh + ky) * kw + kx] = v;
            }
      }
  return Fxp8{std::move(out), x.bit_width, x.exponent};
}

AccTensor col2im(const AccTensor& cols, const Shape& input_shape, Index kh, Index kw, Index stride,
                 Index padding) {
  const ConvGeometry g = conv_geometry(input_shape, kh, kw, stride, padding);
  const Index ncols = g.c * kh * kw;
  if (cols.shape() != Shape{g.n * g.oh * g.ow, ncols})
    throw DfxError(ErrorCode::kShapeMismatch, "col2im patch matrix shape");
  AccTensor out{Tensor<std::int32_t>(input_shape), cols.scale_exponent};
  for (Index b = 0; b < g.n; ++b)
    for (Index oy = 0; oy < g.oh; ++oy)
      for (Index ox = 0; ox < g.ow; ++ox) {
        const Index row = (b * g.oh + oy) * g.ow + ox;
        for (Index ch = 0; ch < g.c; ++ch)
          for (Index ky = 0; ky < kh; ++ky)
            for (Index kx = 0; kx < kw; ++kx) {
              const Index iy = oy * stride + ky - padding, ix = ox * stride + kx - padding;
              if (iy < 0 || iy >= g.h || ix < 0 || ix >= g.w) continue;
              out.values[((b * g.c + ch) * g.h + iy) * g.w + ix] += cols.values[row * ncols + (ch * kh + ky) * kw + kx];
            }
      }
  return out;
}

AccTensor fxp_conv2d(const Fxp8& x, const Fxp8& w, Index stride, Index padding) {
  if (w.shape().size() != 4) throw DfxError(ErrorCode::kShapeMismatch, "convolution weights must be OIHW");
  const Index o = w.shape()[0], kh = w.shape()[2], kw = w.shape()[3];
  if (x.shape().size() != 4 || w.shape()[1] != x.shape()[1])
    throw DfxError(ErrorCode::kShapeMismatch,
                   "convolution channels " + shape_string(x.shape()) + " vs " + shape_string(w.shape()));
  const ConvGeometry g = conv_geometry(x.shape(), kh, kw, stride, padding);
  const Fxp8 cols = im2col(x, kh, kw, stride, padding);
  const Fxp8 wmat = w.reshaped({o, g.c * kh * kw});
  AccTensor rows = fxp_gemm(cols, transpose(wmat));
  return AccTensor{rows_to_nchw(rows.values, g.n, o, g.oh, g.ow), rows.scale_exponent};
}

Conv2dGrads fxp_conv2d_backward(const Fxp8& grad, const Fxp8& x, const Fxp8& w, Index stride, Index padding,
                                RoundingContext& ctx) {
  const Index o = w.shape()[0], kh = w.shape()[2], kw = w.shape()[3];
  const ConvGeometry g = conv_geometry(x.shape(), kh, kw, stride, padding);
  if (grad.shape() != Shape{g.n, o, g.oh, g.ow})
    throw DfxError(ErrorCode::kShapeMismatch, "convolution gradient shape " + shape_string(grad.shape()));
  const Fxp8 grows{nchw_to_rows(grad.mantissas), grad.bit_width, grad.exponent};
  const Fxp8 cols = im2col(x, kh, kw, stride, padding);
  const Fxp8 wmat = w.reshaped({o, g.c * kh * kw});

  Conv2dGrads out;
  const Fxp8 gt = transpose(grows);
  const Index bound = max_inner_dimension(std::max(grad.bit_width, x.bit_width));
  out.dw = (gt.shape()[1] <= bound ? renormalize<std::int8_t>(fxp_gemm(gt, cols), w.bit_width, ctx)
                                   : fxp_gemm_tiled(gt, cols, ctx))
               .reshaped(w.shape());
  const AccTensor dcols = fxp_gemm(grows, wmat);
  out.dx = renormalize<std::int8_t>(col2im(dcols, x.shape(), kh, kw, stride, padding), x.bit_width, ctx);
  return out;
}

}  // namespace dfx
