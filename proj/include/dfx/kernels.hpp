#pragma once

#include <cstdint>
#include <vector>

#include "dfx/numfmt.hpp"

namespace dfx {

// ---------------------------------------------------------------------------
// Inner products
// ---------------------------------------------------------------------------

/// Throws AccumulatorOverflow unless inner * max_a * max_b <= 2^31 - 1.
void check_accumulator_bound(Index inner, int max_a, int max_b);
/// Largest inner dimension whose worst-case dot product fits int32.
Index max_inner_dimension(int bit_width);

/// Exact integer GEMM of rank-2 tensors [M,K] x [K,N]: int16 products, int32
/// accumulation. scale_exponent = unit(A) + unit(B).
AccTensor fxp_gemm(const Fxp8& a, const Fxp8& b);

/// GEMM for inner dimensions beyond the int32 bound: K is split into tiles,
/// each tile renormalized, and the partial results summed with fxp_add.
Fxp8 fxp_gemm_tiled(const Fxp8& a, const Fxp8& b, RoundingContext& ctx, Index tile = 0);

Fxp8 transpose(const Fxp8& t);

/// [N,C,H,W] -> [N*OH*OW, C*KH*KW] patch matrix (zero padding).
Fxp8 im2col(const Fxp8& x, Index kh, Index kw, Index stride, Index padding);
/// Scatter-add of a patch-matrix accumulator back to [N,C,H,W].
AccTensor col2im(const AccTensor& cols, const Shape& input_shape, Index kh, Index kw, Index stride,
                 Index padding);

/// Convolution NCHW x OIHW -> NOHW via im2col + fxp_gemm.
AccTensor fxp_conv2d(const Fxp8& x, const Fxp8& w, Index stride, Index padding);

struct Conv2dGrads {
  Fxp8 dx;
  Fxp8 dw;
};
Conv2dGrads fxp_conv2d_backward(const Fxp8& grad, const Fxp8& x, const Fxp8& w, Index stride, Index padding,
                                RoundingContext& ctx);

/// Adds a per-column (rank-2) or per-channel (rank-4, dim 1) bias to an
/// accumulator and renormalizes once.
Fxp8 fxp_bias_add(const AccTensor& acc, const Fxp8& bias, int bit_width, RoundingContext& ctx);

/// Column sums of a rank-2 tensor (or per-channel sums of NCHW), renormalized.
Fxp8 fxp_reduce_channels(const Fxp8& t, RoundingContext& ctx);

// ---------------------------------------------------------------------------
// Element-wise
// ---------------------------------------------------------------------------

/// Residual addition: the finer operand is aligned to the coarser one with a
/// sticky shift, summed at widened precision and renormalized.
Fxp8 fxp_add(const Fxp8& a, const Fxp8& b, RoundingContext& ctx);

Fxp8 fxp_relu(const Fxp8& x);
/// Zeroes gradients where the forward input was not positive.
Fxp8 fxp_relu_backward(const Fxp8& grad, const Fxp8& forward_input);

struct MaxPoolResult {
  Fxp8 y;
  std::vector<Index> argmax;  // flat input index per output element
};
MaxPoolResult fxp_maxpool2d(const Fxp8& x, Index window);
Fxp8 fxp_maxpool2d_backward(const Fxp8& grad, const std::vector<Index>& argmax, const Shape& input_shape);

Fxp8 fxp_avgpool2d(const Fxp8& x, Index window, RoundingContext& ctx);
Fxp8 fxp_avgpool2d_backward(const Fxp8& grad, Index window, const Shape& input_shape, RoundingContext& ctx);

// ---------------------------------------------------------------------------
// Scalars
// ---------------------------------------------------------------------------

/// Fixed-point 1/sqrt(m * 2^e): parity absorbed into the mantissa, 64-entry
/// seed table, three Newton steps y <- y(3 - v y^2)/2 in Q30. Returns a Q30
/// mantissa with its exponent.
Wide fxp_rsqrt(std::int64_t mantissa, int exponent);

/// Nearest 30-bit fixed-point reciprocal of a positive count.
Wide reciprocal(Index n);

// ---------------------------------------------------------------------------
// Normalization layers
// ---------------------------------------------------------------------------

/// Which elements share statistics (groups) and which affine parameter each
/// element uses.
struct NormLayout {
  enum class Kind { kBatch, kLayer };
  Kind kind = Kind::kBatch;
  Shape shape;
  Index groups = 0;
  Index params = 0;
  Index group_size = 0;
  Index inner = 1;  // batch layout: spatial elements per channel plane

  static NormLayout batch(const Shape& shape);  // [N,C] or [N,C,H,W]; stats per channel
  static NormLayout layer(const Shape& shape);  // [N,F...]; stats per sample
  Index group_of(Index i) const;
  Index param_of(Index i) const;
};

struct NormParams {
  Fxp8 gamma;
  Fxp8 beta;
  Wide eps{1, -10};
};

struct NormCache {
  NormLayout layout;
  Fxp8 xnorm;
  std::vector<Wide> inv_std;  // per group
};

struct NormForward {
  Fxp8 y;
  NormCache cache;
  Fxp8 mean;              // per group, k-bit
  std::vector<Wide> var;  // per group, before eps
};

struct NormGrads {
  Fxp8 dx;
  Fxp8 dgamma;
  Fxp8 dbeta;
};

NormForward fxp_norm_forward(const Fxp8& x, const NormLayout& layout, const NormParams& p, RoundingContext& ctx);
NormGrads fxp_norm_backward(const Fxp8& grad, const NormCache& cache, const NormParams& p, RoundingContext& ctx);

NormForward fxp_batchnorm_forward(const Fxp8& x, const NormParams& p, RoundingContext& ctx);
NormGrads fxp_batchnorm_backward(const Fxp8& grad, const NormCache& cache, const NormParams& p,
                                 RoundingContext& ctx);
NormForward fxp_layernorm_forward(const Fxp8& x, const NormParams& p, RoundingContext& ctx);
NormGrads fxp_layernorm_backward(const Fxp8& grad, const NormCache& cache, const NormParams& p,
                                 RoundingContext& ctx);

/// Batch-norm with given per-channel statistics (inference path).
Fxp8 fxp_batchnorm_apply(const Fxp8& x, const Fxp8& mean, const std::vector<Wide>& var, const NormParams& p,
                         RoundingContext& ctx);

}  // namespace dfx
