#include <cmath>
#include <string>

#include "dfx/nn.hpp"

namespace dfx {

SoftmaxLoss softmax_cross_entropy(const FloatTensor& logits, std::span<const int> labels) {
  if (logits.rank() != 2) throw DfxError(ErrorCode::kShapeMismatch, "logits must be [batch, classes]");
  const Index b = logits.dim(0), c = logits.dim(1);
  if (static_cast<Index>(labels.size()) != b)
    throw DfxError(ErrorCode::kShapeMismatch, "label count does not match batch");
  if (!logits.data().allFinite()) throw DfxError(ErrorCode::kNonFiniteInput, "non-finite logits");

  SoftmaxLoss out{0.0, FloatTensor({b, c}), 0};
  double total = 0.0;
  for (Index i = 0; i < b; ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= c) throw DfxError(ErrorCode::kShapeMismatch, "label " + std::to_string(y) + " out of range");
    double mx = logits[i * c];
    Index arg = 0;
    for (Index j = 1; j < c; ++j)
      if (logits[i * c + j] > mx) {
        mx = logits[i * c + j];
        arg = j;
      }
    double z = 0.0;
    for (Index j = 0; j < c; ++j) z += std::exp(logits[i * c + j] - mx);
    total += std::log(z) - (logits[i * c + y] - mx);
    for (Index j = 0; j < c; ++j) {
      const double p = std::exp(logits[i * c + j] - mx) / z;
      out.grad[i * c + j] = static_cast<float>((p - (j == y ? 1.0 : 0.0)) / static_cast<double>(b));
    }
    if (arg == y) ++out.correct;
  }
  out.loss = total / static_cast<double>(b);
  return out;
}

}  // namespace dfx
