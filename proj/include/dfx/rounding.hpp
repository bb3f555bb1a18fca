#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>

namespace dfx {

enum class RoundingMode { kStochastic, kNearest };

std::string_view to_string(RoundingMode mode);
RoundingMode parse_rounding_mode(std::string_view text);

/// Philox4x32-10 (Salmon et al., SC'11). Stateless: output is a pure
/// function of (key, counter).
struct Philox4x32 {
  using Counter = std::array<std::uint32_t, 4>;
  using Key = std::array<std::uint32_t, 2>;

  static Counter generate(Counter ctr, Key key);
};

/// Source of rounding randomness. Each rounding operation claims one value
/// of the operation counter; the draw for element j of operation t is
/// Philox(seed; t, j), so results do not depend on evaluation order.
class RoundingContext {
 public:
  RoundingContext() = default;
  explicit RoundingContext(std::uint64_t seed, RoundingMode mode = RoundingMode::kStochastic,
                           std::uint64_t op_counter = 0)
      : seed_(seed), op_counter_(op_counter), mode_(mode) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t op_counter() const { return op_counter_; }
  RoundingMode mode() const { return mode_; }
  void set_mode(RoundingMode mode) { mode_ = mode; }

  /// Claims the next operation id.
  std::uint64_t next_op() { return op_counter_++; }

  /// 64 uniform bits for element `index` of operation `op`.
  std::uint64_t draw(std::uint64_t op, std::uint64_t index) const {
    return draw(seed_, op, index);
  }
  static std::uint64_t draw(std::uint64_t seed, std::uint64_t op, std::uint64_t index);

 private:
  std::uint64_t seed_ = 0;
  std::uint64_t op_counter_ = 0;
  RoundingMode mode_ = RoundingMode::kStochastic;
};

}  // namespace dfx
