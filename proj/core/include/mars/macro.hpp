#pragma once
#include <array>
#include <cstdint>
#include <optional>
#include <vector>

#include "mars/mapping.hpp"

namespace mars {

// Result of one macro access: eight dot products, one per partition.
struct MacResult {
  std::array<int32_t, 8> sums{};
  bool operator==(const MacResult& o) const { return sums == o.sums; }
};

// Behavioral model of one 64Kb macro: 8 partitions x 64 weight-group slots
// x 16 weights. One access drives 16 shared inputs against the 8 groups at
// one slot position and returns 8 dot products.
class MacroState {
 public:
  explicit MacroState(int b_w = 8);

  // Fills one slot position across all 8 partitions.
  void load_groups(int position, const std::array<WeightGroup, 8>& groups);
  MacResult access(int position, const std::array<int32_t, 16>& inputs);

  bool loaded(int position) const;
  const WeightGroup& group_at(int partition, int position) const;
  void clear();

  int b_w() const { return b_w_; }
  int64_t accesses() const { return accesses_; }
  int64_t groups_loaded() const { return groups_loaded_; }

 private:
  int b_w_;
  int64_t accesses_ = 0;
  int64_t groups_loaded_ = 0;
  std::array<std::array<std::optional<WeightGroup>, 64>, 8> slots_;
};

// Bit-serial reassembly: planes[b] holds the MacResult of input bit-plane b,
// plane_weights[b] its power-of-two weight. Sums must stay within 32 bits.
MacResult shift_accumulate(const std::vector<MacResult>& planes,
                           const std::vector<int32_t>& plane_weights);

}  // namespace mars
