#include "mars/macro.hpp"

#include <limits>
#include <string>

namespace mars {

MacroState::MacroState(int b_w) : b_w_(b_w) {
  if (b_w < 2 || b_w > 8) throw MappingError("macro weight bit width out of range");
}

void MacroState::load_groups(int position, const std::array<WeightGroup, 8>& groups) {
  if (position < 0 || position > 63)
    throw MappingError("slot position " + std::to_string(position) + " out of range [0,63]");
  const int32_t wmax = (1 << (b_w_ - 1)) - 1;
  for (const WeightGroup& g : groups)
    for (int32_t c : g.codes)
      if (c > wmax || c < -wmax) throw MappingError("weight code exceeds macro bit width");
  for (int p = 0; p < 8; ++p) slots_[static_cast<size_t>(p)][static_cast<size_t>(position)] = groups[static_cast<size_t>(p)];
  groups_loaded_ += 8;
}

bool MacroState::loaded(int position) const {
  if (position < 0 || position > 63) return false;
  return slots_[0][static_cast<size_t>(position)].has_value();
}

const WeightGroup& MacroState::group_at(int partition, int position) const {
  if (partition < 0 || partition > 7 || position < 0 || position > 63)
    throw MappingError("partition/position out of range");
  const auto& s = slots_[static_cast<size_t>(partition)][static_cast<size_t>(position)];
  if (!s) throw SimError("empty slot");
  return *s;
}

MacResult MacroState::access(int position, const std::array<int32_t, 16>& inputs) {
  if (position < 0 || position > 63)
    throw MappingError("slot position " + std::to_string(position) + " out of range [0,63]");
  for (int32_t a : inputs)
    if (a < 0 || a > 255) throw SimError("activation code out of range [0,255]");
  MacResult r;
  for (int p = 0; p < 8; ++p) {
    const auto& slot = slots_[static_cast<size_t>(p)][static_cast<size_t>(position)];
    if (!slot) throw SimError("empty slot");
    int32_t acc = 0;  // |sum| <= 16*127*255, no int32 overflow possible
    for (int i = 0; i < 16; ++i)
      acc += slot->codes[static_cast<size_t>(i)] * inputs[static_cast<size_t>(i)];
    r.sums[static_cast<size_t>(p)] = acc;
  }
  accesses_ += 1;
  return r;
}

void MacroState::clear() {
  for (auto& part : slots_)
    for (auto& slot : part) slot.reset();
}

MacResult shift_accumulate(const std::vector<MacResult>& planes,
                           const std::vector<int32_t>& plane_weights) {
  if (planes.size() != plane_weights.size())
    throw ShapeError("shift_accumulate: plane/weight count mismatch");
  MacResult out;
  for (int p = 0; p < 8; ++p) {
    int64_t acc = 0;
    for (size_t b = 0; b < planes.size(); ++b)
      acc += static_cast<int64_t>(planes[b].sums[static_cast<size_t>(p)]) * plane_weights[b];
    if (acc > std::numeric_limits<int32_t>::max() || acc < std::numeric_limits<int32_t>::min())
      throw SimError("shift_accumulate overflow beyond 32 bits");
    out.sums[static_cast<size_t>(p)] = static_cast<int32_t>(acc);
  }
  return out;
}

}  // namespace mars
