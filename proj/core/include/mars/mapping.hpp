#pragma once
#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mars/prune.hpp"
#include "mars/quantize.hpp"

namespace mars {

// One weight group: 16 codes along in_ch for one kernel at one spatial tap.
struct WeightGroup {
  std::array<int32_t, 16> codes{};
  bool zero() const {
    for (int32_t c : codes)
      if (c) return false;
    return true;
  }
  bool operator==(const WeightGroup& o) const { return codes == o.codes; }
};

// 16 weight-groups at the same slot position across a core's two macros:
// the unit of storage, skipping, and pruning.
struct GroupSet {
  std::array<WeightGroup, 16> groups;  // one per kernel of the slab
  int slab = 0, spatial = 0, chunk = 0;
  bool first_of_slab = false;
  bool zero() const {
    for (const auto& g : groups)
      if (!g.zero()) return false;
    return true;
  }
};

// 16-bit index word: bit[15] first-of-slab flag, bits[14:9] nonzero-set
// count for the slab (1..63), bits[8:5] spatial position (0..8 over the 3x3
// raster), bits[4:0] channel chunk (0..31).
struct IndexFields {
  bool first = false;
  int count = 1;
  int spatial = 0;
  int chunk = 0;
  bool operator==(const IndexFields& o) const {
    return first == o.first && count == o.count && spatial == o.spatial && chunk == o.chunk;
  }
};
uint16_t encode_index(const IndexFields& f);
IndexFields decode_index(uint16_t word);

// Emission-ordered mapped layer plus the per-core batch schedule. Logical
// conv shape is kept alongside the 16-padded geometry the macros see.
struct MappedBatch {
  int core = 0;
  int index = 0;                // batch sequence number within the core
  std::vector<int> set_ids;     // into MappedLayer::sets, <= 64 per batch
};

struct MappedLayer {
  LayerType type = LayerType::conv;
  ConvSpec conv;  // logical shape
  bool relu = true;
  PoolSpec pool;
  int b_w = 8, b_a = 8;
  double scale = 0.0;
  std::vector<int32_t> bias_codes;  // logical out_ch
  std::string name;

  int padded_in_ch = 0, padded_out_ch = 0;
  std::vector<GroupSet> sets;          // slab-major, then (spatial, chunk)
  std::vector<uint16_t> index_words;   // parallel to sets
  std::vector<int> present_slabs;      // slabs with at least one stored set
  std::vector<MappedBatch> batches;

  int n_slabs() const { return padded_out_ch / 16; }
  int n_chunks() const { return padded_in_ch / 16; }
  int n_spatial() const { return conv.kernel_h * conv.kernel_w; }
  int64_t total_sets() const {
    return static_cast<int64_t>(n_slabs()) * n_spatial() * n_chunks();
  }
};

struct MappedNetwork {
  int in_ch = 0, in_h = 0, in_w = 0;
  std::vector<MappedLayer> layers;
};

// Splits a quantized layer into group-sets and drops the all-zero ones.
// An optional mask (pruner geometry alpha=16, n=16) zeroes sets first.
// include_zero keeps every set (the dense-baseline mapping, which carries
// no index stream in hardware).
std::vector<GroupSet> build_group_sets(const QuantizedLayer& layer,
                                       const std::vector<uint8_t>* mask = nullptr,
                                       bool include_zero = false);

// Round-robins kernel slabs over n_cores and packs each core's sets into
// 64-slot batches, in slab order. Returns the batch schedule.
std::vector<MappedBatch> schedule_batches(const std::vector<GroupSet>& sets, int n_slabs,
                                          int n_cores = 4);

MappedLayer map_layer(const QuantizedLayer& layer, int b_w, int b_a,
                      const std::vector<uint8_t>* mask = nullptr);
MappedNetwork map_network(const QuantizedModel& model, const GroupMask* mask = nullptr,
                          const GroupStructure* structure = nullptr);

// Inverse of map_layer: reconstructs the pruned quantized layer exactly.
QuantizedLayer unmap_layer(const MappedLayer& layer);
QuantizedModel unmap_network(const MappedNetwork& net);

// Storage accounting in binary units (1 Kb = 1024 bits).
struct StorageReport {
  int64_t original_bits = 0;
  double weight_bits = 0.0;
  double index_bits = 0.0;
  double zero_groupset_ratio = 0.0;
  double original_mb() const { return static_cast<double>(original_bits) / (1024.0 * 1024.0); }
  double weight_kb() const { return weight_bits / 1024.0; }
  double index_kb() const { return index_bits / 1024.0; }
  double compression_rate() const { return original_bits / (weight_bits + index_bits); }
};

// Formula variant: shape + assumed zero-group-set ratio.
StorageReport compression_report(int kernel_h, int kernel_w, int in_ch, int out_ch, int b_w,
                                 double zero_groupset_ratio);
// Measured variant from a mapped layer (logical shape, stored sets).
StorageReport compression_report(const MappedLayer& layer);

}  // namespace mars
