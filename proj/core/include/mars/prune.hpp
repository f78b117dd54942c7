#pragma once
#include <cstdint>
#include <optional>
#include <vector>

#include "mars/network.hpp"
#include "mars/quantize.hpp"

namespace mars {

struct SparsityConfig {
  int alpha = 16;                // weights per group along in_ch
  int n = 16;                    // kernels per group-set
  double lambda = 0.0;           // L2 coefficient
  double lambda_g = 0.0;         // group-lasso coefficient
  double target_zero_ratio = 0.0;
  void validate() const;
};

// One prunable layer's group-set grid. Sets enumerate slab-major, then
// spatial position (kh*kw raster), then channel chunk; that order is also
// the tie-break for equal norms and the bit order in mask files.
struct LayerGroupInfo {
  int layer = 0;  // index into the model's layer list
  int n_slabs = 0, n_spatial = 0, n_chunks = 0;
  int64_t sets() const { return static_cast<int64_t>(n_slabs) * n_spatial * n_chunks; }
  int64_t set_index(int slab, int spatial, int chunk) const {
    return (static_cast<int64_t>(slab) * n_spatial + spatial) * n_chunks + chunk;
  }
};

struct GroupStructure {
  int alpha = 16, n = 16;
  std::vector<LayerGroupInfo> layers;
  int64_t total_sets() const;
};

// keep[i][j] == 1 means layer i (structure order), set j survives.
struct GroupMask {
  std::vector<std::vector<uint8_t>> keep;
  int64_t total() const;
  int64_t zeroed() const;
  double zero_ratio() const;
};

// Builds the group grid over the model's layers; layer_filter (model layer
// indices) restricts which layers participate, default all. Any included
// layer whose in_ch/out_ch are not divisible by alpha/n is an error.
GroupStructure build_group_structure(const NetworkModel& model, int alpha, int n,
                                     const std::optional<std::vector<int>>& layer_filter = {});
GroupStructure build_group_structure(const QuantizedModel& model, int alpha, int n,
                                     const std::optional<std::vector<int>>& layer_filter = {});

// L2 norms of every group-set of one layer, enumeration order.
std::vector<double> layer_set_norms(const Tensor& weights, const LayerGroupInfo& info, int alpha,
                                    int n);

// Sum of group-set L2 norms over the whole structure (the R_g term; the
// training objective weighs it by lambda_g/2).
double group_lasso_penalty(const NetworkModel& model, const GroupStructure& structure);

// Subgradient of ||w||_2: w/||w||, zero vector at zero.
std::vector<double> group_lasso_subgrad(const std::vector<double>& group);

// Zeroes the smallest-norm group-sets wholesale (global sort across layers,
// ties broken by (layer, slab, spatial, chunk)) until the zero ratio first
// reaches target. Returns the pruned model and the mask.
std::pair<NetworkModel, GroupMask> prune_to_target(const NetworkModel& model,
                                                   const GroupStructure& structure,
                                                   double target_zero_ratio);
std::pair<QuantizedModel, GroupMask> prune_to_target(const QuantizedModel& model,
                                                     const GroupStructure& structure,
                                                     double target_zero_ratio);

// Zeroes the group-sets named by the mask (keep==0). Used to impose
// externally generated masks.
void apply_mask(NetworkModel& model, const GroupStructure& structure, const GroupMask& mask);
void apply_mask(QuantizedModel& model, const GroupStructure& structure, const GroupMask& mask);

struct SparsityStats {
  double element_sparsity = 0.0;     // zero weights / weights, structure layers
  double zero_groupset_ratio = 0.0;  // all-zero group-sets / group-sets
  double zero_rows = 0.0;            // same measure on the fixed 16x16 hardware grid
};
SparsityStats sparsity_stats(const NetworkModel& model, const GroupStructure& structure);
SparsityStats sparsity_stats(const QuantizedModel& model, const GroupStructure& structure);

// Largest zero-set ratio reachable by zeroing ascending-norm sets without
// exceeding an element budget. Coarser granularity never wins: for the same
// budget, ratio at n=32 <= ratio at n=16.
double max_zero_ratio_at_budget(const NetworkModel& model, const GroupStructure& structure,
                                int64_t element_budget);

}  // namespace mars
