#include "mars/prune.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <tuple>

namespace mars {

void SparsityConfig::validate() const {
  if (alpha < 1 || n < 1) throw FormatError("alpha and n must be >= 1");
  if (lambda < 0 || lambda_g < 0) throw FormatError("penalty coefficients must be >= 0");
  if (target_zero_ratio < 0.0 || target_zero_ratio > 1.0)
    throw FormatError("target_zero_ratio must lie in [0,1]");
}

int64_t GroupStructure::total_sets() const {
  int64_t t = 0;
  for (const auto& l : layers) t += l.sets();
  return t;
}

int64_t GroupMask::total() const {
  int64_t t = 0;
  for (const auto& l : keep) t += static_cast<int64_t>(l.size());
  return t;
}
int64_t GroupMask::zeroed() const {
  int64_t z = 0;
  for (const auto& l : keep)
    for (uint8_t k : l) z += (k == 0);
  return z;
}
double GroupMask::zero_ratio() const {
  const int64_t t = total();
  return t == 0 ? 0.0 : static_cast<double>(zeroed()) / static_cast<double>(t);
}

static LayerGroupInfo make_info(int layer, const ConvSpec& c, int alpha, int n) {
  if (c.in_ch % alpha != 0 || c.out_ch % n != 0)
    throw FormatError("layer " + std::to_string(layer) +
                      " shape is not divisible by group geometry (alpha=" + std::to_string(alpha) +
                      ", n=" + std::to_string(n) + ")");
  LayerGroupInfo info;
  info.layer = layer;
  info.n_slabs = c.out_ch / n;
  info.n_spatial = c.kernel_h * c.kernel_w;
  info.n_chunks = c.in_ch / alpha;
  return info;
}

template <typename Model>
static GroupStructure build_structure_impl(const Model& model, int alpha, int n,
                                           const std::optional<std::vector<int>>& filter) {
  if (alpha < 1 || n < 1) throw FormatError("alpha and n must be >= 1");
  GroupStructure s;
  s.alpha = alpha;
  s.n = n;
  if (filter) {
    for (int li : *filter) {
      if (li < 0 || static_cast<size_t>(li) >= model.layers.size())
        throw ShapeError("structure layer index out of range");
      s.layers.push_back(make_info(li, model.layers[static_cast<size_t>(li)].conv, alpha, n));
    }
  } else {
    for (size_t li = 0; li < model.layers.size(); ++li)
      s.layers.push_back(make_info(static_cast<int>(li), model.layers[li].conv, alpha, n));
  }
  return s;
}

GroupStructure build_group_structure(const NetworkModel& model, int alpha, int n,
                                     const std::optional<std::vector<int>>& filter) {
  return build_structure_impl(model, alpha, n, filter);
}
GroupStructure build_group_structure(const QuantizedModel& model, int alpha, int n,
                                     const std::optional<std::vector<int>>& filter) {
  return build_structure_impl(model, alpha, n, filter);
}

// Visits every element of one group-set. T is double or int32_t.
template <typename T, typename Fn>
static void for_each_set_elem(T* data, const ConvSpec& c, int alpha, int n, int slab, int spatial,
                              int chunk, Fn&& fn) {
  const int ky = spatial / c.kernel_w, kx = spatial % c.kernel_w;
  for (int o = slab * n; o < (slab + 1) * n; ++o) {
    for (int i = chunk * alpha; i < (chunk + 1) * alpha; ++i) {
      const size_t idx =
          ((static_cast<size_t>(o) * c.in_ch + i) * c.kernel_h + ky) * c.kernel_w + kx;
      fn(data[idx]);
    }
  }
}

template <typename T>
static std::vector<double> set_norms_impl(const T* data, const ConvSpec& c,
                                          const LayerGroupInfo& info, int alpha, int n) {
  std::vector<double> norms(static_cast<size_t>(info.sets()));
  size_t out = 0;
  for (int slab = 0; slab < info.n_slabs; ++slab)
    for (int spatial = 0; spatial < info.n_spatial; ++spatial)
      for (int chunk = 0; chunk < info.n_chunks; ++chunk) {
        double ss = 0.0;
        for_each_set_elem(const_cast<T*>(data), c, alpha, n, slab, spatial, chunk,
                          [&](T& v) { ss += static_cast<double>(v) * static_cast<double>(v); });
        norms[out++] = std::sqrt(ss);
      }
  return norms;
}

std::vector<double> layer_set_norms(const Tensor& weights, const LayerGroupInfo& info, int alpha,
                                    int n) {
  if (weights.dims.size() != 4) throw ShapeError("weights must be rank 4");
  ConvSpec c;
  c.out_ch = weights.dims[0];
  c.in_ch = weights.dims[1];
  c.kernel_h = weights.dims[2];
  c.kernel_w = weights.dims[3];
  return set_norms_impl(weights.data.data(), c, info, alpha, n);
}

double group_lasso_penalty(const NetworkModel& model, const GroupStructure& structure) {
  double p = 0.0;
  for (const auto& info : structure.layers) {
    const LayerSpec& l = model.layers[static_cast<size_t>(info.layer)];
    for (double nv : set_norms_impl(l.weights.data.data(), l.conv, info, structure.alpha, structure.n))
      p += nv;
  }
  return p;
}

std::vector<double> group_lasso_subgrad(const std::vector<double>& group) {
  double ss = 0.0;
  for (double v : group) ss += v * v;
  std::vector<double> g(group.size(), 0.0);
  if (ss == 0.0) return g;  // subgradient choice at the kink
  const double inv = 1.0 / std::sqrt(ss);
  for (size_t i = 0; i < group.size(); ++i) g[i] = group[i] * inv;
  return g;
}

namespace {
struct SetRef {
  double norm;
  int layer_pos;  // position within structure.layers
  int64_t set;
};
}  // namespace

template <typename Model, typename T>
static std::pair<Model, GroupMask> prune_impl(const Model& model, const GroupStructure& structure,
                                              double target, T* (*layer_data)(Model&, int)) {
  if (target < 0.0 || target > 1.0) throw FormatError("target_zero_ratio must lie in [0,1]");
  Model pruned = model;
  GroupMask mask;
  mask.keep.resize(structure.layers.size());

  std::vector<SetRef> refs;
  refs.reserve(static_cast<size_t>(structure.total_sets()));
  for (size_t lp = 0; lp < structure.layers.size(); ++lp) {
    const auto& info = structure.layers[lp];
    mask.keep[lp].assign(static_cast<size_t>(info.sets()), 1);
    const auto& layer = pruned.layers[static_cast<size_t>(info.layer)];
    std::vector<double> norms =
        set_norms_impl(layer_data(pruned, info.layer), layer.conv, info, structure.alpha, structure.n);
    for (int64_t s = 0; s < info.sets(); ++s)
      refs.push_back({norms[static_cast<size_t>(s)], static_cast<int>(lp), s});
  }

  const int64_t total = structure.total_sets();
  const int64_t k = static_cast<int64_t>(
      std::ceil(target * static_cast<double>(total) - 1e-9));
  std::sort(refs.begin(), refs.end(), [](const SetRef& a, const SetRef& b) {
    return std::tie(a.norm, a.layer_pos, a.set) < std::tie(b.norm, b.layer_pos, b.set);
  });

  for (int64_t i = 0; i < k && i < static_cast<int64_t>(refs.size()); ++i) {
    const SetRef& r = refs[static_cast<size_t>(i)];
    const auto& info = structure.layers[static_cast<size_t>(r.layer_pos)];
    const int spatial_chunks = info.n_chunks;
    const int slab = static_cast<int>(r.set / (info.n_spatial * spatial_chunks));
    const int spatial = static_cast<int>((r.set / spatial_chunks) % info.n_spatial);
    const int chunk = static_cast<int>(r.set % spatial_chunks);
    auto& layer = pruned.layers[static_cast<size_t>(info.layer)];
    for_each_set_elem(layer_data(pruned, info.layer), layer.conv, structure.alpha, structure.n,
                      slab, spatial, chunk, [](T& v) { v = T(0); });
    mask.keep[static_cast<size_t>(r.layer_pos)][static_cast<size_t>(r.set)] = 0;
  }
  return {std::move(pruned), std::move(mask)};
}

static double* float_layer_data(NetworkModel& m, int li) {
  return m.layers[static_cast<size_t>(li)].weights.data.data();
}
static int32_t* code_layer_data(QuantizedModel& m, int li) {
  return m.layers[static_cast<size_t>(li)].codes.data();
}

std::pair<NetworkModel, GroupMask> prune_to_target(const NetworkModel& model,
                                                   const GroupStructure& structure,
                                                   double target_zero_ratio) {
  return prune_impl<NetworkModel, double>(model, structure, target_zero_ratio, float_layer_data);
}
std::pair<QuantizedModel, GroupMask> prune_to_target(const QuantizedModel& model,
                                                     const GroupStructure& structure,
                                                     double target_zero_ratio) {
  return prune_impl<QuantizedModel, int32_t>(model, structure, target_zero_ratio, code_layer_data);
}

template <typename Model, typename T>
static void apply_mask_impl(Model& model, const GroupStructure& structure, const GroupMask& mask,
                            T* (*layer_data)(Model&, int)) {
  if (mask.keep.size() != structure.layers.size())
    throw ShapeError("mask layer count does not match structure");
  for (size_t lp = 0; lp < structure.layers.size(); ++lp) {
    const auto& info = structure.layers[lp];
    if (static_cast<int64_t>(mask.keep[lp].size()) != info.sets())
      throw ShapeError("mask set count does not match structure at layer " +
                       std::to_string(info.layer));
    auto& layer = model.layers[static_cast<size_t>(info.layer)];
    for (int slab = 0; slab < info.n_slabs; ++slab)
      for (int spatial = 0; spatial < info.n_spatial; ++spatial)
        for (int chunk = 0; chunk < info.n_chunks; ++chunk) {
          if (mask.keep[lp][static_cast<size_t>(info.set_index(slab, spatial, chunk))]) continue;
          for_each_set_elem(layer_data(model, info.layer), layer.conv, structure.alpha,
                            structure.n, slab, spatial, chunk, [](T& v) { v = T(0); });
        }
  }
}

void apply_mask(NetworkModel& model, const GroupStructure& structure, const GroupMask& mask) {
  apply_mask_impl<NetworkModel, double>(model, structure, mask, float_layer_data);
}
void apply_mask(QuantizedModel& model, const GroupStructure& structure, const GroupMask& mask) {
  apply_mask_impl<QuantizedModel, int32_t>(model, structure, mask, code_layer_data);
}

template <typename Model, typename T>
static SparsityStats stats_impl(const Model& model, const GroupStructure& structure,
                                T* (*layer_data)(Model&, int)) {
  SparsityStats st;
  int64_t elems = 0, zero_elems = 0, sets = 0, zero_sets = 0, rows = 0, zero_rows = 0;
  Model& m = const_cast<Model&>(model);
  for (const auto& info : structure.layers) {
    const auto& layer = model.layers[static_cast<size_t>(info.layer)];
    const T* data = layer_data(m, info.layer);
    const int64_t count = static_cast<int64_t>(layer.conv.out_ch) * layer.conv.in_ch *
                          layer.conv.kernel_h * layer.conv.kernel_w;
    elems += count;
    for (int64_t i = 0; i < count; ++i) zero_elems += (data[static_cast<size_t>(i)] == T(0));

    std::vector<double> norms = set_norms_impl(data, layer.conv, info, structure.alpha, structure.n);
    sets += info.sets();
    for (double nv : norms) zero_sets += (nv == 0.0);

    // Hardware rows: the fixed 16-kernel x 16-channel grid, partial slices
    // allowed at the edges for measurement purposes.
    const ConvSpec& c = layer.conv;
    const int hs = (c.out_ch + 15) / 16, hc = (c.in_ch + 15) / 16;
    for (int slab = 0; slab < hs; ++slab)
      for (int spatial = 0; spatial < c.kernel_h * c.kernel_w; ++spatial)
        for (int chunk = 0; chunk < hc; ++chunk) {
          const int ky = spatial / c.kernel_w, kx = spatial % c.kernel_w;
          bool zero = true;
          for (int o = slab * 16; o < std::min((slab + 1) * 16, c.out_ch) && zero; ++o)
            for (int i = chunk * 16; i < std::min((chunk + 1) * 16, c.in_ch) && zero; ++i) {
              const size_t idx =
                  ((static_cast<size_t>(o) * c.in_ch + i) * c.kernel_h + ky) * c.kernel_w + kx;
              if (data[idx] != T(0)) zero = false;
            }
          ++rows;
          zero_rows += zero;
        }
  }
  st.element_sparsity = elems ? static_cast<double>(zero_elems) / elems : 0.0;
  st.zero_groupset_ratio = sets ? static_cast<double>(zero_sets) / sets : 0.0;
  st.zero_rows = rows ? static_cast<double>(zero_rows) / rows : 0.0;
  return st;
}

SparsityStats sparsity_stats(const NetworkModel& model, const GroupStructure& structure) {
  return stats_impl<NetworkModel, double>(model, structure, float_layer_data);
}
SparsityStats sparsity_stats(const QuantizedModel& model, const GroupStructure& structure) {
  return stats_impl<QuantizedModel, int32_t>(model, structure, code_layer_data);
}

double max_zero_ratio_at_budget(const NetworkModel& model, const GroupStructure& structure,
                                int64_t element_budget) {
  std::vector<double> norms;
  for (const auto& info : structure.layers) {
    const LayerSpec& l = model.layers[static_cast<size_t>(info.layer)];
    auto n = set_norms_impl(l.weights.data.data(), l.conv, info, structure.alpha, structure.n);
    norms.insert(norms.end(), n.begin(), n.end());
  }
  std::sort(norms.begin(), norms.end());
  const int64_t set_elems = static_cast<int64_t>(structure.alpha) * structure.n;
  int64_t used = 0, zeroed = 0;
  for (size_t i = 0; i < norms.size(); ++i) {
    if (used + set_elems > element_budget) break;
    used += set_elems;
    ++zeroed;
  }
  const int64_t total = structure.total_sets();
  return total ? static_cast<double>(zeroed) / static_cast<double>(total) : 0.0;
}

}  // namespace mars
