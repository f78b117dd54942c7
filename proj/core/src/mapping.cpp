#include "mars/mapping.hpp"

#include <algorithm>
#include <string>

namespace mars {

uint16_t encode_index(const IndexFields& f) {
  if (f.count < 1 || f.count > 63) throw MappingError("index count field out of range [1,63]");
  if (f.spatial < 0 || f.spatial > 8) throw MappingError("index spatial field out of range [0,8]");
  if (f.chunk < 0 || f.chunk > 31) throw MappingError("index chunk field out of range [0,31]");
  return static_cast<uint16_t>((f.first ? 1u << 15 : 0u) |
                               (static_cast<unsigned>(f.count) << 9) |
                               (static_cast<unsigned>(f.spatial) << 5) |
                               static_cast<unsigned>(f.chunk));
}

IndexFields decode_index(uint16_t word) {
  IndexFields f;
  f.first = (word >> 15) & 1u;
  f.count = (word >> 9) & 0x3Fu;
  f.spatial = (word >> 5) & 0xFu;
  f.chunk = word & 0x1Fu;
  if (f.spatial > 8)
    throw MappingError("index spatial field " + std::to_string(f.spatial) +
                       " outside the 3x3 raster");
  return f;
}

// Raster conversion: the spatial field addresses the fixed 3-wide raster,
// enumeration order is the kernel's own (kh,kw) raster.
static int spatial_to_raster(int spatial, int kernel_w) {
  return (spatial / kernel_w) * 3 + (spatial % kernel_w);
}

static void check_mappable(const ConvSpec& c) {
  if (c.kernel_h > 3 || c.kernel_w > 3)
    throw MappingError("index format overflow: kernel exceeds the 3x3 raster");
  if (c.in_ch > 512)
    throw MappingError("index format overflow: in_ch " + std::to_string(c.in_ch) +
                       " exceeds 512 channels");
}

std::vector<GroupSet> build_group_sets(const QuantizedLayer& layer,
                                       const std::vector<uint8_t>* mask, bool include_zero) {
  const ConvSpec& c = layer.conv;
  check_mappable(c);
  const int pad_out = (c.out_ch + 15) / 16 * 16;
  const int pad_in = (c.in_ch + 15) / 16 * 16;
  if (pad_in > 512) throw MappingError("index format overflow: padded in_ch exceeds 512");
  const int n_slabs = pad_out / 16, n_chunks = pad_in / 16;
  const int n_spatial = c.kernel_h * c.kernel_w;
  if (mask) {
    if (c.out_ch % 16 || c.in_ch % 16)
      throw MappingError("mask requires channel counts divisible by 16");
    if (static_cast<int64_t>(mask->size()) !=
        static_cast<int64_t>(n_slabs) * n_spatial * n_chunks)
      throw ShapeError("mask length does not match layer group grid");
  }

  std::vector<GroupSet> sets;
  std::vector<int> first_pending(static_cast<size_t>(n_slabs), 1);
  for (int slab = 0; slab < n_slabs; ++slab) {
    for (int spatial = 0; spatial < n_spatial; ++spatial) {
      const int ky = spatial / c.kernel_w, kx = spatial % c.kernel_w;
      for (int chunk = 0; chunk < n_chunks; ++chunk) {
        const bool masked_off =
            mask && !(*mask)[static_cast<size_t>(
                        (static_cast<int64_t>(slab) * n_spatial + spatial) * n_chunks + chunk)];
        GroupSet gs;
        gs.slab = slab;
        gs.spatial = spatial;
        gs.chunk = chunk;
        if (!masked_off) {
          for (int k = 0; k < 16; ++k) {
            const int o = slab * 16 + k;
            if (o >= c.out_ch) break;  // padded kernels stay zero
            for (int i = 0; i < 16; ++i) {
              const int ic = chunk * 16 + i;
              if (ic >= c.in_ch) break;
              gs.groups[static_cast<size_t>(k)].codes[static_cast<size_t>(i)] =
                  layer.codes[((static_cast<size_t>(o) * c.in_ch + ic) * c.kernel_h + ky) *
                                  c.kernel_w +
                              kx];
            }
          }
        }
        if (!include_zero && gs.zero()) continue;
        gs.first_of_slab = first_pending[static_cast<size_t>(slab)] != 0;
        first_pending[static_cast<size_t>(slab)] = 0;
        sets.push_back(gs);
      }
    }
  }
  return sets;
}

std::vector<MappedBatch> schedule_batches(const std::vector<GroupSet>& sets, int n_slabs,
                                          int n_cores) {
  if (n_cores < 1) throw MappingError("core count must be >= 1");
  (void)n_slabs;
  std::vector<MappedBatch> batches;
  for (int core = 0; core < n_cores; ++core) {
    MappedBatch cur;
    cur.core = core;
    cur.index = 0;
    for (size_t i = 0; i < sets.size(); ++i) {
      if (sets[i].slab % n_cores != core) continue;
      if (static_cast<int>(cur.set_ids.size()) == 64) {
        batches.push_back(cur);
        cur.set_ids.clear();
        cur.index += 1;
      }
      cur.set_ids.push_back(static_cast<int>(i));
    }
    if (!cur.set_ids.empty()) batches.push_back(cur);
  }
  return batches;
}

MappedLayer map_layer(const QuantizedLayer& layer, int b_w, int b_a,
                      const std::vector<uint8_t>* mask) {
  MappedLayer m;
  m.type = layer.type;
  m.conv = layer.conv;
  m.relu = layer.relu;
  m.pool = layer.pool;
  m.b_w = b_w;
  m.b_a = b_a;
  m.scale = layer.scale;
  m.bias_codes = layer.bias_codes;
  m.name = layer.name;
  m.padded_out_ch = (layer.conv.out_ch + 15) / 16 * 16;
  m.padded_in_ch = (layer.conv.in_ch + 15) / 16 * 16;
  m.sets = build_group_sets(layer, mask, false);

  // Per-slab counts feed the 6-bit count field.
  std::vector<int> slab_count(static_cast<size_t>(m.n_slabs()), 0);
  for (const GroupSet& s : m.sets) slab_count[static_cast<size_t>(s.slab)] += 1;
  for (int slab = 0; slab < m.n_slabs(); ++slab) {
    if (slab_count[static_cast<size_t>(slab)] > 63)
      throw MappingError("count field overflow: slab " + std::to_string(slab) + " stores " +
                         std::to_string(slab_count[static_cast<size_t>(slab)]) +
                         " group-sets (max 63)");
    if (slab_count[static_cast<size_t>(slab)] > 0) m.present_slabs.push_back(slab);
  }

  m.index_words.reserve(m.sets.size());
  for (const GroupSet& s : m.sets) {
    IndexFields f;
    f.first = s.first_of_slab;
    f.count = slab_count[static_cast<size_t>(s.slab)];
    f.spatial = spatial_to_raster(s.spatial, layer.conv.kernel_w);
    f.chunk = s.chunk;
    m.index_words.push_back(encode_index(f));
  }
  m.batches = schedule_batches(m.sets, m.n_slabs(), 4);
  return m;
}

MappedNetwork map_network(const QuantizedModel& model, const GroupMask* mask,
                          const GroupStructure* structure) {
  model.validate();
  if ((mask == nullptr) != (structure == nullptr))
    throw ShapeError("mask and structure must be supplied together");
  if (structure && (structure->alpha != 16 || structure->n != 16))
    throw MappingError("mapping masks require alpha=16, n=16 geometry");

  MappedNetwork net;
  net.in_ch = model.in_ch;
  net.in_h = model.in_h;
  net.in_w = model.in_w;
  for (size_t li = 0; li < model.layers.size(); ++li) {
    const std::vector<uint8_t>* layer_mask = nullptr;
    if (structure) {
      for (size_t lp = 0; lp < structure->layers.size(); ++lp)
        if (structure->layers[lp].layer == static_cast<int>(li)) {
          layer_mask = &mask->keep[lp];
          break;
        }
    }
    try {
      net.layers.push_back(map_layer(model.layers[li], model.b_w, model.b_a, layer_mask));
    } catch (const MappingError& e) {
      throw MappingError(std::string(e.what()) + " at layer " + std::to_string(li));
    }
  }
  return net;
}

QuantizedLayer unmap_layer(const MappedLayer& layer) {
  QuantizedLayer q;
  q.type = layer.type;
  q.conv = layer.conv;
  q.relu = layer.relu;
  q.pool = layer.pool;
  q.scale = layer.scale;
  q.bias_codes = layer.bias_codes;
  q.name = layer.name;
  q.codes.assign(static_cast<size_t>(q.code_count()), 0);
  const ConvSpec& c = layer.conv;
  for (const GroupSet& s : layer.sets) {
    const int ky = s.spatial / c.kernel_w, kx = s.spatial % c.kernel_w;
    for (int k = 0; k < 16; ++k) {
      const int o = s.slab * 16 + k;
      if (o >= c.out_ch) break;
      for (int i = 0; i < 16; ++i) {
        const int ic = s.chunk * 16 + i;
        if (ic >= c.in_ch) break;
        q.codes[((static_cast<size_t>(o) * c.in_ch + ic) * c.kernel_h + ky) * c.kernel_w + kx] =
            s.groups[static_cast<size_t>(k)].codes[static_cast<size_t>(i)];
      }
    }
  }
  return q;
}

QuantizedModel unmap_network(const MappedNetwork& net) {
  QuantizedModel m;
  m.in_ch = net.in_ch;
  m.in_h = net.in_h;
  m.in_w = net.in_w;
  if (!net.layers.empty()) {
    m.b_w = net.layers[0].b_w;
    m.b_a = net.layers[0].b_a;
  }
  for (const MappedLayer& l : net.layers) m.layers.push_back(unmap_layer(l));
  return m;
}

StorageReport compression_report(int kernel_h, int kernel_w, int in_ch, int out_ch, int b_w,
                                 double zero_groupset_ratio) {
  if (kernel_h < 1 || kernel_w < 1 || in_ch < 1 || out_ch < 1)
    throw ShapeError("compression_report: bad shape");
  if (b_w < 1) throw ShapeError("compression_report: bad bit width");
  if (zero_groupset_ratio < 0.0 || zero_groupset_ratio > 1.0)
    throw ShapeError("compression_report: ratio must lie in [0,1]");
  StorageReport r;
  r.original_bits = static_cast<int64_t>(kernel_h) * kernel_w * in_ch * out_ch * b_w;
  const double keep = 1.0 - zero_groupset_ratio;
  r.weight_bits = static_cast<double>(r.original_bits) * keep;
  const double total_sets =
      static_cast<double>(kernel_h) * kernel_w * (in_ch / 16.0) * (out_ch / 16.0);
  r.index_bits = total_sets * keep * 16.0;
  r.zero_groupset_ratio = zero_groupset_ratio;
  return r;
}

StorageReport compression_report(const MappedLayer& layer) {
  StorageReport r;
  const ConvSpec& c = layer.conv;
  r.original_bits = static_cast<int64_t>(c.kernel_h) * c.kernel_w * c.in_ch * c.out_ch * layer.b_w;
  const int64_t stored = static_cast<int64_t>(layer.sets.size());
  r.weight_bits = static_cast<double>(stored) * 16 * 16 * layer.b_w;
  r.index_bits = static_cast<double>(stored) * 16;
  r.zero_groupset_ratio =
      layer.total_sets() ? 1.0 - static_cast<double>(stored) / static_cast<double>(layer.total_sets())
                         : 0.0;
  return r;
}

}  // namespace mars
