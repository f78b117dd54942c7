#include "mars/sim.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "mars/errors.hpp"
#include "mars/network.hpp"
#include "mars/quantize.hpp"

namespace mars {

std::vector<uint8_t> shunter_trace(int64_t system_cycles, int n_cores) {
  if (system_cycles < 0 || n_cores <= 0)
    throw SimError("shunter trace needs a non-negative cycle count and a positive core count");
  std::vector<uint8_t> trace(static_cast<size_t>(system_cycles));
  for (int64_t c = 0; c < system_cycles; ++c)
    trace[static_cast<size_t>(c)] = static_cast<uint8_t>(c % n_cores);
  return trace;
}

FetchAddress sas_address(const IndexFields& f, int out_r, int out_c, int stride, int pad,
                         int ifm_h, int ifm_w) {
  if (f.spatial < 0 || f.spatial > 8)
    throw MappingError("index spatial field " + std::to_string(f.spatial) +
                       " outside the 3x3 raster");
  if (f.chunk < 0 || f.chunk > 31)
    throw MappingError("index chunk field " + std::to_string(f.chunk) + " out of range [0, 31]");
  FetchAddress a;
  a.row = out_r * stride + f.spatial / 3 - pad;
  a.col = out_c * stride + f.spatial % 3 - pad;
  a.channel_base = f.chunk * 16;
  a.padding = a.row < 0 || a.row >= ifm_h || a.col < 0 || a.col >= ifm_w;
  return a;
}

FmSram::Word FmSram::read_word(int64_t addr) {
  if (addr < 0 || addr >= kCapacityWords)
    throw SimError("feature-map SRAM read at word " + std::to_string(addr) +
                   " outside capacity " + std::to_string(kCapacityWords));
  ++reads_;
  return words_[static_cast<size_t>(addr)];
}

void FmSram::write_word(int64_t addr, const Word& w) {
  if (addr < 0 || addr >= kCapacityWords)
    throw SimError("feature-map SRAM write at word " + std::to_string(addr) +
                   " outside capacity " + std::to_string(kCapacityWords));
  ++writes_;
  words_[static_cast<size_t>(addr)] = w;
}

void FmSram::reset() {
  words_.assign(static_cast<size_t>(kCapacityWords), Word{});
  reads_ = 0;
  writes_ = 0;
}

void LayerCounters::add(const LayerCounters& o) {
  core_cycles += o.core_cycles;
  system_cycles += o.system_cycles;
  macro_accesses += o.macro_accesses;
  groupsets_activated += o.groupsets_activated;
  weight_reload_cycles += o.weight_reload_cycles;
  fm_reads += o.fm_reads;
  fm_writes += o.fm_writes;
  tile_stage_words += o.tile_stage_words;
  energy += o.energy;
}

namespace {

// Raster code of an enumeration-space tap (row-major over kh x kw) inside
// the fixed 3x3 raster the index words address.
int raster_code(int spatial, int kernel_w) {
  return (spatial / kernel_w) * 3 + spatial % kernel_w;
}

struct SlotEntry {
  IndexFields fields;  // spatial already in raster space
  int slab = 0;
  const std::array<WeightGroup, 16>* groups = nullptr;
};

struct CoreBatch {
  std::vector<SlotEntry> slots;  // <= 64
};

// Reconstructs each core's slot contents by decoding the index stream:
// first-of-slab flags open a run, counts close it, and the slab identity
// follows from the core's ascending present-slab list. The stored set
// metadata is only used to fetch weights and to cross-check the stream.
std::vector<std::vector<CoreBatch>> plan_sparse(const MappedLayer& L, int n_cores,
                                                const std::string& where) {
  std::vector<std::vector<CoreBatch>> cores(static_cast<size_t>(n_cores));
  std::vector<std::vector<int>> core_slabs(static_cast<size_t>(n_cores));
  for (int s : L.present_slabs) core_slabs[static_cast<size_t>(s % n_cores)].push_back(s);
  std::vector<size_t> cursor(static_cast<size_t>(n_cores), 0);
  std::vector<int> remaining(static_cast<size_t>(n_cores), 0);
  std::vector<int> cur_slab(static_cast<size_t>(n_cores), -1);

  for (const MappedBatch& b : L.batches) {
    if (b.core < 0 || b.core >= n_cores)
      throw SimError("batch core " + std::to_string(b.core) + " outside the configured " +
                     std::to_string(n_cores) + " cores" + where);
    const size_t core = static_cast<size_t>(b.core);
    CoreBatch cb;
    for (int id : b.set_ids) {
      if (id < 0 || static_cast<size_t>(id) >= L.sets.size())
        throw MappingError("batch references a missing group-set" + where);
      const GroupSet& set = L.sets[static_cast<size_t>(id)];
      const IndexFields f = decode_index(L.index_words[static_cast<size_t>(id)]);
      if (f.first) {
        if (remaining[core] != 0)
          throw MappingError("corrupt index stream: slab run ended early" + where);
        if (cursor[core] >= core_slabs[core].size())
          throw MappingError("corrupt index stream: more slab runs than present slabs" + where);
        cur_slab[core] = core_slabs[core][cursor[core]++];
        remaining[core] = f.count;
      }
      if (remaining[core] <= 0)
        throw MappingError("corrupt index stream: group-set outside any slab run" + where);
      --remaining[core];
      if (cur_slab[core] % n_cores != b.core)
        throw MappingError("corrupt index stream: slab assigned to the wrong core" + where);
      if (cur_slab[core] != set.slab || f.chunk != set.chunk ||
          f.spatial != raster_code(set.spatial, L.conv.kernel_w))
        throw MappingError("corrupt index stream: decoded fields disagree with the stored set" +
                           where);
      cb.slots.push_back(SlotEntry{f, cur_slab[core], &set.groups});
    }
    if (cb.slots.size() > 64) throw MappingError("batch exceeds 64 slots" + where);
    cores[core].push_back(std::move(cb));
  }
  for (int c = 0; c < n_cores; ++c) {
    const size_t cs = static_cast<size_t>(c);
    if (remaining[cs] != 0)
      throw MappingError("corrupt index stream: slab run truncated" + where);
    if (cursor[cs] != core_slabs[cs].size())
      throw MappingError("corrupt index stream: present slab without a run" + where);
  }
  return cores;
}

// Dense baseline: every group-set position in (slab, spatial, chunk) order,
// slabs round-robined over cores, chopped into 64-slot batches. No index
// stream exists; the spatial/chunk fields come straight from enumeration.
std::vector<std::vector<CoreBatch>> plan_dense(const MappedLayer& L,
                                               const std::vector<GroupSet>& all_sets,
                                               int n_cores) {
  std::vector<std::vector<CoreBatch>> cores(static_cast<size_t>(n_cores));
  for (const GroupSet& s : all_sets) {
    auto& batches = cores[static_cast<size_t>(s.slab % n_cores)];
    if (batches.empty() || batches.back().slots.size() == 64) batches.emplace_back();
    IndexFields f;
    f.first = false;
    f.count = 1;
    f.spatial = raster_code(s.spatial, L.conv.kernel_w);
    f.chunk = s.chunk;
    batches.back().slots.push_back(SlotEntry{f, s.slab, &s.groups});
  }
  return cores;
}

struct Band {
  int out_r0 = 0, out_r1 = 0;    // conv-output rows [r0, r1)
  int in_r0 = 0, in_r1 = 0;      // staged input rows [r0, r1)
  int pool_r0 = 0, pool_r1 = 0;  // pooled-output rows [r0, r1)
};

int64_t word_addr(int chunk, int rows, int r_local, int width, int c) {
  return (static_cast<int64_t>(chunk) * rows + r_local) * width + c;
}

// Output-row bands sized so the staged input slice and the pooled output
// band both fit one SRAM. A single band means no restaging traffic.
std::vector<Band> plan_bands(const MappedLayer& L, int ifm_h, int ifm_w, int out_h,
                             int pooled_h, int pooled_w, const std::string& where) {
  const int chunks_in = L.padded_in_ch / 16;
  const int chunks_out = L.padded_out_ch / 16;
  const bool pooled = L.pool.window > 0;
  const int pw = pooled ? L.pool.window : 1;
  const int ps = pooled ? L.pool.stride : 1;
  const int64_t cap = FmSram::kCapacityWords;

  auto in_rows_for = [&](int out_r0, int out_r1) {
    int r0 = out_r0 * L.conv.stride - L.conv.pad;
    int r1 = (out_r1 - 1) * L.conv.stride + L.conv.kernel_h - L.conv.pad;
    return std::pair<int, int>{std::max(0, r0), std::min(ifm_h, std::max(r1, 0))};
  };
  auto fits = [&](int in_rows, int pool_rows) {
    return static_cast<int64_t>(chunks_in) * in_rows * ifm_w <= cap &&
           static_cast<int64_t>(chunks_out) * pool_rows * pooled_w <= cap;
  };

  if (fits(ifm_h, pooled_h)) {
    Band b;
    b.out_r0 = 0;
    b.out_r1 = out_h;
    b.in_r0 = 0;
    b.in_r1 = ifm_h;
    b.pool_r0 = 0;
    b.pool_r1 = pooled_h;
    return {b};
  }

  // Find the largest band height in pooled-row units (conv rows if no pool).
  // The last band also absorbs conv rows no pool window consumes, hence the
  // ps-1 slack in the feasibility check.
  const int units = pooled ? pooled_h : out_h;
  int best = 0;
  for (int u = units; u >= 1; --u) {
    const int conv_rows = (u - 1) * ps + pw + (pooled ? ps - 1 : 0);
    const int in_rows = (conv_rows - 1) * L.conv.stride + L.conv.kernel_h;
    if (fits(std::min(in_rows, ifm_h), u)) {
      best = u;
      break;
    }
  }
  if (best == 0) throw SimError("feature map exceeds tiling limits" + where);

  std::vector<Band> bands;
  for (int start = 0; start < units; start += best) {
    const int count = std::min(best, units - start);
    Band b;
    b.pool_r0 = pooled ? start : 0;
    b.pool_r1 = pooled ? start + count : 0;
    b.out_r0 = pooled ? start * ps : start;
    b.out_r1 = pooled ? (start + count - 1) * ps + pw : start + count;
    if (start + count == units) b.out_r1 = out_h;  // absorb trailing conv rows
    if (!pooled) {
      b.pool_r0 = b.out_r0;
      b.pool_r1 = b.out_r1;
    }
    auto [r0, r1] = in_rows_for(b.out_r0, b.out_r1);
    b.in_r0 = r0;
    b.in_r1 = r1;
    bands.push_back(b);
  }
  return bands;
}

int64_t stage_band(FmSram& sram, const CodeTensor& ifm, int chunks_in, const Band& band,
                   int width) {
  const int channels = ifm.dims[0];
  const int rows = band.in_r1 - band.in_r0;
  int64_t words = 0;
  for (int ch = 0; ch < chunks_in; ++ch)
    for (int r = band.in_r0; r < band.in_r1; ++r)
      for (int c = 0; c < width; ++c) {
        FmSram::Word w{};
        for (int i = 0; i < 16; ++i) {
          const int cc = ch * 16 + i;
          w[static_cast<size_t>(i)] =
              cc < channels ? static_cast<uint8_t>(ifm.at3(cc, r, c)) : 0;
        }
        sram.write_word(word_addr(ch, rows, r - band.in_r0, width, c), w);
        ++words;
      }
  return words;
}

}  // namespace

CodeTensor run_layer(const MappedLayer& L, const CodeTensor& ifm_in, const SimConfig& cfg,
                     bool baseline, LayerCounters& ctr, int layer_index) {
  const std::string where = " at layer " + std::to_string(layer_index);
  if (cfg.n_cores <= 0) throw SimError("core count must be positive");
  if (ifm_in.dims.size() != 3) throw ShapeError("layer input must be rank-3" + where);

  const CodeTensor ifm = L.type == LayerType::fc ? flatten_chw(ifm_in) : ifm_in;
  const int ifm_h = ifm.dims[1], ifm_w = ifm.dims[2];
  if (ifm.dims[0] != L.conv.in_ch)
    throw ShapeError("input has " + std::to_string(ifm.dims[0]) + " channels, layer expects " +
                     std::to_string(L.conv.in_ch) + where);
  const int amax = (1 << L.b_a) - 1;
  for (int32_t code : ifm.data)
    if (code < 0 || code > amax)
      throw SimError("activation code " + std::to_string(code) + " outside " +
                     std::to_string(L.b_a) + "-bit range" + where);

  const int out_h = L.conv.out_h(ifm_h);
  const int out_w = L.conv.out_w(ifm_w);
  if (out_h <= 0 || out_w <= 0) throw ShapeError("convolution output is empty" + where);
  const bool pooled = L.pool.window > 0;
  if (pooled && (out_h < L.pool.window || out_w < L.pool.window))
    throw ShapeError("pool window exceeds the feature map" + where);
  const int pooled_h = pooled ? (out_h - L.pool.window) / L.pool.stride + 1 : out_h;
  const int pooled_w = pooled ? (out_w - L.pool.window) / L.pool.stride + 1 : out_w;
  const int chunks_in = L.padded_in_ch / 16;
  const int n_slabs = L.n_slabs();
  const int logical_out = L.conv.out_ch;
  const double out_sc = L.scale / ((1 << L.b_a) - 1);

  // Dense baseline re-enumerates every position from the unmapped codes.
  std::vector<GroupSet> dense_sets;
  std::vector<std::vector<CoreBatch>> plan;
  if (baseline) {
    const QuantizedLayer unmapped = unmap_layer(L);
    dense_sets = build_group_sets(unmapped, nullptr, /*include_zero=*/true);
    plan = plan_dense(L, dense_sets, cfg.n_cores);
  } else {
    plan = plan_sparse(L, cfg.n_cores, where);
  }

  const std::vector<Band> bands = plan_bands(L, ifm_h, ifm_w, out_h, pooled_h, pooled_w,
                                             where);
  const bool tiled = bands.size() > 1;

  FmSram in_sram, out_sram;
  CodeTensor ofm({logical_out, pooled_h, pooled_w});
  int64_t reload_events = 0;

  const auto i32_min = static_cast<int64_t>(std::numeric_limits<int32_t>::min());
  const auto i32_max = static_cast<int64_t>(std::numeric_limits<int32_t>::max());
  auto check32 = [&](int64_t v) {
    if (v < i32_min || v > i32_max)
      throw SimError("accumulator overflow beyond 32 bits" + where);
    return v;
  };

  for (const Band& band : bands) {
    const int band_out_rows = band.out_r1 - band.out_r0;
    const int band_in_rows = band.in_r1 - band.in_r0;

    const int64_t staged = stage_band(in_sram, ifm, chunks_in, band, ifm_w);
    if (tiled) ctr.tile_stage_words += staged;

    std::vector<int64_t> acc(static_cast<size_t>(L.padded_out_ch) * band_out_rows * out_w, 0);
    auto acc_at = [&](int oc, int r_local, int c) -> int64_t& {
      return acc[(static_cast<size_t>(oc) * band_out_rows + r_local) * out_w + c];
    };

    int64_t band_max_core = 0;
    for (int core = 0; core < cfg.n_cores; ++core) {
      int64_t compute = 0, reload = 0;
      for (const CoreBatch& batch : plan[static_cast<size_t>(core)]) {
        MacroState m0(L.b_w), m1(L.b_w);
        for (size_t slot = 0; slot < batch.slots.size(); ++slot) {
          const auto& groups = *batch.slots[slot].groups;
          std::array<WeightGroup, 8> lo, hi;
          for (int i = 0; i < 8; ++i) {
            lo[static_cast<size_t>(i)] = groups[static_cast<size_t>(i)];
            hi[static_cast<size_t>(i)] = groups[static_cast<size_t>(i + 8)];
          }
          m0.load_groups(static_cast<int>(slot), lo);
          m1.load_groups(static_cast<int>(slot), hi);
        }
        reload += cfg.batch_setup_cycles +
                  static_cast<int64_t>(cfg.reload_cycles_per_groupset) * batch.slots.size();
        reload_events += static_cast<int64_t>(batch.slots.size());

        for (int out_r = band.out_r0; out_r < band.out_r1; ++out_r) {
          for (int out_c = 0; out_c < out_w; ++out_c) {
            for (size_t slot = 0; slot < batch.slots.size(); ++slot) {
              const SlotEntry& e = batch.slots[slot];
              const FetchAddress fa = sas_address(e.fields, out_r, out_c, L.conv.stride,
                                                  L.conv.pad, ifm_h, ifm_w);
              std::array<int32_t, 16> inputs{};
              ++ctr.fm_reads;  // padding fetches still consume the slot
              if (!fa.padding) {
                if (fa.row < band.in_r0 || fa.row >= band.in_r1)
                  throw SimError("internal: fetch outside the staged band" + where);
                const FmSram::Word w = in_sram.read_word(word_addr(
                    fa.channel_base / 16, band_in_rows, fa.row - band.in_r0, ifm_w, fa.col));
                for (int i = 0; i < 16; ++i) inputs[static_cast<size_t>(i)] = w[static_cast<size_t>(i)];
              }

              MacResult r0, r1;
              if (cfg.bit_serial) {
                std::vector<MacResult> p0(static_cast<size_t>(L.b_a)),
                    p1(static_cast<size_t>(L.b_a));
                std::vector<int32_t> weights(static_cast<size_t>(L.b_a));
                for (int b = 0; b < L.b_a; ++b) {
                  std::array<int32_t, 16> bits{};
                  for (int i = 0; i < 16; ++i)
                    bits[static_cast<size_t>(i)] = (inputs[static_cast<size_t>(i)] >> b) & 1;
                  p0[static_cast<size_t>(b)] = m0.access(static_cast<int>(slot), bits);
                  p1[static_cast<size_t>(b)] = m1.access(static_cast<int>(slot), bits);
                  weights[static_cast<size_t>(b)] = 1 << b;
                }
                r0 = shift_accumulate(p0, weights);
                r1 = shift_accumulate(p1, weights);
                compute += L.b_a;
                ctr.macro_accesses += 2 * L.b_a;
              } else {
                r0 = m0.access(static_cast<int>(slot), inputs);
                r1 = m1.access(static_cast<int>(slot), inputs);
                compute += 1;
                ctr.macro_accesses += 2;
              }
              ++ctr.groupsets_activated;

              const int r_local = out_r - band.out_r0;
              for (int j = 0; j < 8; ++j) {
                int64_t& a0 = acc_at(e.slab * 16 + j, r_local, out_c);
                a0 = check32(a0 + r0.sums[static_cast<size_t>(j)]);
                int64_t& a1 = acc_at(e.slab * 16 + 8 + j, r_local, out_c);
                a1 = check32(a1 + r1.sums[static_cast<size_t>(j)]);
              }
            }
          }
        }
      }
      ctr.weight_reload_cycles += reload;
      band_max_core = std::max(band_max_core, compute + reload);
    }
    // Cores barrier at band boundaries: the shared feature-map SRAM must be
    // restaged before anyone proceeds.
    ctr.core_cycles += band_max_core;

    // Activation post-processing: relu -> max-pool -> requantize, then one
    // OFM word per (slab, pooled pixel). Absent and padded kernels carry
    // zero accumulators and zero bias.
    const int band_pool_rows = pooled ? band.pool_r1 - band.pool_r0 : band_out_rows;
    const int pw = pooled ? L.pool.window : 1;
    const int ps = pooled ? L.pool.stride : 1;
    const int pr0 = pooled ? band.pool_r0 : band.out_r0;
    const int pr1 = pooled ? band.pool_r1 : band.out_r1;
    for (int slab = 0; slab < n_slabs; ++slab) {
      for (int pr = pr0; pr < pr1; ++pr) {
        for (int pc = 0; pc < pooled_w; ++pc) {
          FmSram::Word w{};
          for (int k = 0; k < 16; ++k) {
            const int oc = slab * 16 + k;
            const int64_t bias = oc < logical_out ? L.bias_codes[static_cast<size_t>(oc)] : 0;
            double best = -std::numeric_limits<double>::infinity();
            for (int wy = 0; wy < pw; ++wy) {
              for (int wx = 0; wx < pw; ++wx) {
                const int r = pooled ? pr * ps + wy : pr;
                const int c = pooled ? pc * ps + wx : pc;
                const int64_t a = check32(acc_at(oc, r - band.out_r0, c) + bias);
                double real = out_sc * static_cast<double>(a);
                if (L.relu) real = std::max(real, 0.0);
                best = std::max(best, real);
              }
            }
            const int32_t code = quantize_activation_value(best, L.b_a);
            w[static_cast<size_t>(k)] = static_cast<uint8_t>(code);
            if (oc < logical_out) ofm.at3(oc, pr, pc) = code;
          }
          out_sram.write_word(
              word_addr(slab, band_pool_rows, pr - pr0, pooled_w, pc), w);
          ++ctr.fm_writes;
        }
      }
    }
  }

  ctr.system_cycles = ctr.core_cycles * cfg.n_cores;
  if (cfg.energy) {
    const EnergyCosts& e = *cfg.energy;
    ctr.energy = static_cast<double>(ctr.macro_accesses) * e.macro_access +
                 static_cast<double>(ctr.fm_reads) * e.fm_read +
                 static_cast<double>(ctr.fm_writes + ctr.tile_stage_words) * e.fm_write +
                 static_cast<double>(reload_events) * e.reload_groupset;
  }
  return ofm;
}

namespace {

double safe_ratio(int64_t dense, int64_t sparse) {
  if (sparse == 0) return dense == 0 ? 1.0 : std::numeric_limits<double>::infinity();
  return static_cast<double>(dense) / static_cast<double>(sparse);
}

}  // namespace

NetworkRunResult run_network_codes(const MappedNetwork& net, const CodeTensor& input_codes,
                                   const SimConfig& cfg) {
  if (input_codes.dims.size() != 3 || input_codes.dims[0] != net.in_ch ||
      input_codes.dims[1] != net.in_h || input_codes.dims[2] != net.in_w)
    throw ShapeError("network input does not match the mapped image shape");
  NetworkRunResult out;
  out.output = input_codes;
  for (size_t i = 0; i < net.layers.size(); ++i) {
    const MappedLayer& L = net.layers[i];
    LayerReport lr;
    lr.name = L.name.empty() ? "layer" + std::to_string(i) : L.name;
    lr.out_ch = L.conv.out_ch;
    lr.in_ch = L.conv.in_ch;
    lr.kernel_h = L.conv.kernel_h;
    lr.kernel_w = L.conv.kernel_w;
    lr.stored_sets = static_cast<int64_t>(L.sets.size());
    lr.total_sets = L.total_sets();

    CodeTensor sparse_out = run_layer(L, out.output, cfg, false, lr.sparse, static_cast<int>(i));
    const CodeTensor dense_out = run_layer(L, out.output, cfg, true, lr.dense,
                                           static_cast<int>(i));
    if (!(sparse_out == dense_out))
      throw SimError("internal: dense baseline disagrees with the index walk at layer " +
                     std::to_string(i));

    lr.speedup_vs_dense = safe_ratio(lr.dense.system_cycles, lr.sparse.system_cycles);
    lr.fm_access_reduction = safe_ratio(lr.dense.fm_reads, lr.sparse.fm_reads);
    out.report.total_sparse.add(lr.sparse);
    out.report.total_dense.add(lr.dense);
    out.report.layers.push_back(std::move(lr));
    out.output = std::move(sparse_out);
  }
  out.report.speedup_vs_dense =
      safe_ratio(out.report.total_dense.system_cycles, out.report.total_sparse.system_cycles);
  out.report.fm_access_reduction =
      safe_ratio(out.report.total_dense.fm_reads, out.report.total_sparse.fm_reads);
  return out;
}

NetworkRunResult run_network(const MappedNetwork& net, const Tensor& input, const SimConfig& cfg) {
  const int b_a = net.layers.empty() ? 8 : net.layers.front().b_a;
  return run_network_codes(net, quantize_activations(input, b_a), cfg);
}

}  // namespace mars
