#pragma once
#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mars/macro.hpp"
#include "mars/mapping.hpp"

namespace mars {

// System clock runs 4x the core clock; the shunter grants each core one
// feature-map access slot per system-clock revolution, so a core can issue
// one fetch per core cycle. Grants are static round-robin, busy or not.
struct ShunterState {
  int n_cores = 4;
  int grant(int64_t system_cycle) const { return static_cast<int>(system_cycle % n_cores); }
};
std::vector<uint8_t> shunter_trace(int64_t system_cycles, int n_cores = 4);

// Spatial address setup: turns a decoded index word plus the output pixel
// into the input fetch location. The spatial field addresses the fixed 3x3
// raster. padding set means the fetch substitutes 16 zeros (it still costs
// the shunter slot and is counted as a read request).
struct FetchAddress {
  int row = 0, col = 0, channel_base = 0;
  bool padding = false;
};
FetchAddress sas_address(const IndexFields& f, int out_r, int out_c, int stride, int pad,
                         int ifm_h, int ifm_w);

// One 512-Kbit feature-map SRAM, 128-bit words (16 activation bytes).
class FmSram {
 public:
  static constexpr int64_t kCapacityBits = 512 * 1024;
  static constexpr int kWordBytes = 16;
  static constexpr int64_t kCapacityWords = kCapacityBits / 8 / kWordBytes;  // 4096

  using Word = std::array<uint8_t, kWordBytes>;
  Word read_word(int64_t addr);
  void write_word(int64_t addr, const Word& w);
  void reset();
  int64_t reads() const { return reads_; }
  int64_t writes() const { return writes_; }

 private:
  std::vector<Word> words_ = std::vector<Word>(kCapacityWords);
  int64_t reads_ = 0, writes_ = 0;
};

struct EnergyCosts {
  double macro_access = 0.0;
  double fm_read = 0.0;
  double fm_write = 0.0;
  double reload_groupset = 0.0;
};

struct SimConfig {
  int reload_cycles_per_groupset = 16;  // weight SRAM -> macro, per stored set
  int batch_setup_cycles = 4;
  bool bit_serial = false;  // b_a one-bit planes per access; values unchanged
  int n_cores = 4;
  std::optional<EnergyCosts> energy;
};

struct LayerCounters {
  int64_t core_cycles = 0;  // max over cores of compute + reload
  int64_t system_cycles = 0;
  int64_t macro_accesses = 0;
  int64_t groupsets_activated = 0;
  int64_t weight_reload_cycles = 0;  // summed over cores
  int64_t fm_reads = 0;              // fetch requests (padding included)
  int64_t fm_writes = 0;
  int64_t tile_stage_words = 0;  // restaging traffic when maps spill the SRAM
  double energy = 0.0;
  void add(const LayerCounters& o);
};

struct LayerReport {
  std::string name;
  int out_ch = 0, in_ch = 0, kernel_h = 0, kernel_w = 0;
  int64_t stored_sets = 0, total_sets = 0;
  LayerCounters sparse, dense;
  double speedup_vs_dense = 1.0;
  double fm_access_reduction = 1.0;
};

struct SimReport {
  std::vector<LayerReport> layers;
  LayerCounters total_sparse, total_dense;
  double speedup_vs_dense = 1.0;
  double fm_access_reduction = 1.0;
};

struct NetworkRunResult {
  CodeTensor output;  // final activation codes, logical channels
  SimReport report;
};

// Cycle-counting behavioral run of one mapped layer. The sparse pass walks
// the index stream (decode -> SAS -> macro access); the dense baseline walks
// every group-set position sequentially with no index stream. Both passes
// produce identical values; OFM codes follow the APW contract
//   quantize_activations(pool(relu(out_scale * (acc + bias)))).
CodeTensor run_layer(const MappedLayer& layer, const CodeTensor& ifm_logical,
                     const SimConfig& cfg, bool baseline, LayerCounters& counters,
                     int layer_index = 0);

NetworkRunResult run_network(const MappedNetwork& net, const Tensor& input, const SimConfig& cfg);
NetworkRunResult run_network_codes(const MappedNetwork& net, const CodeTensor& input_codes,
                                   const SimConfig& cfg);

}  // namespace mars
