#pragma once
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mars/mapping.hpp"
#include "mars/network.hpp"
#include "mars/prune.hpp"
#include "mars/quantize.hpp"
#include "mars/sim.hpp"

namespace mars {

// All containers are little-endian with a 4-byte magic and a u16 version.
// Readers bounds-check every field and throw FormatError on violations.

std::vector<uint8_t> read_bytes_file(const std::string& path);
void write_bytes_file(const std::string& path, const std::vector<uint8_t>& bytes);
std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& text);
std::string sniff_magic(const std::string& path);  // first four bytes, "" if shorter

// Float tensor container ("MRSW"): per tensor a u8 rank, u32 dims and a
// float32 payload. Used for raw weights and for simulator/reference outputs.
void write_tensors(const std::string& path, const std::vector<Tensor>& tensors);
std::vector<Tensor> read_tensors(const std::string& path);

// Quantized model ("MRSQ"): global input shape and bit widths, then per
// layer the conv geometry, flags, pooling, f64 scale, i32 bias codes and raw
// i16 weight codes in [out,in,kh,kw] order.
void write_quantized(const std::string& path, const QuantizedModel& model);
QuantizedModel read_quantized(const std::string& path);

// Group-set keep mask ("MRSM"): group geometry, then per layer a u32 set
// count and keep bits packed LSB-first, byte-aligned per layer.
struct MaskFile {
  int alpha = 16, n = 16;
  GroupMask mask;
};
void write_mask(const std::string& path, const GroupMask& mask, int alpha, int n);
MaskFile read_mask(const std::string& path);

// Mapped accelerator image ("MRSI"): per layer the logical geometry, the
// present-slab directory, the per-core batch table, the 16-bit index words
// in schedule order and the weight codes bit-packed at b_w bits, 16x16 per
// group-set, in the same order. The reader reconstructs slab identities by
// walking first-of-slab flags and counts against the slab directory, then
// re-maps and verifies the index stream round-trips exactly.
void write_mapped(const std::string& path, const MappedNetwork& net);
MappedNetwork read_mapped(const std::string& path);

// Network descriptor: a JSON file naming the architecture, quantization and
// sparsity settings. Standalone pool entries fuse into the preceding conv.
// Unknown keys are rejected.
struct LayerDescriptor {
  std::string type;        // "conv" or "fc" after fusion
  std::vector<int> shape;  // conv [out,kh,kw], fc [out]
  int stride = 1, pad = 0;
  bool has_bn = false, has_relu = true;
  int pool = 0;         // max-pool window, 0 = none
  int pool_stride = 0;  // defaults to the window
  std::string name;
};

struct NetworkDescriptor {
  int in_ch = 0, in_h = 0, in_w = 0;
  std::vector<LayerDescriptor> layers;
  QuantConfig quant;
  SparsityConfig sparsity;
};

NetworkDescriptor parse_descriptor(const std::string& json_text);
NetworkDescriptor load_descriptor(const std::string& path);

// Pairs descriptor layers with a weight container's tensors, in file order:
// weights [out,in,kh,kw] (fc may use [out,in]), bias [out], then
// gamma/beta/mu/sigma2 each [out] when has_bn. Every tensor must be used.
NetworkModel build_model(const NetworkDescriptor& d, const std::vector<Tensor>& tensors);

// Simulation report serialization. Non-finite ratios serialize as JSON null.
std::string report_to_json(const SimReport& report, const SimConfig& cfg);
SimReport report_from_json(const std::string& text);
std::string report_to_csv(const SimReport& report);

// Storage accounting table (one row per layer plus a TOTAL row).
std::string storage_to_csv(const std::vector<std::pair<std::string, StorageReport>>& rows);

}  // namespace mars
