#pragma once
#include <iosfwd>
#include <string>

namespace mars {

// Command implementations behind the mars tool. Each command reads and
// writes the on-disk containers, prints a human summary to `out`, and throws
// (FormatError/ShapeError for malformed inputs, MappingError/SimError for
// constraint violations) instead of exiting, so they are callable from tests
// and other frontends.

struct QuantizeOptions {
  std::string descriptor;  // network JSON
  std::string weights;     // float tensor container
  std::string out;         // quantized model file
  bool strict = false;     // error out on all-zero kernel slabs
  bool histogram = false;  // print per-layer weight-code histograms
};
void cmd_quantize(const QuantizeOptions& opt, std::ostream& out);

struct PruneOptions {
  std::string descriptor;
  std::string model;     // float container or quantized model (sniffed)
  std::string out;       // pruned model, same container as the input
  std::string mask_out;  // optional group mask file
  double target = -1.0;  // overrides the descriptor's target when >= 0
};
void cmd_prune(const PruneOptions& opt, std::ostream& out);

struct MapOptions {
  std::string model;    // quantized model file
  std::string mask;     // optional group mask file
  std::string out;      // mapped accelerator image
  std::string csv_out;  // optional storage table
};
void cmd_map(const MapOptions& opt, std::ostream& out);

struct SimulateOptions {
  std::string image;    // mapped accelerator image
  std::string input;    // float tensor container; first tensor is the input
  std::string out_dir;  // receives report.json, layers.csv, output.mrsw
  bool baseline = false;  // also write baseline_report.json (dense walk)
  bool trace = false;     // also write trace.bin (one grant byte per system cycle)
  bool bit_serial = false;
  int reload_cycles = 16;
  int setup_cycles = 4;
};
void cmd_simulate(const SimulateOptions& opt, std::ostream& out);

struct ReferenceOptions {
  std::string model;  // quantized model or mapped image (sniffed)
  std::string input;  // float tensor container; first tensor is the input
  std::string out;    // output tensor container
};
void cmd_reference(const ReferenceOptions& opt, std::ostream& out);

struct ReportOptions {
  std::string report;  // report.json produced by the simulate command
};
void cmd_report(const ReportOptions& opt, std::ostream& out);

}  // namespace mars
