#include "mars/cli.hpp"

#include <algorithm>
#include <cstdarg>
#include <cstdio>
#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

#include "mars/errors.hpp"
#include "mars/io.hpp"
#include "mars/mapping.hpp"
#include "mars/prune.hpp"
#include "mars/quantize.hpp"
#include "mars/sim.hpp"

namespace mars {
namespace {

std::string fmt(const char* f, ...) {
  char buf[256];
  va_list args;
  va_start(args, f);
  std::vsnprintf(buf, sizeof buf, f, args);
  va_end(args);
  return buf;
}

template <typename Model>
std::vector<int> conv_layer_indices(const Model& m) {
  std::vector<int> out;
  for (size_t i = 0; i < m.layers.size(); ++i)
    if (m.layers[i].type == LayerType::conv) out.push_back(static_cast<int>(i));
  return out;
}

// Inverse of build_model's tensor consumption order, so a pruned float model
// writes back into a container build_model accepts again.
std::vector<Tensor> model_to_tensors(const NetworkModel& m) {
  std::vector<Tensor> out;
  auto vec_tensor = [](const std::vector<double>& v) {
    Tensor t({static_cast<int>(v.size())});
    t.data = v;
    return t;
  };
  for (const LayerSpec& l : m.layers) {
    out.push_back(l.weights);
    out.push_back(vec_tensor(l.bias.empty() ? std::vector<double>(
                                                  static_cast<size_t>(l.conv.out_ch), 0.0)
                                            : l.bias));
    if (l.bn) {
      out.push_back(vec_tensor(l.bn->gamma));
      out.push_back(vec_tensor(l.bn->beta));
      out.push_back(vec_tensor(l.bn->mu));
      out.push_back(vec_tensor(l.bn->sigma2));
    }
  }
  return out;
}

Tensor load_input_tensor(const std::string& path) {
  const std::vector<Tensor> ts = read_tensors(path);
  if (ts.empty()) throw FormatError("input container holds no tensors");
  if (ts[0].dims.size() != 3) throw FormatError("input tensor must be rank 3 [C,H,W]");
  return ts[0];
}

Tensor dequantize_output(const CodeTensor& codes, int b_a) {
  Tensor t(codes.dims);
  for (size_t i = 0; i < codes.data.size(); ++i)
    t.data[i] = dequantize_activation(codes.data[i], b_a);
  return t;
}

}  // namespace

void cmd_quantize(const QuantizeOptions& opt, std::ostream& out) {
  const NetworkDescriptor d = load_descriptor(opt.descriptor);
  const NetworkModel model = build_model(d, read_tensors(opt.weights));
  const QuantizedModel qm = quantize_model(model, d.quant, opt.strict);
  write_quantized(opt.out, qm);

  out << "quantized " << qm.layers.size() << " layers to " << qm.b_w << "-bit weights, "
      << qm.b_a << "-bit activations\n";
  const int wmax = (1 << (qm.b_w - 1)) - 1;
  for (const QuantizedLayer& l : qm.layers) {
    int64_t zeros = 0;
    int32_t lo = 0, hi = 0;
    for (int32_t c : l.codes) {
      if (c == 0) ++zeros;
      lo = std::min(lo, c);
      hi = std::max(hi, c);
    }
    out << fmt("  %-10s %4dx%d %dx%d  scale %-12.6g codes [%d,%d]  zeros %5.1f%%\n",
               l.name.c_str(), l.conv.out_ch, l.conv.in_ch, l.conv.kernel_h, l.conv.kernel_w,
               l.scale, lo, hi,
               100.0 * static_cast<double>(zeros) / static_cast<double>(l.codes.size()));
    if (opt.histogram) {
      // 17 buckets over code/wmax in [-1, 1]
      std::vector<int64_t> buckets(17, 0);
      for (int32_t c : l.codes) {
        const double u = static_cast<double>(c) / wmax;  // [-1, 1]
        int b = static_cast<int>((u + 1.0) / 2.0 * 16.0 + 0.5);
        ++buckets[static_cast<size_t>(std::clamp(b, 0, 16))];
      }
      out << "    hist";
      for (int64_t b : buckets) out << ' ' << b;
      out << '\n';
    }
  }
  out << "wrote " << opt.out << '\n';
}

void cmd_prune(const PruneOptions& opt, std::ostream& out) {
  const NetworkDescriptor d = load_descriptor(opt.descriptor);
  const double target = opt.target >= 0.0 ? opt.target : d.sparsity.target_zero_ratio;
  const std::string magic = sniff_magic(opt.model);

  GroupMask mask;
  GroupStructure structure;
  SparsityStats before, after;
  if (magic == "MRSQ") {
    const QuantizedModel qm = read_quantized(opt.model);
    structure = build_group_structure(qm, d.sparsity.alpha, d.sparsity.n, conv_layer_indices(qm));
    before = sparsity_stats(qm, structure);
    auto [pruned, m] = prune_to_target(qm, structure, target);
    mask = std::move(m);
    after = sparsity_stats(pruned, structure);
    write_quantized(opt.out, pruned);
  } else if (magic == "MRSW") {
    const NetworkModel model = build_model(d, read_tensors(opt.model));
    structure =
        build_group_structure(model, d.sparsity.alpha, d.sparsity.n, conv_layer_indices(model));
    before = sparsity_stats(model, structure);
    auto [pruned, m] = prune_to_target(model, structure, target);
    mask = std::move(m);
    after = sparsity_stats(pruned, structure);
    write_tensors(opt.out, model_to_tensors(pruned));
  } else {
    throw FormatError("model file is neither a float container nor a quantized model: " +
                      opt.model);
  }

  out << fmt("pruned to target %.4g: group-sets %lld, zeroed %lld (ratio %.4f)\n", target,
             static_cast<long long>(mask.total()), static_cast<long long>(mask.zeroed()),
             mask.zero_ratio());
  out << fmt("  element sparsity %.4f -> %.4f, zero group-set ratio %.4f -> %.4f\n",
             before.element_sparsity, after.element_sparsity, before.zero_groupset_ratio,
             after.zero_groupset_ratio);
  out << "wrote " << opt.out << '\n';
  if (!opt.mask_out.empty()) {
    write_mask(opt.mask_out, mask, structure.alpha, structure.n);
    out << "wrote " << opt.mask_out << '\n';
  }
}

void cmd_map(const MapOptions& opt, std::ostream& out) {
  const QuantizedModel qm = read_quantized(opt.model);

  MappedNetwork net;
  if (!opt.mask.empty()) {
    const MaskFile mf = read_mask(opt.mask);
    const GroupStructure structure =
        build_group_structure(qm, mf.alpha, mf.n, conv_layer_indices(qm));
    if (mf.mask.keep.size() != structure.layers.size())
      throw FormatError(fmt("mask covers %zu layers but the model has %zu prunable layers",
                            mf.mask.keep.size(), structure.layers.size()));
    net = map_network(qm, &mf.mask, &structure);
  } else {
    net = map_network(qm);
  }
  write_mapped(opt.out, net);

  std::vector<std::pair<std::string, StorageReport>> rows;
  out << fmt("%-10s %10s %10s %10s %8s %6s\n", "layer", "orig Kb", "weight Kb", "index Kb",
             "rate", "sets");
  for (const MappedLayer& l : net.layers) {
    const StorageReport r = compression_report(l);
    rows.emplace_back(l.name, r);
    out << fmt("%-10s %10.2f %10.2f %10.2f %7.2fx %6zu\n", l.name.c_str(),
               static_cast<double>(r.original_bits) / 1024.0, r.weight_kb(), r.index_kb(),
               r.compression_rate(), l.sets.size());
    if (r.compression_rate() < 1.0)
      out << "  warning: " << l.name
          << " stores more than its dense form (index overhead exceeds the savings)\n";
  }
  if (!opt.csv_out.empty()) {
    write_text_file(opt.csv_out, storage_to_csv(rows));
    out << "wrote " << opt.csv_out << '\n';
  }
  out << "wrote " << opt.out << '\n';
}

void cmd_simulate(const SimulateOptions& opt, std::ostream& out) {
  const MappedNetwork net = read_mapped(opt.image);
  const Tensor input = load_input_tensor(opt.input);

  SimConfig cfg;
  cfg.bit_serial = opt.bit_serial;
  cfg.reload_cycles_per_groupset = opt.reload_cycles;
  cfg.batch_setup_cycles = opt.setup_cycles;

  const NetworkRunResult res = run_network(net, input, cfg);

  std::filesystem::create_directories(opt.out_dir);
  const auto path = [&](const char* name) {
    return (std::filesystem::path(opt.out_dir) / name).string();
  };
  write_text_file(path("report.json"), report_to_json(res.report, cfg));
  write_text_file(path("layers.csv"), report_to_csv(res.report));
  const int out_b_a = net.layers.empty() ? 8 : net.layers.back().b_a;
  write_tensors(path("output.mrsw"), {dequantize_output(res.output, out_b_a)});

  if (opt.baseline) {
    // The dense walk runs alongside every simulation; publish it as its own
    // report for diffing.
    SimReport dense = res.report;
    for (LayerReport& l : dense.layers) {
      l.sparse = l.dense;
      l.speedup_vs_dense = 1.0;
      l.fm_access_reduction = 1.0;
    }
    dense.total_sparse = dense.total_dense;
    dense.speedup_vs_dense = 1.0;
    dense.fm_access_reduction = 1.0;
    write_text_file(path("baseline_report.json"), report_to_json(dense, cfg));
  }
  if (opt.trace) {
    write_bytes_file(path("trace.bin"),
                     shunter_trace(res.report.total_sparse.system_cycles, cfg.n_cores));
  }

  out << fmt("simulated %zu layers: %lld core cycles (dense %lld), speedup %.2fx, "
             "fm access reduction %.2fx\n",
             net.layers.size(), static_cast<long long>(res.report.total_sparse.core_cycles),
             static_cast<long long>(res.report.total_dense.core_cycles),
             res.report.speedup_vs_dense, res.report.fm_access_reduction);
  out << "wrote " << path("report.json") << ", " << path("layers.csv") << ", "
      << path("output.mrsw") << '\n';
}

void cmd_reference(const ReferenceOptions& opt, std::ostream& out) {
  const std::string magic = sniff_magic(opt.model);
  QuantizedModel qm;
  if (magic == "MRSI")
    qm = unmap_network(read_mapped(opt.model));
  else if (magic == "MRSQ")
    qm = read_quantized(opt.model);
  else
    throw FormatError("model file is neither a quantized model nor a mapped image: " + opt.model);

  const Tensor input = load_input_tensor(opt.input);
  const CodeTensor codes = reference_forward(qm, input);
  write_tensors(opt.out, {dequantize_output(codes, qm.b_a)});
  out << "wrote " << opt.out << '\n';
}

void cmd_report(const ReportOptions& opt, std::ostream& out) {
  const SimReport rep = report_from_json(read_text_file(opt.report));
  out << fmt("%-10s %8s %8s %12s %12s %9s %9s\n", "layer", "stored", "total", "cycles",
             "dense cyc", "speedup", "fm red.");
  for (const LayerReport& l : rep.layers)
    out << fmt("%-10s %8lld %8lld %12lld %12lld %8.2fx %8.2fx\n", l.name.c_str(),
               static_cast<long long>(l.stored_sets), static_cast<long long>(l.total_sets),
               static_cast<long long>(l.sparse.core_cycles),
               static_cast<long long>(l.dense.core_cycles), l.speedup_vs_dense,
               l.fm_access_reduction);
  out << fmt("%-10s %8s %8s %12lld %12lld %8.2fx %8.2fx\n", "TOTAL", "", "",
             static_cast<long long>(rep.total_sparse.core_cycles),
             static_cast<long long>(rep.total_dense.core_cycles), rep.speedup_vs_dense,
             rep.fm_access_reduction);
  out << fmt("energy: sparse %.6g, dense %.6g\n", rep.total_sparse.energy,
             rep.total_dense.energy);
}

}  // namespace mars
