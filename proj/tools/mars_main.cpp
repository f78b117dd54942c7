// Command-line frontend for the compression and simulation toolchain.
// Exit codes: 0 success, 1 unexpected failure, 2 malformed input
// (file/shape errors), 3 constraint violation (mapping/simulation errors).
#include <cstdint>
#include <iostream>

#include "CLI11.hpp"
#include "mars/cli.hpp"
#include "mars/errors.hpp"

int main(int argc, char** argv) {
  CLI::App app{"compression toolchain and behavioral simulator for a multi-macro "
               "compute-in-memory CNN accelerator"};
  app.require_subcommand(1);

  uint64_t seed = 0;
  app.add_option("--seed", seed,
                 "accepted for pipeline compatibility; every command is deterministic");

  mars::QuantizeOptions qopt;
  CLI::App* quantize = app.add_subcommand("quantize", "fold BN and quantize a float model");
  quantize->add_option("-d,--descriptor", qopt.descriptor, "network JSON")->required();
  quantize->add_option("-w,--weights", qopt.weights, "float tensor container")->required();
  quantize->add_option("-o,--out", qopt.out, "quantized model output")->required();
  quantize->add_flag("--strict", qopt.strict, "treat all-zero kernel slabs as an error");
  quantize->add_flag("--histogram", qopt.histogram, "print per-layer code histograms");

  mars::PruneOptions popt;
  CLI::App* prune = app.add_subcommand("prune", "zero the smallest weight group-sets");
  prune->add_option("-d,--descriptor", popt.descriptor, "network JSON")->required();
  prune->add_option("-m,--model", popt.model, "float container or quantized model")->required();
  prune->add_option("-o,--out", popt.out, "pruned model output (same container)")->required();
  prune->add_option("--mask-out", popt.mask_out, "write the keep mask here");
  prune->add_option("--target", popt.target, "zero-group-set ratio (overrides the descriptor)");

  mars::MapOptions mopt;
  CLI::App* map = app.add_subcommand("map", "pack a quantized model into an accelerator image");
  map->add_option("-m,--model", mopt.model, "quantized model")->required();
  map->add_option("--mask", mopt.mask, "group mask to apply while mapping");
  map->add_option("-o,--out", mopt.out, "mapped image output")->required();
  map->add_option("--csv", mopt.csv_out, "write the storage table as CSV");

  mars::SimulateOptions sopt;
  CLI::App* simulate = app.add_subcommand("simulate", "cycle-counting run of a mapped image");
  simulate->add_option("-i,--image", sopt.image, "mapped accelerator image")->required();
  simulate->add_option("-x,--input", sopt.input, "input tensor container")->required();
  simulate->add_option("-o,--out-dir", sopt.out_dir, "output directory")->required();
  simulate->add_flag("--baseline", sopt.baseline, "also write baseline_report.json");
  simulate->add_flag("--trace", sopt.trace, "also write trace.bin (shunter grants)");
  simulate->add_flag("--bit-serial", sopt.bit_serial, "bit-serial activation feeding");
  simulate->add_option("--reload-cycles", sopt.reload_cycles, "cycles per group-set reload");
  simulate->add_option("--setup-cycles", sopt.setup_cycles, "cycles per batch setup");

  mars::ReferenceOptions ropt;
  CLI::App* reference =
      app.add_subcommand("reference", "pure integer forward pass, no accelerator machinery");
  reference->add_option("-m,--model", ropt.model, "quantized model or mapped image")->required();
  reference->add_option("-x,--input", ropt.input, "input tensor container")->required();
  reference->add_option("-o,--out", ropt.out, "output tensor container")->required();

  mars::ReportOptions repopt;
  CLI::App* report = app.add_subcommand("report", "print a simulation report as a table");
  report->add_option("report", repopt.report, "report.json path")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (quantize->parsed()) mars::cmd_quantize(qopt, std::cout);
    if (prune->parsed()) mars::cmd_prune(popt, std::cout);
    if (map->parsed()) mars::cmd_map(mopt, std::cout);
    if (simulate->parsed()) mars::cmd_simulate(sopt, std::cout);
    if (reference->parsed()) mars::cmd_reference(ropt, std::cout);
    if (report->parsed()) mars::cmd_report(repopt, std::cout);
  } catch (const mars::MappingError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  } catch (const mars::SimError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  } catch (const mars::FormatError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const mars::ShapeError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
