// Generates a demo network (descriptor JSON + float weights + one input
// sample) with structured sparsity baked in: whole 16x16 weight group-sets
// are zeroed at the requested ratio, which is what the mapper exploits.
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <random>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "mars/io.hpp"
#include "mars/tensor.hpp"

namespace {

struct ConvPlan {
  int out_ch, kh, kw, stride, pad, pool;
  bool bn;
};

void zero_group_sets(mars::Tensor& w, double ratio, std::mt19937_64& rng) {
  const int out_ch = w.dims[0], in_ch = w.dims[1], kh = w.dims[2], kw = w.dims[3];
  if (out_ch % 16 != 0 || in_ch % 16 != 0) return;
  std::bernoulli_distribution drop(ratio);
  for (int slab = 0; slab < out_ch / 16; ++slab)
    for (int sp = 0; sp < kh * kw; ++sp)
      for (int chunk = 0; chunk < in_ch / 16; ++chunk) {
        if (!drop(rng)) continue;
        for (int o = slab * 16; o < slab * 16 + 16; ++o)
          for (int i = chunk * 16; i < chunk * 16 + 16; ++i)
            w.at4(o, i, sp / kw, sp % kw) = 0.0;
      }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"demo data generator: network descriptor, weights and an input sample"};
  std::string out_dir;
  uint64_t seed = 1;
  double zero_ratio = 0.5;
  int b_w = 8, b_a = 8;
  app.add_option("-o,--out-dir", out_dir, "output directory")->required();
  app.add_option("--seed", seed, "RNG seed");
  app.add_option("--zero-ratio", zero_ratio, "fraction of weight group-sets zeroed")
      ->check(CLI::Range(0.0, 1.0));
  app.add_option("--b-w", b_w, "weight bits (4 or 8)");
  app.add_option("--b-a", b_a, "activation bits (4 or 8)");
  CLI11_PARSE(app, argc, argv);

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> wdist(0.0, 0.5);
  std::normal_distribution<double> small(0.0, 0.05);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_real_distribution<double> near_one(0.8, 1.2);

  const int in_ch = 16, in_h = 16, in_w = 16;
  const std::vector<ConvPlan> convs = {
      {32, 3, 3, 1, 1, 2, true},
      {32, 3, 3, 1, 1, 2, true},
  };
  const int classes = 10;

  nlohmann::ordered_json j;
  j["input"] = {in_ch, in_h, in_w};
  j["layers"] = nlohmann::ordered_json::array();
  std::vector<mars::Tensor> tensors;

  int c = in_ch, h = in_h, w = in_w;
  for (size_t li = 0; li < convs.size(); ++li) {
    const ConvPlan& p = convs[li];
    nlohmann::ordered_json jl;
    jl["type"] = "conv";
    jl["shape"] = {p.out_ch, p.kh, p.kw};
    jl["stride"] = p.stride;
    jl["pad"] = p.pad;
    jl["has_bn"] = p.bn;
    jl["has_relu"] = true;
    if (p.pool > 0) jl["pool"] = p.pool;
    jl["name"] = "conv" + std::to_string(li + 1);
    j["layers"].push_back(jl);

    mars::Tensor wt({p.out_ch, c, p.kh, p.kw});
    for (double& v : wt.data) v = wdist(rng);
    zero_group_sets(wt, zero_ratio, rng);
    tensors.push_back(std::move(wt));
    mars::Tensor bias({p.out_ch});
    for (double& v : bias.data) v = small(rng);
    tensors.push_back(std::move(bias));
    if (p.bn) {
      mars::Tensor gamma({p.out_ch}), beta({p.out_ch}), mu({p.out_ch}), sigma2({p.out_ch});
      for (double& v : gamma.data) v = near_one(rng);
      for (double& v : beta.data) v = small(rng);
      for (double& v : mu.data) v = small(rng);
      for (double& v : sigma2.data) v = near_one(rng);
      tensors.push_back(std::move(gamma));
      tensors.push_back(std::move(beta));
      tensors.push_back(std::move(mu));
      tensors.push_back(std::move(sigma2));
    }

    h = (h + 2 * p.pad - p.kh) / p.stride + 1;
    w = (w + 2 * p.pad - p.kw) / p.stride + 1;
    c = p.out_ch;
    if (p.pool > 0) {
      h = (h - p.pool) / p.pool + 1;
      w = (w - p.pool) / p.pool + 1;
    }
  }

  nlohmann::ordered_json jfc;
  jfc["type"] = "fc";
  jfc["shape"] = {classes};
  jfc["has_relu"] = false;
  jfc["name"] = "fc";
  j["layers"].push_back(jfc);
  mars::Tensor fcw({classes, c * h * w});
  for (double& v : fcw.data) v = 0.4 * wdist(rng);
  tensors.push_back(std::move(fcw));
  mars::Tensor fcb({classes});
  for (double& v : fcb.data) v = small(rng);
  tensors.push_back(std::move(fcb));

  j["quant"] = {{"b_w", b_w}, {"b_a", b_a}};
  j["sparsity"] = {{"alpha", 16}, {"n", 16}, {"target_zero_ratio", zero_ratio}};

  mars::Tensor input({in_ch, in_h, in_w});
  for (double& v : input.data) v = unit(rng);

  std::filesystem::create_directories(out_dir);
  const auto path = [&](const char* name) {
    return (std::filesystem::path(out_dir) / name).string();
  };
  mars::write_text_file(path("net.json"), j.dump(2) + "\n");
  mars::write_tensors(path("weights.mrsw"), tensors);
  mars::write_tensors(path("input.mrsw"), {input});

  std::cout << "wrote " << path("net.json") << ", " << path("weights.mrsw") << ", "
            << path("input.mrsw") << " (seed " << seed << ", zero ratio " << zero_ratio << ")\n";
  return 0;
}
