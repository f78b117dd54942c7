#include <benchmark/benchmark.h>

#include <random>

#include "mars/mapping.hpp"
#include "mars/quantize.hpp"
#include "mars/sim.hpp"
#include "mars/tensor.hpp"

namespace {

mars::Tensor random_tensor(std::vector<int> dims, std::mt19937_64& rng, double scale = 0.5) {
  std::normal_distribution<double> d(0.0, scale);
  mars::Tensor t(std::move(dims));
  for (double& v : t.data) v = d(rng);
  return t;
}

mars::NetworkModel demo_model(int out_ch, bool bn) {
  std::mt19937_64 rng(7);
  mars::NetworkModel m;
  m.in_ch = 16;
  m.in_h = 16;
  m.in_w = 16;
  mars::LayerSpec l;
  l.type = mars::LayerType::conv;
  l.conv = mars::ConvSpec{3, 3, 16, out_ch, 1, 1};
  l.weights = random_tensor({out_ch, 16, 3, 3}, rng);
  l.bias.assign(static_cast<size_t>(out_ch), 0.01);
  if (bn) {
    mars::BnParams p;
    p.gamma.assign(static_cast<size_t>(out_ch), 1.0);
    p.beta.assign(static_cast<size_t>(out_ch), 0.0);
    p.mu.assign(static_cast<size_t>(out_ch), 0.05);
    p.sigma2.assign(static_cast<size_t>(out_ch), 1.0);
    l.bn = p;
  }
  l.name = "conv0";
  m.layers.push_back(std::move(l));
  return m;
}

void BM_conv2d_ref(benchmark::State& state) {
  std::mt19937_64 rng(1);
  const mars::Tensor ifm = random_tensor({32, 32, 32}, rng);
  const mars::Tensor w = random_tensor({32, 32, 3, 3}, rng);
  mars::ConvSpec spec{3, 3, 32, 32, 1, 1};
  for (auto _ : state) benchmark::DoNotOptimize(mars::conv2d_ref(ifm, w, spec));
}
BENCHMARK(BM_conv2d_ref);

void BM_quantize_model(benchmark::State& state) {
  const mars::NetworkModel m = demo_model(64, true);
  mars::QuantConfig qc;
  for (auto _ : state) benchmark::DoNotOptimize(mars::quantize_model(m, qc));
}
BENCHMARK(BM_quantize_model);

void BM_map_layer(benchmark::State& state) {
  const mars::NetworkModel m = demo_model(64, true);
  const mars::QuantizedModel qm = mars::quantize_model(m, mars::QuantConfig{});
  for (auto _ : state) benchmark::DoNotOptimize(mars::map_layer(qm.layers[0], qm.b_w, qm.b_a));
}
BENCHMARK(BM_map_layer);

void BM_run_layer(benchmark::State& state) {
  const bool baseline = state.range(0) != 0;
  const mars::NetworkModel m = demo_model(32, true);
  const mars::QuantizedModel qm = mars::quantize_model(m, mars::QuantConfig{});
  const mars::MappedNetwork net = mars::map_network(qm);
  std::mt19937_64 rng(3);
  mars::CodeTensor in({16, 16, 16});
  std::uniform_int_distribution<int32_t> code(0, 255);
  for (int32_t& v : in.data) v = code(rng);
  mars::SimConfig cfg;
  for (auto _ : state) {
    mars::LayerCounters ctr;
    benchmark::DoNotOptimize(mars::run_layer(net.layers[0], in, cfg, baseline, ctr));
  }
}
BENCHMARK(BM_run_layer)->Arg(0)->Arg(1);

void BM_reference_layer(benchmark::State& state) {
  const mars::NetworkModel m = demo_model(32, true);
  const mars::QuantizedModel qm = mars::quantize_model(m, mars::QuantConfig{});
  std::mt19937_64 rng(3);
  mars::CodeTensor in({16, 16, 16});
  std::uniform_int_distribution<int32_t> code(0, 255);
  for (int32_t& v : in.data) v = code(rng);
  for (auto _ : state)
    benchmark::DoNotOptimize(mars::reference_layer(qm.layers[0], in, qm.b_a));
}
BENCHMARK(BM_reference_layer);

}  // namespace

BENCHMARK_MAIN();
