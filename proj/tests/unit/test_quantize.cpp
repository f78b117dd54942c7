#include "doctest.h"

#include <cmath>
#include <random>

#include "mars/network.hpp"
#include "mars/quantize.hpp"

using namespace mars;

namespace {

NetworkModel one_conv_model(int out_ch, int in_ch, bool bn, std::mt19937_64& rng,
                            double wscale = 0.6) {
  std::normal_distribution<double> wd(0.0, wscale);
  std::uniform_real_distribution<double> nr(0.7, 1.3);
  std::normal_distribution<double> sm(0.0, 0.05);
  NetworkModel m;
  m.in_ch = in_ch;
  m.in_h = 6;
  m.in_w = 6;
  LayerSpec l;
  l.type = LayerType::conv;
  l.conv = ConvSpec{3, 3, in_ch, out_ch, 1, 1};
  l.weights = Tensor({out_ch, in_ch, 3, 3});
  for (double& v : l.weights.data) v = wd(rng);
  l.bias.assign(static_cast<size_t>(out_ch), 0.0);
  for (double& v : l.bias) v = sm(rng);
  if (bn) {
    BnParams p;
    p.gamma.resize(static_cast<size_t>(out_ch));
    p.beta.resize(static_cast<size_t>(out_ch));
    p.mu.resize(static_cast<size_t>(out_ch));
    p.sigma2.resize(static_cast<size_t>(out_ch));
    for (double& v : p.gamma) v = nr(rng);
    for (double& v : p.beta) v = sm(rng);
    for (double& v : p.mu) v = sm(rng);
    for (double& v : p.sigma2) v = nr(rng);
    l.bn = p;
  }
  l.name = "conv0";
  m.layers.push_back(std::move(l));
  return m;
}

}  // namespace

TEST_CASE("tanh normalization scales the largest magnitude to one") {
  const std::vector<double> got = normalize_weights({0.0, 1.0, -2.0});
  CHECK(got[0] == doctest::Approx(0.0));
  CHECK(got[1] == doctest::Approx(std::tanh(1.0) / std::tanh(2.0)));
  CHECK(got[2] == doctest::Approx(-1.0));

  const std::vector<double> neg = normalize_weights({-5.0});
  CHECK(neg[0] == doctest::Approx(-1.0));

  const std::vector<double> flat = normalize_weights({0.3, 0.3});
  CHECK(flat[0] == doctest::Approx(1.0));
  CHECK(flat[1] == doctest::Approx(1.0));

  CHECK_THROWS_AS(normalize_weights({0.0, 0.0}), DegenerateGroupError);
}

TEST_CASE("grouped normalization treats each contiguous group separately") {
  const std::vector<double> got = normalize_groups({1.0, 2.0, -3.0, 0.5}, 2);
  CHECK(got[0] == doctest::Approx(std::tanh(1.0) / std::tanh(2.0)));
  CHECK(got[1] == doctest::Approx(1.0));
  CHECK(got[2] == doctest::Approx(-1.0));
  CHECK(got[3] == doctest::Approx(std::tanh(0.5) / std::tanh(3.0)));
}

TEST_CASE("layer normalization works on 16-kernel slabs and zeroes dead slabs") {
  Tensor w({18, 1, 1, 1});
  for (int o = 0; o < 16; ++o) w.at4(o, 0, 0, 0) = 0.0;  // slab 0 all zero
  w.at4(16, 0, 0, 0) = 0.5;
  w.at4(17, 0, 0, 0) = -1.0;  // slab 1
  const Tensor got = normalize_layer(w);
  for (int o = 0; o < 16; ++o) CHECK(got.at4(o, 0, 0, 0) == 0.0);
  CHECK(got.at4(16, 0, 0, 0) == doctest::Approx(std::tanh(0.5) / std::tanh(1.0)));
  CHECK(got.at4(17, 0, 0, 0) == doctest::Approx(-1.0));
}

TEST_CASE("bn fusion multiplies by gamma over sigma and clamps") {
  BnParams bn;
  bn.gamma = {2.0};
  bn.beta = {0.25};
  bn.mu = {0.5};
  bn.sigma2 = {3.9999};
  bn.eps = 1e-4;  // sqrt(sigma2 + eps) == 2 exactly
  auto [fused, offset] = fuse_bn({-0.4, 0.2}, bn, 0);
  CHECK(fused[0] == doctest::Approx(-0.4));
  CHECK(fused[1] == doctest::Approx(0.2));
  CHECK(offset == doctest::Approx(0.25 - 2.0 * 0.5 / 2.0));

  BnParams big = bn;
  big.sigma2 = {1.0 - big.eps};  // factor == gamma == 2 -> saturates 0.9
  auto [sat, off2] = fuse_bn({0.9, -0.9, 0.3}, big, 0);
  CHECK(sat[0] == doctest::Approx(1.0));
  CHECK(sat[1] == doctest::Approx(-1.0));
  CHECK(sat[2] == doctest::Approx(0.6));
  CHECK(off2 == doctest::Approx(0.25 - 2.0 * 0.5));
}

TEST_CASE("weight codes round half away from zero in the symmetric range") {
  CHECK(quantize_weight_value(1.0, 4) == 7);
  CHECK(quantize_weight_value(-1.0, 4) == -7);
  CHECK(quantize_weight_value(0.5, 4) == 4);  // 3.5 rounds away
  CHECK(quantize_weight_value(-0.5, 4) == -4);
  CHECK(quantize_weight_value(0.0, 4) == 0);
  CHECK(quantize_weight_value(1.0, 8) == 127);
  CHECK(dequantize_weight(4, 4) == doctest::Approx(4.0 / 8.0));
  CHECK(dequantize_weight(-127, 8) == doctest::Approx(-127.0 / 128.0));
}

TEST_CASE("activation codes clip to the unit interval") {
  CHECK(quantize_activation_value(0.5, 4) == 8);  // 7.5 rounds up
  CHECK(quantize_activation_value(1.0, 4) == 15);
  CHECK(quantize_activation_value(2.5, 4) == 15);
  CHECK(quantize_activation_value(-1.0, 4) == 0);
  CHECK(quantize_activation_value(1.0, 8) == 255);
  CHECK(dequantize_activation(15, 4) == doctest::Approx(1.0));
  Tensor t({1, 1, 2});
  t.data = {0.25, 0.75};
  const CodeTensor c = quantize_activations(t, 8);
  CHECK(c.data[0] == 64);
  CHECK(c.data[1] == 191);
}

TEST_CASE("straight-through gradient zeroes saturated positions") {
  const std::vector<double> g = ste_grad({1.0, 2.0, 3.0, 4.0}, {0.5, -1.0, 1.2, -3.0});
  CHECK(g[0] == 1.0);
  CHECK(g[1] == 2.0);  // exactly on the clamp edge still passes
  CHECK(g[2] == 0.0);
  CHECK(g[3] == 0.0);
}

TEST_CASE("rounding error stays within half a step on the code scale") {
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int b_w : {4, 8}) {
    const double wmax = (1 << (b_w - 1)) - 1;
    const double scale = 1.0 / (1 << (b_w - 1));
    for (int i = 0; i < 20000; ++i) {
      const double v = u(rng);
      const int32_t c = quantize_weight_value(v, b_w);
      // the dequantized code sits within half a step of the scaled target
      CHECK(std::fabs(dequantize_weight(c, b_w) - v * wmax * scale) <= 0.5 * scale + 1e-12);
      CHECK(std::abs(c) <= static_cast<int32_t>(wmax));
      CHECK(quantize_weight_value(-v, b_w) == -c);  // odd quantizer
    }
  }
}

TEST_CASE("quantize_model fuses bn so the reference matches the float pipeline") {
  std::mt19937_64 rng(23);
  for (int trial = 0; trial < 20; ++trial) {
    const bool bn = trial % 2 == 0;
    // Small weights keep the fusion clamp inactive so the float pipeline and
    // the quantized route agree up to rounding.
    NetworkModel m = one_conv_model(16, 16, bn, rng, 0.3);
    QuantConfig qc;
    qc.b_w = 8;
    qc.b_a = 8;
    const QuantizedModel qm = quantize_model(m, qc);
    REQUIRE(qm.layers.size() == 1);

    std::uniform_real_distribution<double> act(0.0, 1.0);
    Tensor in({16, 6, 6});
    for (double& v : in.data) v = act(rng);
    const CodeTensor got = reference_forward(qm, in);

    // Strong check: a float network built from the dequantized codes must
    // reproduce the integer reference almost exactly (summation order can
    // flip a round() tie at the final quantize step, nothing more).
    const QuantizedLayer& ql = qm.layers[0];
    NetworkModel deq = m;
    deq.layers[0].bn.reset();
    deq.layers[0].weights = Tensor({16, 16, 3, 3});
    for (size_t i = 0; i < ql.codes.size(); ++i)
      deq.layers[0].weights.data[i] = ql.codes[i] * ql.scale;
    const double out_sc = output_scale(ql, qm.b_a);
    for (int o = 0; o < 16; ++o)
      deq.layers[0].bias[static_cast<size_t>(o)] =
          ql.bias_codes[static_cast<size_t>(o)] * out_sc;
    const CodeTensor in_codes = quantize_activations(in, qm.b_a);
    Tensor in_deq = in;
    for (size_t i = 0; i < in.data.size(); ++i)
      in_deq.data[i] = dequantize_activation(in_codes.data[i], qm.b_a);
    const CodeTensor emulated =
        quantize_activations(forward_ref(deq, in_deq), qm.b_a);
    REQUIRE(got.dims == emulated.dims);
    int64_t exact = 0;
    for (size_t i = 0; i < got.data.size(); ++i) {
      CHECK(std::abs(got.data[i] - emulated.data[i]) <= 1);
      exact += got.data[i] == emulated.data[i];
    }
    CHECK(static_cast<double>(exact) >= 0.99 * static_cast<double>(got.data.size()));

    // Sanity check against the plain float pipeline (conv -> bn -> relu on
    // normalized weights): weight/input rounding noise accumulated over
    // 144-tap sums drifts output codes by a couple of steps, never tens.
    NetworkModel norm = m;
    norm.layers[0].weights = normalize_layer(m.layers[0].weights);
    const Tensor fl = forward_ref(norm, Tensor(in));
    const CodeTensor want = quantize_activations(fl, qm.b_a);
    REQUIRE(got.dims == want.dims);
    int64_t off = 0;
    for (size_t i = 0; i < got.data.size(); ++i)
      off += std::abs(got.data[i] - want.data[i]);
    CHECK(static_cast<double>(off) / static_cast<double>(got.data.size()) < 4.0);
  }
}

TEST_CASE("strict quantization rejects an all-zero kernel slab") {
  std::mt19937_64 rng(29);
  NetworkModel m = one_conv_model(32, 16, false, rng);
  for (int o = 16; o < 32; ++o)
    for (int i = 0; i < 16; ++i)
      for (int k = 0; k < 9; ++k)
        m.layers[0].weights.data[static_cast<size_t>((o * 16 + i) * 9 + k)] = 0.0;
  QuantConfig qc;
  CHECK_THROWS_AS(quantize_model(m, qc, true), DegenerateGroupError);
  const QuantizedModel qm = quantize_model(m, qc, false);
  for (int o = 16; o < 32; ++o)
    for (int k = 0; k < 16 * 9; ++k)
      CHECK(qm.layers[0].codes[static_cast<size_t>(o * 16 * 9 + k)] == 0);
}

TEST_CASE("bias codes overflowing 32 bits are rejected") {
  std::mt19937_64 rng(31);
  NetworkModel m = one_conv_model(16, 16, false, rng);
  m.layers[0].bias[0] = 1e9;  // offset / out_scale blows past int32
  QuantConfig qc;
  CHECK_THROWS_AS(quantize_model(m, qc), SimError);
}

TEST_CASE("output scale combines the weight and activation steps") {
  QuantizedLayer l;
  l.scale = 1.0 / 128.0;
  CHECK(output_scale(l, 8) == doctest::Approx(1.0 / (128.0 * 255.0)));
  CHECK(output_scale(l, 4) == doctest::Approx(1.0 / (128.0 * 15.0)));
}

TEST_CASE("reference layer applies relu then pooling then quantization") {
  // One input pixel pattern where the order matters: a negative accumulator
  // must be cut by relu before the pool picks the max.
  QuantizedLayer l;
  l.type = LayerType::conv;
  l.conv = ConvSpec{1, 1, 1, 1, 1, 0};
  l.relu = true;
  l.pool = PoolSpec{2, 2};
  l.scale = 1.0 / 128.0;
  l.codes = {127};
  l.bias_codes = {-20000};
  CodeTensor in({1, 2, 2});
  in.data = {255, 200, 100, 0};  // accumulators 255*127-20000=12385, 5400, -7300, -20000
  const CodeTensor out = reference_layer(l, in, 8);
  REQUIRE(out.dims == std::vector<int>{1, 1, 1});
  const double real = (255.0 * 127 - 20000) / (128.0 * 255.0);
  CHECK(out.data[0] == std::lround(std::min(1.0, std::max(0.0, real)) * 255.0));
}

TEST_CASE("fc layers flatten their input before the integer conv") {
  QuantizedLayer l;
  l.type = LayerType::fc;
  l.conv = ConvSpec{1, 1, 8, 2, 1, 0};
  l.relu = false;
  l.scale = 1.0 / 128.0;
  l.codes.assign(16, 0);
  for (int i = 0; i < 8; ++i) l.codes[static_cast<size_t>(i)] = 1;        // row 0 sums all
  for (int i = 8; i < 16; ++i) l.codes[static_cast<size_t>(i)] = i % 2;  // row 1 odd taps
  l.bias_codes = {0, 0};
  CodeTensor in({2, 2, 2});
  in.data = {10, 20, 30, 40, 50, 60, 70, 80};
  const CodeTensor out = reference_layer(l, in, 8);
  REQUIRE(out.dims == std::vector<int>{2, 1, 1});
  const double sc = 1.0 / (128.0 * 255.0);
  CHECK(out.data[0] == std::lround(std::min(1.0, 360.0 * sc) * 255.0));
  CHECK(out.data[1] == std::lround(std::min(1.0, (20 + 40 + 60 + 80) * sc) * 255.0));
}
