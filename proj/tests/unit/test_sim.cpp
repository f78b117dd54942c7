#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <random>

#include "mars/mapping.hpp"
#include "mars/network.hpp"
#include "mars/prune.hpp"
#include "mars/quantize.hpp"
#include "mars/sim.hpp"

using namespace mars;

namespace {

// A quantized conv layer with CIM-shaped sparsity: whole group-sets are
// zeroed with probability zero_prob.
QuantizedLayer random_layer(int out_ch, int in_ch, int k, uint64_t seed, int b_w,
                            double zero_prob, int stride = 1, int pad = -1) {
  QuantizedLayer l;
  l.type = LayerType::conv;
  l.conv = ConvSpec{k, k, in_ch, out_ch, stride, pad < 0 ? k / 2 : pad};
  l.codes.assign(static_cast<size_t>(l.code_count()), 0);
  l.bias_codes.assign(static_cast<size_t>(out_ch), 0);
  l.scale = 1.0 / (1 << (b_w - 1));
  l.name = "conv0";
  const int wmax = (1 << (b_w - 1)) - 1;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int32_t> cd(-wmax, wmax);
  std::uniform_int_distribution<int32_t> bd(-40, 40);
  std::bernoulli_distribution drop(zero_prob);
  const int slabs = (out_ch + 15) / 16, chunks = (in_ch + 15) / 16;
  for (int slab = 0; slab < slabs; ++slab)
    for (int sp = 0; sp < k * k; ++sp)
      for (int ch = 0; ch < chunks; ++ch) {
        const bool zero = drop(rng);
        if (zero) continue;
        bool any = false;
        for (int o = slab * 16; o < std::min(out_ch, slab * 16 + 16); ++o)
          for (int i = ch * 16; i < std::min(in_ch, ch * 16 + 16); ++i) {
            const size_t idx =
                ((static_cast<size_t>(o) * in_ch + i) * k + sp / k) * k + sp % k;
            l.codes[idx] = cd(rng);
            any = any || l.codes[idx] != 0;
          }
        if (!any) {  // guarantee a stored set is truly nonzero
          const size_t idx = ((static_cast<size_t>(slab) * 16 * in_ch +
                               static_cast<size_t>(ch) * 16) *
                                  static_cast<size_t>(k) +
                              static_cast<size_t>(sp / k)) *
                                 static_cast<size_t>(k) +
                             static_cast<size_t>(sp % k);
            l.codes[idx] = 1;
        }
      }
  for (int32_t& b : l.bias_codes) b = bd(rng);
  return l;
}

CodeTensor random_codes(int c, int h, int w, uint64_t seed, int b_a) {
  CodeTensor t({c, h, w});
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int32_t> d(0, (1 << b_a) - 1);
  for (int32_t& v : t.data) v = d(rng);
  return t;
}

}  // namespace

TEST_CASE("shunter grants rotate through the cores forever") {
  const std::vector<uint8_t> t = shunter_trace(8);
  CHECK(t == std::vector<uint8_t>{0, 1, 2, 3, 0, 1, 2, 3});

  const std::vector<uint8_t> longer = shunter_trace(1001);
  for (size_t i = 0; i + 4 <= longer.size(); ++i) {
    bool seen[4] = {false, false, false, false};
    for (size_t j = i; j < i + 4; ++j) seen[longer[j]] = true;
    for (bool s : seen) {
      if (!s) CHECK(s);  // log only on failure
    }
  }
  // Per-core inter-grant gap is exactly four cycles.
  for (size_t i = 4; i < longer.size(); ++i) CHECK(longer[i] == longer[i - 4]);

  ShunterState sh;
  CHECK(sh.grant(0) == 0);
  CHECK(sh.grant(7) == 3);
  CHECK_THROWS_AS(shunter_trace(-1), SimError);
}

TEST_CASE("spatial address setup walks the 3x3 raster around the output pixel") {
  // Center tap, stride 1, pad 1: input row/col equal output row/col.
  FetchAddress a = sas_address({false, 1, 4, 2}, 5, 5, 1, 1, 16, 16);
  CHECK(a.row == 5);
  CHECK(a.col == 5);
  CHECK(a.channel_base == 32);
  CHECK_FALSE(a.padding);

  // Top-left tap at the top-left output pixel lands in the padding ring.
  a = sas_address({true, 1, 0, 0}, 0, 0, 1, 1, 16, 16);
  CHECK(a.row == -1);
  CHECK(a.col == -1);
  CHECK(a.padding);

  // Stride 2, no padding, bottom-right tap of output (1,1): (1*2+2, 1*2+2).
  a = sas_address({false, 1, 8, 0}, 1, 1, 2, 0, 16, 16);
  CHECK(a.row == 4);
  CHECK(a.col == 4);
  CHECK_FALSE(a.padding);

  // Off the bottom edge also flags padding.
  a = sas_address({false, 1, 8, 0}, 5, 0, 1, 0, 6, 6);
  CHECK(a.row == 7);
  CHECK(a.padding);
}

TEST_CASE("feature-map SRAM stores 16-byte words and counts accesses") {
  FmSram s;
  FmSram::Word w{};
  for (int i = 0; i < 16; ++i) w[static_cast<size_t>(i)] = static_cast<uint8_t>(i * 3);
  s.write_word(17, w);
  CHECK(s.read_word(17) == w);
  CHECK(s.read_word(0) == FmSram::Word{});  // zero-initialized
  CHECK(s.reads() == 2);
  CHECK(s.writes() == 1);

  CHECK_THROWS_AS(s.read_word(FmSram::kCapacityWords), SimError);
  CHECK_THROWS_AS(s.write_word(-1, w), SimError);
  s.reset();
  CHECK(s.reads() == 0);
  CHECK(s.read_word(17) == FmSram::Word{});
}

TEST_CASE("a sparse layer run reproduces the integer reference exactly") {
  for (uint64_t seed : {3u, 5u, 7u}) {
    QuantizedLayer ql = random_layer(32, 16, 3, seed, 4, 0.5);
    const MappedLayer ml = map_layer(ql, 4, 4);
    const CodeTensor in = random_codes(16, 8, 8, seed + 100, 4);

    SimConfig cfg;
    LayerCounters ctr;
    const CodeTensor got = run_layer(ml, in, cfg, false, ctr);
    const CodeTensor want = reference_layer(ql, in, 4);
    CHECK(got.dims == want.dims);
    CHECK(got.data == want.data);

    // One group-set activation per stored set per output pixel.
    CHECK(ctr.groupsets_activated == static_cast<int64_t>(ml.sets.size()) * 8 * 8);
    CHECK(ctr.fm_reads >= ctr.groupsets_activated);  // fetches + output staging
    CHECK(ctr.macro_accesses == ctr.groupsets_activated * 2);  // two macros per core
    CHECK(ctr.system_cycles == 4 * ctr.core_cycles);
  }
}

TEST_CASE("an all-zero layer degenerates to the quantized bias image") {
  QuantizedLayer ql = random_layer(16, 16, 3, 11, 4, 0.0);
  std::fill(ql.codes.begin(), ql.codes.end(), 0);
  for (size_t o = 0; o < 16; ++o)
    ql.bias_codes[o] = static_cast<int32_t>(o) * 9 - 40;
  const MappedLayer ml = map_layer(ql, 4, 4);
  CHECK(ml.sets.empty());

  const CodeTensor in = random_codes(16, 6, 6, 13, 4);
  SimConfig cfg;
  LayerCounters ctr;
  const CodeTensor got = run_layer(ml, in, cfg, false, ctr);
  CHECK(ctr.macro_accesses == 0);
  CHECK(ctr.groupsets_activated == 0);
  const double out_sc = ql.scale / 15.0;
  for (int o = 0; o < 16; ++o) {
    const double real = std::max(0.0, out_sc * ql.bias_codes[static_cast<size_t>(o)]);
    const int32_t code = quantize_activation_value(real, 4);
    for (int r = 0; r < 6; ++r)
      for (int c = 0; c < 6; ++c) CHECK(got.at3(o, r, c) == code);
  }
}

TEST_CASE("the dense baseline walks every set but computes the same values") {
  QuantizedLayer ql = random_layer(32, 32, 3, 17, 4, 0.6);
  const MappedLayer ml = map_layer(ql, 4, 4);
  const CodeTensor in = random_codes(32, 8, 8, 19, 4);

  SimConfig cfg;
  LayerCounters sparse, dense;
  const CodeTensor a = run_layer(ml, in, cfg, false, sparse);
  const CodeTensor b = run_layer(ml, in, cfg, true, dense);
  CHECK(a.data == b.data);

  CHECK(dense.groupsets_activated == ml.total_sets() * 8 * 8);
  CHECK(sparse.groupsets_activated ==
        static_cast<int64_t>(ml.sets.size()) * 8 * 8);
  // Reload covers only stored sets in the sparse pass (plus the per-batch
  // setup), but every set in the dense baseline.
  CHECK(sparse.weight_reload_cycles ==
        static_cast<int64_t>(ml.sets.size()) * cfg.reload_cycles_per_groupset +
            static_cast<int64_t>(ml.batches.size()) * cfg.batch_setup_cycles);
  const int64_t dense_per_slab = static_cast<int64_t>(ml.n_spatial()) * ml.n_chunks();
  const int64_t dense_batches = ml.n_slabs() * ((dense_per_slab + 63) / 64);
  CHECK(dense.weight_reload_cycles ==
        ml.total_sets() * cfg.reload_cycles_per_groupset +
            dense_batches * cfg.batch_setup_cycles);
  CHECK(dense.core_cycles > sparse.core_cycles);
}

TEST_CASE("bit-serial feeding multiplies accesses without changing values") {
  QuantizedLayer ql = random_layer(16, 16, 3, 23, 4, 0.3);
  const MappedLayer ml = map_layer(ql, 4, 4);
  const CodeTensor in = random_codes(16, 8, 8, 29, 4);

  SimConfig behavioral, serial;
  serial.bit_serial = true;
  LayerCounters cb, cs;
  const CodeTensor a = run_layer(ml, in, behavioral, false, cb);
  const CodeTensor b = run_layer(ml, in, serial, false, cs);
  CHECK(a.data == b.data);
  CHECK(cs.macro_accesses == 4 * cb.macro_accesses);  // one per bit plane
  CHECK(cs.groupsets_activated == cb.groupsets_activated);
  CHECK(cs.core_cycles > cb.core_cycles);
}

TEST_CASE("feature maps larger than the SRAM run in bands and stay exact") {
  // 64 channels x 48x48 activations = 147456 bytes > 64KB SRAM: must tile.
  QuantizedLayer ql = random_layer(64, 64, 3, 31, 4, 0.4);
  const MappedLayer ml = map_layer(ql, 4, 4);
  const CodeTensor in = random_codes(64, 48, 48, 37, 4);

  SimConfig cfg;
  LayerCounters ctr;
  const CodeTensor got = run_layer(ml, in, cfg, false, ctr);
  const CodeTensor want = reference_layer(ql, in, 4);
  CHECK(got.data == want.data);
  CHECK(ctr.tile_stage_words > 0);  // halo restaging happened
}

TEST_CASE("a hand-built identity layer passes codes through unchanged") {
  // 16->16 1x1 conv, codes 7 on the diagonal, scale 1/7: code * scale = 1,
  // so the layer is an exact identity on activation codes.
  QuantizedLayer ql;
  ql.type = LayerType::conv;
  ql.conv = ConvSpec{1, 1, 16, 16, 1, 0};
  ql.codes.assign(16 * 16, 0);
  for (int o = 0; o < 16; ++o) ql.codes[static_cast<size_t>(o * 16 + o)] = 7;
  ql.bias_codes.assign(16, 0);
  ql.scale = 1.0 / 7.0;
  ql.name = "conv0";

  QuantizedModel qm;
  qm.in_ch = 16;
  qm.in_h = 5;
  qm.in_w = 5;
  qm.b_w = 4;
  qm.b_a = 4;
  qm.layers.push_back(ql);
  const MappedNetwork net = map_network(qm);

  const CodeTensor in = random_codes(16, 5, 5, 41, 4);
  SimConfig cfg;
  const NetworkRunResult res = run_network_codes(net, in, cfg);
  CHECK(res.output.data == in.data);
}

TEST_CASE("network runs swap feature maps and match the golden pipeline") {
  std::mt19937_64 rng(43);
  std::normal_distribution<double> wd(0.0, 0.5);
  NetworkModel m;
  m.in_ch = 16;
  m.in_h = 10;
  m.in_w = 10;
  const int chans[3] = {16, 32, 32};
  for (int li = 0; li < 3; ++li) {
    LayerSpec l;
    l.type = LayerType::conv;
    l.conv = ConvSpec{3, 3, chans[li], li < 2 ? chans[li + 1] : 16, 1, 1};
    l.weights =
        Tensor({l.conv.out_ch, l.conv.in_ch, 3, 3});
    for (double& v : l.weights.data) v = wd(rng);
    l.bias.assign(static_cast<size_t>(l.conv.out_ch), 0.02);
    if (li == 1) l.pool = PoolSpec{2, 2};
    l.name = "conv" + std::to_string(li);
    m.layers.push_back(std::move(l));
  }
  QuantConfig qc;
  qc.b_w = 4;
  qc.b_a = 4;
  const QuantizedModel qm = quantize_model(m, qc);
  GroupStructure s = build_group_structure(qm, 16, 16);
  auto [pruned, mask] = prune_to_target(qm, s, 0.5);
  const MappedNetwork net = map_network(pruned);

  Tensor in({16, 10, 10});
  std::uniform_real_distribution<double> ad(0.0, 1.0);
  for (double& v : in.data) v = ad(rng);

  SimConfig cfg;
  const NetworkRunResult res = run_network(net, in, cfg);
  const CodeTensor want = reference_forward(pruned, in);
  CHECK(res.output.dims == want.dims);
  CHECK(res.output.data == want.data);

  CHECK(res.report.layers.size() == 3);
  CHECK(res.report.total_sparse.system_cycles == 4 * res.report.total_sparse.core_cycles);
  CHECK(res.report.speedup_vs_dense > 1.0);
}

TEST_CASE("per-layer counter ratios follow the zero-set ratio exactly") {
  // Three 1x1 layers over 160 channels: 10 chunks per slab, pruned to
  // zero-set ratios 0, 0.5 and 0.9.
  QuantizedModel qm;
  qm.in_ch = 160;
  qm.in_h = 6;
  qm.in_w = 6;
  qm.b_w = 4;
  qm.b_a = 4;
  const double ratios[3] = {0.0, 0.5, 0.9};
  for (int li = 0; li < 3; ++li) {
    QuantizedLayer l = random_layer(160, 160, 1, 47 + static_cast<uint64_t>(li), 4, 0.0);
    // zero the first k chunks of every slab wholesale
    const int zero_chunks = static_cast<int>(ratios[li] * 10 + 0.5);
    for (int slab = 0; slab < 10; ++slab)
      for (int ch = 0; ch < zero_chunks; ++ch)
        for (int o = slab * 16; o < slab * 16 + 16; ++o)
          for (int i = ch * 16; i < ch * 16 + 16; ++i)
            l.codes[static_cast<size_t>(o) * 160 + static_cast<size_t>(i)] = 0;
    l.name = "conv" + std::to_string(li);
    qm.layers.push_back(std::move(l));
  }
  const MappedNetwork net = map_network(qm);

  const CodeTensor in = random_codes(160, 6, 6, 53, 4);
  SimConfig cfg;
  const NetworkRunResult res = run_network_codes(net, in, cfg);
  for (int li = 0; li < 3; ++li) {
    const LayerReport& lr = res.report.layers[static_cast<size_t>(li)];
    const double ratio = static_cast<double>(lr.sparse.macro_accesses) /
                         static_cast<double>(lr.dense.macro_accesses);
    CHECK(ratio == doctest::Approx(1.0 - ratios[li]));
    CHECK(lr.sparse.groupsets_activated * 10 ==
          lr.dense.groupsets_activated * static_cast<int64_t>((1.0 - ratios[li]) * 10 + 0.5));
    // 10 slabs x 10 chunks = 100 sets; the zeroed chunks drop out wholesale.
    CHECK(lr.stored_sets == static_cast<int64_t>((1.0 - ratios[li]) * 100 + 0.5));
  }

  // The dense head does identical work in both passes.
  const LayerReport& head = res.report.layers[0];
  CHECK(head.speedup_vs_dense == doctest::Approx(1.0).epsilon(0.01));
}

TEST_CASE("speedup grows monotonically with the zero-set ratio") {
  const CodeTensor in = random_codes(160, 6, 6, 59, 4);
  double last = 0.0;
  for (int tenths = 0; tenths <= 9; ++tenths) {
    QuantizedLayer l = random_layer(160, 160, 1, 61, 4, 0.0);
    for (int slab = 0; slab < 10; ++slab)
      for (int ch = 0; ch < tenths; ++ch)
        for (int o = slab * 16; o < slab * 16 + 16; ++o)
          for (int i = ch * 16; i < ch * 16 + 16; ++i)
            l.codes[static_cast<size_t>(o) * 160 + static_cast<size_t>(i)] = 0;
    QuantizedModel qm;
    qm.in_ch = 160;
    qm.in_h = 6;
    qm.in_w = 6;
    qm.b_w = 4;
    qm.b_a = 4;
    qm.layers.push_back(std::move(l));
    const MappedNetwork net = map_network(qm);
    SimConfig cfg;
    const NetworkRunResult res = run_network_codes(net, in, cfg);
    CHECK(res.report.speedup_vs_dense >= last - 1e-12);
    last = res.report.speedup_vs_dense;
  }
  CHECK(last > 5.0);  // 90% zeros runs many times faster
}

TEST_CASE("corrupt index streams are rejected with a diagnosis") {
  QuantizedLayer ql = random_layer(32, 32, 3, 67, 4, 0.4);
  MappedLayer ml = map_layer(ql, 4, 4);
  const CodeTensor in = random_codes(32, 8, 8, 71, 4);
  SimConfig cfg;
  LayerCounters ctr;

  REQUIRE(ml.index_words.size() >= 2);
  MappedLayer bad = ml;
  // Claim a different chunk than the stored set actually holds.
  const IndexFields f = decode_index(bad.index_words[1]);
  IndexFields wrong = f;
  wrong.chunk = f.chunk == 0 ? 1 : f.chunk - 1;
  bad.index_words[1] = encode_index(wrong);
  CHECK_THROWS_WITH_AS(run_layer(bad, in, cfg, false, ctr),
                       doctest::Contains("corrupt index stream"), MappingError);

  MappedLayer dropped = ml;
  dropped.index_words.pop_back();
  dropped.sets.pop_back();
  for (auto& b : dropped.batches) {
    auto& ids = b.set_ids;
    ids.erase(std::remove(ids.begin(), ids.end(), static_cast<int>(ml.sets.size()) - 1),
              ids.end());
  }
  CHECK_THROWS_AS(run_layer(dropped, in, cfg, false, ctr), MappingError);
}

TEST_CASE("energy accounting is a plain weighted event count") {
  QuantizedLayer ql = random_layer(16, 16, 3, 73, 4, 0.5);
  const MappedLayer ml = map_layer(ql, 4, 4);
  const CodeTensor in = random_codes(16, 8, 8, 79, 4);

  SimConfig cfg;
  cfg.energy = EnergyCosts{2.0, 3.0, 5.0, 7.0};
  LayerCounters ctr;
  run_layer(ml, in, cfg, false, ctr);
  const double want = 2.0 * static_cast<double>(ctr.macro_accesses) +
                      3.0 * static_cast<double>(ctr.fm_reads) +
                      5.0 * static_cast<double>(ctr.fm_writes) +
                      7.0 * static_cast<double>(ml.sets.size());
  CHECK(ctr.energy == doctest::Approx(want));
}
