#include "doctest.h"

#include <cstdio>
#include <filesystem>
#include <random>
#include <string>

#include "mars/io.hpp"
#include "mars/mapping.hpp"
#include "mars/network.hpp"
#include "mars/prune.hpp"
#include "mars/quantize.hpp"

using namespace mars;

namespace {

struct TempDir {
  std::filesystem::path path;
  TempDir() {
    path = std::filesystem::temp_directory_path() /
           ("mars-io-test-" + std::to_string(std::random_device{}()));
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

QuantizedModel tiny_quantized(uint64_t seed, double zero_prob = 0.4) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> wd(0.0, 0.5);
  NetworkModel m;
  m.in_ch = 16;
  m.in_h = 8;
  m.in_w = 8;
  for (int li = 0; li < 2; ++li) {
    LayerSpec l;
    l.type = LayerType::conv;
    l.conv = ConvSpec{3, 3, li == 0 ? 16 : 32, 32, 1, 1};
    l.weights = Tensor({l.conv.out_ch, l.conv.in_ch, 3, 3});
    for (double& v : l.weights.data) v = wd(rng);
    l.bias.assign(32, 0.01);
    if (li == 1) l.pool = PoolSpec{2, 2};
    l.name = "conv" + std::to_string(li);
    m.layers.push_back(std::move(l));
  }
  QuantConfig qc;
  qc.b_w = 4;
  qc.b_a = 4;
  QuantizedModel qm = quantize_model(m, qc);
  if (zero_prob > 0) {
    GroupStructure s = build_group_structure(qm, 16, 16);
    auto [pruned, mask] = prune_to_target(qm, s, zero_prob);
    return pruned;
  }
  return qm;
}

const char* kDescriptor = R"({
  "input": [16, 12, 12],
  "layers": [
    {"type": "conv", "shape": [32, 3, 3], "stride": 1, "pad": 1,
     "has_bn": true, "has_relu": true, "name": "stem"},
    {"type": "pool", "shape": [2]},
    {"type": "conv", "shape": [32, 3, 3], "pad": 1, "name": "mid"},
    {"type": "fc", "shape": [10], "has_relu": false, "name": "head"}
  ],
  "quant": {"b_w": 4, "b_a": 4},
  "sparsity": {"alpha": 16, "n": 16, "lambda_g": 0.001, "target_zero_ratio": 0.5}
})";

}  // namespace

TEST_CASE("float tensor containers round-trip exactly") {
  TempDir tmp;
  std::mt19937_64 rng(3);
  std::normal_distribution<double> d(0.0, 1.0);
  std::vector<Tensor> ts;
  ts.emplace_back(std::vector<int>{4, 3, 2, 2});
  ts.emplace_back(std::vector<int>{7});
  ts.emplace_back(std::vector<int>{1, 5});
  for (auto& t : ts)
    for (double& v : t.data) v = static_cast<float>(d(rng));  // f32 grid

  const std::string path = tmp.file("w.mrsw");
  write_tensors(path, ts);
  CHECK(sniff_magic(path) == "MRSW");
  const std::vector<Tensor> back = read_tensors(path);
  REQUIRE(back.size() == 3);
  for (size_t i = 0; i < 3; ++i) {
    CHECK(back[i].dims == ts[i].dims);
    CHECK(back[i].data == ts[i].data);
  }
}

TEST_CASE("quantized model containers round-trip codes, scales and flags") {
  TempDir tmp;
  const QuantizedModel qm = tiny_quantized(5);
  const std::string path = tmp.file("m.mrsq");
  write_quantized(path, qm);
  CHECK(sniff_magic(path) == "MRSQ");
  const QuantizedModel back = read_quantized(path);
  CHECK(back.in_ch == qm.in_ch);
  CHECK(back.b_w == qm.b_w);
  CHECK(back.b_a == qm.b_a);
  REQUIRE(back.layers.size() == qm.layers.size());
  for (size_t li = 0; li < qm.layers.size(); ++li) {
    CHECK(back.layers[li].codes == qm.layers[li].codes);
    CHECK(back.layers[li].bias_codes == qm.layers[li].bias_codes);
    CHECK(back.layers[li].scale == qm.layers[li].scale);
    CHECK(back.layers[li].pool.window == qm.layers[li].pool.window);
    CHECK(back.layers[li].relu == qm.layers[li].relu);
    CHECK(back.layers[li].conv.out_ch == qm.layers[li].conv.out_ch);
  }
}

TEST_CASE("mask files round-trip the keep bits in declaration order") {
  TempDir tmp;
  GroupMask mask;
  mask.keep = {{1, 0, 1, 1, 0, 0, 1, 0, 1}, {0, 1}};
  const std::string path = tmp.file("k.mrsm");
  write_mask(path, mask, 16, 16);
  CHECK(sniff_magic(path) == "MRSM");
  const MaskFile back = read_mask(path);
  CHECK(back.alpha == 16);
  CHECK(back.n == 16);
  CHECK(back.mask.keep == mask.keep);
  CHECK(back.mask.zeroed() == mask.zeroed());
}

TEST_CASE("mapped images round-trip bit-exactly through the container") {
  TempDir tmp;
  for (int b_w : {4, 8}) {
    QuantizedModel qm = tiny_quantized(static_cast<uint64_t>(7 + b_w));
    qm.b_w = b_w;  // container packs codes at this width
    const MappedNetwork net = map_network(qm);
    const std::string path = tmp.file("n" + std::to_string(b_w) + ".mrsi");
    write_mapped(path, net);
    CHECK(sniff_magic(path) == "MRSI");
    const MappedNetwork back = read_mapped(path);

    REQUIRE(back.layers.size() == net.layers.size());
    for (size_t li = 0; li < net.layers.size(); ++li) {
      CHECK(back.layers[li].index_words == net.layers[li].index_words);
      CHECK(back.layers[li].present_slabs == net.layers[li].present_slabs);
      REQUIRE(back.layers[li].sets.size() == net.layers[li].sets.size());
      for (size_t j = 0; j < net.layers[li].sets.size(); ++j) {
        CHECK(back.layers[li].sets[j].groups == net.layers[li].sets[j].groups);
        CHECK(back.layers[li].sets[j].slab == net.layers[li].sets[j].slab);
      }
      REQUIRE(back.layers[li].batches.size() == net.layers[li].batches.size());
      for (size_t j = 0; j < net.layers[li].batches.size(); ++j) {
        CHECK(back.layers[li].batches[j].core == net.layers[li].batches[j].core);
        CHECK(back.layers[li].batches[j].set_ids == net.layers[li].batches[j].set_ids);
      }
    }

    // A second write of the re-read image is byte-identical: the container
    // is canonical.
    const std::string again = tmp.file("again.mrsi");
    write_mapped(again, back);
    CHECK(read_bytes_file(again) == read_bytes_file(path));

    // And the unmapped model still matches the source codes.
    const QuantizedModel um = unmap_network(back);
    for (size_t li = 0; li < qm.layers.size(); ++li)
      CHECK(um.layers[li].codes == qm.layers[li].codes);
  }
}

TEST_CASE("corrupted containers are rejected with format errors") {
  TempDir tmp;
  const QuantizedModel qm = tiny_quantized(11);
  const std::string path = tmp.file("m.mrsq");
  write_quantized(path, qm);
  std::vector<uint8_t> bytes = read_bytes_file(path);

  // Wrong magic.
  std::vector<uint8_t> bad = bytes;
  bad[0] = 'X';
  write_bytes_file(tmp.file("bad1"), bad);
  CHECK_THROWS_AS(read_quantized(tmp.file("bad1")), FormatError);

  // Unsupported version.
  bad = bytes;
  bad[4] = 0xEE;
  write_bytes_file(tmp.file("bad2"), bad);
  CHECK_THROWS_AS(read_quantized(tmp.file("bad2")), FormatError);

  // Truncation anywhere in the payload.
  for (size_t cut : {bytes.size() - 1, bytes.size() / 2, size_t{9}}) {
    bad.assign(bytes.begin(), bytes.begin() + static_cast<long>(cut));
    write_bytes_file(tmp.file("bad3"), bad);
    CHECK_THROWS_AS(read_quantized(tmp.file("bad3")), FormatError);
  }

  // Trailing garbage.
  bad = bytes;
  bad.push_back(0);
  write_bytes_file(tmp.file("bad4"), bad);
  CHECK_THROWS_AS(read_quantized(tmp.file("bad4")), FormatError);

  // Missing file.
  CHECK_THROWS_AS(read_tensors(tmp.file("nope.mrsw")), FormatError);
}

TEST_CASE("a flipped index word in a mapped image fails verification") {
  TempDir tmp;
  const QuantizedModel qm = tiny_quantized(13);
  const MappedNetwork net = map_network(qm);
  const std::string path = tmp.file("n.mrsi");
  write_mapped(path, net);
  std::vector<uint8_t> bytes = read_bytes_file(path);

  // Find the first index word of layer 0 in the byte stream and break its
  // chunk field. The reader's walk/remap verification must notice.
  const uint16_t first = net.layers[0].index_words[0];
  const uint8_t lo = static_cast<uint8_t>(first & 0xFF);
  const uint8_t hi = static_cast<uint8_t>(first >> 8);
  bool flipped = false;
  for (size_t i = 0; i + 1 < bytes.size(); ++i) {
    if (bytes[i] == lo && bytes[i + 1] == hi) {
      bytes[i] ^= 0x01;  // chunk bit 0
      flipped = true;
      break;
    }
  }
  REQUIRE(flipped);
  write_bytes_file(path, bytes);
  CHECK_THROWS_AS(read_mapped(path), FormatError);
}

TEST_CASE("descriptors parse, fuse pools and validate keys") {
  const NetworkDescriptor d = parse_descriptor(kDescriptor);
  CHECK(d.in_ch == 16);
  CHECK(d.in_h == 12);
  REQUIRE(d.layers.size() == 3);  // pool fused into the stem conv
  CHECK(d.layers[0].name == "stem");
  CHECK(d.layers[0].pool == 2);
  CHECK(d.layers[0].pool_stride == 2);
  CHECK(d.layers[0].has_bn);
  CHECK(d.layers[1].pool == 0);
  CHECK(d.layers[2].type == "fc");
  CHECK_FALSE(d.layers[2].has_relu);
  CHECK(d.quant.b_w == 4);
  CHECK(d.sparsity.lambda_g == doctest::Approx(0.001));
  CHECK(d.sparsity.target_zero_ratio == doctest::Approx(0.5));

  CHECK_THROWS_AS(parse_descriptor(R"({"input":[1,2,3],"layers":[],"frobnicate":1})"),
                  FormatError);
  CHECK_THROWS_AS(
      parse_descriptor(
          R"({"input":[1,2,3],"layers":[{"type":"conv","shape":[8,3,3],"wat":true}]})"),
      FormatError);
  CHECK_THROWS_AS(parse_descriptor("not json at all"), FormatError);
}

TEST_CASE("model assembly pairs descriptor layers with file tensors") {
  const NetworkDescriptor d = parse_descriptor(kDescriptor);
  std::mt19937_64 rng(17);
  std::normal_distribution<double> wd(0.0, 0.5);
  auto filled = [&](std::vector<int> dims) {
    Tensor t(std::move(dims));
    for (double& v : t.data) v = wd(rng);
    return t;
  };

  std::vector<Tensor> ts;
  ts.push_back(filled({32, 16, 3, 3}));  // stem weights
  ts.push_back(filled({32}));            // stem bias
  ts.push_back(filled({32}));            // gamma
  ts.push_back(filled({32}));            // beta
  ts.push_back(filled({32}));            // mu
  Tensor sig = filled({32});
  for (double& v : sig.data) v = std::abs(v) + 0.5;
  ts.push_back(sig);                       // sigma2
  ts.push_back(filled({32, 32, 3, 3}));    // mid weights
  ts.push_back(filled({32}));              // mid bias
  ts.push_back(filled({10, 32 * 6 * 6}));  // fc weights, rank-2 accepted
  ts.push_back(filled({10}));              // fc bias

  const NetworkModel m = build_model(d, ts);
  REQUIRE(m.layers.size() == 3);
  CHECK(m.layers[0].bn.has_value());
  CHECK(m.layers[0].pool.window == 2);
  CHECK_FALSE(m.layers[1].bn.has_value());
  CHECK(m.layers[2].type == LayerType::fc);
  CHECK(m.layers[2].conv.in_ch == 32 * 6 * 6);
  m.validate();

  // Missing tensors and unconsumed tensors are both rejected.
  std::vector<Tensor> missing(ts.begin(), ts.end() - 1);
  CHECK_THROWS_AS(build_model(d, missing), FormatError);
  std::vector<Tensor> extra = ts;
  extra.push_back(filled({3}));
  CHECK_THROWS_AS(build_model(d, extra), FormatError);

  // A shape mismatch points at the offending layer.
  std::vector<Tensor> wrong = ts;
  wrong[6] = filled({32, 16, 3, 3});  // mid expects 32 input channels
  CHECK_THROWS_WITH_AS(build_model(d, wrong), doctest::Contains("layer 1"), FormatError);
}

TEST_CASE("simulation reports survive the JSON round-trip") {
  SimReport r;
  r.layers.resize(2);
  r.layers[0].name = "conv0";
  r.layers[0].out_ch = 32;
  r.layers[0].in_ch = 16;
  r.layers[0].kernel_h = r.layers[0].kernel_w = 3;
  r.layers[0].stored_sets = 5;
  r.layers[0].total_sets = 9;
  r.layers[0].sparse.core_cycles = 1000;
  r.layers[0].sparse.system_cycles = 4000;
  r.layers[0].sparse.macro_accesses = 640;
  r.layers[0].sparse.fm_reads = 320;
  r.layers[0].sparse.fm_writes = 60;
  r.layers[0].dense.core_cycles = 1800;
  r.layers[0].dense.system_cycles = 7200;
  r.layers[0].speedup_vs_dense = 1.8;
  r.layers[0].fm_access_reduction = 1.8;
  r.layers[1] = r.layers[0];
  r.layers[1].name = "conv1";
  r.layers[1].fm_access_reduction = std::numeric_limits<double>::infinity();
  r.total_sparse = r.layers[0].sparse;
  r.total_sparse.add(r.layers[1].sparse);
  r.total_dense = r.layers[0].dense;
  r.total_dense.add(r.layers[1].dense);
  r.speedup_vs_dense = 1.8;
  r.fm_access_reduction = 1.8;

  SimConfig cfg;
  const std::string text = report_to_json(r, cfg);
  const SimReport back = report_from_json(text);
  REQUIRE(back.layers.size() == 2);
  CHECK(back.layers[0].name == "conv0");
  CHECK(back.layers[0].sparse.core_cycles == 1000);
  CHECK(back.layers[0].dense.core_cycles == 1800);
  CHECK(back.layers[0].speedup_vs_dense == doctest::Approx(1.8));
  CHECK(std::isinf(back.layers[1].fm_access_reduction));  // null -> inf
  CHECK(back.total_sparse.core_cycles == 2000);
  CHECK(back.speedup_vs_dense == doctest::Approx(1.8));

  const std::string csv = report_to_csv(r);
  CHECK(csv.find("conv0") != std::string::npos);
  CHECK(csv.find("name,out_ch") == 0);  // header row
}

TEST_CASE("storage tables include totals and tolerate empty rows") {
  std::vector<std::pair<std::string, StorageReport>> rows;
  rows.emplace_back("conv0", compression_report(3, 3, 64, 64, 8, 0.5));
  rows.emplace_back("conv1", compression_report(3, 3, 128, 128, 8, 0.9));
  const std::string csv = storage_to_csv(rows);
  CHECK(csv.find("conv0") != std::string::npos);
  CHECK(csv.find("TOTAL") != std::string::npos);
  CHECK(storage_to_csv({}).find("TOTAL") != std::string::npos);
}
