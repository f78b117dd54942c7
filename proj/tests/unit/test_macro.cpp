#include "doctest.h"

#include <random>

#include "mars/macro.hpp"

using namespace mars;

namespace {

std::array<WeightGroup, 8> fill_groups(int32_t v) {
  std::array<WeightGroup, 8> g{};
  for (auto& wg : g) wg.codes.fill(v);
  return g;
}

std::array<WeightGroup, 8> random_groups(std::mt19937_64& rng, int b_w) {
  const int wmax = (1 << (b_w - 1)) - 1;
  std::uniform_int_distribution<int32_t> d(-wmax, wmax);
  std::array<WeightGroup, 8> g{};
  for (auto& wg : g)
    for (auto& c : wg.codes) c = d(rng);
  return g;
}

}  // namespace

TEST_CASE("sixteen unit taps against unit weights sum to sixteen") {
  MacroState m(4);
  m.load_groups(0, fill_groups(1));
  std::array<int32_t, 16> ones;
  ones.fill(1);
  const MacResult r = m.access(0, ones);
  for (int32_t s : r.sums) CHECK(s == 16);

  m.load_groups(1, fill_groups(0));
  const MacResult z = m.access(1, ones);
  for (int32_t s : z.sums) CHECK(s == 0);
}

TEST_CASE("an access computes eight exact dot products") {
  std::mt19937_64 rng(3);
  MacroState m(4);
  std::uniform_int_distribution<int32_t> ad(0, 15);
  for (int pos = 0; pos < 64; ++pos) {
    const auto groups = random_groups(rng, 4);
    m.load_groups(pos, groups);
    std::array<int32_t, 16> in{};
    for (auto& a : in) a = ad(rng);
    const MacResult r = m.access(pos, in);
    for (int p = 0; p < 8; ++p) {
      int64_t want = 0;
      for (int i = 0; i < 16; ++i)
        want += static_cast<int64_t>(groups[static_cast<size_t>(p)].codes[static_cast<size_t>(i)]) *
                in[static_cast<size_t>(i)];
      CHECK(r.sums[static_cast<size_t>(p)] == static_cast<int32_t>(want));
    }
  }
  CHECK(m.groups_loaded() == 64 * 8);
  CHECK(m.accesses() == 64);
}

TEST_CASE("access is linear in its inputs") {
  std::mt19937_64 rng(5);
  MacroState m(8);
  m.load_groups(7, random_groups(rng, 8));
  std::uniform_int_distribution<int32_t> ad(0, 100);
  for (int trial = 0; trial < 50; ++trial) {
    std::array<int32_t, 16> a{}, b{}, sum{};
    for (int i = 0; i < 16; ++i) {
      a[static_cast<size_t>(i)] = ad(rng);
      b[static_cast<size_t>(i)] = ad(rng);
      sum[static_cast<size_t>(i)] = a[static_cast<size_t>(i)] + b[static_cast<size_t>(i)];
    }
    const MacResult ra = m.access(7, a), rb = m.access(7, b), rs = m.access(7, sum);
    for (int p = 0; p < 8; ++p)
      CHECK(rs.sums[static_cast<size_t>(p)] ==
            ra.sums[static_cast<size_t>(p)] + rb.sums[static_cast<size_t>(p)]);
  }
}

TEST_CASE("slots are independent and reloadable") {
  MacroState m(4);
  m.load_groups(63, fill_groups(2));
  m.load_groups(0, fill_groups(-3));
  CHECK(m.group_at(0, 63).codes[0] == 2);
  CHECK(m.group_at(5, 0).codes[9] == -3);
  CHECK(m.loaded(0));
  CHECK(m.loaded(63));
  CHECK_FALSE(m.loaded(32));

  m.load_groups(0, fill_groups(7));
  CHECK(m.group_at(5, 0).codes[9] == 7);
  CHECK(m.group_at(0, 63).codes[0] == 2);  // untouched

  m.clear();
  CHECK_FALSE(m.loaded(0));
  CHECK_FALSE(m.loaded(63));
}

TEST_CASE("macro bounds and empty slots are rejected") {
  MacroState m(4);
  CHECK_THROWS_AS(m.load_groups(64, fill_groups(1)), MappingError);
  CHECK_THROWS_AS(m.load_groups(-1, fill_groups(1)), MappingError);
  CHECK_THROWS_AS(m.load_groups(0, fill_groups(8)), MappingError);  // > 4-bit range

  std::array<int32_t, 16> in{};
  CHECK_THROWS_AS(m.access(0, in), SimError);  // nothing loaded
  m.load_groups(0, fill_groups(1));
  in[3] = 300;
  CHECK_THROWS_AS(m.access(0, in), SimError);  // activation code out of range
}

TEST_CASE("bit planes reassemble the full-precision access") {
  std::mt19937_64 rng(7);
  MacroState m(4);
  const auto groups = random_groups(rng, 4);
  m.load_groups(11, groups);

  std::uniform_int_distribution<int32_t> ad(0, 15);
  for (int trial = 0; trial < 200; ++trial) {
    std::array<int32_t, 16> in{};
    for (auto& a : in) a = ad(rng);
    const MacResult full = m.access(11, in);

    std::vector<MacResult> planes;
    std::vector<int32_t> weights;
    for (int b = 0; b < 4; ++b) {
      std::array<int32_t, 16> plane{};
      for (int i = 0; i < 16; ++i)
        plane[static_cast<size_t>(i)] = (in[static_cast<size_t>(i)] >> b) & 1;
      planes.push_back(m.access(11, plane));
      weights.push_back(1 << b);
    }
    CHECK(shift_accumulate(planes, weights) == full);
  }

  // The worked single-code case: 0b1011 splits into planes 1,1,0,1.
  std::array<int32_t, 16> code{};
  code[0] = 0b1011;
  const MacResult direct = m.access(11, code);
  std::vector<MacResult> p;
  for (int b = 0; b < 4; ++b) {
    std::array<int32_t, 16> plane{};
    plane[0] = (code[0] >> b) & 1;
    p.push_back(m.access(11, plane));
  }
  CHECK(shift_accumulate(p, {1, 2, 4, 8}) == direct);
}

TEST_CASE("shift accumulation is linear and guards its sums") {
  MacResult r;
  r.sums = {1, -2, 3, -4, 5, -6, 7, -8};
  const MacResult ident = shift_accumulate({r}, {1});
  CHECK(ident == r);

  const MacResult tripled = shift_accumulate({r, r}, {1, 2});
  for (int p = 0; p < 8; ++p)
    CHECK(tripled.sums[static_cast<size_t>(p)] == 3 * r.sums[static_cast<size_t>(p)]);

  CHECK_THROWS_AS(shift_accumulate({r, r}, {1}), ShapeError);

  MacResult big;
  big.sums.fill(2000000000);
  CHECK_THROWS_AS(shift_accumulate({big, big}, {1, 1}), SimError);
}

TEST_CASE("counters track exactly the calls made") {
  MacroState m(8);
  CHECK(m.accesses() == 0);
  CHECK(m.groups_loaded() == 0);
  std::mt19937_64 rng(9);
  m.load_groups(0, random_groups(rng, 8));
  m.load_groups(1, random_groups(rng, 8));
  CHECK(m.groups_loaded() == 16);
  std::array<int32_t, 16> in{};
  for (int k = 0; k < 5; ++k) m.access(k % 2, in);
  CHECK(m.accesses() == 5);
  m.load_groups(0, random_groups(rng, 8));  // reload counts as a load
  CHECK(m.groups_loaded() == 24);
}
