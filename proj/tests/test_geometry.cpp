#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "support/oracles.hpp"
#include "surf2ct/geometry.hpp"

using namespace surf2ct;
namespace oracle = surf2ct::testing;

namespace {

Volume3 ball_mask(std::size_t n, float spacing, double radius) {
  const float half = static_cast<float>(n) * spacing / 2;
  Volume3 m(n, n, n, spacing, {-half, -half, -half});
  for (std::size_t k = 0; k < n; ++k)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t i = 0; i < n; ++i) {
        const auto p = m.world(i, j, k);
        if (p[0] * p[0] + p[1] * p[1] + p[2] * p[2] <= radius * radius) m.at(i, j, k) = 1;
      }
  return m;
}

}  // namespace

TEST(Volume, WorldCoordinateIsCellCentre) {
  Volume3 v(4, 5, 6, 2.0f, {10, 20, 30});
  const auto p = v.world(1, 2, 3);
  EXPECT_DOUBLE_EQ(p[0], 13.0);
  EXPECT_DOUBLE_EQ(p[1], 25.0);
  EXPECT_DOUBLE_EQ(p[2], 37.0);
  EXPECT_EQ(v.index(1, 2, 3), (3u * 5 + 2) * 4 + 1);
}

TEST(Volume, RejectsDegenerateGrid) {
  EXPECT_THROW(Volume3(0, 1, 1, 1.0f), GridError);
  EXPECT_THROW(Volume3(1, 1, 1, 0.0f), GridError);
}

TEST(Vol3, ByteLayoutAndRoundTrip) {
  std::mt19937_64 rng(1);
  Volume3 v(3, 4, 5, 2.5f, {-1.5f, 2.0f, 0.25f});
  std::normal_distribution<float> nd;
  for (auto& x : v.values) x = nd(rng);
  std::ostringstream os;
  write_vol3(os, v, PayloadKind::sdf_mm);
  const std::string bytes = os.str();
  ASSERT_EQ(bytes.size(), 40u + 60u * 4u);
  EXPECT_EQ(bytes.substr(0, 4), "VOL3");
  std::uint32_t u;
  std::memcpy(&u, bytes.data() + 8, 4);
  EXPECT_EQ(u, 3u);
  std::memcpy(&u, bytes.data() + 36, 4);
  EXPECT_EQ(u, 2u);
  float f;
  std::memcpy(&f, bytes.data() + 20, 4);
  EXPECT_EQ(f, 2.5f);
  std::istringstream is(bytes);
  auto back = read_vol3(is);
  EXPECT_EQ(back.kind, PayloadKind::sdf_mm);
  EXPECT_TRUE(back.vol.same_grid(v));
  EXPECT_EQ(back.vol.values, v.values);
  std::ostringstream again;
  write_vol3(again, back.vol, back.kind);
  EXPECT_EQ(again.str(), bytes);
}

TEST(Vol3, RejectsBadMagicAndUnknownKind) {
  Volume3 v(2, 2, 2, 1.0f);
  std::ostringstream os;
  write_vol3(os, v, PayloadKind::mask);
  std::string bytes = os.str();
  std::string bad = bytes;
  bad[1] = 'X';
  std::istringstream a(bad);
  EXPECT_THROW(read_vol3(a), FormatError);
  bad = bytes;
  bad[36] = 9;
  std::istringstream b(bad);
  EXPECT_THROW(read_vol3(b), FormatError);
}

TEST(Intensity, ClipRangeEndpoints) {
  EXPECT_EQ(normalize_hu(-500.0f), 0.0f);
  EXPECT_EQ(normalize_hu(500.0f), 1.0f);
  EXPECT_EQ(normalize_hu(0.0f), 0.5f);
  EXPECT_EQ(normalize_hu(1200.0f), 1.0f);
  EXPECT_EQ(normalize_hu(-3000.0f), 0.0f);
  EXPECT_EQ(denormalize_hu(1.0f), 500.0f);
  EXPECT_EQ(denormalize_hu(0.0f), -500.0f);
}

TEST(Intensity, RoundTripOnUnitInterval) {
  for (int i = 0; i <= 1000; ++i) {
    const float v = static_cast<float>(i) / 1000.0f;
    EXPECT_NEAR(normalize_hu(denormalize_hu(v)), v, 1e-6f);
  }
}

TEST(Sdf, BallCentreDistance) {
  const auto m = ball_mask(20, 2.0f, 10.0);
  const auto s = compute_sdf(m, 20.0);
  // Centre voxels sit at (+-1, +-1, +-1) mm; the nearest surface is ~8 mm away.
  const float c = s.vol.at(10, 10, 10);
  EXPECT_GE(c, 8.0f - 2.0f);
  EXPECT_LE(c, 8.0f + 2.0f);
  EXPECT_EQ(s.vol.at(9, 9, 9), c);
}

TEST(Sdf, FarFieldIsExactlyMinusTau) {
  Volume3 m(24, 24, 24, 1.0f);
  for (std::size_t k = 0; k < 3; ++k)
    for (std::size_t j = 0; j < 3; ++j)
      for (std::size_t i = 0; i < 3; ++i) m.at(i, j, k) = 1;
  const auto s = compute_sdf(m, 4.0);
  EXPECT_EQ(s.vol.at(23, 23, 23), -4.0f);
  for (float v : s.vol.values) {
    EXPECT_LE(v, 4.0f);
    EXPECT_GE(v, -4.0f);
  }
}

TEST(Sdf, DefaultTauIsQuarterOfSmallestExtent) {
  Volume3 g(16, 16, 24, 8.0f);
  EXPECT_DOUBLE_EQ(default_tau(g), 32.0);
}

TEST(Sdf, RejectsEmptyAndFullMasks) {
  Volume3 m(4, 4, 4, 1.0f);
  EXPECT_THROW(compute_sdf(m, 2.0), GridError);
  std::fill(m.values.begin(), m.values.end(), 1.0f);
  EXPECT_THROW(compute_sdf(m, 2.0), GridError);
}

TEST(Sdf, MatchesBruteForceOnRandomMasks) {
  std::mt19937_64 rng(100);
  for (int trial = 0; trial < 50; ++trial) {
    const auto m = oracle::random_mask(rng, 12);
    const double tau = 0.25 * m.min_physical_extent() + trial % 3;
    const auto s = compute_sdf(m, tau);
    const auto ref = oracle::brute_sdf(m, tau);
    ASSERT_EQ(s.vol.values, ref.values) << "trial " << trial;
  }
}

TEST(Sdf, OccupancyRoundTrip) {
  std::mt19937_64 rng(101);
  for (int trial = 0; trial < 30; ++trial) {
    const auto m = oracle::random_mask(rng, 10);
    EXPECT_EQ(occupancy(compute_sdf(m, 3.0)).values, m.values);
  }
}

TEST(Partial, PosteriorIsMinusTau) {
  std::mt19937_64 rng(7);
  const auto m = ball_mask(16, 2.0f, 11.0);
  const auto full = compute_sdf(m, 8.0);
  const auto p = make_partial(full, m);
  const std::size_t med = median_occupied_y(m);
  for (std::size_t k = 0; k < m.nz; ++k)
    for (std::size_t j = med + 1; j < m.ny; ++j)
      for (std::size_t i = 0; i < m.nx; ++i) EXPECT_EQ(p.vol.at(i, j, k), -8.0f);
}

TEST(Partial, SurfaceEntirelyAnteriorKeepsFullValues) {
  // Slab touching the +y grid face: its only boundary lies in front of the median.
  Volume3 m(6, 12, 5, 1.0f);
  for (std::size_t k = 0; k < 5; ++k)
    for (std::size_t j = 3; j < 12; ++j)
      for (std::size_t i = 0; i < 6; ++i) m.at(i, j, k) = 1;
  const auto full = compute_sdf(m, 3.0);
  const auto p = make_partial(full, m);
  const std::size_t med = median_occupied_y(m);
  ASSERT_GT(med, 3u);
  for (std::size_t k = 0; k < 5; ++k)
    for (std::size_t j = 0; j <= med; ++j)
      for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(p.vol.at(i, j, k), full.vol.at(i, j, k));
}

TEST(Partial, MatchesBruteForceOnRandomMasks) {
  std::mt19937_64 rng(102);
  int checked = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const auto m = oracle::random_mask(rng, 12);
    const auto full = compute_sdf(m, 5.0);
    Volume3 ref;
    if (!oracle::brute_partial(m, 5.0, ref)) {
      EXPECT_THROW(make_partial(full, m), GridError);
      continue;
    }
    EXPECT_EQ(make_partial(full, m).vol.values, ref.values) << "trial " << trial;
    ++checked;
  }
  EXPECT_GT(checked, 30);
}

TEST(Partial, IdempotentWithSameOccupancy) {
  const auto m = ball_mask(14, 2.0f, 9.0);
  const auto full = compute_sdf(m, 6.0);
  const auto p = make_partial(full, m);
  EXPECT_EQ(make_partial(p, m).vol.values, p.vol.values);
}

TEST(Partial, RejectsMissingAnteriorSurface) {
  Volume3 m(4, 12, 4, 1.0f);
  for (std::size_t k = 0; k < 4; ++k)
    for (std::size_t j = 0; j < 6; ++j)
      for (std::size_t i = 0; i < 4; ++i) m.at(i, j, k) = 1;
  EXPECT_THROW(make_partial(compute_sdf(m, 2.0), m), GridError);
}

TEST(Surface, HalfSpaceGivesTwoLayers) {
  Volume3 s(8, 5, 4, 1.0f);
  for (std::size_t k = 0; k < 4; ++k)
    for (std::size_t j = 0; j < 5; ++j)
      for (std::size_t i = 0; i < 8; ++i) s.at(i, j, k) = i < 3 ? 1.0f : -1.0f;
  const auto pts = extract_surface_points(s);
  ASSERT_EQ(pts.size(), 2u * 5u * 4u);
  for (const auto& p : pts) EXPECT_TRUE(p[0] == 2.5 || p[0] == 3.5);
}

TEST(Surface, MatchesBruteForceOnRandomGrids) {
  std::mt19937_64 rng(103);
  for (int trial = 0; trial < 50; ++trial) {
    const auto m = oracle::random_mask(rng, 12);
    const auto s = compute_sdf(m, 4.0);
    const auto pts = extract_surface_points(s);
    EXPECT_GT(pts.size(), 0u);
    EXPECT_EQ(pts, oracle::brute_surface(s.vol));
  }
}

TEST(Surface, RejectsSingleSign) {
  Volume3 s(3, 3, 3, 1.0f, {0, 0, 0}, -1.0f);
  EXPECT_THROW(extract_surface_points(s), GridError);
}

TEST(Chamfer, HandValues) {
  std::vector<Point3> a{{0, 0, 0}}, b{{1, 0, 0}};
  EXPECT_DOUBLE_EQ(chamfer(a, b), 1.0);
  EXPECT_DOUBLE_EQ(chamfer(a, a), 0.0);
  EXPECT_THROW(chamfer(a, {}), std::invalid_argument);
}

TEST(Chamfer, MatchesBruteForceOnRandomSets) {
  std::mt19937_64 rng(104);
  for (int trial = 0; trial < 50; ++trial) {
    std::uniform_int_distribution<int> count(1, 200);
    const auto a = oracle::random_points(rng, count(rng), trial % 5 == 0 ? 1000.0 : 30.0);
    const auto b = oracle::random_points(rng, count(rng), 30.0);
    EXPECT_NEAR(chamfer(a, b), oracle::brute_chamfer(a, b), 1e-9) << "trial " << trial;
  }
}

TEST(Chamfer, MatchesBruteForceOnExtractedSurfaces) {
  std::mt19937_64 rng(105);
  for (int trial = 0; trial < 20; ++trial) {
    const auto a = extract_surface_points(compute_sdf(oracle::random_mask(rng, 12), 3.0));
    const auto b = extract_surface_points(compute_sdf(oracle::random_mask(rng, 12), 3.0));
    EXPECT_NEAR(chamfer(a, b), oracle::brute_chamfer(a, b), 1e-9);
  }
}

TEST(Chamfer, SymmetricAndTranslationInvariant) {
  std::mt19937_64 rng(106);
  for (int trial = 0; trial < 20; ++trial) {
    auto a = oracle::random_points(rng, 80, 20.0);
    auto b = oracle::random_points(rng, 50, 20.0);
    const double ab = chamfer(a, b);
    EXPECT_NEAR(ab, chamfer(b, a), 1e-12);
    std::uniform_real_distribution<double> u(-100, 100);
    const Point3 shift{u(rng), u(rng), u(rng)};
    for (auto* set : {&a, &b})
      for (auto& p : *set)
        for (int d = 0; d < 3; ++d) p[d] += shift[d];
    EXPECT_NEAR(chamfer(a, b), ab, 1e-9);
  }
}

TEST(Iou, HandValues) {
  Volume3 a(4, 2, 2, 1.0f), b(4, 2, 2, 1.0f), empty(4, 2, 2, 1.0f);
  for (std::size_t k = 0; k < 2; ++k)
    for (std::size_t j = 0; j < 2; ++j) {
      a.at(0, j, k) = a.at(1, j, k) = 1;
      b.at(1, j, k) = b.at(2, j, k) = 1;
    }
  EXPECT_DOUBLE_EQ(iou(a, a), 1.0);
  EXPECT_DOUBLE_EQ(iou(a, b), 1.0 / 3.0);
  EXPECT_DOUBLE_EQ(iou(b, a), 1.0 / 3.0);
  EXPECT_DOUBLE_EQ(iou(empty, empty), 1.0);
  Volume3 c(4, 2, 2, 1.0f);
  for (std::size_t k = 0; k < 2; ++k)
    for (std::size_t j = 0; j < 2; ++j) c.at(3, j, k) = 1;
  EXPECT_DOUBLE_EQ(iou(a, c), 0.0);
  EXPECT_THROW(iou(a, Volume3(4, 2, 3, 1.0f)), GridError);
}

TEST(Nmae, HandValuesAndOracle) {
  SdfGrid ref{Volume3(3, 3, 3, 1.0f), 4.0};
  std::mt19937_64 rng(107);
  std::uniform_real_distribution<float> u(-4, 4);
  for (auto& v : ref.vol.values) v = u(rng);
  EXPECT_DOUBLE_EQ(nmae(ref, ref), 0.0);
  SdfGrid off = ref;
  for (auto& v : off.vol.values) v += 0.4f;
  EXPECT_NEAR(nmae(off, ref), 0.05, 1e-6);
  for (int trial = 0; trial < 50; ++trial) {
    SdfGrid a{Volume3(5, 4, 3, 2.0f), 6.0}, b{Volume3(5, 4, 3, 2.0f), 6.0};
    for (auto& v : a.vol.values) v = u(rng);
    for (auto& v : b.vol.values) v = u(rng);
    EXPECT_NEAR(nmae(a, b), oracle::brute_nmae(a, b), 1e-9);
  }
}

TEST(SdfNormalization, RoundTrip) {
  const auto m = ball_mask(10, 2.0f, 6.0);
  const auto s = compute_sdf(m, 5.0);
  const auto n = sdf_to_normalized(s);
  for (float v : n.values) {
    EXPECT_LE(v, 1.0f);
    EXPECT_GE(v, -1.0f);
  }
  const auto back = sdf_from_normalized(n, 5.0);
  for (std::size_t i = 0; i < s.vol.size(); ++i) EXPECT_NEAR(back.vol.values[i], s.vol.values[i], 1e-5);
}
