#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>

#include "pointpillars/pillars.hpp"
#include "pointpillars/rng.hpp"

using namespace pointpillars;

namespace {

GridSpec unit_grid(double res = 0.16) {
  GridSpec g;
  g.x_min = 0, g.x_max = 16 * res, g.y_min = 0, g.y_max = 16 * res;
  g.z_min = -3, g.z_max = 1;
  g.resolution = res;
  return g;
}

std::vector<Point> random_cloud(Rng& rng, std::size_t n, const GridSpec& g, double margin = 2.0) {
  std::vector<Point> pts;
  for (std::size_t i = 0; i < n; ++i)
    pts.push_back({static_cast<float>(rng.uniform(g.x_min - margin, g.x_max + margin)),
                   static_cast<float>(rng.uniform(g.y_min - margin, g.y_max + margin)),
                   static_cast<float>(rng.uniform(g.z_min - 0.5, g.z_max + 0.5)),
                   static_cast<float>(rng.uniform01())});
  return pts;
}

PillarTensor pack(const std::vector<Point>& pts, const GridSpec& g, std::uint64_t seed) {
  Rng rng(seed);
  return densify(decorate(assign_pillars(pts, g), pts, g), g, rng);
}

}  // namespace

TEST(AssignPillars, CornerAndOutOfRange) {
  const GridSpec g = GridSpec::car();
  const std::vector<Point> pts = {{0.f, -40.f, 0.f, 0.5f}, {80.f, 0.f, 0.f, 0.5f}};
  const PillarAssignment a = assign_pillars(pts, g);
  ASSERT_EQ(a.pillars.size(), 1u);
  EXPECT_EQ(a.pillars[0].cell, (CellIndex{0, 0}));
  EXPECT_EQ(a.pillars[0].members, std::vector<std::uint32_t>{0});
}

TEST(AssignPillars, HalfOpenXYClosedZ) {
  const GridSpec g = GridSpec::car();
  const std::vector<Point> pts = {{70.4f, 0.f, 0.f, 0.f},  {10.f, 40.f, 0.f, 0.f}, {10.f, 0.f, 1.f, 0.f},
                                  {10.f, 0.f, -3.f, 0.f}, {10.f, 0.f, 1.01f, 0.f}};
  const PillarAssignment a = assign_pillars(pts, g);
  EXPECT_EQ(a.num_points(), 2u);  // z = 1 and z = -3 kept
}

TEST(AssignPillars, MembersInsideCellsAndUnique) {
  Rng rng(1);
  const GridSpec g = unit_grid();
  const auto pts = random_cloud(rng, 5000, g);
  const PillarAssignment a = assign_pillars(pts, g);
  std::set<std::uint32_t> seen;
  std::size_t in_range = 0;
  for (const auto& p : pts)
    in_range += p.x >= g.x_min && p.x < g.x_max && p.y >= g.y_min && p.y < g.y_max && p.z >= g.z_min && p.z <= g.z_max;
  for (const auto& pillar : a.pillars) {
    for (auto m : pillar.members) {
      EXPECT_TRUE(seen.insert(m).second);
      const double x0 = g.x_min + pillar.cell.col * g.resolution, y0 = g.y_min + pillar.cell.row * g.resolution;
      EXPECT_GE(pts[m].x, x0 - 1e-6);
      EXPECT_LT(pts[m].x, x0 + g.resolution + 1e-6);
      EXPECT_GE(pts[m].y, y0 - 1e-6);
      EXPECT_LT(pts[m].y, y0 + g.resolution + 1e-6);
    }
  }
  EXPECT_EQ(seen.size(), in_range);
  EXPECT_LE(a.pillars.size(), static_cast<std::size_t>(a.dims.height) * a.dims.width);
}

TEST(AssignPillars, PermutationChangesOnlyOrderWithinPillars) {
  Rng rng(2);
  const GridSpec g = unit_grid();
  auto pts = random_cloud(rng, 3000, g);
  std::vector<std::uint32_t> perm(pts.size());
  std::iota(perm.begin(), perm.end(), 0u);
  for (std::size_t i = perm.size() - 1; i > 0; --i) std::swap(perm[i], perm[rng.uniform_int(i + 1)]);
  std::vector<Point> shuffled(pts.size());
  for (std::size_t i = 0; i < pts.size(); ++i) shuffled[i] = pts[perm[i]];

  auto cells_of = [](const PillarAssignment& a, const std::vector<std::uint32_t>* map) {
    std::map<std::uint32_t, CellIndex> out;
    for (const auto& p : a.pillars)
      for (auto m : p.members) out[map ? (*map)[m] : m] = p.cell;
    return out;
  };
  EXPECT_EQ(cells_of(assign_pillars(pts, g), nullptr), cells_of(assign_pillars(shuffled, g), &perm));
}

TEST(AssignPillars, EmptyInput) {
  const PillarAssignment a = assign_pillars({}, GridSpec::car());
  EXPECT_TRUE(a.pillars.empty());
  EXPECT_EQ(pillar_stats(a).sparsity(), 1.0);
}

TEST(Decorate, SinglePointAtCellCenter) {
  const GridSpec g = unit_grid();
  const std::vector<Point> pts = {{0.08f, 0.08f, -1.f, 0.3f}};
  const auto d = decorate(assign_pillars(pts, g), pts, g);
  ASSERT_EQ(d.pillars.size(), 1u);
  const DecoratedPoint& p = d.pillars[0].points[0];
  for (int k = 4; k < 9; ++k) EXPECT_NEAR(p[k], 0.f, 1e-7) << "dim " << k;
  EXPECT_FLOAT_EQ(p[0], 0.08f);
  EXPECT_FLOAT_EQ(p[3], 0.3f);
}

TEST(Decorate, CenterOffsetsByHand) {
  const GridSpec g = unit_grid();
  const std::vector<Point> pts = {{0.10f, 0.05f, 0.f, 0.f}};
  const auto d = decorate(assign_pillars(pts, g), pts, g);
  const DecoratedPoint& p = d.pillars[0].points[0];
  EXPECT_NEAR(p[7], 0.02, 1e-6);
  EXPECT_NEAR(p[8], -0.03, 1e-6);
  EXPECT_NEAR(p[4], 0.0, 1e-7);  // single point: mean offset zero
}

TEST(Decorate, MeanCenteringAntisymmetry) {
  const GridSpec g = unit_grid();
  const std::vector<Point> pts = {{0.02f, 0.03f, -1.f, 0.f}, {0.12f, 0.09f, 0.f, 0.f}};
  const auto d = decorate(assign_pillars(pts, g), pts, g);
  ASSERT_EQ(d.pillars.size(), 1u);
  const auto& a = d.pillars[0].points[0];
  const auto& b = d.pillars[0].points[1];
  for (int k = 4; k < 7; ++k) EXPECT_NEAR(a[k], -b[k], 1e-7);
  EXPECT_NEAR(a[4], -0.05, 1e-6);
}

TEST(Densify, PaddingMaskAndCounts) {
  GridSpec g = unit_grid();
  g.max_pillars = 4, g.max_points_per_pillar = 100;
  const std::vector<Point> pts = {{0.01f, 0.01f, 0.f, 0.1f}, {0.02f, 0.02f, 0.f, 0.2f}, {0.03f, 0.03f, 0.f, 0.3f}};
  const PillarTensor t = pack(pts, g, 0);
  EXPECT_EQ(t.valid_counts[0], 3);
  EXPECT_EQ(t.num_used(), 1);
  for (int p = 0; p < t.max_pillars; ++p) {
    int pop = 0;
    for (int n = 0; n < t.max_points; ++n) {
      pop += t.valid(p, n);
      if (!t.valid(p, n))
        for (int d = 0; d < kDecoratedDims; ++d) ASSERT_EQ(t.at(d, p, n), 0.f);
    }
    EXPECT_EQ(pop, t.valid_counts[p]);
  }
  for (int p = 1; p < t.max_pillars; ++p) EXPECT_EQ(t.indices[p], kUnusedSlot);
}

TEST(Densify, EmptyFrame) {
  GridSpec g = unit_grid();
  g.max_pillars = 5, g.max_points_per_pillar = 7;
  const PillarTensor t = pack({}, g, 0);
  EXPECT_TRUE(std::all_of(t.data.begin(), t.data.end(), [](float v) { return v == 0.f; }));
  EXPECT_TRUE(std::all_of(t.indices.begin(), t.indices.end(), [](CellIndex c) { return c == kUnusedSlot; }));
}

TEST(Densify, SlotOrderByCountThenCell) {
  GridSpec g = unit_grid(1.0);
  g.max_pillars = 10, g.max_points_per_pillar = 10;
  std::vector<Point> pts;
  auto put = [&](float x, float y, int n) {
    for (int i = 0; i < n; ++i) pts.push_back({x, y, 0.f, 0.f});
  };
  put(5.5f, 1.5f, 2);  // cell (1, 5)
  put(0.5f, 3.5f, 4);  // cell (3, 0)
  put(2.5f, 1.5f, 2);  // cell (1, 2)
  put(7.5f, 0.5f, 1);  // cell (0, 7)
  const PillarTensor t = pack(pts, g, 0);
  EXPECT_EQ(t.indices[0], (CellIndex{3, 0}));
  EXPECT_EQ(t.indices[1], (CellIndex{1, 2}));
  EXPECT_EQ(t.indices[2], (CellIndex{1, 5}));
  EXPECT_EQ(t.indices[3], (CellIndex{0, 7}));
}

TEST(Densify, NoSamplingKeepsEveryPoint) {
  Rng rng(3);
  GridSpec g = unit_grid();
  g.max_pillars = 256, g.max_points_per_pillar = 1000;
  const auto pts = random_cloud(rng, 2000, g);
  const PillarTensor t = pack(pts, g, 1);
  const int total = std::accumulate(t.valid_counts.begin(), t.valid_counts.end(), 0);
  EXPECT_EQ(static_cast<std::size_t>(total), assign_pillars(pts, g).num_points());
}

TEST(Densify, SameSeedBitIdentical) {
  Rng rng(4);
  GridSpec g = unit_grid();
  g.max_pillars = 50, g.max_points_per_pillar = 5;  // both limits bind
  const auto pts = random_cloud(rng, 4000, g);
  const PillarTensor a = pack(pts, g, 77), b = pack(pts, g, 77), c = pack(pts, g, 78);
  EXPECT_EQ(a.data, b.data);
  EXPECT_EQ(a.indices, b.indices);
  EXPECT_EQ(a.mask, b.mask);
  EXPECT_NE(a.data, c.data);
}

TEST(Densify, DifferentSeedsAgreeWhenNoLimitBinds) {
  Rng rng(5);
  GridSpec g = unit_grid();
  g.max_pillars = 256, g.max_points_per_pillar = 200;
  const auto pts = random_cloud(rng, 1500, g);
  const PillarTensor a = pack(pts, g, 1), b = pack(pts, g, 2);
  EXPECT_EQ(a.data, b.data);
  EXPECT_EQ(a.indices, b.indices);
}

// 150 points in one pillar, N = 100: every point is kept with probability
// 2/3. Over 1000 seeds each count is Binomial(1000, 2/3), sd ~ 14.9.
TEST(Densify, PointSubsampleIsUniform) {
  GridSpec g = unit_grid();
  g.max_pillars = 1, g.max_points_per_pillar = 100;
  std::vector<Point> pts;
  for (int i = 0; i < 150; ++i) pts.push_back({0.05f, 0.05f, 0.f, static_cast<float>(i) / 150.f});
  const auto dec = decorate(assign_pillars(pts, g), pts, g);
  std::vector<int> kept(150, 0);
  const int seeds = 1000;
  for (int s = 0; s < seeds; ++s) {
    Rng rng(static_cast<std::uint64_t>(s));
    const PillarTensor t = densify(dec, g, rng);
    ASSERT_EQ(t.valid_counts[0], 100);
    for (int n = 0; n < 100; ++n) {
      const int id = static_cast<int>(std::lround(t.at(3, 0, n) * 150.f));
      ++kept[id];
    }
  }
  const double p = 100.0 / 150.0, mean = seeds * p, sd = std::sqrt(seeds * p * (1 - p));
  double chi2 = 0;
  for (int k : kept) {
    EXPECT_LT(std::abs(k - mean), 5 * sd);
    chi2 += (k - mean) * (k - mean) / (sd * sd);
  }
  // chi-square with ~149 dof: mean 149, sd ~17
  EXPECT_LT(chi2, 149 + 6 * 17.3);
}

TEST(Densify, PillarSubsampleIsUniform) {
  GridSpec g = unit_grid(1.0);
  g.max_pillars = 3, g.max_points_per_pillar = 4;
  std::vector<Point> pts;
  for (int c = 0; c < 6; ++c) pts.push_back({c + 0.5f, 0.5f, 0.f, 0.f});
  const auto dec = decorate(assign_pillars(pts, g), pts, g);
  std::vector<int> hits(6, 0);
  const int seeds = 3000;
  for (int s = 0; s < seeds; ++s) {
    Rng rng(static_cast<std::uint64_t>(s) + 1000);
    const PillarTensor t = densify(dec, g, rng);
    ASSERT_EQ(t.num_used(), 3);
    for (int p = 0; p < 3; ++p) ++hits[t.indices[p].col];
  }
  const double mean = seeds * 0.5, sd = std::sqrt(seeds * 0.25);
  for (int h : hits) EXPECT_LT(std::abs(h - mean), 5 * sd);
}

TEST(Scatter, SinglePillar) {
  PillarFeatures f(1, 2);
  f.at(0, 0) = 5.f;
  const std::vector<CellIndex> idx = {{2, 3}, kUnusedSlot};
  const Tensor3 img = scatter(f, idx, {4, 5});
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 5; ++j) EXPECT_EQ(img.at(0, i, j), (i == 2 && j == 3) ? 5.f : 0.f);
}

TEST(Scatter, GatherRoundTripAndSparsity) {
  Rng rng(6);
  GridSpec g = unit_grid();
  g.max_pillars = 300, g.max_points_per_pillar = 8;
  const auto pts = random_cloud(rng, 800, g);
  const PillarTensor t = pack(pts, g, 1);
  PillarFeatures f(3, t.max_pillars);
  for (int p = 0; p < t.max_pillars; ++p)
    if (t.indices[p].used())
      for (int c = 0; c < 3; ++c) f.at(c, p) = static_cast<float>(rng.uniform(0.5, 2));
  const Tensor3 img = scatter(f, t.indices, t.dims);
  const PillarFeatures back = gather(img, t.indices);
  EXPECT_EQ(back.data, f.data);
  std::size_t nonzero_cols = 0;
  for (int i = 0; i < img.height; ++i)
    for (int j = 0; j < img.width; ++j) nonzero_cols += img.at(0, i, j) != 0.f;
  EXPECT_EQ(nonzero_cols, static_cast<std::size_t>(t.num_used()));
}

TEST(Scatter, DuplicateIndexIsInternalError) {
  PillarFeatures f(1, 2);
  const std::vector<CellIndex> idx = {{1, 1}, {1, 1}};
  EXPECT_THROW(scatter(f, idx, {3, 3}), InternalError);
}

TEST(Scatter, CarShape) {
  const GridSpec g = GridSpec::car();
  PillarFeatures f(64, 12000);
  std::vector<CellIndex> idx(12000);
  for (int p = 0; p < 12000; ++p) idx[p] = {p / 440, p % 440};
  const Tensor3 img = scatter(f, idx, grid_dims(g));
  EXPECT_EQ(img.channels, 64);
  EXPECT_EQ(img.height, 500);
  EXPECT_EQ(img.width, 440);
}
