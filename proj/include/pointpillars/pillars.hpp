#pragma once

// Point cloud -> stacked pillar tensor -> (after encoding) pseudo-image.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "pointpillars/core.hpp"
#include "pointpillars/rng.hpp"

namespace pointpillars {

struct CellIndex {
  std::int32_t row = -1;
  std::int32_t col = -1;

  [[nodiscard]] bool used() const { return row >= 0; }
  friend bool operator==(const CellIndex&, const CellIndex&) = default;
  friend auto operator<=>(const CellIndex&, const CellIndex&) = default;
};

inline constexpr CellIndex kUnusedSlot{};

struct Pillar {
  CellIndex cell;
  std::vector<std::uint32_t> members;  // indices into the input point list, ascending
};

/// Non-empty pillars in (row, col) order.
struct PillarAssignment {
  GridDims dims;
  std::vector<Pillar> pillars;

  [[nodiscard]] std::size_t num_points() const {
    std::size_t n = 0;
    for (const auto& p : pillars) n += p.members.size();
    return n;
  }
};

/// Cell of a point, or nullopt-equivalent (row = -1) when it lies outside the
/// grid's half-open x-y extent or closed z extent.
inline CellIndex cell_of(const Point& p, const GridSpec& spec, GridDims dims) {
  const double x = p.x, y = p.y, z = p.z;
  if (!(x >= spec.x_min && x < spec.x_max && y >= spec.y_min && y < spec.y_max && z >= spec.z_min &&
        z <= spec.z_max))
    return kUnusedSlot;
  const auto col = static_cast<std::int32_t>(std::floor((x - spec.x_min) / spec.resolution));
  const auto row = static_cast<std::int32_t>(std::floor((y - spec.y_min) / spec.resolution));
  if (col < 0 || col >= dims.width || row < 0 || row >= dims.height) return kUnusedSlot;
  return {row, col};
}

inline PillarAssignment assign_pillars(std::span<const Point> points, const GridSpec& spec) {
  PillarAssignment out;
  out.dims = grid_dims(spec);
  std::vector<std::uint64_t> keyed;
  keyed.reserve(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) {
    const CellIndex c = cell_of(points[i], spec, out.dims);
    if (!c.used()) continue;
    const auto key = static_cast<std::uint64_t>(c.row) * out.dims.width + c.col;
    keyed.push_back((key << 32) | i);
  }
  std::sort(keyed.begin(), keyed.end());
  for (std::size_t i = 0; i < keyed.size();) {
    const std::uint64_t key = keyed[i] >> 32;
    Pillar p;
    p.cell = {static_cast<std::int32_t>(key / out.dims.width), static_cast<std::int32_t>(key % out.dims.width)};
    for (; i < keyed.size() && (keyed[i] >> 32) == key; ++i)
      p.members.push_back(static_cast<std::uint32_t>(keyed[i] & 0xFFFFFFFFULL));
    out.pillars.push_back(std::move(p));
  }
  return out;
}

struct DecoratedPillar {
  CellIndex cell;
  std::vector<DecoratedPoint> points;
};

struct DecoratedPillars {
  GridDims dims;
  std::vector<DecoratedPillar> pillars;
};

/// Offsets are taken against the mean of all of the pillar's points, before
/// any capacity sampling happens in densify().
inline DecoratedPillars decorate(const PillarAssignment& assignment, std::span<const Point> points,
                                 const GridSpec& spec) {
  DecoratedPillars out;
  out.dims = assignment.dims;
  out.pillars.reserve(assignment.pillars.size());
  for (const Pillar& pillar : assignment.pillars) {
    double mx = 0, my = 0, mz = 0;
    for (auto idx : pillar.members) {
      if (idx >= points.size()) throw InternalError("decorate: member index out of range");
      mx += points[idx].x, my += points[idx].y, mz += points[idx].z;
    }
    const double n = static_cast<double>(pillar.members.size());
    mx /= n, my /= n, mz /= n;
    const double cx = spec.x_min + (pillar.cell.col + 0.5) * spec.resolution;
    const double cy = spec.y_min + (pillar.cell.row + 0.5) * spec.resolution;

    DecoratedPillar dp;
    dp.cell = pillar.cell;
    dp.points.reserve(pillar.members.size());
    for (auto idx : pillar.members) {
      const Point& p = points[idx];
      dp.points.push_back({p.x, p.y, p.z, p.r, static_cast<float>(p.x - mx), static_cast<float>(p.y - my),
                           static_cast<float>(p.z - mz), static_cast<float>(p.x - cx),
                           static_cast<float>(p.y - cy)});
    }
    out.pillars.push_back(std::move(dp));
  }
  return out;
}

/// Dense (D = 9, P, N) tensor. Slot p holds the pillar at indices[p]; unused
/// slots carry kUnusedSlot. Padded point rows are zero and masked out.
struct PillarTensor {
  int max_pillars = 0;  // P
  int max_points = 0;   // N
  GridDims dims;
  std::vector<float> data;       // [d][p][n]
  std::vector<CellIndex> indices;
  std::vector<int> valid_counts;
  std::vector<std::uint8_t> mask;  // [p][n]

  PillarTensor() = default;
  PillarTensor(int p, int n, GridDims d)
      : max_pillars(p),
        max_points(n),
        dims(d),
        data(static_cast<std::size_t>(kDecoratedDims) * p * n, 0.f),
        indices(p, kUnusedSlot),
        valid_counts(p, 0),
        mask(static_cast<std::size_t>(p) * n, 0) {}

  [[nodiscard]] std::size_t offset(int d, int p, int n) const {
    return (static_cast<std::size_t>(d) * max_pillars + p) * max_points + n;
  }
  float& at(int d, int p, int n) { return data[offset(d, p, n)]; }
  [[nodiscard]] float at(int d, int p, int n) const { return data[offset(d, p, n)]; }
  [[nodiscard]] bool valid(int p, int n) const {
    return mask[static_cast<std::size_t>(p) * max_points + n] != 0;
  }

  [[nodiscard]] int num_used() const {
    return static_cast<int>(std::count_if(indices.begin(), indices.end(), [](CellIndex c) { return c.used(); }));
  }
};

namespace detail {
/// Uniform k-subset of [0, n) by reservoir selection, returned ascending.
inline std::vector<std::uint32_t> reservoir_subset(std::size_t n, std::size_t k, Rng& rng) {
  std::vector<std::uint32_t> chosen;
  chosen.reserve(k);
  for (std::size_t i = 0; i < n; ++i) {
    if (i < k) {
      chosen.push_back(static_cast<std::uint32_t>(i));
    } else {
      const auto j = rng.uniform_int(i + 1);
      if (j < k) chosen[j] = static_cast<std::uint32_t>(i);
    }
  }
  std::sort(chosen.begin(), chosen.end());
  return chosen;
}
}  // namespace detail

/// Packs decorated pillars into the fixed-capacity tensor. Slots are ordered
/// by descending point count, ties by (row, col). When there are more than P
/// pillars, or a pillar has more than N points, a uniform subset is drawn from
/// `rng` (pillar subset first, then points slot by slot).
inline PillarTensor densify(const DecoratedPillars& pillars, const GridSpec& spec, Rng& rng) {
  const int P = spec.max_pillars, N = spec.max_points_per_pillar;
  if (P < 1 || N < 1) throw ConfigError("densify: max_pillars and max_points_per_pillar must be >= 1");
  PillarTensor out(P, N, pillars.dims);

  std::vector<std::uint32_t> order(pillars.pillars.size());
  std::iota(order.begin(), order.end(), 0u);
  std::sort(order.begin(), order.end(), [&](std::uint32_t a, std::uint32_t b) {
    const auto& pa = pillars.pillars[a];
    const auto& pb = pillars.pillars[b];
    if (pa.points.size() != pb.points.size()) return pa.points.size() > pb.points.size();
    return pa.cell < pb.cell;
  });
  if (order.size() > static_cast<std::size_t>(P)) {
    const auto keep = detail::reservoir_subset(order.size(), P, rng);
    std::vector<std::uint32_t> kept;
    kept.reserve(keep.size());
    for (auto k : keep) kept.push_back(order[k]);
    order = std::move(kept);
  }

  for (std::size_t slot = 0; slot < order.size(); ++slot) {
    const auto& pillar = pillars.pillars[order[slot]];
    const int p = static_cast<int>(slot);
    out.indices[p] = pillar.cell;
    std::vector<std::uint32_t> rows;
    if (pillar.points.size() > static_cast<std::size_t>(N)) {
      rows = detail::reservoir_subset(pillar.points.size(), N, rng);
    } else {
      rows.resize(pillar.points.size());
      std::iota(rows.begin(), rows.end(), 0u);
    }
    for (std::size_t n = 0; n < rows.size(); ++n) {
      const DecoratedPoint& dp = pillar.points[rows[n]];
      for (int d = 0; d < kDecoratedDims; ++d) out.at(d, p, static_cast<int>(n)) = dp[d];
      out.mask[static_cast<std::size_t>(p) * N + n] = 1;
    }
    out.valid_counts[p] = static_cast<int>(rows.size());
  }
  return out;
}

/// Per-pillar feature vectors, (C, P) row-major.
struct PillarFeatures {
  int channels = 0;
  int pillars = 0;
  std::vector<float> data;

  PillarFeatures() = default;
  PillarFeatures(int c, int p) : channels(c), pillars(p), data(static_cast<std::size_t>(c) * p, 0.f) {}
  float& at(int c, int p) { return data[static_cast<std::size_t>(c) * pillars + p]; }
  [[nodiscard]] float at(int c, int p) const { return data[static_cast<std::size_t>(c) * pillars + p]; }
};

/// Writes each used slot's feature column into its grid cell; zero elsewhere.
inline Tensor3 scatter(const PillarFeatures& features, std::span<const CellIndex> indices, GridDims dims) {
  if (indices.size() != static_cast<std::size_t>(features.pillars))
    throw InternalError("scatter: index count does not match feature columns");
  Tensor3 out(features.channels, dims.height, dims.width);
  std::vector<std::uint8_t> seen(static_cast<std::size_t>(dims.height) * dims.width, 0);
  for (int p = 0; p < features.pillars; ++p) {
    const CellIndex c = indices[p];
    if (!c.used()) continue;
    if (c.row >= dims.height || c.col >= dims.width || c.col < 0)
      throw InternalError("scatter: index outside the grid");
    auto& flag = seen[static_cast<std::size_t>(c.row) * dims.width + c.col];
    if (flag) throw InternalError("scatter: duplicate cell among used slots");
    flag = 1;
    for (int ch = 0; ch < features.channels; ++ch) out.at(ch, c.row, c.col) = features.at(ch, p);
  }
  return out;
}

/// Inverse of scatter on the used slots.
inline PillarFeatures gather(const Tensor3& image, std::span<const CellIndex> indices) {
  PillarFeatures out(image.channels, static_cast<int>(indices.size()));
  for (std::size_t p = 0; p < indices.size(); ++p) {
    if (!indices[p].used()) continue;
    for (int ch = 0; ch < image.channels; ++ch)
      out.at(ch, static_cast<int>(p)) = image.at(ch, indices[p].row, indices[p].col);
  }
  return out;
}

struct PillarStats {
  std::size_t non_empty = 0;  // B
  std::size_t cells = 0;      // H * W
  [[nodiscard]] double sparsity() const {
    return cells ? 1.0 - static_cast<double>(non_empty) / static_cast<double>(cells) : 1.0;
  }
};

inline PillarStats pillar_stats(const PillarAssignment& a) {
  return {a.pillars.size(), static_cast<std::size_t>(a.dims.height) * a.dims.width};
}

}  // namespace pointpillars
