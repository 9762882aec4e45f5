#pragma once

// Shared value types for the pillar pipeline: points, boxes, grid geometry,
// dense tensors and the error hierarchy every module throws from.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace pointpillars {

// ---------------------------------------------------------------------------
// Errors. Each maps onto one CLI exit code (see tools/pointpillars.cpp).

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid or inconsistent configuration (grid ranges, unknown keys, ...).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed or missing input data (point clouds, labels, calibration).
class DataError : public Error {
 public:
  using Error::Error;
};

/// Binary container problems: bad magic, version, truncation.
class FormatError : public DataError {
 public:
  using DataError::DataError;
};

/// A named tensor does not have the shape the architecture expects.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Argument outside the mathematical domain of an operation.
class DomainError : public Error {
 public:
  using Error::Error;
};

/// A precondition the caller was responsible for did not hold.
class InternalError : public Error {
 public:
  using Error::Error;
};

// ---------------------------------------------------------------------------

inline constexpr double kPi = std::numbers::pi;

/// Raw lidar return. Coordinates in meters, reflectance in [0, 1].
struct Point {
  float x = 0.f;
  float y = 0.f;
  float z = 0.f;
  float r = 0.f;

  friend bool operator==(const Point&, const Point&) = default;
};

/// Number of values in a decorated point.
inline constexpr int kDecoratedDims = 9;

/// Point augmented with its offset to the pillar point mean (xc, yc, zc) and
/// to the pillar's geometric x-y center (xp, yp).
struct DecoratedPoint {
  float x = 0.f, y = 0.f, z = 0.f, r = 0.f;
  float xc = 0.f, yc = 0.f, zc = 0.f;
  float xp = 0.f, yp = 0.f;

  [[nodiscard]] float operator[](int d) const {
    switch (d) {
      case 0: return x;
      case 1: return y;
      case 2: return z;
      case 3: return r;
      case 4: return xc;
      case 5: return yc;
      case 6: return zc;
      case 7: return xp;
      default: return yp;
    }
  }
};

/// Oriented 3D box. (x, y, z) is the box center; at theta = 0 the length l
/// runs along +x and the width w along y. theta is yaw about +z.
struct Box3D {
  double x = 0, y = 0, z = 0;
  double w = 1, l = 1, h = 1;
  double theta = 0;

  friend bool operator==(const Box3D&, const Box3D&) = default;
};

/// Maps any finite angle onto (-pi, pi].
inline double normalize_angle(double theta) {
  if (!std::isfinite(theta)) throw DomainError("normalize_angle: non-finite angle");
  double r = std::remainder(theta, 2.0 * kPi);  // [-pi, pi]
  if (r <= -kPi) r += 2.0 * kPi;
  return r;
}

// ---------------------------------------------------------------------------
// Grid

/// Bird's-eye-view discretization. Rows index y, columns index x; cell (0, 0)
/// covers [x_min, x_min + res) x [y_min, y_min + res). Cells are half-open, so
/// a point at exactly x_max or y_max falls outside the grid. The z range is
/// closed on both ends.
struct GridSpec {
  double x_min = 0.0, x_max = 70.4;
  double y_min = -40.0, y_max = 40.0;
  double z_min = -3.0, z_max = 1.0;
  double resolution = 0.16;
  int max_pillars = 12000;
  int max_points_per_pillar = 100;

  static GridSpec car() { return {}; }
  static GridSpec pedcyc() {
    GridSpec g;
    g.x_min = 0.0, g.x_max = 48.0;
    g.y_min = -20.0, g.y_max = 20.0;
    g.z_min = -2.5, g.z_max = 0.5;
    return g;
  }
};

struct GridDims {
  int height = 0;  // rows (y)
  int width = 0;   // columns (x)

  friend bool operator==(const GridDims&, const GridDims&) = default;
};

namespace detail {
inline int exact_cell_count(double extent, double res, const char* axis) {
  const double ratio = extent / res;
  const double rounded = std::round(ratio);
  if (rounded < 1.0 || std::abs(ratio - rounded) > 1e-6 * std::max(1.0, rounded))
    throw ConfigError(std::string("grid: ") + axis + " extent " + std::to_string(extent) +
                      " is not a positive integer multiple of resolution " + std::to_string(res));
  return static_cast<int>(rounded);
}
}  // namespace detail

/// Throws ConfigError unless every GridSpec invariant holds.
inline void validate(const GridSpec& g) {
  if (!(g.x_max > g.x_min) || !(g.y_max > g.y_min) || !(g.z_max > g.z_min))
    throw ConfigError("grid: each max must exceed its min");
  if (!(g.resolution > 0.0) || !std::isfinite(g.resolution))
    throw ConfigError("grid: resolution must be positive");
  if (g.max_pillars < 1 || g.max_points_per_pillar < 1)
    throw ConfigError("grid: max_pillars and max_points_per_pillar must be >= 1");
  detail::exact_cell_count(g.x_max - g.x_min, g.resolution, "x");
  detail::exact_cell_count(g.y_max - g.y_min, g.resolution, "y");
}

inline GridDims grid_dims(const GridSpec& g) {
  validate(g);
  return {detail::exact_cell_count(g.y_max - g.y_min, g.resolution, "y"),
          detail::exact_cell_count(g.x_max - g.x_min, g.resolution, "x")};
}

/// Shrinks x_max / y_max to the nearest lower multiple of the resolution.
/// Used by the resolution sweep, where e.g. 70.4 m is not a multiple of 0.12 m.
inline GridSpec snap_to_resolution(GridSpec g) {
  auto snap = [&](double lo, double hi) {
    const double n = std::floor((hi - lo) / g.resolution + 1e-6);
    return lo + n * g.resolution;
  };
  g.x_max = snap(g.x_min, g.x_max);
  g.y_max = snap(g.y_min, g.y_max);
  return g;
}

// ---------------------------------------------------------------------------
// Tensors

/// (C, H, W) feature map, row-major with W fastest.
struct Tensor3 {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<float> data;

  Tensor3() = default;
  Tensor3(int c, int h, int w, float fill = 0.f)
      : channels(c), height(h), width(w), data(static_cast<std::size_t>(c) * h * w, fill) {}

  [[nodiscard]] std::size_t size() const { return data.size(); }
  [[nodiscard]] std::size_t plane() const { return static_cast<std::size_t>(height) * width; }

  float& at(int c, int i, int j) { return data[(c * plane()) + static_cast<std::size_t>(i) * width + j]; }
  [[nodiscard]] float at(int c, int i, int j) const {
    return data[(c * plane()) + static_cast<std::size_t>(i) * width + j];
  }
  std::span<float> channel(int c) { return {data.data() + c * plane(), plane()}; }
  [[nodiscard]] std::span<const float> channel(int c) const { return {data.data() + c * plane(), plane()}; }

  [[nodiscard]] bool all_finite() const {
    for (float v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

/// Generic dense tensor with an explicit shape; used for parameters and
/// anything stored in the binary container.
struct Tensor {
  std::vector<std::uint32_t> shape;
  std::vector<float> data;

  Tensor() = default;
  explicit Tensor(std::vector<std::uint32_t> s, float fill = 0.f) : shape(std::move(s)) {
    data.assign(numel(shape), fill);
  }

  static std::size_t numel(std::span<const std::uint32_t> s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1},
                           [](std::size_t a, std::uint32_t b) { return a * b; });
  }
  [[nodiscard]] std::size_t size() const { return data.size(); }

  friend bool operator==(const Tensor&, const Tensor&) = default;
};

inline std::string shape_string(std::span<const std::uint32_t> s) {
  std::string out = "(";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + ")";
}

}  // namespace pointpillars
