#pragma once

// Slow reference implementations used to check the fast paths: sampling
// estimates of box overlap and a fixed-point formulation of greedy NMS.

#include <algorithm>
#include <cmath>
#include <vector>

#include "pointpillars/core.hpp"
#include "pointpillars/postproc.hpp"
#include "pointpillars/rng.hpp"

namespace pointpillars::oracle {

/// Membership test for one box with its rotation precomputed.
struct Footprint {
  Box3D b;
  double c, s;
  explicit Footprint(const Box3D& box) : b(box), c(std::cos(box.theta)), s(std::sin(box.theta)) {}
  [[nodiscard]] bool inside(double x, double y) const {
    const double dx = x - b.x, dy = y - b.y;
    return std::abs(c * dx + s * dy) <= 0.5 * b.l && std::abs(-s * dx + c * dy) <= 0.5 * b.w;
  }
  [[nodiscard]] bool inside(double x, double y, double z) const {
    return inside(x, y) && std::abs(z - b.z) <= 0.5 * b.h;
  }
};

inline bool inside_bev(const Box3D& b, double x, double y) { return Footprint(b).inside(x, y); }
inline bool inside_3d(const Box3D& b, double x, double y, double z) { return Footprint(b).inside(x, y, z); }

/// Monte Carlo BEV IoU: uniform samples over a square covering both boxes.
inline double monte_carlo_iou_bev(const Box3D& a, const Box3D& b, std::size_t samples, Rng& rng) {
  const double ra = 0.5 * std::hypot(a.w, a.l), rb = 0.5 * std::hypot(b.w, b.l);
  const double x0 = std::min(a.x - ra, b.x - rb), x1 = std::max(a.x + ra, b.x + rb);
  const double y0 = std::min(a.y - ra, b.y - rb), y1 = std::max(a.y + ra, b.y + rb);
  const Footprint fa(a), fb(b);
  std::size_t in_a = 0, in_b = 0, both = 0;
  for (std::size_t i = 0; i < samples; ++i) {
    const double x = rng.uniform(x0, x1), y = rng.uniform(y0, y1);
    const bool pa = fa.inside(x, y), pb = fb.inside(x, y);
    in_a += pa, in_b += pb, both += pa && pb;
  }
  const std::size_t uni = in_a + in_b - both;
  return uni ? static_cast<double>(both) / static_cast<double>(uni) : 0.0;
}

inline double monte_carlo_iou_3d(const Box3D& a, const Box3D& b, std::size_t samples, Rng& rng) {
  const double ra = 0.5 * std::hypot(a.w, a.l), rb = 0.5 * std::hypot(b.w, b.l);
  const double x0 = std::min(a.x - ra, b.x - rb), x1 = std::max(a.x + ra, b.x + rb);
  const double y0 = std::min(a.y - ra, b.y - rb), y1 = std::max(a.y + ra, b.y + rb);
  const double z0 = std::min(a.z - 0.5 * a.h, b.z - 0.5 * b.h), z1 = std::max(a.z + 0.5 * a.h, b.z + 0.5 * b.h);
  const Footprint fa(a), fb(b);
  std::size_t in_a = 0, in_b = 0, both = 0;
  for (std::size_t i = 0; i < samples; ++i) {
    const double x = rng.uniform(x0, x1), y = rng.uniform(y0, y1), z = rng.uniform(z0, z1);
    const bool pa = fa.inside(x, y, z), pb = fb.inside(x, y, z);
    in_a += pa, in_b += pb, both += pa && pb;
  }
  const std::size_t uni = in_a + in_b - both;
  return uni ? static_cast<double>(both) / static_cast<double>(uni) : 0.0;
}

/// Axis-aligned BEV rectangle of a box with its yaw folded onto the nearer
/// of 0 and pi/2.
inline std::array<double, 4> folded_rect(const Box3D& b) {
  const double t = std::abs(std::remainder(b.theta, kPi));  // [0, pi/2]
  const bool quarter = t > kPi / 4;
  const double ex = quarter ? b.w : b.l, ey = quarter ? b.l : b.w;
  return {b.x - 0.5 * ex, b.y - 0.5 * ey, b.x + 0.5 * ex, b.y + 0.5 * ey};
}

inline double folded_iou(const Box3D& a, const Box3D& b) {
  const auto ra = folded_rect(a), rb = folded_rect(b);
  const double iw = std::max(0.0, std::min(ra[2], rb[2]) - std::max(ra[0], rb[0]));
  const double ih = std::max(0.0, std::min(ra[3], rb[3]) - std::max(ra[1], rb[1]));
  const double inter = iw * ih;
  const double uni = (ra[2] - ra[0]) * (ra[3] - ra[1]) + (rb[2] - rb[0]) * (rb[3] - rb[1]) - inter;
  return uni > 0 ? inter / uni : 0.0;
}

/// Greedy NMS as the fixed point of
///   keep(i) = no earlier j with keep(j) and IoU(i, j) > threshold,
/// iterated from "keep everything" on the full pairwise IoU matrix.
/// Returns kept detections in processing order.
inline std::vector<Detection> fixed_point_nms(std::vector<Detection> dets, double threshold) {
  std::sort(dets.begin(), dets.end(), detection_before);
  const std::size_t n = dets.size();
  std::vector<std::vector<std::uint8_t>> overlaps(n, std::vector<std::uint8_t>(n, 0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) overlaps[i][j] = folded_iou(dets[i].box, dets[j].box) > threshold;
  std::vector<std::uint8_t> keep(n, 1);
  for (bool changed = true; changed;) {
    changed = false;
    std::vector<std::uint8_t> next(n, 1);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < i; ++j)
        if (keep[j] && overlaps[i][j]) next[i] = 0;
    if (next != keep) keep = std::move(next), changed = true;
  }
  std::vector<Detection> out;
  for (std::size_t i = 0; i < n; ++i)
    if (keep[i]) out.push_back(dets[i]);
  return out;
}

}  // namespace pointpillars::oracle
