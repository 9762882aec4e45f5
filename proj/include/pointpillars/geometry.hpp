#pragma once

// Box geometry in 64-bit: BEV corners, point membership, axis-aligned and
// exact rotated IoU (convex polygon clipping), 3D IoU.

#include <algorithm>
#include <array>
#include <cmath>
#include <vector>

#include "pointpillars/core.hpp"

namespace pointpillars {

struct Vec2 {
  double x = 0, y = 0;
};

inline Vec2 operator-(Vec2 a, Vec2 b) { return {a.x - b.x, a.y - b.y}; }
inline Vec2 operator+(Vec2 a, Vec2 b) { return {a.x + b.x, a.y + b.y}; }
inline Vec2 operator*(double s, Vec2 a) { return {s * a.x, s * a.y}; }
inline double cross(Vec2 a, Vec2 b) { return a.x * b.y - a.y * b.x; }

/// Counter-clockwise BEV corners.
inline std::array<Vec2, 4> bev_corners(const Box3D& b) {
  const double c = std::cos(b.theta), s = std::sin(b.theta);
  const double hl = 0.5 * b.l, hw = 0.5 * b.w;
  const std::array<Vec2, 4> local = {{{hl, hw}, {-hl, hw}, {-hl, -hw}, {hl, -hw}}};
  std::array<Vec2, 4> out;
  for (int i = 0; i < 4; ++i) out[i] = {b.x + c * local[i].x - s * local[i].y, b.y + s * local[i].x + c * local[i].y};
  return out;
}

/// Shoelace area; positive for counter-clockwise vertex order.
inline double signed_area(const std::vector<Vec2>& poly) {
  double a = 0;
  for (std::size_t i = 0, n = poly.size(); i < n; ++i) a += cross(poly[i], poly[(i + 1) % n]);
  return 0.5 * a;
}

/// Sutherland-Hodgman clip of `subject` by convex `clip`, both counter-clockwise.
inline std::vector<Vec2> clip_convex(std::vector<Vec2> subject, const std::vector<Vec2>& clip) {
  for (std::size_t e = 0, n = clip.size(); e < n && !subject.empty(); ++e) {
    const Vec2 a = clip[e], b = clip[(e + 1) % n];
    const Vec2 edge = b - a;
    auto side = [&](Vec2 p) { return cross(edge, p - a); };  // >= 0 inside (left of edge)
    std::vector<Vec2> out;
    out.reserve(subject.size() + 2);
    for (std::size_t i = 0, m = subject.size(); i < m; ++i) {
      const Vec2 p = subject[i], q = subject[(i + 1) % m];
      const double sp = side(p), sq = side(q);
      if (sp >= 0) out.push_back(p);
      if ((sp >= 0) != (sq >= 0)) out.push_back(p + (sp / (sp - sq)) * (q - p));
    }
    subject = std::move(out);
  }
  return subject;
}

inline constexpr double kDegenerateArea = 1e-12;

/// Area of the intersection of the two rotated BEV rectangles.
inline double bev_intersection_area(const Box3D& a, const Box3D& b) {
  const auto ca = bev_corners(a), cb = bev_corners(b);
  const std::vector<Vec2> pa(ca.begin(), ca.end()), pb(cb.begin(), cb.end());
  const auto inter = clip_convex(pa, pb);
  if (inter.size() < 3) return 0.0;
  return std::max(0.0, signed_area(inter));
}

/// Exact rotated BEV IoU. Boxes with near-zero area give 0 and set
/// *degenerate when provided.
inline double iou_bev_rotated(const Box3D& a, const Box3D& b, bool* degenerate = nullptr) {
  const double area_a = a.w * a.l, area_b = b.w * b.l;
  if (degenerate) *degenerate = false;
  if (!(area_a > kDegenerateArea) || !(area_b > kDegenerateArea)) {
    if (degenerate) *degenerate = true;
    return 0.0;
  }
  const double inter = bev_intersection_area(a, b);
  const double iou = inter / (area_a + area_b - inter);
  return std::clamp(iou, 0.0, 1.0);
}

inline double z_overlap(const Box3D& a, const Box3D& b) {
  const double lo = std::max(a.z - 0.5 * a.h, b.z - 0.5 * b.h);
  const double hi = std::min(a.z + 0.5 * a.h, b.z + 0.5 * b.h);
  return std::max(0.0, hi - lo);
}

inline double iou_3d(const Box3D& a, const Box3D& b, bool* degenerate = nullptr) {
  const double va = a.w * a.l * a.h, vb = b.w * b.l * b.h;
  if (degenerate) *degenerate = false;
  if (!(va > kDegenerateArea) || !(vb > kDegenerateArea)) {
    if (degenerate) *degenerate = true;
    return 0.0;
  }
  const double dz = z_overlap(a, b);
  if (dz <= 0.0) return 0.0;
  const double inter = bev_intersection_area(a, b) * dz;
  return std::clamp(inter / (va + vb - inter), 0.0, 1.0);
}

/// Axis-aligned BEV extent [x0, x1] x [y0, y1].
struct AlignedRect {
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;
};

/// Axis-aligned BEV footprint with the yaw folded to the nearest multiple of
/// 90 degrees: the length runs along x unless |sin theta| > |cos theta|.
inline AlignedRect aligned_extent(const Box3D& b) {
  const bool swap = std::abs(std::sin(b.theta)) > std::abs(std::cos(b.theta));
  const double ex = swap ? b.w : b.l, ey = swap ? b.l : b.w;
  return {b.x - 0.5 * ex, b.y - 0.5 * ey, b.x + 0.5 * ex, b.y + 0.5 * ey};
}

inline double iou_aligned(const AlignedRect& a, const AlignedRect& b) {
  const double iw = std::min(a.x1, b.x1) - std::max(a.x0, b.x0);
  const double ih = std::min(a.y1, b.y1) - std::max(a.y0, b.y0);
  if (iw <= 0 || ih <= 0) return 0.0;
  const double inter = iw * ih;
  const double uni = (a.x1 - a.x0) * (a.y1 - a.y0) + (b.x1 - b.x0) * (b.y1 - b.y0) - inter;
  return uni > 0 ? inter / uni : 0.0;
}

/// 2D IoU of the axis-aligned BEV footprints, used for anchor matching and NMS.
inline double iou2d_axis_aligned(const Box3D& a, const Box3D& b) {
  return iou_aligned(aligned_extent(a), aligned_extent(b));
}

// ---------------------------------------------------------------------------
// Box frames

struct Vec3 {
  double x = 0, y = 0, z = 0;
};

/// World -> box-local coordinates (origin at the center, +x along the length).
inline Vec3 to_box_frame(const Box3D& b, Vec3 p) {
  const double c = std::cos(b.theta), s = std::sin(b.theta);
  const double dx = p.x - b.x, dy = p.y - b.y;
  return {c * dx + s * dy, -s * dx + c * dy, p.z - b.z};
}

inline Vec3 from_box_frame(const Box3D& b, Vec3 q) {
  const double c = std::cos(b.theta), s = std::sin(b.theta);
  return {b.x + c * q.x - s * q.y, b.y + s * q.x + c * q.y, b.z + q.z};
}

/// Closed-box membership test.
inline bool point_in_box(const Box3D& b, Vec3 p, double margin = 0.0) {
  const Vec3 q = to_box_frame(b, p);
  return std::abs(q.x) <= 0.5 * b.l + margin && std::abs(q.y) <= 0.5 * b.w + margin &&
         std::abs(q.z) <= 0.5 * b.h + margin;
}

inline bool point_in_box(const Box3D& b, const Point& p, double margin = 0.0) {
  return point_in_box(b, Vec3{p.x, p.y, p.z}, margin);
}

/// Eight 3D corners: the four BEV corners at the bottom, then at the top.
inline std::array<Vec3, 8> box_corners(const Box3D& b) {
  const auto bev = bev_corners(b);
  std::array<Vec3, 8> out;
  for (int i = 0; i < 4; ++i) {
    out[i] = {bev[i].x, bev[i].y, b.z - 0.5 * b.h};
    out[i + 4] = {bev[i].x, bev[i].y, b.z + 0.5 * b.h};
  }
  return out;
}

}  // namespace pointpillars
