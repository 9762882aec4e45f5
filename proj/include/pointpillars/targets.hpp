#pragma once

// Anchors, anchor/ground-truth matching and residual box coding.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "pointpillars/core.hpp"
#include "pointpillars/geometry.hpp"

namespace pointpillars {

struct ClassSpec {
  std::string name;
  double w = 1, l = 1, h = 1;  // anchor size
  double z_center = 0;
  double pos_threshold = 0.6;
  double neg_threshold = 0.45;

  static ClassSpec car() { return {"Car", 1.6, 3.9, 1.5, -1.0, 0.6, 0.45}; }
  static ClassSpec pedestrian() { return {"Pedestrian", 0.6, 0.8, 1.73, -0.6, 0.5, 0.35}; }
  static ClassSpec cyclist() { return {"Cyclist", 0.6, 1.76, 1.73, -0.6, 0.5, 0.35}; }
};

inline void validate(const ClassSpec& c) {
  if (!(c.w > 0 && c.l > 0 && c.h > 0)) throw ConfigError("class " + c.name + ": anchor dims must be positive");
  if (!(0.0 <= c.neg_threshold && c.neg_threshold < c.pos_threshold && c.pos_threshold <= 1.0))
    throw ConfigError("class " + c.name + ": need 0 <= neg_threshold < pos_threshold <= 1");
}

/// Anchor index <-> (row, col, orientation). Index = (row * W + col) * A + a.
struct AnchorLayout {
  int height = 0;
  int width = 0;
  int per_location = 2;

  struct Slot {
    int row, col, orientation;
    friend bool operator==(const Slot&, const Slot&) = default;
  };

  [[nodiscard]] std::size_t size() const { return static_cast<std::size_t>(height) * width * per_location; }
  [[nodiscard]] std::size_t index(int row, int col, int a) const {
    return (static_cast<std::size_t>(row) * width + col) * per_location + a;
  }
  [[nodiscard]] Slot slot(std::size_t idx) const {
    const int a = static_cast<int>(idx % per_location);
    const std::size_t loc = idx / per_location;
    return {static_cast<int>(loc / width), static_cast<int>(loc % width), a};
  }
};

inline AnchorLayout anchor_layout(const GridSpec& spec, int output_stride, int per_location = 2) {
  const GridDims d = grid_dims(spec);
  return {(d.height + output_stride - 1) / output_stride, (d.width + output_stride - 1) / output_stride,
          per_location};
}

/// One anchor per output cell and orientation {0, pi/2}, centered on the cell.
inline std::vector<Box3D> generate_anchors(const GridSpec& spec, const ClassSpec& cls, int output_stride) {
  validate(cls);
  const AnchorLayout layout = anchor_layout(spec, output_stride);
  const double step = spec.resolution * output_stride;
  std::vector<Box3D> anchors;
  anchors.reserve(layout.size());
  for (int r = 0; r < layout.height; ++r)
    for (int c = 0; c < layout.width; ++c)
      for (int a = 0; a < layout.per_location; ++a)
        anchors.push_back({spec.x_min + (c + 0.5) * step, spec.y_min + (r + 0.5) * step, cls.z_center, cls.w, cls.l,
                           cls.h, a == 0 ? 0.0 : kPi / 2});
  return anchors;
}

// ---------------------------------------------------------------------------
// Matching

enum class MatchLabel : std::int8_t { ignored = -1, negative = 0, positive = 1 };

struct MatchResult {
  std::vector<MatchLabel> labels;    // per anchor
  std::vector<std::int32_t> gt_index;  // matched gt for positives, -1 otherwise
  std::vector<double> max_iou;         // best IoU over all gts, per anchor

  [[nodiscard]] std::size_t count(MatchLabel l) const {
    return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), l));
  }
};

/// Matching rules:
///   - each gt's highest-IoU anchor is positive (ties -> lowest anchor index),
///     provided that IoU is non-zero;
///   - any anchor whose best IoU >= pos_threshold is positive;
///   - remaining anchors with best IoU < neg_threshold are negative;
///   - everything else is ignored.
/// IoU is the axis-aligned BEV IoU.
inline MatchResult match_anchors(std::span<const Box3D> anchors, std::span<const Box3D> gts, const ClassSpec& cls) {
  validate(cls);
  const std::size_t A = anchors.size(), G = gts.size();
  MatchResult m;
  m.labels.assign(A, MatchLabel::negative);
  m.gt_index.assign(A, -1);
  m.max_iou.assign(A, 0.0);
  if (G == 0) return m;

  std::vector<AlignedRect> anchor_rects(A), gt_rects(G);
  for (std::size_t i = 0; i < A; ++i) anchor_rects[i] = aligned_extent(anchors[i]);
  for (std::size_t g = 0; g < G; ++g) gt_rects[g] = aligned_extent(gts[g]);

  std::vector<double> gt_best(G, 0.0);
  std::vector<std::int64_t> gt_best_anchor(G, -1);
  for (std::size_t i = 0; i < A; ++i) {
    for (std::size_t g = 0; g < G; ++g) {
      const double iou = iou_aligned(anchor_rects[i], gt_rects[g]);
      if (iou > m.max_iou[i]) {
        m.max_iou[i] = iou;
        m.gt_index[i] = static_cast<std::int32_t>(g);
      }
      if (iou > gt_best[g]) {
        gt_best[g] = iou;
        gt_best_anchor[g] = static_cast<std::int64_t>(i);
      }
    }
  }
  for (std::size_t i = 0; i < A; ++i) {
    if (m.max_iou[i] >= cls.pos_threshold) {
      m.labels[i] = MatchLabel::positive;
    } else if (m.max_iou[i] < cls.neg_threshold) {
      m.labels[i] = MatchLabel::negative;
      m.gt_index[i] = -1;
    } else {
      m.labels[i] = MatchLabel::ignored;
      m.gt_index[i] = -1;
    }
  }
  for (std::size_t g = 0; g < G; ++g) {
    if (gt_best_anchor[g] < 0) continue;
    const auto i = static_cast<std::size_t>(gt_best_anchor[g]);
    m.labels[i] = MatchLabel::positive;
    m.gt_index[i] = static_cast<std::int32_t>(g);
  }
  return m;
}

// ---------------------------------------------------------------------------
// Box coding

struct Residuals {
  std::array<double, 7> v{};  // dx, dy, dz, dw, dl, dh, dtheta
  double& operator[](std::size_t i) { return v[i]; }
  double operator[](std::size_t i) const { return v[i]; }
};

struct EncodedBox {
  Residuals residuals;
  int direction = 1;  // 1 iff the relative yaw lies in [0, pi)
};

/// Heading hemisphere of a relative yaw: 1 for [0, pi), 0 for [-pi, 0).
inline int direction_bin(double relative_yaw) {
  const double r = normalize_angle(relative_yaw);
  return (r >= 0.0 && r < kPi) ? 1 : 0;
}

inline EncodedBox encode_box(const Box3D& gt, const Box3D& anchor) {
  if (!(gt.w > 0 && gt.l > 0 && gt.h > 0)) throw DomainError("encode_box: ground-truth dims must be positive");
  if (!(anchor.w > 0 && anchor.l > 0 && anchor.h > 0)) throw DomainError("encode_box: anchor dims must be positive");
  const double diag = std::sqrt(anchor.w * anchor.w + anchor.l * anchor.l);
  EncodedBox e;
  e.residuals = {{(gt.x - anchor.x) / diag, (gt.y - anchor.y) / diag, (gt.z - anchor.z) / anchor.h,
                  std::log(gt.w / anchor.w), std::log(gt.l / anchor.l), std::log(gt.h / anchor.h),
                  std::sin(gt.theta - anchor.theta)}};
  e.direction = direction_bin(gt.theta - anchor.theta);
  return e;
}

struct DecodedBox {
  Box3D box;
  bool clamped = false;  // |dtheta| > 1 was clamped
};

/// Inverse of encode_box. The yaw residual gives the relative yaw up to the
/// sine ambiguity; asin picks the branch in [-pi/2, pi/2] and the box is
/// turned by pi when that branch's heading hemisphere disagrees with
/// `direction`.
inline DecodedBox decode_box(const Residuals& r, const Box3D& anchor, int direction) {
  DecodedBox out;
  const double diag = std::sqrt(anchor.w * anchor.w + anchor.l * anchor.l);
  double dtheta = r[6];
  if (std::abs(dtheta) > 1.0) {
    dtheta = std::clamp(dtheta, -1.0, 1.0);
    out.clamped = true;
  }
  double rel = std::asin(dtheta);
  if (direction_bin(rel) != (direction ? 1 : 0)) rel += kPi;
  out.box = {anchor.x + r[0] * diag, anchor.y + r[1] * diag, anchor.z + r[2] * anchor.h,
             anchor.w * std::exp(r[3]), anchor.l * std::exp(r[4]), anchor.h * std::exp(r[5]),
             normalize_angle(anchor.theta + rel)};
  return out;
}

}  // namespace pointpillars
