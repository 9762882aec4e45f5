#pragma once

// Average precision over KITTI-style frames for BEV and 3D box overlap.

#include <algorithm>
#include <cstdio>
#include <numeric>
#include <string>
#include <vector>

#include "pointpillars/geometry.hpp"
#include "pointpillars/kitti.hpp"

namespace pointpillars {

struct EvalObject {
  std::string type;
  Box3D box;  // lidar frame
  kitti::BBox2D bbox;
  double truncation = 0;
  int occlusion = 0;
  double score = 0;  // detections only
};

struct EvalFrame {
  std::vector<EvalObject> gts;
  std::vector<EvalObject> dets;
};

enum class OverlapMetric { bev, box3d };

inline const char* metric_name(OverlapMetric m) { return m == OverlapMetric::bev ? "bev" : "3d"; }

inline EvalObject eval_object(const kitti::LabelRecord& r, const kitti::CalibMatrices& calib) {
  EvalObject o;
  o.type = r.type;
  o.bbox = r.bbox;
  o.truncation = r.truncation;
  o.occlusion = r.occlusion;
  o.score = r.score.value_or(1.0);
  if (!r.dont_care() && r.h > 0 && r.w > 0 && r.l > 0) o.box = kitti::camera_to_lidar_box(r, calib);
  return o;
}

/// Classes whose ground truth is neither a hit nor a miss for `cls`.
inline bool neighbor_class(const std::string& cls, const std::string& type) {
  return (cls == "Car" && type == "Van") || (cls == "Pedestrian" && type == "Person_sitting");
}

inline double overlap(const Box3D& a, const Box3D& b, OverlapMetric m) {
  return m == OverlapMetric::bev ? iou_bev_rotated(a, b) : iou_3d(a, b);
}

/// Fraction of the detection's 2D box covered by `region`.
inline double coverage(const kitti::BBox2D& det, const kitti::BBox2D& region) {
  if (!det.valid() || !region.valid()) return 0.0;
  const double iw = std::min(det.right, region.right) - std::max(det.left, region.left);
  const double ih = std::min(det.bottom, region.bottom) - std::max(det.top, region.top);
  if (iw <= 0 || ih <= 0) return 0.0;
  return iw * ih / det.area();
}

struct ScoredOutcome {
  double score;
  bool true_positive;
  std::size_t frame, order;
};

/// Per-frame greedy matching in descending score. Each detection takes the
/// unmatched eligible gt with the highest overlap >= iou_threshold; failing
/// that, an unmatched ignored gt (out-of-band or neighbor class), which makes
/// the detection neutral. Unmatched detections inside a DontCare region, or
/// with a 2D box below the band's minimum height, are neutral too.
inline std::vector<ScoredOutcome> match_frame(const EvalFrame& f, std::size_t frame_index, const std::string& cls,
                                              const kitti::DifficultyBand& band, double iou_threshold,
                                              OverlapMetric metric, std::size_t* eligible_gts) {
  std::vector<int> gt_kind(f.gts.size(), 0);  // 1 eligible, 2 ignored, 0 irrelevant
  std::vector<const kitti::BBox2D*> dont_care;
  for (std::size_t g = 0; g < f.gts.size(); ++g) {
    const EvalObject& gt = f.gts[g];
    if (gt.type == "DontCare") {
      dont_care.push_back(&gt.bbox);
      continue;
    }
    kitti::LabelRecord r;
    r.bbox = gt.bbox, r.occlusion = gt.occlusion, r.truncation = gt.truncation;
    if (gt.type == cls) gt_kind[g] = kitti::in_band(r, band) ? 1 : 2;
    else if (neighbor_class(cls, gt.type)) gt_kind[g] = 2;
  }
  *eligible_gts += static_cast<std::size_t>(std::count(gt_kind.begin(), gt_kind.end(), 1));

  std::vector<std::size_t> order;
  for (std::size_t d = 0; d < f.dets.size(); ++d)
    if (f.dets[d].type == cls) order.push_back(d);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return f.dets[a].score > f.dets[b].score; });

  std::vector<std::uint8_t> used(f.gts.size(), 0);
  std::vector<ScoredOutcome> out;
  for (std::size_t d : order) {
    const EvalObject& det = f.dets[d];
    auto best_of_kind = [&](int kind) {
      std::ptrdiff_t best = -1;
      double best_iou = iou_threshold;
      for (std::size_t g = 0; g < f.gts.size(); ++g) {
        if (gt_kind[g] != kind || used[g]) continue;
        const double iou = overlap(det.box, f.gts[g].box, metric);
        if (iou >= best_iou && (best < 0 || iou > best_iou)) {
          best = static_cast<std::ptrdiff_t>(g);
          best_iou = iou;
        }
      }
      return best;
    };
    if (const auto g = best_of_kind(1); g >= 0) {
      used[g] = 1;
      out.push_back({det.score, true, frame_index, d});
      continue;
    }
    if (const auto g = best_of_kind(2); g >= 0) {
      used[g] = 1;
      continue;
    }
    if (det.bbox.valid() && det.bbox.height() < band.min_height_px) continue;
    const bool in_dont_care = std::any_of(dont_care.begin(), dont_care.end(),
                                          [&](const kitti::BBox2D* r) { return coverage(det.bbox, *r) > 0.5; });
    if (in_dont_care) continue;
    out.push_back({det.score, false, frame_index, d});
  }
  return out;
}

/// Interpolated AP: mean over the recall points of the best precision at any
/// recall >= that point. 11 points are {0, 0.1, ..., 1}; 40 points are
/// {1/40, ..., 1}. No eligible ground truth gives 0.
inline double average_precision(const std::vector<EvalFrame>& frames, const std::string& cls, kitti::Difficulty band,
                                double iou_threshold, OverlapMetric metric, int recall_points = 11) {
  if (recall_points != 11 && recall_points != 40) throw ConfigError("recall_points must be 11 or 40");
  const auto& b = kitti::kDifficultyBands[static_cast<int>(band)];
  std::size_t n_gt = 0;
  std::vector<ScoredOutcome> all;
  for (std::size_t i = 0; i < frames.size(); ++i) {
    auto o = match_frame(frames[i], i, cls, b, iou_threshold, metric, &n_gt);
    all.insert(all.end(), o.begin(), o.end());
  }
  if (n_gt == 0 || all.empty()) return 0.0;
  std::sort(all.begin(), all.end(), [](const ScoredOutcome& a, const ScoredOutcome& c) {
    if (a.score != c.score) return a.score > c.score;
    if (a.frame != c.frame) return a.frame < c.frame;
    return a.order < c.order;
  });

  std::vector<double> precision(all.size()), recall(all.size());
  std::size_t tp = 0;
  for (std::size_t i = 0; i < all.size(); ++i) {
    tp += all[i].true_positive ? 1 : 0;
    precision[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
    recall[i] = static_cast<double>(tp) / static_cast<double>(n_gt);
  }
  // suffix max of precision
  for (std::size_t i = all.size() - 1; i-- > 0;) precision[i] = std::max(precision[i], precision[i + 1]);

  double sum = 0;
  for (int k = 0; k < recall_points; ++k) {
    const double r = recall_points == 11 ? k / 10.0 : (k + 1) / 40.0;
    const auto it = std::find_if(recall.begin(), recall.end(), [&](double x) { return x >= r - 1e-12; });
    if (it != recall.end()) sum += precision[static_cast<std::size_t>(it - recall.begin())];
  }
  return sum / recall_points;
}

struct ApRow {
  std::string cls;
  kitti::Difficulty band;
  OverlapMetric metric;
  double ap;
};

struct EvalSettings {
  double iou_car = 0.7;
  double iou_pedestrian = 0.5;
  double iou_cyclist = 0.5;
  int recall_points = 11;

  [[nodiscard]] double iou_for(const std::string& cls) const {
    if (cls == "Car") return iou_car;
    if (cls == "Pedestrian") return iou_pedestrian;
    return iou_cyclist;
  }
};

inline std::vector<ApRow> evaluate(const std::vector<EvalFrame>& frames, const std::vector<std::string>& classes,
                                   const EvalSettings& s) {
  std::vector<ApRow> rows;
  for (const auto& cls : classes)
    for (OverlapMetric m : {OverlapMetric::bev, OverlapMetric::box3d})
      for (const auto& band : kitti::kDifficultyBands)
        rows.push_back(
            {cls, band.band, m, average_precision(frames, cls, band.band, s.iou_for(cls), m, s.recall_points)});
  return rows;
}

/// Plain-text table, one line per (class, metric) with easy/moderate/hard AP.
inline std::string format_report(const std::vector<ApRow>& rows, int recall_points) {
  std::string out = "# AP (" + std::to_string(recall_points) + "-point)\n";
  out += "class       metric   easy      moderate  hard\n";
  char line[160];
  for (std::size_t i = 0; i + 2 < rows.size(); i += 3) {
    std::snprintf(line, sizeof line, "%-11s %-8s %-9.4f %-9.4f %.4f\n", rows[i].cls.c_str(),
                  metric_name(rows[i].metric), rows[i].ap, rows[i + 1].ap, rows[i + 2].ap);
    out += line;
  }
  return out;
}

}  // namespace pointpillars
