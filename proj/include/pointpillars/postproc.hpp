#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <span>
#include <vector>

#include "pointpillars/geometry.hpp"
#include "pointpillars/loss.hpp"
#include "pointpillars/targets.hpp"

namespace pointpillars {

struct Detection {
  Box3D box;
  double score = 0;
  int class_id = 0;
  std::size_t anchor_index = 0;
};

/// Score desc, then anchor index, then class.
inline bool detection_before(const Detection& a, const Detection& b) {
  if (a.score != b.score) return a.score > b.score;
  if (a.anchor_index != b.anchor_index) return a.anchor_index < b.anchor_index;
  return a.class_id < b.class_id;
}

struct DecodeStats {
  std::size_t clamped_angles = 0;
};

/// Keeps every (anchor, class) whose logistic score reaches `score_threshold`
/// and decodes its box against that class's anchor, using the argmax heading
/// bin (ties resolve to bin 1). `anchors[k]` follows the prediction layout.
inline std::vector<Detection> decode_predictions(const Predictions& pred, const std::vector<std::vector<Box3D>>& anchors,
                                                 double score_threshold, DecodeStats* stats = nullptr) {
  const int K = pred.num_classes;
  if (anchors.size() != static_cast<std::size_t>(K)) throw InternalError("decode: one anchor set per class required");
  for (const auto& a : anchors)
    if (a.size() != pred.num_anchors) throw ShapeError("decode: anchor count does not match predictions");
  std::vector<Detection> out;
  for (std::size_t i = 0; i < pred.num_anchors; ++i) {
    for (int k = 0; k < K; ++k) {
      const double score = sigmoid(pred.cls[i * K + k]);
      if (score < score_threshold) continue;
      Residuals r;
      for (int j = 0; j < kBoxCodeSize; ++j) r[j] = pred.box[i * kBoxCodeSize + j];
      const int dir = pred.dir[i * kDirBins + 1] >= pred.dir[i * kDirBins] ? 1 : 0;
      const DecodedBox d = decode_box(r, anchors[k][i], dir);
      if (d.clamped && stats) ++stats->clamped_angles;
      out.push_back({d.box, score, k, i});
    }
  }
  std::sort(out.begin(), out.end(), detection_before);
  return out;
}

/// Greedy axis-aligned NMS: walk detections in (score desc, anchor index)
/// order and drop any whose axis-aligned BEV IoU with an already kept box is
/// strictly greater than `iou_threshold`.
inline std::vector<Detection> nms_axis_aligned(std::vector<Detection> dets, double iou_threshold = 0.5,
                                               std::size_t max_keep = 0) {
  std::stable_sort(dets.begin(), dets.end(), detection_before);
  std::vector<AlignedRect> rects(dets.size());
  for (std::size_t i = 0; i < dets.size(); ++i) rects[i] = aligned_extent(dets[i].box);
  std::vector<std::uint8_t> suppressed(dets.size(), 0);
  std::vector<Detection> kept;
  for (std::size_t i = 0; i < dets.size(); ++i) {
    if (suppressed[i]) continue;
    kept.push_back(dets[i]);
    if (max_keep && kept.size() >= max_keep) break;
    for (std::size_t j = i + 1; j < dets.size(); ++j)
      if (!suppressed[j] && iou_aligned(rects[i], rects[j]) > iou_threshold) suppressed[j] = 1;
  }
  return kept;
}

/// Per-class NMS over a mixed list; output sorted like the input order.
inline std::vector<Detection> nms_per_class(const std::vector<Detection>& dets, int num_classes, double iou_threshold,
                                            std::size_t max_keep_per_class = 0) {
  std::vector<Detection> out;
  for (int k = 0; k < num_classes; ++k) {
    std::vector<Detection> cls;
    for (const auto& d : dets)
      if (d.class_id == k) cls.push_back(d);
    auto kept = nms_axis_aligned(std::move(cls), iou_threshold, max_keep_per_class);
    out.insert(out.end(), kept.begin(), kept.end());
  }
  std::sort(out.begin(), out.end(), detection_before);
  return out;
}

}  // namespace pointpillars
