#pragma once

// Training targets and the three-term detection loss with analytic gradients.
//
//   L = (beta_loc * L_loc + beta_cls * L_cls + beta_dir * L_dir) / N_pos
//
// L_loc: SmoothL1 over the 7 residuals of every positive anchor.
// L_cls: focal loss over every (anchor, class) logit that is not ignored.
// L_dir: 2-way softmax cross-entropy on the heading bin of positive anchors.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "pointpillars/core.hpp"
#include "pointpillars/net.hpp"
#include "pointpillars/targets.hpp"

namespace pointpillars {

struct LossWeights {
  double beta_loc = 2.0;
  double beta_cls = 1.0;
  double beta_dir = 0.2;
  double alpha = 0.25;
  double gamma = 2.0;
  double smooth_l1_transition = 1.0;
};

inline void validate(const LossWeights& w) {
  if (!(w.beta_loc > 0 && w.beta_cls > 0 && w.beta_dir > 0 && w.alpha > 0 && w.gamma > 0 &&
        w.smooth_l1_transition > 0))
    throw ConfigError("loss weights must all be positive");
  if (!(w.alpha < 1)) throw ConfigError("loss: alpha must be below 1");
}

struct ValueGrad {
  double value = 0;
  double grad = 0;
};

/// 0.5 x^2 / t for |x| < t, |x| - 0.5 t otherwise (t = 1 by default).
inline ValueGrad smooth_l1(double x, double t = 1.0) {
  const double ax = std::abs(x);
  if (ax < t) return {0.5 * x * x / t, x / t};
  return {ax - 0.5 * t, x > 0 ? 1.0 : -1.0};
}

inline double sigmoid(double z) {
  return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
}

inline constexpr double kProbClamp = 1e-7;

/// Focal loss on a probability. Positives: -alpha (1-p)^gamma log p.
/// Negatives: -(1-alpha) p^gamma log(1-p).
inline double focal_loss(double p, bool positive, double alpha, double gamma) {
  p = std::clamp(p, kProbClamp, 1.0 - kProbClamp);
  if (positive) return -alpha * std::pow(1.0 - p, gamma) * std::log(p);
  return -(1.0 - alpha) * std::pow(p, gamma) * std::log1p(-p);
}

/// Focal loss of a logit and its derivative with respect to the logit. The
/// derivative is zero where the probability clamp is active.
inline ValueGrad focal_loss_logit(double z, bool positive, double alpha, double gamma) {
  const double raw = sigmoid(z);
  const double p = std::clamp(raw, kProbClamp, 1.0 - kProbClamp);
  const bool clamped = p != raw;
  ValueGrad out;
  out.value = focal_loss(p, positive, alpha, gamma);
  if (clamped) return out;
  if (positive) {
    out.grad = alpha * std::pow(1.0 - p, gamma) * (gamma * p * std::log(p) - (1.0 - p));
  } else {
    out.grad = (1.0 - alpha) * std::pow(p, gamma) * (p - gamma * (1.0 - p) * std::log1p(-p));
  }
  return out;
}

struct DirLoss {
  double value = 0;
  std::array<double, 2> grad{};
};

/// Softmax cross-entropy over the two heading bins.
inline DirLoss direction_loss(std::span<const double, 2> logits, int target) {
  // Two-way softmax cross-entropy is softplus(other - target); written that
  // way it keeps full precision when the margin is large.
  const double d = logits[target ? 0 : 1] - logits[target ? 1 : 0];
  const double value = d > 0 ? d + std::log1p(std::exp(-d)) : std::log1p(std::exp(d));
  const double p_other = d > 0 ? 1.0 / (1.0 + std::exp(-d)) : std::exp(d) / (1.0 + std::exp(d));
  DirLoss out;
  out.value = value;
  out.grad[target ? 1 : 0] = -p_other;
  out.grad[target ? 0 : 1] = p_other;
  return out;
}

inline double total_loss(double loc, double cls, double dir, std::size_t n_pos, const LossWeights& w) {
  const double n = static_cast<double>(std::max<std::size_t>(n_pos, 1));
  return (w.beta_loc * loc + w.beta_cls * cls + w.beta_dir * dir) / n;
}

// ---------------------------------------------------------------------------
// Targets

/// Per-anchor training targets. An anchor here is a (location, orientation)
/// slot shared by all classes; each class has its own logit and label.
struct TrainingTargets {
  std::size_t num_anchors = 0;
  int num_classes = 1;
  std::vector<std::int8_t> cls;        // [anchor * num_classes + k]: 1, 0 or -1 (ignored)
  std::vector<std::uint8_t> positive;  // any class positive
  std::vector<double> box;             // [anchor * 7 + r], valid where positive
  std::vector<std::uint8_t> dir;       // heading bin, valid where positive
  std::size_t num_positive = 0;
};

/// Builds targets from one match per class. `anchors[k]` holds class k's
/// anchors in the shared slot layout; a slot positive for several classes
/// regresses toward the gt with the highest IoU.
inline TrainingTargets build_targets(const std::vector<std::vector<Box3D>>& anchors,
                                     const std::vector<std::vector<Box3D>>& gts, const std::vector<ClassSpec>& classes) {
  const int K = static_cast<int>(classes.size());
  if (K == 0 || anchors.size() != classes.size() || gts.size() != classes.size())
    throw InternalError("build_targets: need one anchor set and one gt list per class");
  TrainingTargets t;
  t.num_anchors = anchors[0].size();
  t.num_classes = K;
  t.cls.assign(t.num_anchors * K, 0);
  t.positive.assign(t.num_anchors, 0);
  t.box.assign(t.num_anchors * kBoxCodeSize, 0.0);
  t.dir.assign(t.num_anchors, 0);
  std::vector<double> best(t.num_anchors, -1.0);
  for (int k = 0; k < K; ++k) {
    if (anchors[k].size() != t.num_anchors) throw InternalError("build_targets: anchor sets differ in size");
    const MatchResult m = match_anchors(anchors[k], gts[k], classes[k]);
    for (std::size_t i = 0; i < t.num_anchors; ++i) {
      t.cls[i * K + k] = static_cast<std::int8_t>(m.labels[i]);
      if (m.labels[i] != MatchLabel::positive) continue;
      t.positive[i] = 1;
      if (m.max_iou[i] > best[i]) {
        best[i] = m.max_iou[i];
        const EncodedBox e = encode_box(gts[k][m.gt_index[i]], anchors[k][i]);
        std::copy(e.residuals.v.begin(), e.residuals.v.end(), t.box.begin() + i * kBoxCodeSize);
        t.dir[i] = static_cast<std::uint8_t>(e.direction);
      }
    }
  }
  t.num_positive = static_cast<std::size_t>(std::count(t.positive.begin(), t.positive.end(), 1));
  return t;
}

/// Raw network outputs flattened to the anchor-slot layout.
struct Predictions {
  std::size_t num_anchors = 0;
  int num_classes = 1;
  std::vector<double> cls;  // [anchor * num_classes + k] logits
  std::vector<double> box;  // [anchor * 7 + r]
  std::vector<double> dir;  // [anchor * 2 + bin] logits

  static Predictions zeros(std::size_t anchors, int classes) {
    return {anchors, classes, std::vector<double>(anchors * classes), std::vector<double>(anchors * kBoxCodeSize),
            std::vector<double>(anchors * kDirBins)};
  }
};

/// Reads head maps in the AnchorLayout order.
inline Predictions predictions_from_head(const HeadMaps& maps, const AnchorLayout& layout, int num_classes) {
  const int A = layout.per_location;
  if (maps.cls.channels != A * num_classes || maps.box.channels != A * kBoxCodeSize ||
      maps.dir.channels != A * kDirBins || maps.cls.height != layout.height || maps.cls.width != layout.width)
    throw ShapeError("head maps do not match the anchor layout");
  Predictions p = Predictions::zeros(layout.size(), num_classes);
  for (int r = 0; r < layout.height; ++r)
    for (int c = 0; c < layout.width; ++c)
      for (int a = 0; a < A; ++a) {
        const std::size_t i = layout.index(r, c, a);
        for (int k = 0; k < num_classes; ++k) p.cls[i * num_classes + k] = maps.cls.at(a * num_classes + k, r, c);
        for (int j = 0; j < kBoxCodeSize; ++j) p.box[i * kBoxCodeSize + j] = maps.box.at(a * kBoxCodeSize + j, r, c);
        for (int j = 0; j < kDirBins; ++j) p.dir[i * kDirBins + j] = maps.dir.at(a * kDirBins + j, r, c);
      }
  return p;
}

struct LossTerms {
  double loc = 0, cls = 0, dir = 0, total = 0;
  std::size_t num_positive = 0;
  bool no_positives = false;  // N_pos was 0 and 1 was used instead
};

struct AnchorTerms {
  double loc = 0, cls = 0, dir = 0;
};

/// Unweighted loss terms of one anchor slot. When `grad` is non-null the
/// gradient of the weighted, normalized loss with respect to that slot's
/// predictions is written into it.
inline AnchorTerms anchor_terms(const Predictions& pred, const TrainingTargets& t, const LossWeights& w,
                                std::size_t i, Predictions* grad = nullptr) {
  const int K = t.num_classes;
  const double norm = static_cast<double>(std::max<std::size_t>(t.num_positive, 1));
  AnchorTerms out;
  for (int k = 0; k < K; ++k) {
    const std::size_t ci = i * K + k;
    if (t.cls[ci] < 0) continue;
    const ValueGrad f = focal_loss_logit(pred.cls[ci], t.cls[ci] == 1, w.alpha, w.gamma);
    out.cls += f.value;
    if (grad) grad->cls[ci] = w.beta_cls * f.grad / norm;
  }
  if (!t.positive[i]) return out;
  for (int r = 0; r < kBoxCodeSize; ++r) {
    const std::size_t bi = i * kBoxCodeSize + r;
    const ValueGrad s = smooth_l1(pred.box[bi] - t.box[bi], w.smooth_l1_transition);
    out.loc += s.value;
    if (grad) grad->box[bi] = w.beta_loc * s.grad / norm;
  }
  const DirLoss d = direction_loss(std::span<const double, 2>(pred.dir.data() + i * kDirBins, 2), t.dir[i]);
  out.dir = d.value;
  if (grad)
    for (int b = 0; b < kDirBins; ++b) grad->dir[i * kDirBins + b] = w.beta_dir * d.grad[b] / norm;
  return out;
}

/// Loss and, when `grad` is non-null, its gradient with respect to every
/// prediction value (same layout as Predictions; ignored entries get 0).
inline LossTerms evaluate_loss(const Predictions& pred, const TrainingTargets& t, const LossWeights& w,
                               Predictions* grad = nullptr) {
  if (pred.num_anchors != t.num_anchors || pred.num_classes != t.num_classes)
    throw ShapeError("loss: predictions and targets disagree in shape");
  LossTerms out;
  out.num_positive = t.num_positive;
  out.no_positives = t.num_positive == 0;
  if (grad) *grad = Predictions::zeros(pred.num_anchors, t.num_classes);
  for (std::size_t i = 0; i < t.num_anchors; ++i) {
    const AnchorTerms a = anchor_terms(pred, t, w, i, grad);
    out.loc += a.loc, out.cls += a.cls, out.dir += a.dir;
  }
  out.total = total_loss(out.loc, out.cls, out.dir, t.num_positive, w);
  return out;
}

}  // namespace pointpillars
