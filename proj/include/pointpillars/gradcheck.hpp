#pragma once

// Central finite-difference check of the analytic loss gradient. Uses only
// the forward loss value, never the analytic gradient path it checks.

#include <algorithm>
#include <array>
#include <cmath>
#include <vector>

#include "pointpillars/loss.hpp"
#include "pointpillars/rng.hpp"

namespace pointpillars {

struct GradCheckReport {
  std::size_t checked = 0;
  std::size_t skipped_kink = 0;  // SmoothL1 transition or clamp within two steps
  double max_relative_error = 0;
  double max_absolute_error = 0;
};

/// Relative error |a - n| / max(|a|, |n|); 0 when both are exactly zero.
inline double relative_error(double analytic, double numeric) {
  const double scale = std::max(std::abs(analytic), std::abs(numeric));
  return scale == 0.0 ? 0.0 : std::abs(analytic - numeric) / scale;
}

/// Checks `samples` coordinates drawn uniformly from the entries that enter
/// the loss (non-ignored logits, box and direction values of positive
/// anchors). Box coordinates whose residual error lies within `step` of the
/// SmoothL1 transition, and logits within `step` of the probability clamp,
/// are redrawn, because a central difference across a kink measures a blend
/// of the two branches.
///
/// Every prediction value enters exactly one term of the loss sum (its focal,
/// SmoothL1 or direction term), so L(x + h) - L(x - h) equals the difference
/// of that one weighted, normalized term. Differencing the term instead of the
/// full sum keeps the result free of the rounding noise of adding up every
/// other term, which would otherwise swamp gradients near 1e-12.
inline GradCheckReport gradient_check(const Predictions& pred, const TrainingTargets& t, const LossWeights& w,
                                      std::size_t samples, double step, Rng& rng) {
  struct Coord {
    int kind;  // 0 cls, 1 box, 2 dir
    std::size_t index;
  };
  std::vector<Coord> active;
  const int K = t.num_classes;
  for (std::size_t i = 0; i < t.num_anchors; ++i) {
    for (int k = 0; k < K; ++k)
      if (t.cls[i * K + k] >= 0) active.push_back({0, i * K + k});
    if (!t.positive[i]) continue;
    for (int r = 0; r < kBoxCodeSize; ++r) active.push_back({1, i * kBoxCodeSize + r});
    for (int b = 0; b < kDirBins; ++b) active.push_back({2, i * kDirBins + b});
  }
  GradCheckReport report;
  if (active.empty()) return report;

  Predictions grad;
  evaluate_loss(pred, t, w, &grad);
  auto value_of = [&](const Predictions& p, const Coord& c) {
    return c.kind == 0 ? p.cls[c.index] : c.kind == 1 ? p.box[c.index] : p.dir[c.index];
  };

  std::size_t attempts = 0;
  while (report.checked < samples && attempts < samples * 20) {
    ++attempts;
    const Coord c = active[rng.uniform_int(active.size())];
    if (c.kind == 1) {
      const double err = std::abs(pred.box[c.index] - t.box[c.index]);
      if (std::abs(err - w.smooth_l1_transition) <= 2 * step) {
        ++report.skipped_kink;
        continue;
      }
    }
    if (c.kind == 0) {
      const double z = pred.cls[c.index];
      const double clamp_logit = std::log(kProbClamp / (1.0 - kProbClamp));  // sigmoid(z) = kProbClamp
      if (std::abs(std::abs(z) + clamp_logit) <= 2 * step) {
        ++report.skipped_kink;
        continue;
      }
    }
    const double norm = static_cast<double>(std::max<std::size_t>(t.num_positive, 1));
    auto term = [&](double v) {
      if (c.kind == 0) return w.beta_cls * focal_loss_logit(v, t.cls[c.index] == 1, w.alpha, w.gamma).value / norm;
      if (c.kind == 1) return w.beta_loc * smooth_l1(v - t.box[c.index], w.smooth_l1_transition).value / norm;
      const std::size_t i = c.index / kDirBins;
      std::array<double, 2> logits = {pred.dir[i * kDirBins], pred.dir[i * kDirBins + 1]};
      logits[c.index % kDirBins] = v;
      return w.beta_dir * direction_loss(logits, t.dir[i]).value / norm;
    };
    const double x0 = value_of(pred, c);
    const double plus = term(x0 + step), minus = term(x0 - step);
    const double numeric = (plus - minus) / (2 * step);
    const double analytic = value_of(grad, c);
    report.max_relative_error = std::max(report.max_relative_error, relative_error(analytic, numeric));
    report.max_absolute_error = std::max(report.max_absolute_error, std::abs(analytic - numeric));
    ++report.checked;
  }
  return report;
}

}  // namespace pointpillars
