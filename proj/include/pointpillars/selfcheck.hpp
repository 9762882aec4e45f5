#pragma once

// Invariant suite behind `pointpillars selfcheck`: quick versions of the
// module properties on synthetic fixtures with fixed seeds.

#include <chrono>
#include <functional>
#include <iostream>
#include <string>
#include <vector>

#include "pointpillars/commands.hpp"
#include "pointpillars/oracles.hpp"

namespace pointpillars {

struct CheckResult {
  std::string name;
  bool pass = false;
  std::string detail;
};

namespace selfcheck_detail {

inline std::string shape(int a, int b, int c) { return fmt("(%d,%d,%d)", a, b, c); }

/// Car settings end to end: (9,P,N) -> (C,P) -> (C,H,W) -> backbone -> heads.
inline CheckResult shape_chain(std::uint64_t seed) {
  const auto t0 = std::chrono::steady_clock::now();
  RunConfig cfg;
  const GridSpec g = cfg.grid;
  const Architecture arch = Architecture::car();
  Rng init(seed);
  const ParamSet params = init_params(init, arch);
  const Scene s = synthetic::make_scene(seed);
  const auto pts = kitti::fov_filter(s.points, kitti::CalibMatrices::kitti_typical(), 1242, 375);
  Rng rng(seed);
  const PillarTensor t = pillarize(pts, g, rng);
  const PillarFeatures feats = pfn_forward(t, params);
  const Tensor3 image = scatter(feats, t.indices, t.dims);
  const Tensor3 bb = backbone_forward(image, params);
  const HeadMaps maps = head_forward(bb, params);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  std::string got = fmt("(%d,%d,%d)", kDecoratedDims, t.max_pillars, t.max_points) + " -> " +
                    fmt("(%d,%d)", feats.channels, feats.pillars) + " -> " +
                    shape(image.channels, image.height, image.width) + " -> " + shape(bb.channels, bb.height, bb.width) +
                    " -> " + fmt("(%d/%d/%d,%d,%d)", maps.cls.channels, maps.box.channels, maps.dir.channels,
                                 maps.cls.height, maps.cls.width);
  const std::string want = "(9,12000,100) -> (64,12000) -> (64,500,440) -> (384,250,220) -> (2/14/4,250,220)";
  const bool finite = bb.all_finite() && maps.cls.all_finite() && maps.box.all_finite() && maps.dir.all_finite();
  return {"shape chain (car)", got == want && finite && secs < 60.0, got + fmt(", %.1f s", secs)};
}

inline CheckResult weights_container(std::uint64_t seed, const std::filesystem::path& scratch) {
  Rng rng(seed);
  const Architecture arch = Architecture::car(8);
  const ParamSet p = init_params(rng, arch);
  const auto path = scratch / "selfcheck_weights.ppw";
  save_params(p, path);
  const ParamSet q = load_params(path, arch);
  if (q.tensors() != p.tensors()) return {"weights container", false, "round trip changed values"};

  auto bytes = read_file_bytes(path);
  bytes[0] ^= 0xff;
  write_file_bytes(path, bytes);
  std::string corrupt_msg;
  try {
    (void)load_params(path, arch);
  } catch (const FormatError& e) {
    corrupt_msg = e.what();
  }
  bytes[0] ^= 0xff;
  bytes.resize(bytes.size() - 3);
  write_file_bytes(path, bytes);
  std::string trunc_msg;
  try {
    (void)load_params(path, arch);
  } catch (const FormatError& e) {
    trunc_msg = e.what();
  }
  TensorMap bad = p.tensors();
  bad["head.box.weight"].shape = {13, 48, 1, 1};
  bad["head.box.weight"].data.resize(13 * 48);
  std::string shape_msg;
  try {
    ParamSet(arch, bad);
  } catch (const ShapeError& e) {
    shape_msg = e.what();
  }
  std::filesystem::remove(path);
  const bool ok = !corrupt_msg.empty() && !trunc_msg.empty() && shape_msg.find("head.box.weight") != std::string::npos;
  return {"weights container", ok, "corrupt: " + corrupt_msg + "; truncated: " + trunc_msg + "; mis-shaped: " + shape_msg};
}

inline CheckResult loss_formulas() {
  const double f = focal_loss(0.5, true, 0.25, 2.0);
  const bool sl1 = smooth_l1(0).value == 0.0 && smooth_l1(1).value == 0.5 && smooth_l1(2).value == 1.5;
  LossWeights w;
  const double total = total_loss(1.0, 1.0, 1.0, 2, w);  // (2 + 1 + 0.2) / 2
  Box3D anchor{0, 0, 0, 1.6, 3.9, 1.5, 0};
  Box3D gt = anchor;
  gt.theta = kPi;
  const double dtheta = encode_box(gt, anchor).residuals[6];
  const bool ok = std::abs(f - 0.043322) <= 1e-6 && sl1 && total == 1.6 && std::abs(dtheta) < 1e-12;
  return {"loss formulas", ok, fmt("focal(0.5)=%.7f total=%.17g dtheta(pi)=%.1e", f, total, dtheta)};
}

/// Small random problem: 400 anchors, 2 classes, random logits and residuals.
inline CheckResult gradient(std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t A = 400;
  TrainingTargets t;
  t.num_anchors = A, t.num_classes = 2;
  t.cls.resize(A * 2), t.positive.resize(A), t.box.resize(A * kBoxCodeSize), t.dir.resize(A);
  Predictions p = Predictions::zeros(A, 2);
  for (std::size_t i = 0; i < A; ++i) {
    for (int k = 0; k < 2; ++k) {
      t.cls[i * 2 + k] = static_cast<std::int8_t>(static_cast<int>(rng.uniform_int(5)) < 1 ? 1 : rng.uniform_int(4) == 0 ? -1 : 0);
      p.cls[i * 2 + k] = rng.normal(0, 3);
    }
    t.positive[i] = t.cls[i * 2] == 1 || t.cls[i * 2 + 1] == 1;
    for (int r = 0; r < kBoxCodeSize; ++r) {
      t.box[i * kBoxCodeSize + r] = rng.normal(0, 0.5);
      p.box[i * kBoxCodeSize + r] = rng.normal(0, 1.5);
    }
    t.dir[i] = static_cast<std::uint8_t>(rng.uniform_int(2));
    p.dir[i * 2] = rng.normal(0, 2), p.dir[i * 2 + 1] = rng.normal(0, 2);
  }
  t.num_positive = static_cast<std::size_t>(std::count(t.positive.begin(), t.positive.end(), 1));
  const GradCheckReport r = gradient_check(p, t, LossWeights{}, 300, 1e-3, rng);
  return {"gradient check", r.checked == 300 && r.max_relative_error < 1e-4,
          fmt("%zu coords, max rel err %.2e", r.checked, r.max_relative_error)};
}

inline Box3D random_box(Rng& rng, double spread) {
  return {rng.uniform(-spread, spread), rng.uniform(-spread, spread), rng.uniform(-0.5, 0.5), rng.uniform(0.5, 3),
          rng.uniform(0.5, 5), rng.uniform(0.5, 2), rng.uniform(-kPi, kPi)};
}

inline CheckResult geometry(std::uint64_t seed) {
  Rng rng(seed);
  double worst_iou = 0;
  for (int i = 0; i < 10; ++i) {
    const Box3D a = random_box(rng, 1), b = random_box(rng, 1);
    worst_iou = std::max(worst_iou, std::abs(iou_bev_rotated(a, b) - oracle::monte_carlo_iou_bev(a, b, 200000, rng)));
  }
  int nms_mismatch = 0;
  for (int s = 0; s < 100; ++s) {
    std::vector<Detection> dets;
    const int n = 1 + static_cast<int>(rng.uniform_int(30));
    for (int i = 0; i < n; ++i)
      dets.push_back({random_box(rng, 6), std::round(rng.uniform01() * 10) / 10, 0, static_cast<std::size_t>(i)});
    const auto fast = nms_axis_aligned(dets, 0.5), ref = oracle::fixed_point_nms(dets, 0.5);
    bool same = fast.size() == ref.size();
    for (std::size_t i = 0; same && i < fast.size(); ++i) same = fast[i].anchor_index == ref[i].anchor_index;
    nms_mismatch += !same;
  }
  double worst_code = 0;
  for (int i = 0; i < 1000; ++i) {
    const Box3D anchor{rng.uniform(-40, 40), rng.uniform(-40, 40), -1, 1.6, 3.9, 1.5, rng.bernoulli(0.5) ? 0 : kPi / 2};
    Box3D gt = random_box(rng, 40);
    gt.theta = normalize_angle(anchor.theta + rng.uniform(-kPi / 2, kPi / 2));
    const EncodedBox e = encode_box(gt, anchor);
    const Box3D d = decode_box(e.residuals, anchor, e.direction).box;
    worst_code = std::max({worst_code, std::abs(d.x - gt.x), std::abs(d.y - gt.y), std::abs(d.z - gt.z),
                           std::abs(d.w - gt.w), std::abs(d.l - gt.l), std::abs(d.h - gt.h),
                           std::abs(normalize_angle(d.theta - gt.theta))});
  }
  const bool ok = worst_iou < 1e-2 && nms_mismatch == 0 && worst_code < 1e-5;
  return {"geometry", ok,
          fmt("IoU vs sampling %.1e, NMS mismatches %d/100, box code round trip %.1e", worst_iou, nms_mismatch,
              worst_code)};
}

inline CheckResult matching() {
  GridSpec g;
  g.x_min = 0, g.x_max = 8, g.y_min = 0, g.y_max = 8, g.resolution = 1;
  const ClassSpec car = ClassSpec::car();
  const auto anchors = generate_anchors(g, car, 1);
  // gt identical to the anchor at cell (2, 2), orientation 0
  const std::vector<Box3D> gts = {{2.5, 2.5, -1, 1.6, 3.9, 1.5, 0}};
  const MatchResult m = match_anchors(anchors, gts, car);
  const AnchorLayout L = anchor_layout(g, 1);
  const bool exact = m.labels[L.index(2, 2, 0)] == MatchLabel::positive;
  std::size_t bad = 0;
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    const double iou = iou2d_axis_aligned(anchors[i], gts[0]);
    const MatchLabel want = iou >= car.pos_threshold || i == L.index(2, 2, 0) ? MatchLabel::positive
                            : iou < car.neg_threshold                         ? MatchLabel::negative
                                                                              : MatchLabel::ignored;
    bad += m.labels[i] != want;
  }
  return {"anchor matching", exact && bad == 0, fmt("%zu label mismatches", bad)};
}

inline CheckResult ap_evaluator() {
  auto obj = [](const char* type, double x, double score) {
    EvalObject o;
    o.type = type;
    o.box = {x, 0, -1, 1.6, 3.9, 1.5, 0};
    o.bbox = {100, 100, 200, 200};
    o.score = score;
    return o;
  };
  EvalFrame f;
  f.gts = {obj("Car", 10, 1), obj("Car", 20, 1)};
  f.dets = {obj("Car", 10, 0.9), obj("Car", 40, 0.8), obj("Car", 20, 0.7)};
  const double ap = average_precision({f}, "Car", kitti::Difficulty::easy, 0.7, OverlapMetric::bev);
  EvalFrame perfect = f;
  perfect.dets = {obj("Car", 10, 1), obj("Car", 20, 1)};
  EvalFrame empty = f;
  empty.dets.clear();
  const double ap1 = average_precision({perfect}, "Car", kitti::Difficulty::easy, 0.7, OverlapMetric::box3d);
  const double ap0 = average_precision({empty}, "Car", kitti::Difficulty::easy, 0.7, OverlapMetric::bev);
  return {"AP evaluator", std::abs(ap - 0.8485) <= 1e-4 && ap1 == 1.0 && ap0 == 0.0,
          fmt("hand corpus %.4f, perfect %.1f, empty %.1f", ap, ap1, ap0)};
}

/// Shuffled slots and extra padding leave the PFN output unchanged.
inline CheckResult pfn_invariance(std::uint64_t seed) {
  Rng rng(seed);
  const ParamSet params = init_params(rng, Architecture::car(16));
  GridSpec g;
  g.max_pillars = 64, g.max_points_per_pillar = 32;
  std::vector<Point> pts;
  for (int i = 0; i < 600; ++i)
    pts.push_back({static_cast<float>(rng.uniform(10, 12)), static_cast<float>(rng.uniform(-1, 1)),
                   static_cast<float>(rng.uniform(-2, 0)), static_cast<float>(rng.uniform01())});
  Rng r1(seed);
  const PillarTensor base = pillarize(pts, g, r1);
  const PillarFeatures ref = pfn_forward(base, params);

  PillarTensor shuffled = base;
  for (int p = 0; p < base.max_pillars; ++p) {
    const int n = base.valid_counts[p];
    for (int i = n - 1; i > 0; --i) {
      const int j = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(i + 1)));
      for (int d = 0; d < kDecoratedDims; ++d) std::swap(shuffled.at(d, p, i), shuffled.at(d, p, j));
    }
  }
  GridSpec wide = g;
  wide.max_points_per_pillar = 57;
  Rng r2(seed);
  const PillarTensor padded = pillarize(pts, wide, r2);
  const PillarFeatures a = pfn_forward(shuffled, params), b = pfn_forward(padded, params);
  const bool ok = a.data == ref.data && b.data == ref.data;
  return {"PFN permutation and padding invariance", ok, ok ? "bit-identical" : "outputs differ"};
}

inline CheckResult resolution_sweep(std::uint64_t seed) {
  const Scene s = synthetic::make_scene(seed);
  const auto pts = kitti::fov_filter(s.points, kitti::CalibMatrices::kitti_typical(), 1242, 375);
  std::vector<double> counts;
  std::string detail;
  for (double r : {0.12, 0.16, 0.20, 0.24, 0.28}) {
    GridSpec g;
    g.resolution = r;
    g = snap_to_resolution(g);
    counts.push_back(static_cast<double>(assign_pillars(pts, g).pillars.size()));
    detail += fmt("%s%.0f", detail.empty() ? "" : " ", counts.back());
  }
  return {"pillar count vs resolution", non_increasing(counts), detail};
}

inline CheckResult determinism(std::uint64_t seed) {
  const Scene s = synthetic::make_scene(seed);
  GridSpec g;
  g.max_pillars = 2000, g.max_points_per_pillar = 8;  // forces both sampling paths
  Rng a(seed), b(seed);
  const PillarTensor ta = pillarize(s.points, g, a), tb = pillarize(s.points, g, b);
  AugmentConfig cfg;
  Scene sa = s, sb = s;
  Rng ra(seed), rb(seed);
  perturb_boxes(sa, ra, cfg), global_augment(sa, ra, cfg);
  perturb_boxes(sb, rb, cfg), global_augment(sb, rb, cfg);
  bool same_aug = sa.points == sb.points && sa.boxes.size() == sb.boxes.size();
  for (std::size_t i = 0; same_aug && i < sa.boxes.size(); ++i) same_aug = sa.boxes[i].box == sb.boxes[i].box;
  const bool ok = ta.data == tb.data && ta.indices == tb.indices && same_aug;
  return {"seeded determinism", ok, ok ? "identical reruns" : "reruns differ"};
}

}  // namespace selfcheck_detail

inline std::vector<CheckResult> run_selfcheck(const RunConfig& cfg) {
  using namespace selfcheck_detail;
  const std::uint64_t s = cfg.seed;
  std::vector<std::function<CheckResult()>> checks = {
      [&] { return shape_chain(s); },
      [&] { return weights_container(s, cfg.out); },
      [] { return loss_formulas(); },
      [&] { return gradient(s); },
      [&] { return geometry(s); },
      [] { return matching(); },
      [] { return ap_evaluator(); },
      [&] { return pfn_invariance(s); },
      [&] { return resolution_sweep(s); },
      [&] { return determinism(s); },
  };
  std::vector<CheckResult> out;
  for (auto& c : checks) {
    try {
      out.push_back(c());
    } catch (const std::exception& e) {
      out.push_back({"(check threw)", false, e.what()});
    }
  }
  return out;
}

inline int cmd_selfcheck(const RunConfig& cfg, std::ostream& log = std::cout) {
  const auto results = run_selfcheck(cfg);
  bool all = true;
  for (const auto& r : results) {
    log << (r.pass ? "PASS  " : "FAIL  ") << r.name << ": " << r.detail << "\n";
    all = all && r.pass;
  }
  log << (all ? "selfcheck passed\n" : "selfcheck FAILED\n");
  return all ? kExitOk : kExitInvariant;
}

}  // namespace pointpillars
