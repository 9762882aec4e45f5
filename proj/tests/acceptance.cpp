// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any
// criterion fails. Real KITTI frames are used for the sparsity criterion when
// PP_KITTI_ROOT points at a directory with velodyne/ (and ideally calib/).

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <iostream>
#include <set>

#include "pointpillars/commands.hpp"
#include "pointpillars/oracles.hpp"
#include "pointpillars/selfcheck.hpp"

using namespace pointpillars;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

const fs::path kScratch = fs::temp_directory_path() / "pp_acceptance";

Box3D random_box(Rng& rng, double spread) {
  return {rng.uniform(-spread, spread), rng.uniform(-spread, spread), rng.uniform(-0.5, 0.5), rng.uniform(0.5, 3),
          rng.uniform(0.5, 5), rng.uniform(0.5, 2), rng.uniform(-kPi, kPi)};
}

std::vector<Point> fixture_points(std::uint64_t seed) {
  const Scene s = synthetic::make_scene(seed);
  return kitti::fov_filter(s.points, kitti::CalibMatrices::kitti_typical(), 1242, 375);
}

bool same_tree(const fs::path& a, const fs::path& b, std::size_t* files) {
  std::set<fs::path> ra, rb;
  for (const auto& e : fs::recursive_directory_iterator(a))
    if (e.is_regular_file()) ra.insert(fs::relative(e.path(), a));
  for (const auto& e : fs::recursive_directory_iterator(b))
    if (e.is_regular_file()) rb.insert(fs::relative(e.path(), b));
  if (ra != rb) return false;
  *files = ra.size();
  for (const auto& r : ra)
    if (r.filename() != "infer_timing.txt" && read_file_bytes(a / r) != read_file_bytes(b / r)) return false;
  return true;
}

// ---------------------------------------------------------------------------

Outcome shape_chain() {
  const auto t0 = std::chrono::steady_clock::now();
  RunConfig cfg;
  cfg.out = kScratch / "selfcheck";
  fs::create_directories(cfg.out);
  const auto results = run_selfcheck(cfg);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const CheckResult& chain = results.front();
  return {chain.pass && secs < 60.0, chain.detail + fmt("; full selfcheck %.1f s", secs)};
}

Outcome sparsity() {
  const GridSpec grid = GridSpec::car();
  const GridDims dims = grid_dims(grid);
  std::vector<std::pair<std::string, std::vector<Point>>> frames;
  std::string source;
  if (const char* root = std::getenv("PP_KITTI_ROOT"); root && *root) {
    RunConfig cfg;
    cfg.data_root = root;
    const FrameSource src(cfg);
    for (const auto& id : src.ids()) {
      const Frame f = src.load(id);
      frames.emplace_back(id, visible_points(f, cfg));
    }
    source = "KITTI frames";
  } else {
    for (std::uint64_t i = 0; i < 5; ++i) frames.emplace_back(fmt("fixture%llu", (unsigned long long)i), fixture_points(i));
    source = "synthetic fixture frames (no PP_KITTI_ROOT)";
  }
  if (frames.empty()) return {false, "no frames"};
  bool ok = true;
  std::size_t lo = SIZE_MAX, hi = 0, warn = 0;
  double sp_sum = 0;
  for (const auto& [id, pts] : frames) {
    const PillarStats st = pillar_stats(assign_pillars(pts, grid));
    // independent count of distinct occupied cells
    std::set<std::pair<long, long>> cells;
    for (const Point& p : pts) {
      if (!(p.x >= grid.x_min && p.x < grid.x_max && p.y >= grid.y_min && p.y < grid.y_max && p.z >= grid.z_min &&
            p.z <= grid.z_max))
        continue;
      const long col = std::min<long>(dims.width - 1, static_cast<long>((p.x - grid.x_min) / grid.resolution));
      const long row = std::min<long>(dims.height - 1, static_cast<long>((p.y - grid.y_min) / grid.resolution));
      cells.emplace(row, col);
    }
    ok = ok && cells.size() == st.non_empty && st.non_empty >= 3000 && st.non_empty <= 15000;
    if (st.non_empty < 6000 || st.non_empty > 9000) {
      ++warn;
      std::cerr << "warning: " << id << " has " << st.non_empty << " non-empty pillars, outside 6000-9000\n";
    }
    lo = std::min(lo, st.non_empty), hi = std::max(hi, st.non_empty);
    sp_sum += st.sparsity();
  }
  return {ok, fmt("%zu %s: pillars %zu-%zu, mean sparsity %.2f%%, %zu outside 6000-9000", frames.size(),
                  source.c_str(), lo, hi, 100 * sp_sum / frames.size(), warn)};
}

Outcome loss_formulas() {
  const CheckResult r = selfcheck_detail::loss_formulas();
  return {r.pass, r.detail};
}

Outcome gradient() {
  // Random targets and predictions spread over every regime of the loss.
  Rng rng(2024);
  const std::size_t A = 5000;
  const int K = 2;
  TrainingTargets t;
  t.num_anchors = A, t.num_classes = K;
  t.cls.resize(A * K), t.positive.resize(A), t.box.resize(A * kBoxCodeSize), t.dir.resize(A);
  for (std::size_t i = 0; i < A; ++i) {
    for (int k = 0; k < K; ++k) {
      const double u = rng.uniform01();
      t.cls[i * K + k] = static_cast<std::int8_t>(u < 0.2 ? 1 : u < 0.3 ? -1 : 0);
      if (t.cls[i * K + k] == 1) t.positive[i] = 1;
    }
    for (int r = 0; r < kBoxCodeSize; ++r) t.box[i * kBoxCodeSize + r] = rng.normal(0, 0.5);
    t.dir[i] = static_cast<std::uint8_t>(rng.uniform_int(2));
  }
  t.num_positive = static_cast<std::size_t>(std::count(t.positive.begin(), t.positive.end(), 1));
  Predictions p = Predictions::zeros(A, K);
  for (auto& v : p.cls) v = rng.normal(0, 3);
  for (auto& v : p.box) v = rng.normal(0, 1.5);
  for (auto& v : p.dir) v = rng.normal(0, 2);
  const GradCheckReport a = gradient_check(p, t, LossWeights{}, 1000, 1e-3, rng);

  // Same check on the network's own predictions for a labeled frame.
  RunConfig cfg;
  cfg.out = kScratch / "loss";
  const LossReport b = compute_loss_report(cfg, LossPredictions::network);
  const bool ok = a.checked == 1000 && a.max_relative_error < 1e-4 && b.check.checked == 1000 &&
                  b.check.max_relative_error < 1e-4;
  return {ok, fmt("random problem max rel err %.2e (%zu skipped at kinks); network frame %.2e", a.max_relative_error,
                  a.skipped_kink, b.check.max_relative_error)};
}

Outcome geometry() {
  Rng rng(77);
  double worst_iou = 0;
  for (int i = 0; i < 100; ++i) {
    const Box3D a = random_box(rng, 1), b = random_box(rng, 1);
    worst_iou = std::max(worst_iou, std::abs(iou_bev_rotated(a, b) - oracle::monte_carlo_iou_bev(a, b, 10000000, rng)));
  }
  int mismatches = 0;
  for (int s = 0; s < 1000; ++s) {
    std::vector<Detection> dets;
    const std::size_t n = rng.uniform_int(51);
    for (std::size_t i = 0; i < n; ++i)
      dets.push_back({random_box(rng, 6), std::round(rng.uniform01() * 10) / 10, 0, i});
    const double thr = s % 2 ? 0.5 : 0.3;
    const auto fast = nms_axis_aligned(dets, thr), ref = oracle::fixed_point_nms(dets, thr);
    bool same = fast.size() == ref.size();
    for (std::size_t i = 0; same && i < fast.size(); ++i) same = fast[i].anchor_index == ref[i].anchor_index;
    mismatches += !same;
  }
  double worst_code = 0;
  for (int i = 0; i < 10000; ++i) {
    const Box3D anchor{rng.uniform(-40, 40), rng.uniform(-40, 40), rng.uniform(-2, 0), rng.uniform(0.5, 2),
                       rng.uniform(0.6, 4), rng.uniform(1.4, 1.8), rng.bernoulli(0.5) ? 0 : kPi / 2};
    Box3D gt = random_box(rng, 40);
    gt.theta = normalize_angle(anchor.theta + rng.uniform(-kPi / 2, kPi / 2));
    const EncodedBox e = encode_box(gt, anchor);
    const Box3D d = decode_box(e.residuals, anchor, e.direction).box;
    worst_code = std::max({worst_code, std::abs(d.x - gt.x), std::abs(d.y - gt.y), std::abs(d.z - gt.z),
                           std::abs(d.w - gt.w), std::abs(d.l - gt.l), std::abs(d.h - gt.h),
                           std::abs(normalize_angle(d.theta - gt.theta))});
  }
  return {worst_iou < 3e-3 && mismatches == 0 && worst_code < 1e-5,
          fmt("IoU vs 1e7-sample MC max diff %.2e over 100 pairs; NMS mismatches %d/1000; round trip %.2e over 10000",
              worst_iou, mismatches, worst_code)};
}

Outcome matching() {
  // For each class, anchors shifted along their length so that the axis-aligned
  // IoU with one gt lands above, inside and below the two thresholds.
  std::string detail;
  bool ok = true;
  for (const ClassSpec& spec : {ClassSpec::car(), ClassSpec::pedestrian(), ClassSpec::cyclist()}) {
    const double pos = spec.pos_threshold, neg = spec.neg_threshold;
    auto at = [&](double x) { return Box3D{x, 0, spec.z_center, spec.w, spec.l, spec.h, 0}; };
    auto shift = [&](double iou) { return spec.l * (1 - iou) / (1 + iou); };
    const double mid = 0.5 * (pos + neg);
    // gt 0 has an exact anchor; gt 1's best anchor sits in the ignored band
    const std::vector<Box3D> gts = {at(0), at(100)};
    const std::vector<Box3D> anchors = {at(0),
                                        at(shift(pos + 0.05)),
                                        at(-shift(mid)),
                                        at(shift(neg - 0.05)),
                                        at(50),
                                        at(100 + shift(mid)),
                                        at(100 - shift(mid - 0.05))};
    const std::vector<MatchLabel> want = {MatchLabel::positive, MatchLabel::positive, MatchLabel::ignored,
                                          MatchLabel::negative, MatchLabel::negative, MatchLabel::positive,
                                          MatchLabel::ignored};
    const MatchResult m = match_anchors(anchors, gts, spec);
    int bad = 0;
    for (std::size_t i = 0; i < want.size(); ++i) bad += m.labels[i] != want[i];
    ok = ok && bad == 0 && m.gt_index[5] == 1 && m.gt_index[1] == 0;
    detail += fmt("%s%s (%.2f/%.2f) %d mismatches", detail.empty() ? "" : "; ", spec.name.c_str(), pos, neg, bad);
  }
  const CheckResult grid = selfcheck_detail::matching();
  return {ok && grid.pass, detail + "; grid scene " + grid.detail};
}

Outcome ap_evaluator() {
  const CheckResult r = selfcheck_detail::ap_evaluator();
  return {r.pass, r.detail};
}

Outcome determinism() {
  std::size_t files = 0, n = 0;
  bool ok = true;
  auto run_twice = [&](const std::string& tag, const std::function<void(const RunConfig&)>& cmd, RunConfig cfg) {
    cfg.out = kScratch / (tag + "_a");
    fs::remove_all(cfg.out);
    cmd(cfg);
    RunConfig again = cfg;
    again.out = kScratch / (tag + "_b");
    fs::remove_all(again.out);
    cmd(again);
    ok = ok && same_tree(cfg.out, again.out, &n);
    files += n;
  };
  std::ostringstream log;
  RunConfig infer;
  infer.synthetic_frames = 2;
  infer.postproc.score_threshold = 0.05;
  infer.weights = kScratch / "det_weights.ppw";
  cmd_init_weights(infer, false, log);
  run_twice("infer", [&](const RunConfig& c) { cmd_infer(c, log); }, infer);
  RunConfig aug;
  aug.synthetic_frames = 2;
  aug.augment_db_frames = 3;
  run_twice("augment", [&](const RunConfig& c) { cmd_augment(c, log); }, aug);

  Rng rng(5);
  const ParamSet p = init_params(rng, Architecture::car());
  const fs::path w1 = kScratch / "rt1.ppw", w2 = kScratch / "rt2.ppw";
  save_params(p, w1);
  const ParamSet q = load_params(w1, Architecture::car());
  save_params(q, w2);
  const bool weights_ok = q.tensors() == p.tensors() && read_file_bytes(w1) == read_file_bytes(w2);
  return {ok && weights_ok, fmt("%zu output files identical across reruns; weights round trip %s", files,
                                weights_ok ? "bit-exact" : "differs")};
}

Outcome resolution_sweep() {
  const auto pts = fixture_points(0);
  Rng init(9);
  const ParamSet params = init_params(init, Architecture::car());
  const std::vector<double> res = {0.12, 0.16, 0.20, 0.24, 0.28};
  std::vector<PillarTensor> tensors;
  std::vector<double> counts;
  for (double r : res) {
    GridSpec g;
    g.resolution = r;
    g = snap_to_resolution(g);
    Rng rng(1);
    tensors.push_back(pillarize(pts, g, rng));
    counts.push_back(static_cast<double>(assign_pillars(pts, g).pillars.size()));
  }
  // Rounds visit every resolution in turn so slow drift hits all of them alike.
  const int rounds = 21;
  std::vector<std::vector<double>> ms(res.size());
  for (int r = 0; r < rounds; ++r)
    for (std::size_t i = 0; i < res.size(); ++i) {
      Stopwatch sw;
      const PillarFeatures f = pfn_forward(tensors[i], params);
      ms[i].push_back(sw.lap());
      if (f.data.empty()) return {false, "empty encoder output"};
    }
  std::vector<double> med;
  std::string detail = "pillars";
  for (double c : counts) detail += fmt(" %.0f", c);
  detail += "; encoder median ms";
  for (auto& v : ms) {
    med.push_back(median(v));
    detail += fmt(" %.1f", med.back());
  }
  return {non_increasing(counts) && non_increasing(med), detail};
}

Outcome pfn_invariance() {
  const auto pts = fixture_points(3);
  Rng init(11);
  const ParamSet params = init_params(init, Architecture::car());
  GridSpec g = GridSpec::car();
  const PillarAssignment a = assign_pillars(pts, g);
  std::size_t most = 0;
  for (const auto& p : a.pillars) most = std::max(most, p.members.size());
  // No pillar overflows, so every padding amount keeps exactly the same points.
  g.max_points_per_pillar = static_cast<int>(most);
  Rng r0(1);
  const PillarTensor base = pillarize(pts, g, r0);
  const PillarFeatures ref = pfn_forward(base, params);

  bool ok = true;
  Rng rng(12);
  PillarTensor shuffled = base;
  for (int p = 0; p < base.max_pillars; ++p) {
    const int n = base.valid_counts[p];
    for (int i = n - 1; i > 0; --i) {
      const int j = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(i + 1)));
      for (int d = 0; d < kDecoratedDims; ++d) std::swap(shuffled.at(d, p, i), shuffled.at(d, p, j));
    }
    // padding slots hold arbitrary values; the mask must hide them
    for (int i = n; i < base.max_points; ++i)
      for (int d = 0; d < kDecoratedDims; ++d) shuffled.at(d, p, i) = static_cast<float>(rng.normal(0, 50));
  }
  ok = ok && pfn_forward(shuffled, params).data == ref.data;
  std::string pads = fmt("%d", g.max_points_per_pillar);
  for (int extra : {1, 17, 100}) {
    GridSpec wide = g;
    wide.max_points_per_pillar = g.max_points_per_pillar + extra;
    Rng r(1);
    ok = ok && pfn_forward(pillarize(pts, wide, r), params).data == ref.data;
    pads += fmt(",%d", wide.max_points_per_pillar);
  }
  return {ok, fmt("(64,%d) output bit-identical under slot shuffles, garbage padding and N in {%s}", ref.pillars,
                  pads.c_str())};
}

}  // namespace

int main() {
  fs::remove_all(kScratch);
  fs::create_directories(kScratch);
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"shape chain", shape_chain},
      {"pillar sparsity", sparsity},
      {"loss formulas", loss_formulas},
      {"gradient check", gradient},
      {"geometry oracles", geometry},
      {"matching rules", matching},
      {"AP evaluator", ap_evaluator},
      {"determinism", determinism},
      {"resolution sweep", resolution_sweep},
      {"PFN invariance and masking", pfn_invariance},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("%s criterion %zu (%s): %s [%.1f s]\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first.c_str(),
                o.detail.c_str(), secs);
    std::fflush(stdout);
    failed += !o.pass;
  }
  fs::remove_all(kScratch);
  std::printf("%d of %zu criteria passed\n", static_cast<int>(criteria.size()) - failed, criteria.size());
  return failed ? 1 : 0;
}
