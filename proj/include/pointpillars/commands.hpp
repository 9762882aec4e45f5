#pragma once

// Library side of the command-line tool. Every command reads a validated
// RunConfig, writes its primary outputs under cfg.out and returns a
// process exit code.

#include <cstdio>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "pointpillars/augment.hpp"
#include "pointpillars/config.hpp"
#include "pointpillars/eval.hpp"
#include "pointpillars/gradcheck.hpp"
#include "pointpillars/pipeline.hpp"

namespace pointpillars {

enum ExitCode : int {
  kExitOk = 0,
  kExitOther = 1,
  kExitConfig = 2,
  kExitData = 3,
  kExitInvariant = 4,
};

/// Stable per-frame stream id (FNV-1a of the frame id), so a frame's random
/// draws do not depend on which other frames are processed or on --jobs.
inline std::uint64_t frame_stream(const std::string& id) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : id) h = (h ^ c) * 0x100000001b3ULL;
  return h;
}

inline std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// ---------------------------------------------------------------------------
// pillarize

struct PillarizeFrameStats {
  std::string id;
  std::size_t points = 0, visible = 0;
  PillarStats stats;
  int used_slots = 0;
};

inline TensorMap pillar_tensor_dump(const PillarTensor& t) {
  const auto P = static_cast<std::uint32_t>(t.max_pillars), N = static_cast<std::uint32_t>(t.max_points);
  TensorMap m;
  Tensor feats({static_cast<std::uint32_t>(kDecoratedDims), P, N});
  feats.data = t.data;
  Tensor idx({P, 2});
  Tensor counts({P});
  Tensor mask({P, N});
  for (std::uint32_t p = 0; p < P; ++p) {
    idx.data[p * 2] = static_cast<float>(t.indices[p].row);
    idx.data[p * 2 + 1] = static_cast<float>(t.indices[p].col);
    counts.data[p] = static_cast<float>(t.valid_counts[p]);
  }
  for (std::size_t i = 0; i < t.mask.size(); ++i) mask.data[i] = t.mask[i];
  m.emplace("pillars.features", std::move(feats));
  m.emplace("pillars.indices", std::move(idx));
  m.emplace("pillars.valid_counts", std::move(counts));
  m.emplace("pillars.mask", std::move(mask));
  return m;
}

inline std::string format_pillarize_stats(const PillarizeFrameStats& s) {
  return fmt("frame %s points %zu visible %zu pillars %zu cells %zu sparsity %.6f used_slots %d\n", s.id.c_str(),
             s.points, s.visible, s.stats.non_empty, s.stats.cells, s.stats.sparsity(), s.used_slots);
}

inline int cmd_pillarize(const RunConfig& cfg, std::ostream& log = std::cout) {
  const FrameSource src(cfg);
  std::vector<PillarizeFrameStats> stats(src.ids().size());
  parallel_for(src.ids().size(), cfg.jobs, [&](std::size_t i) {
    const Frame f = src.load(src.ids()[i]);
    const auto pts = visible_points(f, cfg);
    const PillarAssignment a = assign_pillars(pts, cfg.grid);
    Rng rng = Rng(cfg.seed).derive(frame_stream(f.id));
    const PillarTensor t = densify(decorate(a, pts, cfg.grid), cfg.grid, rng);
    write_container(cfg.out / "pillars" / (f.id + ".ppw"), pillar_tensor_dump(t));
    stats[i] = {f.id, f.points.size(), pts.size(), pillar_stats(a), t.num_used()};
  });
  std::string text;
  for (const auto& s : stats) {
    text += format_pillarize_stats(s);
    // The 6k-9k band is typical of real scans at the car settings.
    const GridSpec car = GridSpec::car();
    if (!src.synthetic() && cfg.grid.resolution == car.resolution && cfg.grid.x_max == car.x_max &&
        (s.stats.non_empty < 6000 || s.stats.non_empty > 9000))
      std::cerr << "warning: frame " << s.id << " has " << s.stats.non_empty
                << " non-empty pillars, outside the usual 6000-9000\n";
  }
  write_text(cfg.out / "pillarize_stats.txt", text);
  log << text;
  return kExitOk;
}

// ---------------------------------------------------------------------------
// init-weights

inline int cmd_init_weights(const RunConfig& cfg, bool zero, std::ostream& log = std::cout) {
  Rng rng = Rng(cfg.seed).derive(0x77);
  const ParamSet p = init_params(rng, architecture_for(cfg), zero ? InitMode::zero : InitMode::he_uniform);
  const auto path = cfg.weights.empty() ? cfg.out / "weights.ppw" : cfg.weights;
  save_params(p, path);
  std::size_t n = 0;
  for (const auto& [name, t] : p.tensors()) n += t.size();
  log << "wrote " << p.tensors().size() << " tensors (" << n << " values) to " << path.string() << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// infer

inline std::string format_timing(const StageTimes& t, std::size_t frames) {
  const double n = static_cast<double>(std::max<std::size_t>(frames, 1));
  std::string s = fmt("# mean wall-clock per frame over %zu frame(s), ms\n", frames);
  s += fmt("load_filter       %10.3f\n", t.load_filter / n);
  s += fmt("pillarize_decorate %9.3f\n", t.pillarize / n);
  s += fmt("encode            %10.3f\n", t.encode / n);
  s += fmt("scatter           %10.3f\n", t.scatter / n);
  s += fmt("backbone_heads    %10.3f\n", t.backbone_head / n);
  s += fmt("nms               %10.3f\n", t.nms / n);
  s += fmt("total             %10.3f\n", t.total() / n);
  return s;
}

inline int cmd_infer(const RunConfig& cfg, std::ostream& log = std::cout) {
  const ParamSet params = load_weights(cfg);
  const FrameSource src(cfg);
  if (!src.synthetic() && !std::filesystem::is_directory(cfg.data_root / "calib"))
    std::cerr << "warning: no calib/ directory; results use a nominal camera (x_cam = -y, y_cam = -z, z_cam = x)\n";
  const auto anchors = anchors_for(cfg, params.architecture());
  const AnchorLayout layout = anchor_layout(cfg.grid, params.architecture().output_stride());
  std::vector<StageTimes> times(src.ids().size());
  std::vector<std::size_t> counts(src.ids().size());
  parallel_for(src.ids().size(), cfg.jobs, [&](std::size_t i) {
    Stopwatch sw;
    const Frame f = src.load(src.ids()[i]);
    const auto pts = visible_points(f, cfg);
    StageTimes t;
    t.load_filter = sw.lap();
    Rng rng = Rng(cfg.seed).derive(frame_stream(f.id));
    const NetworkOutput net = forward(pts, cfg, params, rng, &t);
    sw.lap();
    const Predictions pred = predictions_from_head(net.maps, layout, static_cast<int>(cfg.classes.size()));
    const auto dets = postprocess(pred, anchors, cfg.postproc);
    const auto records = result_records(dets, f, cfg);
    t.nms = sw.lap();
    kitti::write_labels(cfg.out / "results" / (f.id + ".txt"), records);
    times[i] = t;
    counts[i] = records.size();
  });
  StageTimes sum;
  for (const auto& t : times) sum += t;
  std::string det_lines;
  for (std::size_t i = 0; i < counts.size(); ++i)
    det_lines += fmt("frame %s detections %zu\n", src.ids()[i].c_str(), counts[i]);
  const std::string timing = format_timing(sum, times.size());
  write_text(cfg.out / "infer_timing.txt", timing);
  log << det_lines << timing;
  return kExitOk;
}

// ---------------------------------------------------------------------------
// loss

enum class LossPredictions { network, targets };

/// Predictions equal to the encoded targets with saturated, correct logits.
inline Predictions perfect_predictions(const TrainingTargets& t) {
  Predictions p = Predictions::zeros(t.num_anchors, t.num_classes);
  for (std::size_t i = 0; i < t.cls.size(); ++i) p.cls[i] = t.cls[i] == 1 ? 30.0 : -30.0;
  p.box = t.box;
  for (std::size_t i = 0; i < t.num_anchors; ++i) {
    p.dir[i * kDirBins + t.dir[i]] = 30.0;
    p.dir[i * kDirBins + 1 - t.dir[i]] = -30.0;
  }
  return p;
}

struct LossReport {
  std::string frame;
  LossTerms terms;
  GradCheckReport check;
  std::size_t anchors = 0;
};

inline std::string format_loss_report(const LossReport& r, const RunConfig& cfg) {
  std::string s = fmt("frame %s\n", r.frame.c_str());
  s += fmt("anchors %zu classes %zu\n", r.anchors, cfg.classes.size());
  s += fmt("num_positive %zu\n", r.terms.num_positive);
  s += fmt("no_positives %s\n", r.terms.no_positives ? "true" : "false");
  s += fmt("loss_loc %.9g\nloss_cls %.9g\nloss_dir %.9g\nloss_total %.9g\n", r.terms.loc, r.terms.cls, r.terms.dir,
           r.terms.total);
  s += fmt("gradcheck_samples %zu skipped_at_kinks %zu step %g\n", r.check.checked, r.check.skipped_kink,
           cfg.gradcheck_step);
  s += fmt("gradcheck_max_relative_error %.3e\n", r.check.max_relative_error);
  s += fmt("gradcheck_max_absolute_error %.3e\n", r.check.max_absolute_error);
  s += fmt("gradcheck_pass %s\n", r.check.max_relative_error < 1e-4 ? "true" : "false");
  return s;
}

inline LossReport compute_loss_report(const RunConfig& cfg, LossPredictions mode) {
  const FrameSource src(cfg);
  if (src.ids().empty()) throw DataError("no frames available");
  const Frame f = src.load(src.ids().front());
  if (!f.has_labels) throw DataError("frame " + f.id + " has no label file");
  const Architecture arch = architecture_for(cfg);
  const auto anchors = anchors_for(cfg, arch);
  const TrainingTargets targets = build_targets(anchors, gt_boxes(f, cfg), cfg.classes);

  Predictions pred;
  if (mode == LossPredictions::targets) {
    pred = perfect_predictions(targets);
  } else {
    Rng init = Rng(cfg.seed).derive(0x77);
    const ParamSet params = cfg.weights.empty() ? init_params(init, arch) : load_weights(cfg);
    const auto pts = visible_points(f, cfg);
    Rng rng = Rng(cfg.seed).derive(frame_stream(f.id));
    const NetworkOutput net = forward(pts, cfg, params, rng);
    pred = predictions_from_head(net.maps, anchor_layout(cfg.grid, arch.output_stride()),
                                 static_cast<int>(cfg.classes.size()));
  }
  LossReport r;
  r.frame = f.id;
  r.anchors = targets.num_anchors;
  r.terms = evaluate_loss(pred, targets, cfg.loss);
  Rng check_rng = Rng(cfg.seed).derive(0x6c);
  r.check = gradient_check(pred, targets, cfg.loss, cfg.gradcheck_samples, cfg.gradcheck_step, check_rng);
  return r;
}

inline int cmd_loss(const RunConfig& cfg, LossPredictions mode, std::ostream& log = std::cout) {
  const LossReport r = compute_loss_report(cfg, mode);
  const std::string text = format_loss_report(r, cfg);
  write_text(cfg.out / "loss_report.txt", text);
  log << text;
  return r.check.max_relative_error < 1e-4 ? kExitOk : kExitInvariant;
}

// ---------------------------------------------------------------------------
// eval

/// Pairs every label frame with a result file of the same id. Without a data
/// root the labels come from the synthetic frames of the same seed.
inline std::vector<EvalFrame> load_eval_frames(const RunConfig& cfg) {
  if (cfg.results.empty()) throw ConfigError("eval needs a results directory (--results)");
  const auto result_ids = list_ids(cfg.results, ".txt");
  const FrameSource src(cfg);
  std::vector<std::string> label_ids;
  if (src.synthetic()) {
    label_ids = src.ids();
  } else {
    label_ids = list_ids(cfg.data_root / "label_2", ".txt");
    if (!cfg.frame.empty()) label_ids = {cfg.frame};
  }
  const std::set<std::string> rs(result_ids.begin(), result_ids.end()), ls(label_ids.begin(), label_ids.end());
  for (const auto& id : ls)
    if (!rs.contains(id)) throw DataError("no result file for labeled frame " + id);
  for (const auto& id : rs)
    if (!ls.contains(id)) throw DataError("result file " + id + " has no matching label file");

  std::vector<EvalFrame> frames(label_ids.size());
  parallel_for(label_ids.size(), cfg.jobs, [&](std::size_t i) {
    const Frame f = src.load_annotations(label_ids[i]);
    EvalFrame& ef = frames[i];
    for (const auto& r : f.labels) ef.gts.push_back(eval_object(r, f.calib));
    const auto path = cfg.results / (label_ids[i] + ".txt");
    for (const auto& r : kitti::parse_labels(path)) {
      if (!r.score) throw DataError(path.string() + ": result lines need a score column");
      ef.dets.push_back(eval_object(r, f.calib));
    }
  });
  return frames;
}

inline int cmd_eval(const RunConfig& cfg, std::ostream& log = std::cout) {
  const auto frames = load_eval_frames(cfg);
  const auto rows = evaluate(frames, cfg.class_names(), cfg.eval);
  std::string text = fmt("# frames %zu\n", frames.size()) + format_report(rows, cfg.eval.recall_points);
  write_text(cfg.out / "eval_report.txt", text);
  log << text;
  return kExitOk;
}

// ---------------------------------------------------------------------------
// augment

inline std::string format_scene_boxes(const Scene& s) {
  std::string out;
  for (const auto& b : s.boxes)
    out += fmt("%s %.9g %.9g %.9g %.9g %.9g %.9g %.9g\n", kitti::kClassNames[b.class_id], b.box.x, b.box.y, b.box.z,
               b.box.w, b.box.l, b.box.h, b.box.theta);
  return out;
}

inline std::array<std::size_t, kNumKittiClasses> class_counts(const Scene& s) {
  std::array<std::size_t, kNumKittiClasses> c{};
  for (const auto& b : s.boxes) ++c[b.class_id];
  return c;
}

struct AugmentOutcome {
  Scene before, after;
  std::size_t placed = 0, rejected = 0, perturbed = 0;
  bool database_short = false;
  GlobalDraws global;
  std::size_t database_size = 0;
};

/// Ground-truth sampling, per-box perturbation and the global transform, in
/// that order, each stage on its own random stream.
inline AugmentOutcome augment_frame(const RunConfig& cfg, const FrameSource& src, const std::string& id,
                                    GtDatabase* db_out = nullptr) {
  std::vector<Scene> db_scenes;
  if (src.synthetic()) {
    for (int i = 0; i < cfg.augment_db_frames; ++i) {
      Scene s = synthetic::make_scene(Rng(cfg.seed).derive(0xdb0000 + static_cast<std::uint64_t>(i)).seed());
      Frame f;
      f.points = s.points;
      f.calib = kitti::CalibMatrices::kitti_typical();
      f.has_calib = true;
      s.points = visible_points(f, cfg);
      db_scenes.push_back(std::move(s));
    }
  } else {
    const auto& ids = list_ids(cfg.data_root / "velodyne", ".bin");
    for (std::size_t i = 0; i < ids.size() && i < static_cast<std::size_t>(cfg.augment_db_frames); ++i) {
      const Frame f = src.load(ids[i]);
      db_scenes.push_back(frame_scene(f, visible_points(f, cfg)));
    }
  }
  const GtDatabase db = build_gt_database(db_scenes);

  const Frame f = src.load(id);
  AugmentOutcome o;
  o.before = frame_scene(f, visible_points(f, cfg));
  o.database_size = db.entries.size();
  const Rng base = Rng(cfg.seed).derive(frame_stream(f.id));
  Rng r_sample = base.derive(1), r_box = base.derive(2), r_global = base.derive(3);
  SampleResult s = sample_gt(db, o.before, cfg.augment.sample_counts, r_sample);
  o.placed = s.placed, o.rejected = s.rejected, o.database_short = s.database_short;
  o.after = std::move(s.scene);
  for (const auto& p : perturb_boxes(o.after, r_box, cfg.augment)) o.perturbed += p.applied;
  o.global = global_augment(o.after, r_global, cfg.augment);
  if (db_out) *db_out = db;
  return o;
}

inline std::string format_augment_stats(const AugmentOutcome& o) {
  const auto cb = class_counts(o.before), ca = class_counts(o.after);
  std::string s;
  s += fmt("points_before %zu\npoints_after %zu\n", o.before.points.size(), o.after.points.size());
  s += fmt("boxes_before %zu (car %zu pedestrian %zu cyclist %zu)\n", o.before.boxes.size(), cb[0], cb[1], cb[2]);
  s += fmt("boxes_after %zu (car %zu pedestrian %zu cyclist %zu)\n", o.after.boxes.size(), ca[0], ca[1], ca[2]);
  s += fmt("database_entries %zu\nsampled_placed %zu\nsampled_rejected %zu\ndatabase_short %s\n", o.database_size,
           o.placed, o.rejected, o.database_short ? "true" : "false");
  s += fmt("boxes_perturbed %zu\n", o.perturbed);
  s += fmt("global_flip %s\nglobal_rotation %.9g\nglobal_scale %.9g\nglobal_translation %.9g %.9g %.9g\n",
           o.global.flip ? "true" : "false", o.global.rotation, o.global.scale, o.global.translation.x,
           o.global.translation.y, o.global.translation.z);
  return s;
}

inline int cmd_augment(const RunConfig& cfg, std::ostream& log = std::cout) {
  const FrameSource src(cfg);
  if (src.ids().empty()) throw DataError("no frames available");
  GtDatabase db;
  for (std::size_t i = 0; i < src.ids().size(); ++i) {
    const std::string& id = src.ids()[i];
    const AugmentOutcome o = augment_frame(cfg, src, id, i == 0 ? &db : nullptr);
    const auto dir = cfg.out / "augment";
    kitti::write_velodyne_bin(dir / (id + ".bin"), o.after.points);
    write_text(dir / (id + ".boxes.txt"), format_scene_boxes(o.after));
    const std::string stats = format_augment_stats(o);
    write_text(dir / (id + ".stats.txt"), stats);
    log << "frame " << id << "\n" << stats;
  }
  write_container(cfg.out / "gt_database.ppw", gt_database_to_tensors(db));
  return kExitOk;
}

// ---------------------------------------------------------------------------
// bench

inline double median(std::vector<double> v) {
  if (v.empty()) return 0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

struct BenchRow {
  double resolution = 0;
  GridDims dims;
  std::size_t pillars = 0;
  double pillarize_ms = 0, encode_ms = 0, scatter_ms = 0, backbone_ms = -1;
  double encode_rerun_ms = 0;  // second independent median, for stability
};

/// Median timings of the pillar stages on one frame at one resolution.
inline BenchRow bench_resolution(std::span<const Point> pts, GridSpec grid, double resolution, const ParamSet& params,
                                 int repeats, bool with_backbone, std::uint64_t seed) {
  grid.resolution = resolution;
  grid = snap_to_resolution(grid);
  BenchRow row;
  row.resolution = resolution;
  row.dims = grid_dims(grid);
  row.pillars = assign_pillars(pts, grid).pillars.size();
  std::vector<double> tp, te, ts, te2;
  PillarTensor tensor;
  PillarFeatures feats;
  for (int pass = 0; pass < 2; ++pass)
    for (int r = 0; r < repeats; ++r) {
      Rng rng(seed);
      Stopwatch sw;
      tensor = pillarize(pts, grid, rng);
      const double a = sw.lap();
      feats = pfn_forward(tensor, params);
      const double b = sw.lap();
      const Tensor3 image = scatter(feats, tensor.indices, tensor.dims);
      const double c = sw.lap();
      if (pass == 0) tp.push_back(a), te.push_back(b), ts.push_back(c);
      else te2.push_back(b);
    }
  row.pillarize_ms = median(tp), row.encode_ms = median(te), row.scatter_ms = median(ts);
  row.encode_rerun_ms = median(te2);
  if (with_backbone) {
    const Tensor3 image = scatter(feats, tensor.indices, tensor.dims);
    Stopwatch sw;
    (void)head_forward(backbone_forward(image, params), params);
    row.backbone_ms = sw.lap();
  }
  return row;
}

inline bool non_increasing(const std::vector<double>& v) {
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[i - 1]) return false;
  return true;
}

inline int cmd_bench(const RunConfig& cfg, std::ostream& log = std::cout) {
  const FrameSource src(cfg);
  if (src.ids().empty()) throw DataError("no frames available");
  const Frame f = src.load(src.ids().front());
  const auto pts = visible_points(f, cfg);
  Rng init = Rng(cfg.seed).derive(0x77);
  const ParamSet params = cfg.weights.empty() ? init_params(init, architecture_for(cfg)) : load_weights(cfg);

  std::vector<double> res = cfg.bench.resolutions;
  std::sort(res.begin(), res.end());
  std::string text = fmt("# frame %s, %zu visible points, median of %d run(s) per stage\n", f.id.c_str(), pts.size(),
                         cfg.bench.repeats);
  text += "resolution  grid        pillars  pillarize_ms  encode_ms  scatter_ms  backbone_heads_ms  frames_per_s  "
          "encode_rerun_diff\n";
  std::vector<double> counts, enc;
  for (double r : res) {
    const BenchRow row = bench_resolution(pts, cfg.grid, r, params, cfg.bench.repeats, cfg.bench.backbone, cfg.seed);
    const double total = row.pillarize_ms + row.encode_ms + row.scatter_ms + std::max(0.0, row.backbone_ms);
    const double diff = row.encode_rerun_ms > 0 ? std::abs(row.encode_ms - row.encode_rerun_ms) / row.encode_rerun_ms : 0;
    text += fmt("%.2f^2      %4dx%-4d   %7zu  %12.3f  %9.3f  %10.3f  %17s  %12s  %.1f%%\n", r, row.dims.height,
                row.dims.width, row.pillars, row.pillarize_ms, row.encode_ms, row.scatter_ms,
                row.backbone_ms < 0 ? "-" : fmt("%.1f", row.backbone_ms).c_str(),
                row.backbone_ms < 0 ? "-" : fmt("%.3f", 1000.0 / total).c_str(), 100 * diff);
    counts.push_back(static_cast<double>(row.pillars));
    enc.push_back(row.encode_ms);
  }
  text += fmt("pillar_count_non_increasing %s\n", non_increasing(counts) ? "true" : "false");
  text += fmt("encoder_time_non_increasing %s\n", non_increasing(enc) ? "true" : "false");
  write_text(cfg.out / "bench_report.txt", text);
  log << text;
  return kExitOk;
}

// ---------------------------------------------------------------------------
// fixture

inline int cmd_fixture(const RunConfig& cfg, std::ostream& log = std::cout) {
  const FrameSource src(cfg);
  for (const auto& id : src.ids()) {
    const Frame f = src.load(id);
    kitti::write_velodyne_bin(cfg.out / "velodyne" / (id + ".bin"), f.points);
    kitti::write_labels(cfg.out / "label_2" / (id + ".txt"), f.labels);
    write_text(cfg.out / "calib" / (id + ".txt"), kitti::format_calib(f.calib));
  }
  log << "wrote " << src.ids().size() << " synthetic frame(s) to " << cfg.out.string() << "\n";
  return kExitOk;
}

}  // namespace pointpillars
