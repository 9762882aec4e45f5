#pragma once

// Frame loading and the end-to-end inference path shared by the commands.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <exception>
#include <filesystem>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "pointpillars/config.hpp"
#include "pointpillars/kitti.hpp"
#include "pointpillars/net.hpp"
#include "pointpillars/pillars.hpp"
#include "pointpillars/postproc.hpp"
#include "pointpillars/synthetic.hpp"

namespace pointpillars {

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  write_file_bytes(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

/// Runs fn(i) for i in [0, n) on up to `jobs` threads. Work items must be
/// independent; the first exception (lowest index) is rethrown.
template <class Fn>
void parallel_for(std::size_t n, int jobs, Fn&& fn) {
  if (jobs <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(n);
  std::vector<std::thread> pool;
  const auto workers = std::min<std::size_t>(static_cast<std::size_t>(jobs), n);
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (std::size_t i; (i = next.fetch_add(1)) < n;) {
        try {
          fn(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

// ---------------------------------------------------------------------------
// Frames

struct Frame {
  std::string id;
  std::vector<Point> points;
  kitti::CalibMatrices calib = kitti::CalibMatrices::identity_like();
  bool has_calib = false;
  std::vector<kitti::LabelRecord> labels;
  bool has_labels = false;
};

/// Seed stream of synthetic frame i; kept apart from the per-frame work
/// streams, which use the frame index directly.
inline constexpr std::uint64_t kSyntheticStream = 0x5f0000;

inline std::vector<std::string> list_ids(const std::filesystem::path& dir, const std::string& ext) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw DataError("missing directory " + dir.string());
  std::vector<std::string> ids;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ext) ids.push_back(e.path().stem().string());
  std::sort(ids.begin(), ids.end());
  return ids;
}

/// Frames from a KITTI-layout data root (velodyne/, calib/, label_2/) or,
/// without one, synthetic frames derived from the seed.
class FrameSource {
 public:
  explicit FrameSource(const RunConfig& cfg) : cfg_(cfg) {
    if (synthetic()) {
      for (int i = 0; i < cfg.synthetic_frames; ++i) ids_.push_back(synthetic_id(i));
    } else {
      ids_ = list_ids(cfg.data_root / "velodyne", ".bin");
    }
    if (!cfg.frame.empty()) {
      if (std::find(ids_.begin(), ids_.end(), cfg.frame) == ids_.end())
        throw DataError("frame " + cfg.frame + " not found");
      ids_ = {cfg.frame};
    }
  }

  [[nodiscard]] bool synthetic() const { return cfg_.data_root.empty(); }
  [[nodiscard]] const std::vector<std::string>& ids() const { return ids_; }

  static std::string synthetic_id(int i) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%06d", i);
    return buf;
  }

  /// Labels and calibration only (no scan).
  [[nodiscard]] Frame load_annotations(const std::string& id) const {
    if (synthetic()) {
      Frame f = load(id);
      f.points.clear();
      return f;
    }
    Frame f;
    f.id = id;
    load_sidecars(f);
    return f;
  }

  [[nodiscard]] Frame load(const std::string& id) const {
    Frame f;
    f.id = id;
    if (synthetic()) {
      const int index = std::stoi(id);
      const Scene s = synthetic::make_scene(Rng(cfg_.seed).derive(kSyntheticStream + index).seed());
      f.points = s.points;
      f.calib = kitti::CalibMatrices::kitti_typical();
      f.has_calib = true;
      for (const auto& b : s.boxes)
        if (auto r = synthetic::label_for(b, f.calib, cfg_.image_width, cfg_.image_height)) f.labels.push_back(*r);
      f.has_labels = true;
      return f;
    }
    f.points = kitti::read_velodyne_bin(cfg_.data_root / "velodyne" / (id + ".bin"));
    load_sidecars(f);
    return f;
  }

 private:
  void load_sidecars(Frame& f) const {
    const auto calib = cfg_.data_root / "calib" / (f.id + ".txt");
    if (std::filesystem::exists(calib)) {
      f.calib = kitti::parse_calib(calib);
      f.has_calib = true;
    }
    const auto labels = cfg_.data_root / "label_2" / (f.id + ".txt");
    if (std::filesystem::exists(labels)) {
      f.labels = kitti::parse_labels(labels);
      f.has_labels = true;
    }
  }

  const RunConfig& cfg_;
  std::vector<std::string> ids_;
};

/// Points the detector sees: the camera field of view when a calibration is
/// available and filtering is enabled, otherwise the whole scan.
inline std::vector<Point> visible_points(const Frame& f, const RunConfig& cfg) {
  if (!cfg.fov_filter || !f.has_calib) return f.points;
  return kitti::fov_filter(f.points, f.calib, cfg.image_width, cfg.image_height);
}

/// Lidar-frame ground truth per configured class.
inline std::vector<std::vector<Box3D>> gt_boxes(const Frame& f, const RunConfig& cfg) {
  std::vector<std::vector<Box3D>> out(cfg.classes.size());
  for (const auto& r : f.labels)
    for (std::size_t k = 0; k < cfg.classes.size(); ++k)
      if (r.type == cfg.classes[k].name) out[k].push_back(kitti::camera_to_lidar_box(r, f.calib));
  return out;
}

/// Car / Pedestrian / Cyclist boxes as an augmentation scene.
inline Scene frame_scene(const Frame& f, std::vector<Point> points) {
  Scene s;
  s.points = std::move(points);
  for (const auto& r : f.labels) {
    const int k = kitti::class_id(r.type);
    if (k >= 0) s.boxes.push_back({kitti::camera_to_lidar_box(r, f.calib), k});
  }
  return s;
}

// ---------------------------------------------------------------------------
// Model

inline Architecture architecture_for(const RunConfig& cfg) {
  return cfg.class_set == ClassSet::car ? Architecture::car(cfg.net_features)
                                        : Architecture::pedcyc(cfg.net_features);
}

inline std::vector<std::vector<Box3D>> anchors_for(const RunConfig& cfg, const Architecture& arch) {
  std::vector<std::vector<Box3D>> out;
  for (const auto& c : cfg.classes) out.push_back(generate_anchors(cfg.grid, c, arch.output_stride()));
  return out;
}

inline ParamSet load_weights(const RunConfig& cfg) {
  if (cfg.weights.empty()) throw ConfigError("a weights file is required (--weights)");
  if (!std::filesystem::exists(cfg.weights)) throw DataError("weights file not found: " + cfg.weights.string());
  return load_params(cfg.weights, architecture_for(cfg));
}

inline PillarTensor pillarize(std::span<const Point> points, const GridSpec& grid, Rng& rng) {
  const PillarAssignment a = assign_pillars(points, grid);
  return densify(decorate(a, points, grid), grid, rng);
}

struct StageTimes {
  double load_filter = 0, pillarize = 0, encode = 0, scatter = 0, backbone_head = 0, nms = 0;

  [[nodiscard]] double total() const { return load_filter + pillarize + encode + scatter + backbone_head + nms; }
  StageTimes& operator+=(const StageTimes& o) {
    load_filter += o.load_filter, pillarize += o.pillarize, encode += o.encode, scatter += o.scatter;
    backbone_head += o.backbone_head, nms += o.nms;
    return *this;
  }
};

class Stopwatch {
 public:
  /// Milliseconds since the previous lap (or construction).
  double lap() {
    const auto now = std::chrono::steady_clock::now();
    const double ms = std::chrono::duration<double, std::milli>(now - last_).count();
    last_ = now;
    return ms;
  }

 private:
  std::chrono::steady_clock::time_point last_ = std::chrono::steady_clock::now();
};

/// Score threshold, per-class top-k before NMS, per-class NMS and cap.
inline std::vector<Detection> postprocess(const Predictions& pred, const std::vector<std::vector<Box3D>>& anchors,
                                          const PostprocConfig& pc, DecodeStats* stats = nullptr) {
  std::vector<Detection> dets = decode_predictions(pred, anchors, pc.score_threshold, stats);
  if (pc.pre_nms_top_k) {
    std::vector<Detection> kept;
    std::vector<std::size_t> taken(static_cast<std::size_t>(pred.num_classes), 0);
    for (const auto& d : dets)  // already in detection_before order
      if (taken[d.class_id]++ < pc.pre_nms_top_k) kept.push_back(d);
    dets = std::move(kept);
  }
  return nms_per_class(dets, pred.num_classes, pc.nms_iou, pc.max_detections);
}

struct NetworkOutput {
  PillarTensor tensor;
  HeadMaps maps;
};

/// Network forward pass on visible points; fills the pillarize through
/// backbone stages of `times`.
inline NetworkOutput forward(std::span<const Point> points, const RunConfig& cfg, const ParamSet& params, Rng& rng,
                             StageTimes* times = nullptr) {
  Stopwatch sw;
  NetworkOutput out;
  out.tensor = pillarize(points, cfg.grid, rng);
  const double t_pillar = sw.lap();
  const PillarFeatures feats = pfn_forward(out.tensor, params);
  const double t_encode = sw.lap();
  const Tensor3 image = scatter(feats, out.tensor.indices, out.tensor.dims);
  const double t_scatter = sw.lap();
  out.maps = head_forward(backbone_forward(image, params), params);
  const double t_backbone = sw.lap();
  if (times) {
    times->pillarize = t_pillar, times->encode = t_encode, times->scatter = t_scatter;
    times->backbone_head = t_backbone;
  }
  return out;
}

/// KITTI result records (camera frame) for detections that project into the
/// image, in descending score.
inline std::vector<kitti::LabelRecord> result_records(const std::vector<Detection>& dets, const Frame& f,
                                                      const RunConfig& cfg) {
  std::vector<kitti::LabelRecord> out;
  for (const auto& d : dets) {
    const auto img = kitti::project_box(d.box, f.calib, cfg.image_width, cfg.image_height);
    if (!img) continue;
    kitti::LabelRecord r;
    r.type = cfg.classes[d.class_id].name;
    r.truncation = -1;
    r.occlusion = -1;
    r.bbox = img->bbox;
    r = kitti::lidar_to_camera_box(d.box, f.calib, r);
    r.score = d.score;
    out.push_back(r);
  }
  return out;
}

}  // namespace pointpillars
