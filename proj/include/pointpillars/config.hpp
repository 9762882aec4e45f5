#pragma once

// Run configuration: a flat `key = value` file (`#` starts a comment) plus
// command-line overrides, validated before any work starts.

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "pointpillars/augment.hpp"
#include "pointpillars/core.hpp"
#include "pointpillars/eval.hpp"
#include "pointpillars/loss.hpp"
#include "pointpillars/targets.hpp"

namespace pointpillars {

enum class ClassSet { car, pedcyc };

struct PostprocConfig {
  double score_threshold = 0.05;
  double nms_iou = 0.5;
  std::size_t pre_nms_top_k = 1000;   // per class, 0 = unlimited
  std::size_t max_detections = 100;   // per class, 0 = unlimited
};

struct BenchConfig {
  int repeats = 5;
  bool backbone = true;
  std::vector<double> resolutions = {0.12, 0.16, 0.20, 0.24, 0.28};
};

struct RunConfig {
  ClassSet class_set = ClassSet::car;
  GridSpec grid = GridSpec::car();
  std::vector<ClassSpec> classes = {ClassSpec::car()};
  std::uint64_t seed = 0;
  int jobs = 1;
  std::filesystem::path data_root;  // empty: synthetic frames
  std::filesystem::path weights;
  std::filesystem::path out = "out";
  std::filesystem::path results;    // eval input
  std::string frame;                // restrict to one frame id
  int synthetic_frames = 1;
  bool fov_filter = true;
  int image_width = 1242, image_height = 375;
  int net_features = 64;
  PostprocConfig postproc;
  LossWeights loss;
  std::size_t gradcheck_samples = 1000;
  double gradcheck_step = 1e-3;
  AugmentConfig augment;
  int augment_db_frames = 8;
  EvalSettings eval;
  BenchConfig bench;

  [[nodiscard]] std::vector<std::string> class_names() const {
    std::vector<std::string> out;
    for (const auto& c : classes) out.push_back(c.name);
    return out;
  }
};

namespace config_detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline double to_double(const std::string& key, const std::string& v) {
  double out = 0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size() || !std::isfinite(out))
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  return out;
}

template <class Int>
Int to_int(const std::string& key, const std::string& v) {
  Int out = 0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size())
    throw ConfigError(key + ": expected an integer, got '" + v + "'");
  return out;
}

inline bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

inline std::vector<double> to_list(const std::string& key, const std::string& v) {
  std::vector<double> out;
  std::stringstream ss(v);
  for (std::string item; std::getline(ss, item, ',');) out.push_back(to_double(key, trim(item)));
  if (out.empty()) throw ConfigError(key + ": empty list");
  return out;
}

}  // namespace config_detail

inline void set_class_set(RunConfig& c, ClassSet s) {
  c.class_set = s;
  if (s == ClassSet::car) {
    c.grid = GridSpec::car();
    c.classes = {ClassSpec::car()};
  } else {
    c.grid = GridSpec::pedcyc();
    c.classes = {ClassSpec::pedestrian(), ClassSpec::cyclist()};
  }
}

inline ClassSet parse_class_set(const std::string& v) {
  if (v == "car") return ClassSet::car;
  if (v == "pedcyc") return ClassSet::pedcyc;
  throw ConfigError("class: expected car or pedcyc, got '" + v + "'");
}

/// Applies one setting. `class` resets the grid and anchors to that class
/// set's defaults, so apply_settings() handles it before anything else.
inline void apply_setting(RunConfig& c, const std::string& key, const std::string& value) {
  using namespace config_detail;
  const std::string& v = value;
  auto num = [&] { return to_double(key, v); };
  auto i32 = [&] { return to_int<int>(key, v); };
  auto u64 = [&] { return to_int<std::uint64_t>(key, v); };

  if (key == "class") set_class_set(c, parse_class_set(v));
  else if (key == "seed") c.seed = u64();
  else if (key == "jobs") c.jobs = i32();
  else if (key == "data_root") c.data_root = v;
  else if (key == "weights") c.weights = v;
  else if (key == "out") c.out = v;
  else if (key == "results") c.results = v;
  else if (key == "frame") c.frame = v;
  else if (key == "synthetic.frames") c.synthetic_frames = i32();
  else if (key == "fov_filter") c.fov_filter = to_bool(key, v);
  else if (key == "image.width") c.image_width = i32();
  else if (key == "image.height") c.image_height = i32();
  else if (key == "grid.x_min") c.grid.x_min = num();
  else if (key == "grid.x_max") c.grid.x_max = num();
  else if (key == "grid.y_min") c.grid.y_min = num();
  else if (key == "grid.y_max") c.grid.y_max = num();
  else if (key == "grid.z_min") c.grid.z_min = num();
  else if (key == "grid.z_max") c.grid.z_max = num();
  else if (key == "grid.resolution") c.grid.resolution = num();
  else if (key == "grid.max_pillars") c.grid.max_pillars = i32();
  else if (key == "grid.max_points_per_pillar") c.grid.max_points_per_pillar = i32();
  else if (key == "net.features") c.net_features = i32();
  else if (key == "postproc.score_threshold") c.postproc.score_threshold = num();
  else if (key == "postproc.nms_iou") c.postproc.nms_iou = num();
  else if (key == "postproc.pre_nms_top_k") c.postproc.pre_nms_top_k = to_int<std::size_t>(key, v);
  else if (key == "postproc.max_detections") c.postproc.max_detections = to_int<std::size_t>(key, v);
  else if (key == "loss.beta_loc") c.loss.beta_loc = num();
  else if (key == "loss.beta_cls") c.loss.beta_cls = num();
  else if (key == "loss.beta_dir") c.loss.beta_dir = num();
  else if (key == "loss.alpha") c.loss.alpha = num();
  else if (key == "loss.gamma") c.loss.gamma = num();
  else if (key == "loss.smooth_l1_transition") c.loss.smooth_l1_transition = num();
  else if (key == "loss.gradcheck_samples") c.gradcheck_samples = to_int<std::size_t>(key, v);
  else if (key == "loss.gradcheck_step") c.gradcheck_step = num();
  else if (key == "augment.sample_counts") {
    const auto l = to_list(key, v);
    if (l.size() != kNumKittiClasses) throw ConfigError(key + ": expected 3 counts (car, pedestrian, cyclist)");
    for (int k = 0; k < kNumKittiClasses; ++k) c.augment.sample_counts[k] = static_cast<int>(l[k]);
  } else if (key == "augment.box_rotation_range") c.augment.box_rotation_range = num();
  else if (key == "augment.box_translation_std") c.augment.box_translation_std = num();
  else if (key == "augment.box_perturb_attempts") c.augment.box_perturb_attempts = i32();
  else if (key == "augment.flip_probability") c.augment.flip_probability = num();
  else if (key == "augment.global_rotation_range") c.augment.global_rotation_range = num();
  else if (key == "augment.global_scale_min") c.augment.global_scale_min = num();
  else if (key == "augment.global_scale_max") c.augment.global_scale_max = num();
  else if (key == "augment.global_translation_std") c.augment.global_translation_std = num();
  else if (key == "augment.db_frames") c.augment_db_frames = i32();
  else if (key == "eval.iou_car") c.eval.iou_car = num();
  else if (key == "eval.iou_pedestrian") c.eval.iou_pedestrian = num();
  else if (key == "eval.iou_cyclist") c.eval.iou_cyclist = num();
  else if (key == "eval.recall_points") c.eval.recall_points = i32();
  else if (key == "bench.repeats") c.bench.repeats = i32();
  else if (key == "bench.backbone") c.bench.backbone = to_bool(key, v);
  else if (key == "bench.resolutions") c.bench.resolutions = to_list(key, v);
  else if (key.starts_with("anchors.")) {
    const auto dot = key.find('.', 8);
    if (dot == std::string::npos) throw ConfigError("unknown key " + key);
    const std::string cls = key.substr(8, dot - 8), field = key.substr(dot + 1);
    ClassSpec* spec = nullptr;
    for (auto& s : c.classes) {
      std::string lower = s.name;
      for (auto& ch : lower) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
      if (lower == cls) spec = &s;
    }
    if (!spec) throw ConfigError(key + ": class '" + cls + "' is not part of the active class set");
    if (field == "w") spec->w = num();
    else if (field == "l") spec->l = num();
    else if (field == "h") spec->h = num();
    else if (field == "z") spec->z_center = num();
    else if (field == "pos_threshold") spec->pos_threshold = num();
    else if (field == "neg_threshold") spec->neg_threshold = num();
    else throw ConfigError("unknown key " + key);
  } else {
    throw ConfigError("unknown key " + key);
  }
}

using Settings = std::vector<std::pair<std::string, std::string>>;

inline Settings parse_settings_text(const std::string& text, const std::string& source = "config") {
  Settings out;
  std::istringstream in(text);
  std::size_t line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = config_detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(source + ":" + std::to_string(line_no) + ": expected key = value");
    out.emplace_back(config_detail::trim(line.substr(0, eq)), config_detail::trim(line.substr(eq + 1)));
  }
  return out;
}

inline Settings parse_settings_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_settings_text(ss.str(), path.string());
}

/// Throws ConfigError on the first inconsistent field.
inline void validate(const RunConfig& c) {
  validate(c.grid);
  for (const auto& s : c.classes) validate(s);
  validate(c.loss);
  if (c.jobs < 1) throw ConfigError("jobs must be >= 1");
  if (c.synthetic_frames < 1) throw ConfigError("synthetic.frames must be >= 1");
  if (c.image_width < 1 || c.image_height < 1) throw ConfigError("image size must be positive");
  if (c.net_features < 1) throw ConfigError("net.features must be >= 1");
  if (!(c.postproc.score_threshold >= 0 && c.postproc.score_threshold <= 1))
    throw ConfigError("postproc.score_threshold must lie in [0, 1]");
  if (!(c.postproc.nms_iou >= 0 && c.postproc.nms_iou <= 1)) throw ConfigError("postproc.nms_iou must lie in [0, 1]");
  if (!(c.gradcheck_step > 0)) throw ConfigError("loss.gradcheck_step must be positive");
  for (int n : c.augment.sample_counts)
    if (n < 0) throw ConfigError("augment.sample_counts must be non-negative");
  if (!(c.augment.flip_probability >= 0 && c.augment.flip_probability <= 1))
    throw ConfigError("augment.flip_probability must lie in [0, 1]");
  if (!(c.augment.global_scale_min > 0 && c.augment.global_scale_min <= c.augment.global_scale_max))
    throw ConfigError("augment.global_scale_min/max must satisfy 0 < min <= max");
  if (c.augment.box_rotation_range < 0 || c.augment.global_rotation_range < 0 ||
      c.augment.box_translation_std < 0 || c.augment.global_translation_std < 0)
    throw ConfigError("augment ranges and deviations must be non-negative");
  if (c.augment_db_frames < 1) throw ConfigError("augment.db_frames must be >= 1");
  if (c.eval.recall_points != 11 && c.eval.recall_points != 40)
    throw ConfigError("eval.recall_points must be 11 or 40");
  for (double t : {c.eval.iou_car, c.eval.iou_pedestrian, c.eval.iou_cyclist})
    if (!(t > 0 && t <= 1)) throw ConfigError("eval IoU thresholds must lie in (0, 1]");
  if (c.bench.repeats < 1) throw ConfigError("bench.repeats must be >= 1");
  for (double r : c.bench.resolutions)
    if (!(r > 0)) throw ConfigError("bench.resolutions must be positive");
}

/// File settings first, then overrides; `class` is applied ahead of every
/// other key from the same layer so explicit grid or anchor keys survive it.
inline RunConfig build_config(const Settings& file, const Settings& overrides) {
  RunConfig c;
  auto find_class = [](const Settings& s) -> const std::string* {
    const std::string* v = nullptr;
    for (const auto& [k, val] : s)
      if (k == "class") v = &val;
    return v;
  };
  const std::string* cls = find_class(overrides);
  if (!cls) cls = find_class(file);
  if (cls) set_class_set(c, parse_class_set(*cls));
  for (const Settings* layer : {&file, &overrides})
    for (const auto& [k, v] : *layer)
      if (k != "class") apply_setting(c, k, v);
  validate(c);
  return c;
}

}  // namespace pointpillars
