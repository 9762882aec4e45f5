#pragma once

// Training-time augmentation applied jointly to points and boxes:
// ground-truth database sampling, per-box perturbation, global transforms.
//
// Every operation takes its randomness from a RandomSource, so tests can pass
// stubs that return fixed draws.

#include <algorithm>
#include <array>
#include <cmath>
#include <concepts>
#include <cstdio>
#include <cstdint>
#include <string>
#include <vector>

#include "pointpillars/container.hpp"
#include "pointpillars/core.hpp"
#include "pointpillars/geometry.hpp"
#include "pointpillars/rng.hpp"

namespace pointpillars {

template <class R>
concept RandomSource = requires(R r, double a, double b, std::uint64_t n) {
  { r.uniform(a, b) } -> std::convertible_to<double>;
  { r.normal(a, b) } -> std::convertible_to<double>;
  { r.bernoulli(a) } -> std::convertible_to<bool>;
  { r.uniform_int(n) } -> std::convertible_to<std::uint64_t>;
};

static_assert(RandomSource<Rng>);

inline constexpr int kNumKittiClasses = 3;  // Car, Pedestrian, Cyclist

struct LabeledBox {
  Box3D box;
  int class_id = 0;
};

struct Scene {
  std::vector<Point> points;
  std::vector<LabeledBox> boxes;
};

struct AugmentConfig {
  std::array<int, kNumKittiClasses> sample_counts = {15, 0, 8};
  double box_rotation_range = kPi / 20;  // U[-r, r]
  double box_translation_std = 0.25;
  int box_perturb_attempts = 100;
  double flip_probability = 0.5;
  double global_rotation_range = kPi / 4;
  double global_scale_min = 0.95;
  double global_scale_max = 1.05;
  double global_translation_std = 0.2;
};

// ---------------------------------------------------------------------------
// Ground-truth database

struct GtEntry {
  int class_id = 0;
  Box3D box;
  std::vector<Vec3> local_points;  // box frame
  std::vector<float> reflectance;

  [[nodiscard]] std::vector<Vec3> world_points() const {
    std::vector<Vec3> out;
    out.reserve(local_points.size());
    for (const auto& q : local_points) out.push_back(from_box_frame(box, q));
    return out;
  }
};

struct GtDatabase {
  std::vector<GtEntry> entries;

  [[nodiscard]] std::vector<std::size_t> of_class(int class_id) const {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < entries.size(); ++i)
      if (entries[i].class_id == class_id) idx.push_back(i);
    return idx;
  }
};

inline GtDatabase build_gt_database(const std::vector<Scene>& frames) {
  GtDatabase db;
  for (const Scene& s : frames)
    for (const LabeledBox& lb : s.boxes) {
      GtEntry e;
      e.class_id = lb.class_id;
      e.box = lb.box;
      for (const Point& p : s.points) {
        const Vec3 w{p.x, p.y, p.z};
        if (!point_in_box(lb.box, w)) continue;
        e.local_points.push_back(to_box_frame(lb.box, w));
        e.reflectance.push_back(p.r);
      }
      db.entries.push_back(std::move(e));
    }
  return db;
}

/// Entry i is stored as "gtdb.<i>.meta" = [class, x, y, z, w, l, h, theta] and
/// "gtdb.<i>.points" = (n, 4) local x, y, z, reflectance.
inline TensorMap gt_database_to_tensors(const GtDatabase& db) {
  TensorMap out;
  for (std::size_t i = 0; i < db.entries.size(); ++i) {
    const GtEntry& e = db.entries[i];
    char key[32];
    std::snprintf(key, sizeof key, "gtdb.%06zu", i);
    Tensor meta({8});
    meta.data = {static_cast<float>(e.class_id), static_cast<float>(e.box.x), static_cast<float>(e.box.y),
                 static_cast<float>(e.box.z),     static_cast<float>(e.box.w), static_cast<float>(e.box.l),
                 static_cast<float>(e.box.h),     static_cast<float>(e.box.theta)};
    Tensor pts({static_cast<std::uint32_t>(e.local_points.size()), 4});
    for (std::size_t j = 0; j < e.local_points.size(); ++j) {
      pts.data[j * 4 + 0] = static_cast<float>(e.local_points[j].x);
      pts.data[j * 4 + 1] = static_cast<float>(e.local_points[j].y);
      pts.data[j * 4 + 2] = static_cast<float>(e.local_points[j].z);
      pts.data[j * 4 + 3] = e.reflectance[j];
    }
    out.emplace(std::string(key) + ".meta", std::move(meta));
    out.emplace(std::string(key) + ".points", std::move(pts));
  }
  return out;
}

inline GtDatabase gt_database_from_tensors(const TensorMap& tensors) {
  GtDatabase db;
  for (const auto& [name, t] : tensors) {
    if (!name.starts_with("gtdb.")) throw FormatError("gt database: unexpected tensor " + name);
    if (!name.ends_with(".meta")) continue;
    const std::string stem = name.substr(0, name.size() - 5);
    const auto pit = tensors.find(stem + ".points");
    if (pit == tensors.end() || t.shape != std::vector<std::uint32_t>{8} || pit->second.shape.size() != 2 ||
        pit->second.shape[1] != 4)
      throw FormatError("gt database: malformed entry " + stem);
    GtEntry e;
    e.class_id = static_cast<int>(t.data[0]);
    e.box = {t.data[1], t.data[2], t.data[3], t.data[4], t.data[5], t.data[6], t.data[7]};
    const auto& p = pit->second;
    for (std::uint32_t j = 0; j < p.shape[0]; ++j) {
      e.local_points.push_back({p.data[j * 4], p.data[j * 4 + 1], p.data[j * 4 + 2]});
      e.reflectance.push_back(p.data[j * 4 + 3]);
    }
    db.entries.push_back(std::move(e));
  }
  return db;
}

// ---------------------------------------------------------------------------
// Sampling

struct SampleResult {
  Scene scene;
  std::size_t placed = 0;
  std::size_t rejected = 0;
  bool database_short = false;  // fewer entries than requested for some class
};

/// Pastes database objects at their stored poses. Candidates whose rotated BEV
/// footprint overlaps an existing or already placed box are rejected; scene
/// points inside an accepted box are removed before its points are added.
template <RandomSource R>
SampleResult sample_gt(const GtDatabase& db, const Scene& scene, const std::array<int, kNumKittiClasses>& counts,
                       R& rng) {
  SampleResult res;
  std::vector<LabeledBox> boxes = scene.boxes;
  std::vector<const GtEntry*> accepted;
  for (int k = 0; k < kNumKittiClasses; ++k) {
    if (counts[k] <= 0) continue;
    std::vector<std::size_t> pool = db.of_class(k);
    std::size_t want = static_cast<std::size_t>(counts[k]);
    if (want > pool.size()) {
      res.database_short = true;
      want = pool.size();
    }
    // partial Fisher-Yates: the first `want` entries are a uniform random draw
    for (std::size_t i = 0; i < want; ++i) std::swap(pool[i], pool[i + rng.uniform_int(pool.size() - i)]);
    for (std::size_t i = 0; i < want; ++i) {
      const GtEntry& cand = db.entries[pool[i]];
      const bool collides = std::any_of(boxes.begin(), boxes.end(), [&](const LabeledBox& b) {
        return iou_bev_rotated(cand.box, b.box) > 0.0;
      });
      if (collides) {
        ++res.rejected;
        continue;
      }
      boxes.push_back({cand.box, cand.class_id});
      accepted.push_back(&cand);
    }
  }
  res.placed = accepted.size();
  res.scene.boxes = std::move(boxes);
  for (const Point& p : scene.points) {
    const bool covered =
        std::any_of(accepted.begin(), accepted.end(), [&](const GtEntry* e) { return point_in_box(e->box, p); });
    if (!covered) res.scene.points.push_back(p);
  }
  for (const GtEntry* e : accepted) {
    const auto world = e->world_points();
    for (std::size_t j = 0; j < world.size(); ++j)
      res.scene.points.push_back(
          {static_cast<float>(world[j].x), static_cast<float>(world[j].y), static_cast<float>(world[j].z),
           e->reflectance[j]});
  }
  return res;
}

// ---------------------------------------------------------------------------
// Per-box perturbation

struct BoxPerturbation {
  double rotation = 0;
  Vec3 translation;
  bool applied = false;
};

/// Index of the first box containing each point, or -1.
inline std::vector<int> box_membership(const Scene& scene) {
  std::vector<int> owner(scene.points.size(), -1);
  for (std::size_t i = 0; i < scene.points.size(); ++i)
    for (std::size_t b = 0; b < scene.boxes.size(); ++b)
      if (point_in_box(scene.boxes[b].box, scene.points[i])) {
        owner[i] = static_cast<int>(b);
        break;
      }
  return owner;
}

namespace augment_detail {
inline Vec3 rotate_about(Vec3 p, Vec3 center, double angle) {
  const double c = std::cos(angle), s = std::sin(angle);
  const double dx = p.x - center.x, dy = p.y - center.y;
  return {center.x + c * dx - s * dy, center.y + s * dx + c * dy, p.z};
}
inline Point to_point(Vec3 v, float r) {
  return {static_cast<float>(v.x), static_cast<float>(v.y), static_cast<float>(v.z), r};
}
}  // namespace augment_detail

/// Rotates each box (and the points inside it) about its own center and
/// translates both together. A draw is retried, up to the configured number
/// of attempts, when the moved box would overlap another box or swallow a
/// point it does not own; if every attempt fails the box stays put.
template <RandomSource R>
std::vector<BoxPerturbation> perturb_boxes(Scene& scene, R& rng, const AugmentConfig& cfg = {}) {
  using augment_detail::rotate_about;
  const std::vector<int> owner = box_membership(scene);
  std::vector<BoxPerturbation> applied(scene.boxes.size());
  for (std::size_t b = 0; b < scene.boxes.size(); ++b) {
    const Box3D orig = scene.boxes[b].box;
    for (int attempt = 0; attempt < std::max(1, cfg.box_perturb_attempts); ++attempt) {
      const double rot = rng.uniform(-cfg.box_rotation_range, cfg.box_rotation_range);
      const Vec3 t{rng.normal(0.0, cfg.box_translation_std), rng.normal(0.0, cfg.box_translation_std),
                   rng.normal(0.0, cfg.box_translation_std)};
      Box3D moved = orig;
      moved.x += t.x, moved.y += t.y, moved.z += t.z;
      moved.theta = normalize_angle(orig.theta + rot);

      bool ok = true;
      for (std::size_t o = 0; o < scene.boxes.size() && ok; ++o)
        if (o != b && iou_bev_rotated(moved, scene.boxes[o].box) > 0.0) ok = false;
      for (std::size_t i = 0; i < scene.points.size() && ok; ++i)
        if (owner[i] != static_cast<int>(b) && point_in_box(moved, scene.points[i])) ok = false;
      if (!ok) continue;

      const Vec3 center{orig.x, orig.y, orig.z};
      for (std::size_t i = 0; i < scene.points.size(); ++i) {
        if (owner[i] != static_cast<int>(b)) continue;
        Point& p = scene.points[i];
        Vec3 q = rotate_about({p.x, p.y, p.z}, center, rot);
        p = augment_detail::to_point({q.x + t.x, q.y + t.y, q.z + t.z}, p.r);
      }
      scene.boxes[b].box = moved;
      applied[b] = {rot, t, true};
      break;
    }
  }
  return applied;
}

// ---------------------------------------------------------------------------
// Global transforms

struct GlobalDraws {
  bool flip = false;
  double rotation = 0;
  double scale = 1;
  Vec3 translation;
};

/// Reflection across the x-z plane (y -> -y, theta -> -theta).
inline void mirror_y(Scene& scene) {
  for (Point& p : scene.points) p.y = -p.y;
  for (LabeledBox& b : scene.boxes) {
    b.box.y = -b.box.y;
    b.box.theta = normalize_angle(-b.box.theta);
  }
}

/// Applies one set of global draws to a point: flip, rotate, scale, translate.
inline Vec3 apply_global(const GlobalDraws& d, Vec3 p) {
  if (d.flip) p.y = -p.y;
  const double c = std::cos(d.rotation), s = std::sin(d.rotation);
  p = {c * p.x - s * p.y, s * p.x + c * p.y, p.z};
  return {p.x * d.scale + d.translation.x, p.y * d.scale + d.translation.y, p.z * d.scale + d.translation.z};
}

inline Box3D apply_global(const GlobalDraws& d, Box3D b) {
  const Vec3 c = apply_global(d, Vec3{b.x, b.y, b.z});
  double theta = d.flip ? -b.theta : b.theta;
  return {c.x, c.y, c.z, b.w * d.scale, b.l * d.scale, b.h * d.scale, normalize_angle(theta + d.rotation)};
}

inline void apply_global(const GlobalDraws& d, Scene& scene) {
  for (Point& p : scene.points) p = augment_detail::to_point(apply_global(d, Vec3{p.x, p.y, p.z}), p.r);
  for (LabeledBox& b : scene.boxes) b.box = apply_global(d, b.box);
}

/// Random flip, rotation about the origin, scaling and translation, in that
/// order, applied to points and boxes alike.
template <RandomSource R>
GlobalDraws global_augment(Scene& scene, R& rng, const AugmentConfig& cfg = {}) {
  GlobalDraws d;
  d.flip = rng.bernoulli(cfg.flip_probability);
  d.rotation = rng.uniform(-cfg.global_rotation_range, cfg.global_rotation_range);
  d.scale = rng.uniform(cfg.global_scale_min, cfg.global_scale_max);
  d.translation = {rng.normal(0.0, cfg.global_translation_std), rng.normal(0.0, cfg.global_translation_std),
                   rng.normal(0.0, cfg.global_translation_std)};
  apply_global(d, scene);
  return d;
}

}  // namespace pointpillars
