#pragma once

// Ray-cast fixture frames shaped like a roof-mounted 64-beam scanner: ground
// plane, building facades and labeled objects. Used wherever no real KITTI
// data is available (tests, selfcheck, bench).

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <cstdio>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "pointpillars/augment.hpp"
#include "pointpillars/geometry.hpp"
#include "pointpillars/kitti.hpp"
#include "pointpillars/rng.hpp"

namespace pointpillars::synthetic {

/// Two laser blocks as on the HDL-64E: the upper 32 beams span +2 to -8.33
/// degrees, the lower 32 span -8.83 to -24.33 degrees.
struct ScannerConfig {
  int beams_per_block = 32;
  double upper_top_deg = 2.0, upper_bottom_deg = -8.33;
  double lower_top_deg = -8.83, lower_bottom_deg = -24.33;
  int azimuth_steps = 4000;  // 0.09 degree
  double sensor_height = 1.73;
  double max_range = 120.0;
  double range_noise = 0.02;
  int cars = 8;
  int pedestrians = 4;
  int cyclists = 3;
  int clutter = 60;  // bushes, trunks and poles along the road sides
  double terrain_amplitude = 0.12;  // peak ground height deviation, meters

  [[nodiscard]] std::vector<double> elevations_deg() const {
    std::vector<double> out;
    const int n = std::max(1, beams_per_block - 1);
    for (int i = 0; i < beams_per_block; ++i) out.push_back(upper_top_deg + (upper_bottom_deg - upper_top_deg) * i / n);
    for (int i = 0; i < beams_per_block; ++i) out.push_back(lower_top_deg + (lower_bottom_deg - lower_top_deg) * i / n);
    return out;
  }
};

/// Gently rolling ground: a few long-wavelength waves around z = base.
struct Terrain {
  double base = 0;
  std::array<std::array<double, 4>, 3> waves{};  // kx, ky, phase, amplitude

  [[nodiscard]] double height(double x, double y) const {
    double z = base;
    for (const auto& w : waves) z += w[3] * std::sin(w[0] * x + w[1] * y + w[2]);
    return z;
  }

  static Terrain random(double base, double amplitude, Rng& rng) {
    Terrain t;
    t.base = base;
    for (auto& w : t.waves) {
      const double k = 2 * kPi / rng.uniform(12, 40), dir = rng.uniform(-kPi, kPi);
      w = {k * std::cos(dir), k * std::sin(dir), rng.uniform(-kPi, kPi), amplitude / 3};
    }
    return t;
  }
};

struct Wall {
  double y;            // facade plane y = const
  double x0, x1;       // extent along x
  double height;       // top above ground
};

namespace detail {

/// Ray / oriented box slab test. Returns the entry distance or +inf.
inline double ray_box(const Vec3& o, const Vec3& d, const Box3D& b) {
  const Vec3 lo = to_box_frame(b, o);
  const double c = std::cos(b.theta), s = std::sin(b.theta);
  const Vec3 ld{c * d.x + s * d.y, -s * d.x + c * d.y, d.z};
  const double half[3] = {0.5 * b.l, 0.5 * b.w, 0.5 * b.h};
  const double org[3] = {lo.x, lo.y, lo.z}, dir[3] = {ld.x, ld.y, ld.z};
  double t0 = 0.0, t1 = std::numeric_limits<double>::infinity();
  for (int a = 0; a < 3; ++a) {
    if (std::abs(dir[a]) < 1e-12) {
      if (std::abs(org[a]) > half[a]) return std::numeric_limits<double>::infinity();
      continue;
    }
    double ta = (-half[a] - org[a]) / dir[a], tb = (half[a] - org[a]) / dir[a];
    if (ta > tb) std::swap(ta, tb);
    t0 = std::max(t0, ta), t1 = std::min(t1, tb);
    if (t0 > t1) return std::numeric_limits<double>::infinity();
  }
  return t0 > 0 ? t0 : std::numeric_limits<double>::infinity();
}

inline Box3D random_object(int cls, Rng& rng, double ground_z) {
  double w, l, h, x, y;
  if (cls == 0) {
    w = rng.uniform(1.5, 1.8), l = rng.uniform(3.6, 4.6), h = rng.uniform(1.4, 1.6);
    x = rng.uniform(5, 60), y = rng.uniform(-12, 12);
  } else if (cls == 1) {
    w = rng.uniform(0.5, 0.7), l = rng.uniform(0.6, 0.9), h = rng.uniform(1.6, 1.85);
    x = rng.uniform(4, 35), y = rng.uniform(-10, 10);
  } else {
    w = rng.uniform(0.5, 0.7), l = rng.uniform(1.6, 1.9), h = rng.uniform(1.6, 1.8);
    x = rng.uniform(4, 35), y = rng.uniform(-10, 10);
  }
  const double yaw = (cls == 0 && rng.bernoulli(0.7)) ? (rng.bernoulli(0.5) ? 0.0 : kPi) + rng.normal(0, 0.05)
                                                      : rng.uniform(-kPi, kPi);
  return {x, y, ground_z + 0.5 * h, w, l, h, normalize_angle(yaw)};
}

}  // namespace detail

/// One frame: points in the scanner frame plus the objects that produced them.
inline Scene make_scene(std::uint64_t seed, const ScannerConfig& cfg = {}) {
  Rng rng(seed);
  const double ground = -cfg.sensor_height;
  const Terrain terrain = Terrain::random(ground, cfg.terrain_amplitude, rng);
  Scene scene;
  auto place = [&](int cls, int count) {
    for (int i = 0, tries = 0; i < count && tries < 400; ++tries) {
      Box3D b = detail::random_object(cls, rng, ground);
      // Keep the own lane clear just ahead; a car there hides most of the view.
      if (b.x < 15 && std::abs(b.y) < 2.5) continue;
      b.z = terrain.height(b.x, b.y) + 0.5 * b.h;
      Box3D grown = b;
      grown.w += 0.6, grown.l += 0.6;
      const bool clash = std::any_of(scene.boxes.begin(), scene.boxes.end(), [&](const LabeledBox& o) {
        return iou_bev_rotated(grown, o.box) > 0.0;
      });
      if (clash) continue;
      scene.boxes.push_back({b, cls});
      ++i;
    }
  };
  place(0, cfg.cars);
  place(1, cfg.pedestrians);
  place(2, cfg.cyclists);

  std::vector<Wall> walls;
  for (double side : {-1.0, 1.0}) {
    double x = -60;
    while (x < 110) {
      const double len = rng.uniform(8, 30);
      if (rng.bernoulli(0.6)) walls.push_back({side * rng.uniform(16, 32), x, x + len, rng.uniform(4, 12)});
      x += len + rng.uniform(2, 10);
    }
  }

  // Unlabeled clutter: small boxes off the road.
  std::vector<Box3D> clutter;
  for (int i = 0, tries = 0; i < cfg.clutter && tries < 20 * cfg.clutter; ++tries) {
    const double side = rng.bernoulli(0.5) ? 1.0 : -1.0;
    const double w = rng.uniform(0.2, 2.5), l = rng.uniform(0.2, 3.0), h = rng.uniform(0.3, 4.0);
    Box3D b{rng.uniform(-20, 80), side * rng.uniform(10, 32), 0, w, l, h, rng.uniform(-kPi, kPi)};
    b.z = terrain.height(b.x, b.y) + 0.5 * h;
    const bool clash = std::any_of(scene.boxes.begin(), scene.boxes.end(),
                                   [&](const LabeledBox& o) { return iou_bev_rotated(b, o.box) > 0.0; });
    if (clash) continue;
    clutter.push_back(b);
    ++i;
  }

  const Vec3 origin{0, 0, 0};
  for (double elev_deg : cfg.elevations_deg()) {
    const double elev = elev_deg * kPi / 180.0;
    for (int a = 0; a < cfg.azimuth_steps; ++a) {
      const double az = -kPi + 2 * kPi * (a + 0.5) / cfg.azimuth_steps;
      const Vec3 d{std::cos(elev) * std::cos(az), std::cos(elev) * std::sin(az), std::sin(elev)};
      double best = cfg.max_range;
      float refl = -1.f;
      if (d.z < 0) {
        // A few fixed-point steps onto the rolling surface from the flat hit.
        double t = ground / d.z;
        for (int it = 0; it < 4; ++it) t = terrain.height(t * d.x, t * d.y) / d.z;
        if (t > 0 && t < best) best = t, refl = 0.1f;
      }
      for (const Wall& w : walls) {
        if (std::abs(d.y) < 1e-9) continue;
        const double t = w.y / d.y;
        if (t <= 0 || t >= best) continue;
        const double x = t * d.x, z = t * d.z;
        if (x >= w.x0 && x <= w.x1 && z >= ground && z <= ground + w.height) best = t, refl = 0.3f;
      }
      for (const Box3D& b : clutter) {
        const double t = detail::ray_box(origin, d, b);
        if (t < best) best = t, refl = 0.2f;
      }
      for (const LabeledBox& b : scene.boxes) {
        const double t = detail::ray_box(origin, d, b.box);
        if (t < best) best = t, refl = 0.6f;
      }
      if (refl < 0) continue;
      // Noise moves the return along the ray only, so object returns stay
      // near their surface.
      const double t = best + rng.normal(0, cfg.range_noise);
      const float r = std::clamp(refl + static_cast<float>(rng.uniform(-0.1, 0.1)), 0.f, 1.f);
      scene.points.push_back(
          {static_cast<float>(t * d.x), static_cast<float>(t * d.y), static_cast<float>(t * d.z), r});
    }
  }
  return scene;
}

/// KITTI label for a lidar box: camera-frame pose plus the clipped 2D box
/// (values rounded to label-file precision). Empty when not in view.
inline std::optional<kitti::LabelRecord> label_for(const LabeledBox& lb, const kitti::CalibMatrices& calib,
                                                   int image_w = 1242, int image_h = 375) {
  const auto img = kitti::project_box(lb.box, calib, image_w, image_h);
  if (!img) return std::nullopt;
  auto r2 = [](double v) { return std::round(v * 100) / 100; };
  kitti::LabelRecord r;
  r.type = kitti::kClassNames[lb.class_id];
  r.truncation = r2(img->truncation);
  r.occlusion = 0;
  r.bbox = {r2(img->bbox.left), r2(img->bbox.top), r2(img->bbox.right), r2(img->bbox.bottom)};
  return kitti::lidar_to_camera_box(lb.box, calib, r);
}

/// Writes frames 000000 .. n-1 in the KITTI training layout under `root`:
/// velodyne/, label_2/, calib/.
inline void write_kitti_fixture(const std::filesystem::path& root, int frames, std::uint64_t seed,
                                const ScannerConfig& cfg = {}) {
  const auto calib = kitti::CalibMatrices::kitti_typical();
  for (int i = 0; i < frames; ++i) {
    char id[16];
    std::snprintf(id, sizeof id, "%06d", i);
    const Scene s = make_scene(Rng(seed).derive(static_cast<std::uint64_t>(i)).seed(), cfg);
    kitti::write_velodyne_bin(root / "velodyne" / (std::string(id) + ".bin"), s.points);
    std::vector<kitti::LabelRecord> labels;
    for (const auto& b : s.boxes)
      if (auto r = label_for(b, calib)) labels.push_back(*r);
    kitti::write_labels(root / "label_2" / (std::string(id) + ".txt"), labels);
    const std::string c = kitti::format_calib(calib);
    write_file_bytes(root / "calib" / (std::string(id) + ".txt"), std::vector<std::uint8_t>(c.begin(), c.end()));
  }
}

}  // namespace pointpillars::synthetic
