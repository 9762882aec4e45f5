#pragma once

// KITTI object-benchmark I/O: velodyne scans, label files, calibration, frame
// conversion, camera field-of-view filter and difficulty bands.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "pointpillars/container.hpp"
#include "pointpillars/core.hpp"
#include "pointpillars/geometry.hpp"

namespace pointpillars::kitti {

// ---------------------------------------------------------------------------
// Velodyne

inline std::vector<Point> decode_velodyne(const std::vector<std::uint8_t>& bytes, const std::string& source) {
  if (bytes.size() % 16 != 0)
    throw DataError(source + ": velodyne file length " + std::to_string(bytes.size()) +
                    " is not a multiple of 16 bytes");
  std::vector<Point> pts(bytes.size() / 16);
  auto f32 = [&](std::size_t off) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes[off + i]) << (8 * i);
    return std::bit_cast<float>(v);
  };
  for (std::size_t i = 0; i < pts.size(); ++i)
    pts[i] = {f32(i * 16), f32(i * 16 + 4), f32(i * 16 + 8), f32(i * 16 + 12)};
  return pts;
}

inline std::vector<Point> read_velodyne_bin(const std::filesystem::path& path) {
  return decode_velodyne(read_file_bytes(path), path.string());
}

inline void write_velodyne_bin(const std::filesystem::path& path, const std::vector<Point>& pts) {
  std::vector<std::uint8_t> bytes;
  bytes.reserve(pts.size() * 16);
  for (const Point& p : pts)
    for (float f : {p.x, p.y, p.z, p.r}) {
      const auto v = std::bit_cast<std::uint32_t>(f);
      for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
  write_file_bytes(path, bytes);
}

// ---------------------------------------------------------------------------
// Labels

struct BBox2D {
  double left = -1, top = -1, right = -1, bottom = -1;

  [[nodiscard]] bool valid() const { return right > left && bottom > top; }
  [[nodiscard]] double height() const { return bottom - top; }
  [[nodiscard]] double area() const { return valid() ? (right - left) * (bottom - top) : 0.0; }
};

/// One line of a KITTI label or result file. Camera-frame location is the
/// bottom center of the box.
struct LabelRecord {
  std::string type;
  double truncation = 0;
  int occlusion = 0;
  double alpha = 0;
  BBox2D bbox;
  double h = 0, w = 0, l = 0;
  double x = 0, y = 0, z = 0;
  double rotation_y = 0;
  std::optional<double> score;  // present in result files

  [[nodiscard]] bool dont_care() const { return type == "DontCare"; }
};

inline LabelRecord parse_label_line(const std::string& line, const std::string& source, std::size_t line_no) {
  std::istringstream in(line);
  std::vector<std::string> tok;
  for (std::string t; in >> t;) tok.push_back(t);
  auto fail = [&](const std::string& why) {
    return DataError(source + ":" + std::to_string(line_no) + ": " + why);
  };
  if (tok.size() != 15 && tok.size() != 16)
    throw fail("expected 15 or 16 fields, found " + std::to_string(tok.size()));
  std::array<double, 15> v{};
  for (std::size_t i = 1; i < tok.size(); ++i) {
    std::size_t used = 0;
    try {
      v[i - 1] = std::stod(tok[i], &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != tok[i].size()) throw fail("field " + std::to_string(i + 1) + " is not a number: " + tok[i]);
  }
  LabelRecord r;
  r.type = tok[0];
  r.truncation = v[0];
  r.occlusion = static_cast<int>(v[1]);
  r.alpha = v[2];
  r.bbox = {v[3], v[4], v[5], v[6]};
  r.h = v[7], r.w = v[8], r.l = v[9];
  r.x = v[10], r.y = v[11], r.z = v[12];
  r.rotation_y = v[13];
  if (tok.size() == 16) r.score = v[14];
  return r;
}

inline std::vector<LabelRecord> parse_labels_text(const std::string& text, const std::string& source = "labels") {
  std::vector<LabelRecord> out;
  std::istringstream in(text);
  std::size_t line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    out.push_back(parse_label_line(line, source, line_no));
  }
  return out;
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline std::vector<LabelRecord> parse_labels(const std::filesystem::path& path) {
  return parse_labels_text(read_text(path), path.string());
}

/// KITTI text layout; values printed with enough digits to round trip.
inline std::string format_label(const LabelRecord& r) {
  std::ostringstream o;
  o << std::setprecision(9);
  o << r.type << ' ' << r.truncation << ' ' << r.occlusion << ' ' << r.alpha << ' ' << r.bbox.left << ' '
    << r.bbox.top << ' ' << r.bbox.right << ' ' << r.bbox.bottom << ' ' << r.h << ' ' << r.w << ' ' << r.l << ' '
    << r.x << ' ' << r.y << ' ' << r.z << ' ' << r.rotation_y;
  if (r.score) o << ' ' << *r.score;
  return o.str();
}

inline void write_labels(const std::filesystem::path& path, const std::vector<LabelRecord>& records) {
  std::string text;
  for (const auto& r : records) text += format_label(r) + "\n";
  write_file_bytes(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

// ---------------------------------------------------------------------------
// Calibration

struct CalibMatrices {
  Eigen::Matrix<double, 3, 4> P2 = Eigen::Matrix<double, 3, 4>::Zero();
  Eigen::Matrix3d R0_rect = Eigen::Matrix3d::Identity();
  Eigen::Matrix<double, 3, 4> Tr_velo_to_cam = Eigen::Matrix<double, 3, 4>::Zero();

  /// Axis permutation only: x_cam = -y, y_cam = -z, z_cam = x; a simple
  /// pinhole P2 for a 1242 x 375 image.
  static CalibMatrices identity_like() {
    CalibMatrices c;
    c.Tr_velo_to_cam << 0, -1, 0, 0, 0, 0, -1, 0, 1, 0, 0, 0;
    c.P2 << 720, 0, 621, 0, 0, 720, 187.5, 0, 0, 0, 1, 0;
    return c;
  }

  /// Calibration of a typical KITTI object frame (values rounded).
  static CalibMatrices kitti_typical() {
    CalibMatrices c;
    c.P2 << 721.5377, 0, 609.5593, 44.85728, 0, 721.5377, 172.854, 0.2163791, 0, 0, 1, 0.002745884;
    c.R0_rect << 0.9999239, 0.00983776, -0.007445048, -0.009869795, 0.9999421, -0.004278459, 0.007402527,
        0.004351614, 0.9999631;
    c.Tr_velo_to_cam << 0.007533745, -0.9999714, -0.000616602, -0.004069766, 0.01480249, 0.0007280733, -0.9998902,
        -0.07631618, 0.9998621, 0.00752379, 0.01480755, -0.2717806;
    return c;
  }
};

inline void validate(const CalibMatrices& c) {
  if (!c.P2.allFinite() || !c.R0_rect.allFinite() || !c.Tr_velo_to_cam.allFinite())
    throw DataError("calibration: non-finite entries");
  if (!(c.R0_rect * c.R0_rect.transpose()).isApprox(Eigen::Matrix3d::Identity(), 1e-3))
    throw DataError("calibration: R0_rect is not orthonormal");
  if (std::abs(c.Tr_velo_to_cam.leftCols<3>().determinant()) < 1e-9)
    throw DataError("calibration: Tr_velo_to_cam is singular");
}

inline CalibMatrices parse_calib_text(const std::string& text, const std::string& source = "calib") {
  CalibMatrices c;
  std::set<std::string> seen;
  std::istringstream in(text);
  std::size_t line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    const auto colon = line.find(':');
    if (colon == std::string::npos) continue;
    const std::string key = line.substr(0, colon);
    std::istringstream vals(line.substr(colon + 1));
    std::vector<double> v;
    for (double d; vals >> d;) v.push_back(d);
    auto need = [&](std::size_t n) {
      if (v.size() != n)
        throw DataError(source + ":" + std::to_string(line_no) + ": " + key + " needs " + std::to_string(n) +
                        " values, found " + std::to_string(v.size()));
    };
    if (key == "P2") {
      need(12);
      for (int i = 0; i < 12; ++i) c.P2(i / 4, i % 4) = v[i];
    } else if (key == "R0_rect") {
      need(9);
      for (int i = 0; i < 9; ++i) c.R0_rect(i / 3, i % 3) = v[i];
    } else if (key == "Tr_velo_to_cam") {
      need(12);
      for (int i = 0; i < 12; ++i) c.Tr_velo_to_cam(i / 4, i % 4) = v[i];
    } else {
      continue;
    }
    seen.insert(key);
  }
  for (const char* k : {"P2", "R0_rect", "Tr_velo_to_cam"})
    if (!seen.contains(k)) throw DataError(source + ": missing " + std::string(k));
  validate(c);
  return c;
}

inline CalibMatrices parse_calib(const std::filesystem::path& path) {
  return parse_calib_text(read_text(path), path.string());
}

inline std::string format_calib(const CalibMatrices& c) {
  std::ostringstream o;
  o << std::setprecision(12);
  auto row = [&](const char* key, const auto& m) {
    o << key << ':';
    for (int i = 0; i < m.rows(); ++i)
      for (int j = 0; j < m.cols(); ++j) o << ' ' << m(i, j);
    o << '\n';
  };
  row("P2", c.P2);
  row("R0_rect", c.R0_rect);
  row("Tr_velo_to_cam", c.Tr_velo_to_cam);
  return o.str();
}

/// Lidar -> rectified camera: X_rect = R0_rect * (R * X + t).
inline Eigen::Vector3d lidar_to_rect(const CalibMatrices& c, const Eigen::Vector3d& p) {
  return c.R0_rect * (c.Tr_velo_to_cam.leftCols<3>() * p + c.Tr_velo_to_cam.col(3));
}

inline Eigen::Vector3d rect_to_lidar(const CalibMatrices& c, const Eigen::Vector3d& p) {
  const Eigen::Vector3d unrect = c.R0_rect.partialPivLu().solve(p);
  return c.Tr_velo_to_cam.leftCols<3>().partialPivLu().solve(unrect - c.Tr_velo_to_cam.col(3));
}

/// Camera label -> lidar Box3D. The camera location is the bottom center
/// (camera y points down), so the center sits h/2 above it; the yaw maps as
/// theta = -rotation_y - pi/2.
inline Box3D camera_to_lidar_box(const LabelRecord& r, const CalibMatrices& c) {
  const Eigen::Vector3d center = rect_to_lidar(c, Eigen::Vector3d(r.x, r.y - 0.5 * r.h, r.z));
  return {center.x(), center.y(), center.z(), r.w, r.l, r.h, normalize_angle(-r.rotation_y - kPi / 2)};
}

/// Inverse of camera_to_lidar_box; fills location, dims and rotation_y.
inline LabelRecord lidar_to_camera_box(const Box3D& b, const CalibMatrices& c, LabelRecord r = {}) {
  const Eigen::Vector3d center = lidar_to_rect(c, Eigen::Vector3d(b.x, b.y, b.z));
  r.x = center.x(), r.y = center.y() + 0.5 * b.h, r.z = center.z();
  r.h = b.h, r.w = b.w, r.l = b.l;
  r.rotation_y = normalize_angle(-b.theta - kPi / 2);
  r.alpha = normalize_angle(r.rotation_y - std::atan2(r.x, r.z));
  return r;
}

/// Keeps points in front of the camera whose projection falls inside
/// [0, image_w) x [0, image_h).
inline std::vector<Point> fov_filter(const std::vector<Point>& pts, const CalibMatrices& c, int image_w, int image_h) {
  std::vector<Point> out;
  out.reserve(pts.size() / 4);
  const Eigen::Matrix3d M = c.P2.leftCols<3>();
  const Eigen::Vector3d m = c.P2.col(3);
  for (const Point& p : pts) {
    const Eigen::Vector3d rect = lidar_to_rect(c, Eigen::Vector3d(p.x, p.y, p.z));
    if (!(rect.z() > 0)) continue;
    const Eigen::Vector3d uvw = M * rect + m;
    if (!(uvw.z() > 0)) continue;
    const double u = uvw.x() / uvw.z(), v = uvw.y() / uvw.z();
    if (u >= 0 && u < image_w && v >= 0 && v < image_h) out.push_back(p);
  }
  return out;
}

struct ImageBox {
  BBox2D bbox;
  double truncation = 0;  // fraction of the projected box outside the image
};

/// 2D box of a lidar-frame box's projected corners, clipped to the image.
/// Empty when a corner lies behind the camera or nothing stays visible.
inline std::optional<ImageBox> project_box(const Box3D& b, const CalibMatrices& c, int image_w, int image_h) {
  double u0 = 1e300, v0 = 1e300, u1 = -1e300, v1 = -1e300;
  for (const Vec3& p : box_corners(b)) {
    const Eigen::Vector3d rect = lidar_to_rect(c, Eigen::Vector3d(p.x, p.y, p.z));
    if (rect.z() <= 0.1) return std::nullopt;
    const Eigen::Vector3d uvw = c.P2.leftCols<3>() * rect + c.P2.col(3);
    const double u = uvw.x() / uvw.z(), v = uvw.y() / uvw.z();
    u0 = std::min(u0, u), u1 = std::max(u1, u), v0 = std::min(v0, v), v1 = std::max(v1, v);
  }
  const double full = (u1 - u0) * (v1 - v0);
  ImageBox out;
  out.bbox = {std::clamp(u0, 0.0, image_w - 1.0), std::clamp(v0, 0.0, image_h - 1.0),
              std::clamp(u1, 0.0, image_w - 1.0), std::clamp(v1, 0.0, image_h - 1.0)};
  if (!(full > 0) || !out.bbox.valid()) return std::nullopt;
  out.truncation = 1.0 - out.bbox.area() / full;
  return out;
}

// ---------------------------------------------------------------------------
// Difficulty

enum class Difficulty { easy = 0, moderate = 1, hard = 2 };

inline constexpr std::array<const char*, 3> kDifficultyNames = {"easy", "moderate", "hard"};

struct DifficultyBand {
  Difficulty band;
  double min_height_px;
  int max_occlusion;
  double max_truncation;
};

inline constexpr std::array<DifficultyBand, 3> kDifficultyBands = {{
    {Difficulty::easy, 40.0, 0, 0.15},
    {Difficulty::moderate, 25.0, 1, 0.30},
    {Difficulty::hard, 25.0, 2, 0.50},
}};

inline bool in_band(const LabelRecord& r, const DifficultyBand& b) {
  return r.bbox.height() >= b.min_height_px && r.occlusion <= b.max_occlusion && r.truncation <= b.max_truncation;
}

/// Bands whose thresholds the record meets; empty means ignored in evaluation.
inline std::set<Difficulty> assign_difficulty(const LabelRecord& r) {
  std::set<Difficulty> out;
  for (const auto& b : kDifficultyBands)
    if (in_band(r, b)) out.insert(b.band);
  return out;
}

// ---------------------------------------------------------------------------
// Class names

inline constexpr std::array<const char*, 3> kClassNames = {"Car", "Pedestrian", "Cyclist"};

inline int class_id(const std::string& name) {
  for (int i = 0; i < 3; ++i)
    if (name == kClassNames[i]) return i;
  return -1;
}

}  // namespace pointpillars::kitti
