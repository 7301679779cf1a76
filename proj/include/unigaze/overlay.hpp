#pragma once

#include <cmath>
#include <cstdlib>
#include <string>
#include <vector>

#include "datasets.hpp"
#include "geometry.hpp"
#include "image.hpp"

namespace unigaze {

// ---------------------------------------------------------------------------
// Per-record normalization

/// Head rotation and face center for a record, from its stored pose or, when
/// either is missing, from PnP on its landmarks against the generic face.
inline Pose record_pose(const SampleRecord& r) {
  if (r.head_rotation && r.face_center) {
    return {rotation_from_axis_angle(*r.head_rotation), *r.face_center};
  }
  const auto model = generic_face_model();
  if (r.landmarks.size() != model.size()) {
    throw DataError("sample " + record_key(r) + " has no pose and " + std::to_string(r.landmarks.size()) +
                    " landmarks (need " + std::to_string(model.size()) + " for PnP)");
  }
  const Pose p = solve_pnp(model, r.landmarks, r.intrinsics);
  return {p.rotation, p.rotation * generic_face_center() + p.translation};
}

struct NormalizedSample {
  SampleRecord record;
  Image image;
  NormalizationResult norm;
};

/// Warps one sample into the normalized camera. The output record carries
/// the normalized intrinsics, pose, landmarks and gaze label.
inline NormalizedSample normalize_sample(const SampleRecord& r, const Image& img, int out_size,
                                         double standard_distance) {
  const Pose pose = record_pose(r);
  const CameraIntrinsics cn = default_normalized_camera(out_size);
  NormalizedSample s;
  s.norm = build_normalization(pose.rotation, pose.translation, r.intrinsics, cn, standard_distance);
  s.image = warp_image(img, s.norm.warp, out_size, out_size);
  s.record = r;
  s.record.intrinsics = cn;
  s.record.head_rotation = axis_angle_from_rotation(normalize_headpose(pose.rotation, s.norm));
  s.record.face_center = s.norm.conversion * pose.translation;
  for (auto& p : s.record.landmarks) p = apply_homography(s.norm.warp, p);
  if (r.gaze) s.record.gaze = vector_to_pitchyaw(normalize_gaze(pitchyaw_to_vector(*r.gaze), s.norm));
  return s;
}

// ---------------------------------------------------------------------------
// Gaze arrows

/// 2D anchor in pixels: the projected face center, the mean of the four eye
/// corner landmarks, or the image center.
inline Vec2 gaze_anchor(const SampleRecord& r, const Image& img, const std::string& anchor) {
  if (anchor == "image_center") return {img.width / 2.0, img.height / 2.0};
  if (anchor == "eyes") {
    if (r.landmarks.size() < 4) throw DataError("sample " + record_key(r) + " has no eye landmarks");
    return (r.landmarks[0] + r.landmarks[1] + r.landmarks[2] + r.landmarks[3]) / 4.0;
  }
  if (anchor != "face_center") throw ConfigError("unknown arrow anchor '" + anchor + "'");
  const Vec3 c = record_pose(r).translation;
  if (!(c.z() > 0)) throw NumericError("sample " + record_key(r) + ": face center behind the camera");
  return {r.intrinsics.fx * c.x() / c.z() + r.intrinsics.cx, r.intrinsics.fy * c.y() / c.z() + r.intrinsics.cy};
}

/// Arrow tip: the image-plane components of the camera-frame gaze vector,
/// scaled to `length_px`. A gaze straight into the camera gives the anchor.
inline Vec2 gaze_arrow_tip(const Vec2& anchor, const Vec3& gaze_cam, double length_px) {
  return anchor + length_px * Vec2(gaze_cam.x(), gaze_cam.y());
}

/// Bresenham line; pixels outside the image are skipped.
inline void draw_line(Image& img, int x0, int y0, int x1, int y1, const std::vector<double>& color) {
  const int dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
  const int sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
  int err = dx + dy;
  while (true) {
    if (x0 >= 0 && y0 >= 0 && x0 < img.width && y0 < img.height) {
      for (int c = 0; c < img.channels; ++c) img.at(y0, x0, c) = color[static_cast<std::size_t>(c)];
    }
    if (x0 == x1 && y0 == y1) break;
    const int e2 = 2 * err;
    if (e2 >= dy) {
      err += dy;
      x0 += sx;
    }
    if (e2 <= dx) {
      err += dx;
      y0 += sy;
    }
  }
}

/// Green arrow without anti-aliasing. A zero-length arrow is a single pixel.
inline void draw_gaze_arrow(Image& img, const Vec2& from, const Vec2& to) {
  const std::vector<double> green = img.channels == 3 ? std::vector<double>{0.0, 1.0, 0.0}
                                                      : std::vector<double>(static_cast<std::size_t>(img.channels), 1.0);
  const int x0 = static_cast<int>(std::lround(from.x())), y0 = static_cast<int>(std::lround(from.y()));
  const int x1 = static_cast<int>(std::lround(to.x())), y1 = static_cast<int>(std::lround(to.y()));
  draw_line(img, x0, y0, x1, y1, green);
  const Vec2 d = to - from;
  const double len = d.norm();
  if (len < 2.0) return;
  const double head = std::max(2.0, 0.3 * len);
  const Vec2 back = -d / len;
  for (double a : {0.5, -0.5}) {
    const Vec2 w(std::cos(a) * back.x() - std::sin(a) * back.y(), std::sin(a) * back.x() + std::cos(a) * back.y());
    const Vec2 p = to + head * w;
    draw_line(img, x1, y1, static_cast<int>(std::lround(p.x())), static_cast<int>(std::lround(p.y())), green);
  }
}

}  // namespace unigaze
