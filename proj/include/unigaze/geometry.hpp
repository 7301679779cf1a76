#pragma once

#include <Eigen/Dense>
#include <Eigen/Geometry>

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "unigaze/common.hpp"
#include "unigaze/image.hpp"

namespace unigaze {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

/// Camera-frame convention: x right, y down, z forward (away from camera).
/// A gaze of (0, 0) points along -z, i.e. straight back at the camera.
struct PitchYaw {
  double pitch = 0.0;
  double yaw = 0.0;

  bool operator==(const PitchYaw&) const = default;
};

struct CameraIntrinsics {
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.0;
  double cy = 0.0;

  /// Fallback camera for images without calibration: focal length equal to
  /// the image width and the principal point at the image center.
  static CameraIntrinsics from_image_size(int width, int height) {
    return {static_cast<double>(width), static_cast<double>(width), width / 2.0, height / 2.0};
  }

  Mat3 matrix() const {
    Mat3 k;
    k << fx, 0, cx, 0, fy, cy, 0, 0, 1;
    return k;
  }

  Mat3 inverse() const {
    Mat3 k;
    k << 1 / fx, 0, -cx / fx, 0, 1 / fy, -cy / fy, 0, 0, 1;
    return k;
  }

  void validate() const {
    if (!(fx > 0) || !(fy > 0) || !std::isfinite(cx) || !std::isfinite(cy)) {
      throw DataError("CameraIntrinsics: focal lengths must be positive and finite");
    }
  }

  bool operator==(const CameraIntrinsics&) const = default;
};

struct NormalizationResult {
  Mat3 rotation = Mat3::Identity();    // R
  Mat3 scaling = Mat3::Identity();     // S = diag(1, 1, ds / d)
  Mat3 conversion = Mat3::Identity();  // S * R
  Mat3 warp = Mat3::Identity();        // Cn * S * R * Cr^-1
  double actual_distance = 0.0;
  double standard_distance = 0.0;
};

struct Pose {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();
};

// ---------------------------------------------------------------------------
// Angles

inline Vec3 pitchyaw_to_vector(const PitchYaw& a) {
  const double cp = std::cos(a.pitch);
  return {-cp * std::sin(a.yaw), -std::sin(a.pitch), -cp * std::cos(a.yaw)};
}

inline PitchYaw vector_to_pitchyaw(const Vec3& g) {
  const double n = g.norm();
  if (!(n > 0.0) || !std::isfinite(n)) throw NumericError("vector_to_pitchyaw: degenerate direction");
  const double pitch = std::asin(std::clamp(-g.y() / n, -1.0, 1.0));
  // Yaw is undefined at the poles; report 0 rather than atan2's signed-zero pi.
  if (g.x() == 0.0 && g.z() == 0.0) return {pitch, 0.0};
  return {pitch, std::atan2(-g.x(), -g.z())};
}

inline double angular_error_deg(const Vec3& a, const Vec3& b) {
  const double na = a.norm();
  const double nb = b.norm();
  if (!(na > 0.0) || !(nb > 0.0)) throw NumericError("angular_error_deg: zero-norm input");
  const double c = std::clamp(a.dot(b) / (na * nb), -1.0, 1.0);
  return rad2deg(std::acos(c));
}

inline double angular_error_deg(const PitchYaw& a, const PitchYaw& b) {
  return angular_error_deg(pitchyaw_to_vector(a), pitchyaw_to_vector(b));
}

// ---------------------------------------------------------------------------
// Rotations

inline Mat3 rotation_from_axis_angle(const Vec3& rvec) {
  const double angle = rvec.norm();
  if (angle == 0.0) return Mat3::Identity();
  return Eigen::AngleAxisd(angle, rvec / angle).toRotationMatrix();
}

inline Vec3 axis_angle_from_rotation(const Mat3& r) {
  const Eigen::AngleAxisd aa(r);
  return aa.axis() * aa.angle();
}

/// Skew-symmetric cross-product matrix.
inline Mat3 hat(const Vec3& w) {
  Mat3 m;
  m << 0, -w.z(), w.y(), w.z(), 0, -w.x(), -w.y(), w.x(), 0;
  return m;
}

/// Geodesic distance between two rotations, radians.
inline double rotation_distance(const Mat3& a, const Mat3& b) {
  const double c = std::clamp(((a.transpose() * b).trace() - 1.0) / 2.0, -1.0, 1.0);
  // acos loses precision near zero; the axis-angle norm does not.
  if (c > 0.99) return axis_angle_from_rotation(a.transpose() * b).norm();
  return std::acos(c);
}

inline bool is_rotation(const Mat3& r, double tol = 1e-9) {
  return (r.transpose() * r - Mat3::Identity()).cwiseAbs().maxCoeff() <= tol &&
         std::abs(r.determinant() - 1.0) <= tol;
}

/// Direction the face is pointing, using the gaze convention: identity head
/// rotation faces the camera.
inline PitchYaw head_pose_pitchyaw(const Mat3& head) {
  return vector_to_pitchyaw(head * Vec3(0, 0, -1));
}

/// Head rotation whose facing direction is the given pitch/yaw (no roll).
inline Mat3 head_rotation_from_pitchyaw(const PitchYaw& p) {
  // Rotating the forward axis (0,0,-1) by pitch about x then yaw about y
  // reproduces pitchyaw_to_vector.
  const Mat3 rx = Eigen::AngleAxisd(-p.pitch, Vec3::UnitX()).toRotationMatrix();
  const Mat3 ry = Eigen::AngleAxisd(p.yaw, Vec3::UnitY()).toRotationMatrix();
  return ry * rx;
}

// ---------------------------------------------------------------------------
// Data normalization

inline constexpr double kDefaultStandardDistance = 600.0;

/// Virtual camera for 224x224 normalized face crops.
inline CameraIntrinsics default_normalized_camera(int out_size = 224) {
  const double f = 960.0 * out_size / 224.0;
  return {f, f, out_size / 2.0, out_size / 2.0};
}

inline NormalizationResult build_normalization(const Mat3& head, const Vec3& face_center_cam,
                                               const CameraIntrinsics& cr,
                                               const CameraIntrinsics& cn, double ds) {
  const double d = face_center_cam.norm();
  if (!(d > 0.0) || !std::isfinite(d)) {
    throw NumericError("build_normalization: face center at camera origin");
  }
  if (!(ds > 0.0)) throw NumericError("build_normalization: standard distance must be positive");
  cr.validate();
  cn.validate();

  const Vec3 forward = face_center_cam / d;
  const Vec3 head_x = head.col(0);
  Vec3 down = forward.cross(head_x);
  const double dn = down.norm();
  if (dn < 1e-12) throw NumericError("build_normalization: head x-axis parallel to view ray");
  down /= dn;
  const Vec3 right = down.cross(forward).normalized();

  NormalizationResult n;
  n.rotation.row(0) = right;
  n.rotation.row(1) = down;
  n.rotation.row(2) = forward;
  n.scaling = Eigen::Vector3d(1.0, 1.0, ds / d).asDiagonal();
  n.conversion = n.scaling * n.rotation;
  n.warp = cn.matrix() * n.conversion * cr.inverse();
  n.actual_distance = d;
  n.standard_distance = ds;
  return n;
}

/// Gaze directions only rotate; the distance scaling applies to pixels.
inline Vec3 normalize_gaze(const Vec3& g, const NormalizationResult& n) { return n.rotation * g; }
inline Vec3 denormalize_gaze(const Vec3& g, const NormalizationResult& n) {
  return n.rotation.transpose() * g;
}

inline Mat3 normalize_headpose(const Mat3& head, const NormalizationResult& n) {
  return n.rotation * head;
}

/// Applies a homography to a pixel coordinate.
inline Vec2 apply_homography(const Mat3& h, const Vec2& p) {
  const Vec3 q = h * Vec3(p.x(), p.y(), 1.0);
  return {q.x() / q.z(), q.y() / q.z()};
}

/// Samples src at a fractional position; taps outside the image read zero.
inline double sample_bilinear_zero(const Image& src, double sx, double sy, int c) {
  const double fx = std::floor(sx);
  const double fy = std::floor(sy);
  const int x0 = static_cast<int>(fx);
  const int y0 = static_cast<int>(fy);
  const double wx = sx - fx;
  const double wy = sy - fy;
  auto tap = [&](int y, int x) -> double {
    if (x < 0 || y < 0 || x >= src.width || y >= src.height) return 0.0;
    return src.at(y, x, c);
  };
  const double top = tap(y0, x0) * (1.0 - wx) + tap(y0, x0 + 1) * wx;
  const double bot = tap(y0 + 1, x0) * (1.0 - wx) + tap(y0 + 1, x0 + 1) * wx;
  return top * (1.0 - wy) + bot * wy;
}

/// Inverse-mapped bilinear warp; pixel centers sit at integer coordinates.
inline Image warp_image(const Image& src, const Mat3& warp, int out_w, int out_h) {
  const double det = warp.determinant();
  if (!std::isfinite(det) || std::abs(det) < 1e-300) throw NumericError("warp_image: singular warp");
  const Mat3 inv = warp.inverse();
  Image dst(out_h, out_w, src.channels);
  for (int y = 0; y < out_h; ++y) {
    for (int x = 0; x < out_w; ++x) {
      const Vec3 q = inv * Vec3(x, y, 1.0);
      if (!(std::abs(q.z()) > 0.0)) continue;
      const double sx = q.x() / q.z();
      const double sy = q.y() / q.z();
      if (!std::isfinite(sx) || !std::isfinite(sy)) continue;
      if (sx <= -1.0 || sy <= -1.0 || sx >= src.width || sy >= src.height) continue;
      for (int c = 0; c < src.channels; ++c) dst.at(y, x, c) = sample_bilinear_zero(src, sx, sy, c);
    }
  }
  return dst;
}

// ---------------------------------------------------------------------------
// Head pose

inline std::vector<Vec2> project_points(std::span<const Vec3> model, const Pose& pose,
                                        const CameraIntrinsics& cam) {
  std::vector<Vec2> out;
  out.reserve(model.size());
  for (const Vec3& p : model) {
    const Vec3 c = pose.rotation * p + pose.translation;
    out.emplace_back(cam.fx * c.x() / c.z() + cam.cx, cam.fy * c.y() / c.z() + cam.cy);
  }
  return out;
}

struct PnpOptions {
  int max_iterations = 50;
  double step_tolerance = 1e-10;
};

namespace detail {

// DLT on intrinsics-normalized image rays with Hartley-style conditioning of
// the model points.
inline Pose pnp_dlt(std::span<const Vec3> model, std::span<const Vec3> rays) {
  const std::size_t n = model.size();
  Vec3 centroid = Vec3::Zero();
  for (const auto& p : model) centroid += p;
  centroid /= static_cast<double>(n);
  double spread = 0.0;
  for (const auto& p : model) spread += (p - centroid).norm();
  spread /= static_cast<double>(n);
  if (!(spread > 0.0)) throw NumericError("solve_pnp: degenerate configuration");
  const double scale = std::sqrt(3.0) / spread;

  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(2 * n), 12);
  for (std::size_t i = 0; i < n; ++i) {
    const Vec3 x = (model[i] - centroid) * scale;
    const double u = rays[i].x() / rays[i].z();
    const double v = rays[i].y() / rays[i].z();
    const Eigen::Vector4d xh(x.x(), x.y(), x.z(), 1.0);
    const auto r0 = static_cast<Eigen::Index>(2 * i);
    a.block<1, 4>(r0, 0) = xh.transpose();
    a.block<1, 4>(r0, 8) = -u * xh.transpose();
    a.block<1, 4>(r0 + 1, 4) = xh.transpose();
    a.block<1, 4>(r0 + 1, 8) = -v * xh.transpose();
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeFullV);
  const auto& sv = svd.singularValues();
  // A unique projection matrix needs a one-dimensional null space.
  if (sv(10) <= 1e-9 * sv(0)) throw NumericError("solve_pnp: degenerate configuration");
  const Eigen::VectorXd h = svd.matrixV().col(11);

  Eigen::Matrix<double, 3, 4> p;
  p << h(0), h(1), h(2), h(3), h(4), h(5), h(6), h(7), h(8), h(9), h(10), h(11);
  Mat3 m = p.leftCols<3>() * scale;
  Vec3 t = p.col(3) - p.leftCols<3>() * (centroid * scale);
  if (m.determinant() < 0) {
    m = -m;
    t = -t;
  }
  Eigen::JacobiSVD<Mat3> msvd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const double s = msvd.singularValues().mean();
  if (!(s > 0.0)) throw NumericError("solve_pnp: degenerate configuration");
  Pose pose;
  pose.rotation = msvd.matrixU() * msvd.matrixV().transpose();
  pose.translation = t / s;
  return pose;
}

}  // namespace detail

/// Perspective-n-point: DLT initialization then Gauss-Newton on pixel
/// reprojection error. Requires at least six non-coplanar correspondences.
inline Pose solve_pnp(std::span<const Vec3> model, std::span<const Vec2> image,
                      const CameraIntrinsics& cam, const PnpOptions& opts = {}) {
  if (model.size() != image.size()) {
    throw DataError("solve_pnp: " + std::to_string(model.size()) + " model points vs " +
                    std::to_string(image.size()) + " image points");
  }
  if (model.size() < 6) {
    throw DataError("solve_pnp: need at least 6 correspondences, got " +
                    std::to_string(model.size()));
  }
  cam.validate();
  const std::size_t n = model.size();
  std::vector<Vec3> rays;
  rays.reserve(n);
  const Mat3 kinv = cam.inverse();
  for (const auto& q : image) rays.push_back(kinv * Vec3(q.x(), q.y(), 1.0));

  Pose pose = detail::pnp_dlt(model, rays);

  using Mat6 = Eigen::Matrix<double, 6, 6>;
  using Vec6 = Eigen::Matrix<double, 6, 1>;
  for (int it = 0; it < opts.max_iterations; ++it) {
    Mat6 jtj = Mat6::Zero();
    Vec6 jtr = Vec6::Zero();
    for (std::size_t i = 0; i < n; ++i) {
      const Vec3 rx = pose.rotation * model[i];
      const Vec3 c = rx + pose.translation;
      const double iz = 1.0 / c.z();
      const Vec2 r(cam.fx * c.x() * iz + cam.cx - image[i].x(),
                   cam.fy * c.y() * iz + cam.cy - image[i].y());
      Eigen::Matrix<double, 2, 3> du;
      du << cam.fx * iz, 0, -cam.fx * c.x() * iz * iz, 0, cam.fy * iz, -cam.fy * c.y() * iz * iz;
      Eigen::Matrix<double, 2, 6> j;
      j.leftCols<3>() = -du * hat(rx);  // left-multiplied rotation increment
      j.rightCols<3>() = du;
      jtj += j.transpose() * j;
      jtr += j.transpose() * r;
    }
    const Vec6 step = jtj.ldlt().solve(-jtr);
    if (!step.allFinite()) throw NumericError("solve_pnp: Gauss-Newton diverged");
    pose.rotation = rotation_from_axis_angle(step.head<3>()) * pose.rotation;
    pose.translation += step.tail<3>();
    if (step.norm() < opts.step_tolerance) break;
  }
  // Re-orthonormalize against accumulated round-off.
  Eigen::JacobiSVD<Mat3> svd(pose.rotation, Eigen::ComputeFullU | Eigen::ComputeFullV);
  pose.rotation = svd.matrixU() * svd.matrixV().transpose();
  return pose;
}

/// Keeps a sample when the L2 norm of (pitch, yaw) in degrees is within the
/// limit. The boundary itself is kept.
inline bool pose_filter_check(const PitchYaw& p, double limit_deg) {
  return std::hypot(rad2deg(p.pitch), rad2deg(p.yaw)) <= limit_deg;
}

/// Generic 3D face landmarks in millimeters (head frame: x right, y down,
/// z away from the camera; nose tip at the origin). Order: right eye outer,
/// right eye inner, left eye inner, left eye outer, mouth right, mouth left,
/// nose tip, chin.
inline std::vector<Vec3> generic_face_model() {
  return {{-45.0, -35.0, 30.0}, {-15.0, -33.0, 25.0}, {15.0, -33.0, 25.0}, {45.0, -35.0, 30.0},
          {-25.0, 30.0, 25.0},  {25.0, 30.0, 25.0},   {0.0, 0.0, 0.0},     {0.0, 65.0, 30.0}};
}

/// Face center used for normalization: mean of the eye corners and mouth
/// corners of the generic model.
inline Vec3 generic_face_center() {
  const auto m = generic_face_model();
  Vec3 c = Vec3::Zero();
  for (int i = 0; i < 6; ++i) c += m[static_cast<std::size_t>(i)];
  return c / 6.0;
}

}  // namespace unigaze
