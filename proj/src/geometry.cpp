#include "nerfsim/geometry.h"

#include <algorithm>
#include <cmath>

namespace nerfsim {

namespace {

Mat3 skew(const Vec3& v) {
  Mat3 m;
  m << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
  return m;
}

}  // namespace

Mat3 axis_angle_to_matrix(const Vec3& w) {
  double theta = w.norm();
  Mat3 K = skew(w);
  if (theta < 1e-8) {
    // 2nd-order expansion keeps orthonormality to machine precision here.
    return Mat3::Identity() + K + 0.5 * K * K;
  }
  Mat3 Kn = skew(w / theta);
  return Mat3::Identity() + std::sin(theta) * Kn +
         (1.0 - std::cos(theta)) * Kn * Kn;
}

Mat3 so3_right_jacobian(const Vec3& w) {
  double theta = w.norm();
  Mat3 K = skew(w);
  if (theta < 1e-6) {
    return Mat3::Identity() - 0.5 * K + (1.0 / 6.0) * K * K;
  }
  double t2 = theta * theta;
  return Mat3::Identity() - (1.0 - std::cos(theta)) / t2 * K +
         (theta - std::sin(theta)) / (t2 * theta) * K * K;
}

RigidTransform apply_pose_offset(const RigidTransform& pose,
                                 const Vec3& rot_offset,
                                 const Vec3& trans_offset) {
  return {axis_angle_to_matrix(rot_offset) * pose.R, pose.t + trans_offset};
}

std::optional<PixelPoint> project(const Vec3& p, const CameraModel& cam) {
  RigidTransform w2c = cam.refined_pose().inverse();
  Vec3 pc = w2c.apply(p);
  if (pc.z() <= 1e-9) return std::nullopt;
  PixelPoint px;
  px.x = cam.fx * pc.x() / pc.z() + cam.cx;
  px.y = cam.fy * pc.y() / pc.z() + cam.cy;
  px.d = pc.z();
  return px;
}

Vec3 unproject(const PixelPoint& px, const CameraModel& cam) {
  if (px.d <= 0) throw Error("unproject: depth must be positive");
  Vec3 pc((px.x - cam.cx) / cam.fx * px.d, (px.y - cam.cy) / cam.fy * px.d,
          px.d);
  return cam.refined_pose().apply(pc);
}

Ray camera_ray(const CameraModel& cam, double px, double py, double t_near,
               double t_far) {
  RigidTransform pose = cam.refined_pose();
  Vec3 dc((px - cam.cx) / cam.fx, (py - cam.cy) / cam.fy, 1.0);
  dc.normalize();
  Ray ray;
  ray.origin = pose.t;
  ray.dir = pose.R * dc;
  ray.cone_radius_rate = 1.0 / (cam.fx * std::sqrt(12.0));
  ray.t_near = t_near;
  ray.t_far = t_far;
  return ray;
}

WarpField warp_pixels(const ImageD& src_depth, const CameraModel& cam_s,
                      const CameraModel& cam_t) {
  const int w = src_depth.width(), h = src_depth.height();
  WarpField out;
  out.target_xy = ImageD(w, h, 2);
  out.target_depth = ImageD(w, h, 1);
  out.valid = ImageU8(w, h, 1, 0);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double d = src_depth.at(x, y);
      if (!(d > 0)) continue;
      Vec3 p = unproject({double(x), double(y), d}, cam_s);
      auto px = project(p, cam_t);
      if (!px) continue;
      if (px->x < 0 || px->y < 0 || px->x > cam_t.width - 1 ||
          px->y > cam_t.height - 1)
        continue;
      out.target_xy.at(x, y, 0) = px->x;
      out.target_xy.at(x, y, 1) = px->y;
      out.target_depth.at(x, y) = px->d;
      out.valid.at(x, y) = 1;
    }
  }
  return out;
}

RigidTransform interpolate_box_pose(const TrackedBox& box, double t) {
  if (box.keyframes.empty()) throw Error("interpolate_box_pose: empty track");
  const auto& kfs = box.keyframes;
  if (t < kfs.front().time - 1e-9 || t > kfs.back().time + 1e-9)
    throw Error("interpolate_box_pose: time outside track span");
  t = std::clamp(t, kfs.front().time, kfs.back().time);

  size_t hi = 0;
  while (hi + 1 < kfs.size() && kfs[hi + 1].time < t) ++hi;
  size_t lo = hi;
  if (hi + 1 < kfs.size()) hi = hi + 1;
  const BoxKeyframe& a = kfs[lo];
  const BoxKeyframe& b = kfs[hi];
  double u = (hi == lo) ? 0.0
                        : std::clamp((t - a.time) / (b.time - a.time), 0.0, 1.0);

  Vec3 trans = (1.0 - u) * a.trans + u * b.trans;
  // Rotation restricted to yaw about world z; interpolate the yaw angle along
  // the shortest path and keep a's residual (pitch/roll) rotation.
  double yaw_a = std::atan2(a.rot(1, 0), a.rot(0, 0));
  double yaw_b = std::atan2(b.rot(1, 0), b.rot(0, 0));
  double yaw = yaw_a + u * angle_diff(yaw_b, yaw_a);
  Mat3 residual = axis_angle_to_matrix(Vec3(0, 0, -yaw_a)) * a.rot;
  Mat3 rot = axis_angle_to_matrix(Vec3(0, 0, yaw)) * residual;

  double dyaw = box.offset_yaw(t);
  Vec3 dtrans = box.offset_trans(t);
  return {axis_angle_to_matrix(Vec3(0, 0, dyaw)) * rot, trans + dtrans};
}

ObjectFrame box_to_object(const Vec3& x, const Vec3& d, double cone_radius_rate,
                          const RigidTransform& pose, const Vec3& dim) {
  ObjectFrame of;
  of.x = (pose.R.transpose() * (x - pose.t)).cwiseQuotient(dim);
  of.dir = pose.R.transpose() * d;
  of.cone_radius_rate = cone_radius_rate / (dim.sum() / 3.0);
  return of;
}

ObjectFrame box_to_object(const Vec3& x, const Vec3& d, double cone_radius_rate,
                          const TrackedBox& box, double t) {
  return box_to_object(x, d, cone_radius_rate, interpolate_box_pose(box, t),
                       box.dim);
}

std::vector<BoxSegment> ray_box_segments(const Ray& ray,
                                         const std::vector<TrackedBox>& boxes,
                                         double t) {
  std::vector<BoxSegment> segments;
  for (const TrackedBox& box : boxes) {
    if (box.keyframes.empty()) continue;
    if (t < box.keyframes.front().time - 1e-9 ||
        t > box.keyframes.back().time + 1e-9)
      continue;
    RigidTransform pose = interpolate_box_pose(box, t);
    // Slab test in the object's normalized frame.
    Vec3 o = (pose.R.transpose() * (ray.origin - pose.t)).cwiseQuotient(box.dim);
    Vec3 d = (pose.R.transpose() * ray.dir).cwiseQuotient(box.dim);
    double t_enter = ray.t_near, t_exit = ray.t_far;
    bool miss = false;
    for (int a = 0; a < 3 && !miss; ++a) {
      if (std::abs(d[a]) < 1e-12) {
        if (o[a] < -0.5 || o[a] > 0.5) miss = true;
        continue;
      }
      double t0 = (-0.5 - o[a]) / d[a];
      double t1 = (0.5 - o[a]) / d[a];
      if (t0 > t1) std::swap(t0, t1);
      t_enter = std::max(t_enter, t0);
      t_exit = std::min(t_exit, t1);
      if (t_enter >= t_exit) miss = true;
    }
    if (!miss && t_enter < t_exit)
      segments.push_back({t_enter, t_exit, box.id});
  }
  std::sort(segments.begin(), segments.end(),
            [](const BoxSegment& a, const BoxSegment& b) {
              return a.t_enter < b.t_enter;
            });
  return segments;
}

}  // namespace nerfsim
