#pragma once

#include <map>
#include <optional>
#include <vector>

#include "nerfsim/common.h"
#include "nerfsim/image.h"

namespace nerfsim {

struct RigidTransform {
  Mat3 R = Mat3::Identity();
  Vec3 t = Vec3::Zero();

  Vec3 apply(const Vec3& p) const { return R * p + t; }
  Vec3 apply_dir(const Vec3& d) const { return R * d; }
  RigidTransform inverse() const { return {R.transpose(), -(R.transpose() * t)}; }
  RigidTransform compose(const RigidTransform& rhs) const {
    // this * rhs: apply rhs first.
    return {R * rhs.R, R * rhs.t + t};
  }
};

Mat3 axis_angle_to_matrix(const Vec3& w);
// Right Jacobian of SO(3): exp(w + d) ~ exp(w) * exp(Jr(w) d).
Mat3 so3_right_jacobian(const Vec3& w);

// R' = exp(rot_offset) * R, t' = t + trans_offset.
RigidTransform apply_pose_offset(const RigidTransform& pose,
                                 const Vec3& rot_offset,
                                 const Vec3& trans_offset);

struct PixelPoint {
  double x = 0, y = 0;  // continuous pixel coords, origin at top-left center
  double d = 0;         // depth along camera z, meters
};

struct Ray {
  Vec3 origin = Vec3::Zero();
  Vec3 dir = Vec3::UnitZ();
  double cone_radius_rate = 0;  // cone radius per unit distance
  double t_near = 0, t_far = 1;
};

// Pinhole camera with camera->world pose and learnable refinement offsets.
struct CameraModel {
  double fx = 1, fy = 1, cx = 0, cy = 0;
  int width = 0, height = 0;
  RigidTransform pose;       // camera -> world
  Vec3 refine_rot = Vec3::Zero();    // axis-angle, radians
  Vec3 refine_trans = Vec3::Zero();  // meters

  RigidTransform refined_pose() const {
    return apply_pose_offset(pose, refine_rot, refine_trans);
  }
};

// World point -> pixel using the refined pose. Empty when the point is at or
// behind the camera plane.
std::optional<PixelPoint> project(const Vec3& p, const CameraModel& cam);

// Exact right inverse of project; throws on d <= 0.
Vec3 unproject(const PixelPoint& px, const CameraModel& cam);

// Camera ray through pixel center (px, py), using the refined pose.
// cone_radius_rate follows the pixel-footprint convention 1/(fx*sqrt(12)).
Ray camera_ray(const CameraModel& cam, double px, double py,
               double t_near = 0.05, double t_far = 100.0);

struct WarpField {
  ImageD target_xy;   // 2 channels
  ImageD target_depth;
  ImageU8 valid;
};

// Per-pixel reprojection of the source depth image into the target camera.
WarpField warp_pixels(const ImageD& src_depth, const CameraModel& cam_s,
                      const CameraModel& cam_t);

struct BoxKeyframe {
  double time = 0;
  Mat3 rot = Mat3::Identity();
  Vec3 trans = Vec3::Zero();
};

// Dynamic object: keyframed 6DoF track, box dimensions, and learnable
// per-timestamp yaw/translation refinement offsets.
struct TrackedBox {
  int id = 0;
  std::vector<BoxKeyframe> keyframes;  // strictly increasing times
  Vec3 dim = Vec3::Ones();             // (w, h, l), meters
  std::map<int64_t, Vec3> refine_trans;   // keyed by timestamp key
  std::map<int64_t, double> refine_yaw;

  // Timestamps are keyed at microsecond resolution for the offset tables.
  static int64_t time_key(double t) { return int64_t(std::llround(t * 1e6)); }
  Vec3 offset_trans(double t) const {
    auto it = refine_trans.find(time_key(t));
    return it == refine_trans.end() ? Vec3::Zero() : it->second;
  }
  double offset_yaw(double t) const {
    auto it = refine_yaw.find(time_key(t));
    return it == refine_yaw.end() ? 0.0 : it->second;
  }
};

// Pose at time t: translation lerped, yaw interpolated along the shortest
// path, then refinement offsets applied (yaw about world z, left-multiplied).
// Throws when t is outside the keyframe span.
RigidTransform interpolate_box_pose(const TrackedBox& box, double t);

struct ObjectFrame {
  Vec3 x;      // normalized box coords; inside iff componentwise in [-0.5,0.5]
  Vec3 dir;    // unit direction in object frame
  double cone_radius_rate;
};

ObjectFrame box_to_object(const Vec3& x, const Vec3& d, double cone_radius_rate,
                          const TrackedBox& box, double t);
ObjectFrame box_to_object(const Vec3& x, const Vec3& d, double cone_radius_rate,
                          const RigidTransform& pose, const Vec3& dim);

struct BoxSegment {
  double t_enter = 0, t_exit = 0;
  int box_id = 0;
};

// Slab-test intersections of the ray against each box at time t, clipped to
// [t_near, t_far]. Boxes whose track does not cover t are skipped.
std::vector<BoxSegment> ray_box_segments(const Ray& ray,
                                         const std::vector<TrackedBox>& boxes,
                                         double t);

}  // namespace nerfsim
