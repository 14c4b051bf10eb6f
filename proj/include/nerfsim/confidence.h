#pragma once

#include <vector>

#include "nerfsim/geometry.h"
#include "nerfsim/image.h"

namespace nerfsim {

struct LidarFrame {
  std::vector<Vec3> points;  // sensor frame
  RigidTransform pose;       // sensor -> world
};

// Merge every frame's points into the target sensor frame. No filtering:
// dynamic-object ghosting and outliers are left for the confidence maps.
std::vector<Vec3> accumulate_lidar(const std::vector<LidarFrame>& frames,
                                   const RigidTransform& target_pose);

struct SparseDepth {
  ImageD depth;    // meters, 1 channel
  ImageU8 valid;
};

// Z-buffer projection of world points into the camera; keeps the nearest
// depth per pixel.
SparseDepth project_points(const std::vector<Vec3>& world_points,
                           const CameraModel& cam);

// Edge-aware propagation: each empty pixel takes a weighted average of the k
// nearest samples, weight exp(-|dpx|^2/2 sigma_s^2) exp(-|dI|^2/2 sigma_c^2).
// Pixels holding a sample keep it exactly. Throws when no sample is valid.
ImageD complete_depth(const SparseDepth& sparse, const ImageD& guide,
                      int k = 8, double sigma_s = 16.0, double sigma_c = 0.1);

// Ramp used by the geometric consistency maps: 1 at zero error, linear to 0
// at tau, 0 beyond.
double gamma_conf(double x, double tau = 0.2);

ImageD gaussian_blur(const ImageD& img, double sigma);

// Structural similarity of two single-channel images, 11x11 Gaussian window
// (sigma 1.5), C1 = 0.01^2, C2 = 0.03^2, border weights renormalized.
ImageD ssim_map(const ImageD& a, const ImageD& b);

// Hand-crafted stand-in for a deep feature map: per-pixel orientation
// histograms of image gradients pooled at three octaves, unit L2 norm.
ImageD feature_pyramid(const ImageD& rgb);

struct PerceptionConfidence {
  ImageD c_rgb, c_ssim, c_feat;
};

// Photometric / structural / feature agreement between the source view and
// the target view warped into it. Invalid warps get confidence 0.
PerceptionConfidence perception_confidence(const ImageD& image_s,
                                           const ImageD& image_t,
                                           const ImageD& feat_s,
                                           const ImageD& feat_t,
                                           const WarpField& warp);

struct GeometryConfidence {
  ImageD c_depth, c_flow;
};

// Depth reprojection consistency and flow agreement under gamma_conf.
// flow holds the reference source->target pixel offsets (2 channels).
GeometryConfidence geometry_confidence(const ImageD& depth_s,
                                       const ImageD& depth_t,
                                       const ImageD& flow,
                                       const WarpField& warp,
                                       double tau = 0.2);

struct ConfidencePack {
  ImageD c_rgb, c_ssim, c_feat, c_depth, c_flow;
};

// Convex combination with softmax(omega) over the five maps.
ImageD combine_confidence(const ConfidencePack& pack, const VecX& omega);

// dL/d(combined map) -> gradient on the five logits.
VecX combine_confidence_backward(const ConfidencePack& pack, const VecX& omega,
                                 const ImageD& d_combined);

}  // namespace nerfsim
