#pragma once

#include <map>
#include <string>
#include <vector>

#include "nerfsim/geometry.h"
#include "nerfsim/image.h"
#include "nerfsim/rng.h"

namespace nerfsim {

inline constexpr int kUnknownLabel = -1;

// Bird's-eye-view grids of semantic label and ground height used to decide
// where inserted objects may stand. World z is up.
struct GroundPlan {
  Vec2 origin = Vec2::Zero();  // world xy of the (0,0) cell corner, meters
  double cell = 0.25;
  Image<int> labels;   // kUnknownLabel where no points fell
  ImageD heights;      // meters

  bool cell_of(double x, double y, int* cx, int* cy) const {
    *cx = int(std::floor((x - origin[0]) / cell));
    *cy = int(std::floor((y - origin[1]) / cell));
    return labels.contains(*cx, *cy);
  }
};

// One rendered view feeding the plan: per-pixel class ids and metric depth.
struct PlanView {
  Image<int> semantic;
  ImageD depth;
  CameraModel cam;
};

// Inverse-projects every view into a labeled point cloud (randomly keeping
// keep_ratio of the pixels), bins it vertically, and takes the majority label
// plus the median height per cell (ground-labeled points preferred).
GroundPlan build_ground_plan(const std::vector<PlanView>& views,
                             int ground_label, double cell = 0.25,
                             double keep_ratio = 0.1, uint64_t seed = 0);

struct Placement {
  Vec3 position = Vec3::Zero();  // meters; z from the plan
  double yaw = 0;                // radians about world z
};

// Samples non-colliding placements on cells whose label is in valid_labels.
// footprint is the object's (width, length); collision rectangles are
// inflated by 0.3 m per side. With traces given, poses are perturbed trace
// poses and the yaw stays within 30 degrees of the trace yaw. Throws when no
// valid cell exists or rejection sampling cannot place the requested count.
std::vector<Placement> sample_placement(
    const GroundPlan& plan, const std::vector<int>& valid_labels, int count,
    const Vec2& footprint, uint64_t seed,
    const std::vector<Placement>* traces = nullptr);

// Axis test for two yawed rectangles of half-extents he centered at c.
bool rectangles_intersect(const Vec2& ca, double yaw_a, const Vec2& ha,
                          const Vec2& cb, double yaw_b, const Vec2& hb);

struct TriangleMesh {
  std::vector<Vec3> vertices;
  std::vector<std::array<int, 3>> triangles;
  std::vector<Vec3> albedo;  // per vertex, in [0,1]^3
};

// ASCII OBJ subset: "v x y z [r g b]" and triangle "f" lines (slash-suffixed
// indices allowed, extra attributes ignored). Degenerate triangles are
// dropped at load time.
TriangleMesh parse_obj(const std::string& text);
TriangleMesh load_obj(const std::string& path);
std::string to_obj(const TriangleMesh& mesh);

TriangleMesh transform_mesh(const TriangleMesh& mesh,
                            const RigidTransform& pose);
// Axis-aligned unit-ordered box mesh centered at the origin.
TriangleMesh box_mesh(const Vec3& dim, const Vec3& albedo);

// First intersection of the ray with any triangle (t > t_min); used for
// visibility in the shadow integral.
bool mesh_hit(const TriangleMesh& mesh, const Vec3& origin, const Vec3& dir,
              double t_min = 1e-6, double* t_hit = nullptr);

struct RasterResult {
  ImageD depth;   // +inf where uncovered
  ImageU8 mask;
};

// Z-buffered software rasterization of the mesh given in the camera frame,
// perspective-correct depth at pixel centers.
RasterResult rasterize_depth(const TriangleMesh& mesh_cam,
                             const CameraModel& cam);

struct BoxAnnotation {
  std::string label;
  Vec3 center = Vec3::Zero();
  Vec3 dim = Vec3::Ones();
  double yaw = 0;
};

struct ComposedFrame {
  ImageD rgb;
  ImageD depth;
  Image<int> semantic;
  std::map<int, ImageU8> instance_masks;
  std::vector<BoxAnnotation> boxes;
};

// Occlusion-aware paste: the effective mask keeps foreground pixels strictly
// nearer than the background depth; RGB gets a 1 px feather on the mask
// boundary, depth/semantics/masks stay hard. The annotation box is the
// object-frame mesh AABB posed by the placement.
ComposedFrame compose_frame(const ImageD& bg_rgb, const ImageD& bg_depth,
                            const Image<int>& bg_semantic, const ImageD& fg_rgb,
                            const ImageU8& fg_mask, const ImageD& fg_depth,
                            const TriangleMesh& mesh_object,
                            const Placement& place, int fg_class,
                            const std::string& fg_label, int instance_id);

// {boxes: [...], masks: [...]} for one frame.
std::string annotations_json(const ComposedFrame& frame,
                             const std::vector<std::string>& mask_paths);

// Blurred image-space shadow of the mesh: vertices projected onto the ground
// plane z = ground_z along light_dir, splatted through the camera, closed
// with a disk of radius 3 px and blurred with sigma 2 px. light_dir must
// point downward.
ImageD naive_shadow_mask(const TriangleMesh& mesh_world, const Vec3& light_dir,
                         double ground_z, const CameraModel& cam);

// Darkens rgb by factor (1 - 0.5 * mask) outside the foreground.
void apply_shadow(ImageD* rgb, const ImageD& shadow,
                  const ImageU8* exclude = nullptr);

// Environment light as a mixture of lat-long Gaussians. Parameter layout per
// Gaussian: [lat, lon, c_r, c_g, c_b, alpha, s_lat, s_lon]. Longitude
// distance is wrap-aware; evaluation clamps each channel at zero.
struct EnvMap {
  VecX params;

  int count() const { return int(params.size() / 8); }
  static EnvMap make(int n, Rng& rng);            // random mild initialization
  static EnvMap constant(const Vec3& radiance);   // near-uniform white dome
};

Vec3 envmap_eval(const EnvMap& env, const Vec3& dir);
// d(loss)/d(radiance at dir) -> gradient on the Gaussian parameters.
void envmap_eval_backward(const EnvMap& env, const Vec3& dir,
                          const Vec3& d_radiance, VecX* grad);

// Fraction of cosine-weighted incident flux at ground point x (normal = up)
// not blocked by the mesh; 1 exactly for an empty mesh.
double shadow_intensity(const Vec3& x, const TriangleMesh& mesh_world,
                        const EnvMap& light, int rays = 1024,
                        uint64_t seed = 0);

// shadow_intensity per pixel at the background surface points.
ImageD intensity_map(const ImageD& bg_depth, const CameraModel& cam,
                     const TriangleMesh& mesh_world, const EnvMap& light,
                     int rays = 256, uint64_t seed = 0);

struct RelightResult {
  ImageD rgb;
  ImageU8 mask;
  ImageD depth;
};

// Lambertian render of the mesh under the environment map: albedo/pi times
// the cosine-weighted incident radiance, Monte-Carlo over the hemisphere. A
// uniform white dome reproduces the albedo.
RelightResult relight_object(const TriangleMesh& mesh_world, const EnvMap& env,
                             const CameraModel& cam, int rays = 256,
                             uint64_t seed = 0);

// I_c = bg * intensity * (1 - M) + fg * M, per pixel and channel.
ImageD composed_pbr(const ImageD& bg_rgb, const ImageD& fg_rgb,
                    const ImageU8& fg_mask, const ImageD& intensity);

struct LightOptReport {
  std::vector<double> loss;
  bool aborted = false;
};

// Photometric fit of the sun (l_sun) and compensation (l_comp) environment
// maps against a reference composite: Adam on the Gaussian parameters with a
// cosine schedule peaking at peak_lr. The object is lit by l_sun + l_comp;
// background pixels pass through unchanged (the ground intensity product is
// the caller's job, see composed_pbr), so the photometric signal comes from
// the object's shading. Aborts when the loss grows 10x over 100 steps.
LightOptReport optimize_lighting(const ImageD& bg_rgb,
                                 const TriangleMesh& mesh_world, EnvMap* l_sun,
                                 EnvMap* l_comp, const ImageD& reference,
                                 const CameraModel& cam, int steps = 2000,
                                 double peak_lr = 5e-3, int rays = 128,
                                 uint64_t seed = 0);

}  // namespace nerfsim
