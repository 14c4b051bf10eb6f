#pragma once

#include <array>
#include <map>
#include <memory>
#include <vector>

#include "nerfsim/field.h"
#include "nerfsim/geometry.h"
#include "nerfsim/image.h"

namespace nerfsim {

// Interval samples along one ray. Edges are kept both in meters and in the
// normalized disparity-linear parameter s in [0,1] used for stratification
// and for the distortion penalty.
struct RaySamples {
  std::vector<double> edges;    // meters, count()+1, strictly increasing
  std::vector<double> s_edges;  // normalized, same layout
  std::vector<int> object;      // per interval: -1 background, else box id

  int count() const { return int(object.size()); }
  double mid(int i) const { return 0.5 * (edges[i] + edges[i + 1]); }
  double delta(int i) const { return edges[i + 1] - edges[i]; }
  double s_mid(int i) const { return 0.5 * (s_edges[i] + s_edges[i + 1]); }
  double s_delta(int i) const { return s_edges[i + 1] - s_edges[i]; }
};

struct RenderOutput {
  Vec3 color = Vec3::Zero();
  double disparity = 0;           // weighted 1/t plus sky tail
  VecX semantics;                 // class distribution, sums to opacity
  double opacity = 0;             // sum of weights
  double trans_tail = 1;          // transmittance past the last sample
  std::vector<double> weights;    // w_i = T_i (1 - exp(-sigma_i delta_i))
  std::map<int, double> object_mask;  // accumulated weight per object
};

struct SceneConfig {
  FieldConfig background;
  FieldConfig object;
  FieldConfig proposal;
  int proposal_samples = 64;
  int final_samples = 32;
  int background_multisamples = 4;
  double t_near = 0.05;
  double t_far = 100.0;
  double sky_depth = kSkyDepth;
  // World radius mapped onto the undistorted core of the contraction.
  double scene_radius = 10.0;
};

// Composite scene: background field, one field per tracked object, two
// shared sigma-only proposal stages, cameras with learnable pose offsets,
// and the confidence-mixture logits. All learnable state lives on the tape;
// call sync_from_tape after any parameter update so the camera and track
// structs used during sampling see current offsets.
class Scene {
 public:
  Scene(const SceneConfig& cfg, uint64_t seed);

  int add_camera(const CameraModel& cam);  // returns camera index
  int add_box(const TrackedBox& box);      // returns box index
  // Allocates refinement offsets (3 translation + 1 yaw) for one box at one
  // frame timestamp. No-op when already registered.
  void register_track_time(int box_index, double time);

  void sync_from_tape();

  int box_index(int box_id) const;  // -1 when unknown
  const RadianceField* object_field(int box_id) const;
  VecX omega() const;  // 5 confidence-mixture logits

  size_t camera_rot_offset(int cam) const { return cam_rot_off_[cam]; }
  size_t camera_trans_offset(int cam) const { return cam_trans_off_[cam]; }
  // Tape offset of [dx,dy,dz,dyaw] for (box index, time); SIZE_MAX if absent.
  size_t track_offset(int box_index, double time) const;
  size_t omega_offset() const { return omega_off_; }

  SceneConfig cfg;
  ParamTape tape;
  std::unique_ptr<RadianceField> background;
  std::array<std::unique_ptr<RadianceField>, 2> proposal;
  std::vector<std::unique_ptr<RadianceField>> object_fields;  // per box
  std::vector<CameraModel> cameras;
  std::vector<TrackedBox> boxes;

 private:
  std::vector<size_t> cam_rot_off_, cam_trans_off_;
  std::map<std::pair<int, int64_t>, size_t> track_off_;
  size_t omega_off_ = 0;
};

// Frozen interval edges and routing for every stage; lets a caller re-render
// with perturbed parameters while keeping the (detached) sample placement
// fixed, so finite differences agree with the analytic gradient.
struct FrozenRay {
  std::array<RaySamples, 3> stages;  // two proposal stages then final
  // Proposal-stage sigma, reused verbatim for object-routed samples: those
  // queries are fully detached, so a frozen re-render must treat them as
  // constants.
  std::array<std::vector<double>, 2> stage_sigma;
  bool valid = false;
};

// One proposal stage's samples, weights, and saved forward state.
struct StageRecord {
  RaySamples samples;
  std::vector<double> sigma;
  std::vector<double> weights;
  std::vector<QueryRecord> recs;
};

// Saved per-sample forward state for the final stage.
struct SampleBack {
  QueryRecord rec;
  int object_id = -1;
  double t_mid = 0;
  double sigma = 0;
  Vec3 color = Vec3::Zero();
  VecX sem_logits;
};

struct RayRecord {
  Ray ray;
  double time = 0;
  uint64_t seed = 0;
  int cam_index = -1;    // enables the pose-offset chain when >= 0
  Vec3 base_dir = Vec3::Zero();  // camera rotation * pixel dir, pre-offset
  std::array<StageRecord, 2> stages;
  RaySamples samples;    // final
  std::vector<SampleBack> back;
  std::vector<double> weights;
  double trans_tail = 1;
  RenderOutput out;

  FrozenRay frozen() const;
};

// Downstream-loss gradients entering the ray backward pass. d_semantics is
// applied with the weights held constant (density stop-gradient), so semantic
// supervision never reaches geometry. d_weights / d_stage_weights carry the
// direct weight-space terms of the regularizers.
struct RayGrad {
  Vec3 d_color = Vec3::Zero();
  double d_disparity = 0;
  VecX d_semantics;
  double d_opacity = 0;
  std::vector<double> d_weights;
  std::array<std::vector<double>, 2> d_stage_weights;
};

// Cascade sampling: stage 0 stratified uniform in s, later stages drawn by
// stratified inverse-CDF of the previous stage's weights. Samples inside a
// tracked box are routed to that object's field in every stage; the proposal
// stages' object queries contribute no object-network parameter gradients.
RaySamples sample_cascade(const Scene& scene, const Ray& ray, double time,
                          uint64_t seed,
                          std::array<StageRecord, 2>* stage_out = nullptr,
                          const FrozenRay* frozen = nullptr);

// Stratified inverse-CDF draw of count+1 new edges in s-space from one
// stage's interval histogram. Zero-weight bins are never selected.
std::vector<double> resample_intervals(const RaySamples& prev,
                                       const std::vector<double>& weights,
                                       int count, Rng& rng);

// Pure quadrature over given samples: color, disparity (with sky tail),
// semantic distribution, weights.
RenderOutput volume_render(const RaySamples& samples,
                           const std::vector<double>& sigma,
                           const std::vector<Vec3>& color,
                           const std::vector<VecX>& sem_logits,
                           double sky_depth = kSkyDepth);

// dL/dweights (a) and dL/dT_tail -> dL/dsigma per interval.
void weights_backward(const RaySamples& samples,
                      const std::vector<double>& sigma,
                      const std::vector<double>& a, double g_tail,
                      std::vector<double>* d_sigma);

RenderOutput render_ray(const Scene& scene, const Ray& ray, double time,
                        uint64_t seed, RayRecord* rec = nullptr,
                        const FrozenRay* frozen = nullptr);

// Camera-pixel entry point; records the pose chain for backward.
RenderOutput render_pixel(const Scene& scene, int cam_index, double px,
                          double py, double time, uint64_t seed,
                          RayRecord* rec = nullptr,
                          const FrozenRay* frozen = nullptr);

// Accumulates parameter gradients (fields, pose offsets, track offsets) for
// one rendered ray into grad (same length as scene.tape).
void render_ray_backward(const Scene& scene, const RayRecord& rec,
                         const RayGrad& d, double* grad);

struct FrameRender {
  ImageF color;      // 3 channels
  ImageF disparity;  // 1 channel
  ImageF semantics;  // one channel per class (distribution)
  ImageF opacity;    // 1 channel
  std::map<int, ImageF> masks;  // per active object, 1 channel
};

FrameRender render_image(const Scene& scene, int cam_index, double time,
                         uint64_t seed, int threads = 1);

}  // namespace nerfsim
