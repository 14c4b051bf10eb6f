#pragma once

#include <array>
#include <string>
#include <vector>

#include "nerfsim/renderer.h"

namespace nerfsim {

struct LossWeights {
  double depth = 0.3;          // confidence-weighted dense disparity
  double lidar = 0.3;          // exact disparity on the LiDAR ray subset
  double semantic = 4e-3;      // cross-entropy on the rendered distribution
  double distortion = 0.01;    // interval compactness, normalized ray distance
  double proposal_bound = 1.0; // proposal stages bound the next stage
  double smoothness = 1e-3;    // edge-aware disparity smoothness
};

// One supervised ray. Sky pixels carry disparity 1/sky_depth and unit
// confidence; conf holds the five per-map confidence values at the pixel
// (empty means fixed weight 1, which also disables the mixture gradient).
struct RayTarget {
  int cam_index = 0;
  double px = 0, py = 0;
  double time = 0;
  Vec3 color = Vec3::Zero();
  double disparity = 0;
  VecX conf;
  int sem_class = -1;  // -1 disables semantic supervision for this ray
  bool has_lidar = false;
  double lidar_disparity = 0;
};

struct TrainBatch {
  std::vector<RayTarget> rays;
  // 2x2 pixel patches for the smoothness term, indices into rays ordered
  // (x,y), (x+1,y), (x,y+1), (x+1,y+1). A ray appears in at most one patch.
  std::vector<std::array<int, 4>> patches;
};

struct LossBreakdown {
  double rgb = 0, depth = 0, lidar = 0, semantic = 0;
  double distortion = 0, proposal_bound = 0, smoothness = 0;

  double supervision(const LossWeights& w) const {
    return rgb + w.depth * depth + w.lidar * lidar + w.semantic * semantic;
  }
  double regularization(const LossWeights& w) const {
    return w.distortion * distortion + w.proposal_bound * proposal_bound +
           w.smoothness * smoothness;
  }
  double total(const LossWeights& w) const {
    return supervision(w) + regularization(w);
  }
};

// Interval compactness penalty in normalized ray distance:
// sum_ij w_i w_j |m_i - m_j| + (1/3) sum_i w_i^2 d_i with midpoints m and
// widths d taken from the s parameterization. d_w accumulates the gradient.
double distortion_loss(const RaySamples& samples, const std::vector<double>& w,
                       std::vector<double>* d_w = nullptr);

// Bound penalty pushing the coarse stage's histogram to upper-bound the fine
// one: per coarse interval, e = max(0, binned fine weight - w_coarse),
// penalty e^2 / (binned fine weight + 1e-6). Fine weights are targets only;
// the gradient goes to the coarse weights alone.
double bound_penalty(const RaySamples& coarse,
                     const std::vector<double>& w_coarse,
                     const RaySamples& fine, const std::vector<double>& w_fine,
                     std::vector<double>* d_coarse = nullptr);

// Per-ray data terms. mix is the softmax of the five confidence logits.
// Returns raw (unweighted) term values; gradients are accumulated into d and
// d_mix already scaled by the loss weights, by ray_scale for the per-ray
// terms and by lidar_scale for the LiDAR term.
LossBreakdown supervision_loss(const RayTarget& target,
                               const RenderOutput& render, const VecX& mix,
                               const LossWeights& w, double ray_scale = 1.0,
                               double lidar_scale = 1.0, RayGrad* d = nullptr,
                               VecX* d_mix = nullptr);

// Everything a frozen re-evaluation must hold constant for one ray: the
// sample placement, plus the detached quantities the backward pass treats as
// constants (bound-penalty targets, the semantic branch's volume weights and
// encoder features). With these pinned, central differences of the objective
// agree with the analytic gradient everywhere, including across the
// stop-gradient boundaries.
struct RaySnapshot {
  FrozenRay frozen;
  std::vector<double> stage1_weights;  // target bounding stage 0
  std::vector<double> final_weights;   // target bounding stage 1 + semantics
  std::vector<int> sem_object;         // per final sample, -1 = background
  std::vector<VecX> sem_feat;          // empty when the sample had no logits
  bool valid = false;
};

// Renders every ray of the batch, evaluates the full objective, and (when
// grad is non-null) accumulates parameter gradients. Per-ray term means are
// taken over the batch, the LiDAR term over its subset, smoothness over
// neighbor pairs. frozen (per ray) replays stored snapshots so finite
// differences see a smooth function; frozen_out captures them.
LossBreakdown compute_loss(const Scene& scene, const TrainBatch& batch,
                           const LossWeights& w, uint64_t seed, int threads,
                           double* grad = nullptr,
                           const std::vector<RaySnapshot>* frozen = nullptr,
                           std::vector<RaySnapshot>* frozen_out = nullptr);

struct OptimConfig {
  double lr_grid = 1e-2;
  double lr_mlp = 1e-3;
  double lr_pose = 1e-4;
  double lr_track = 1e-4;
  double lr_omega = 1e-3;
  double lr_env = 5e-3;
  double beta1 = 0.9, beta2 = 0.99, eps = 1e-8;
  int decay_steps = 1000;  // cosine decay horizon; lr reaches 0 there
};

// Adam with one learning rate per parameter category and a cosine schedule.
class Adam {
 public:
  Adam(const ParamTape& tape, const OptimConfig& cfg);

  // Applies tape.grads to tape.values in place.
  void step(ParamTape& tape);
  int steps_done() const { return t_; }
  double schedule() const;  // cosine factor for the upcoming step
  double lr_for(ParamCategory cat) const;
  const OptimConfig& config() const { return cfg_; }

 private:
  OptimConfig cfg_;
  std::vector<double> m_, v_;
  int t_ = 0;
};

struct StepReport {
  LossBreakdown loss;
  double total = 0;
  bool applied = false;  // false when the loss came out non-finite
};

// One optimization step: zero grads, evaluate, update, re-sync the scene.
StepReport train_step(Scene& scene, const TrainBatch& batch,
                      const LossWeights& w, Adam& opt, uint64_t seed,
                      int threads = 1);

// Tape snapshot: JSON group table plus raw little-endian doubles. Loading
// verifies the group layout matches.
void save_checkpoint(const std::string& path, const ParamTape& tape);
void load_checkpoint(const std::string& path, ParamTape& tape);

}  // namespace nerfsim
