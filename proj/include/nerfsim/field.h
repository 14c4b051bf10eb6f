#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "nerfsim/common.h"
#include "nerfsim/rng.h"

namespace nerfsim {

enum class ParamCategory { Grid, Mlp, Omega, Pose, Track, EnvMap };

// Flat parameter storage shared by every learnable component. Gradients are
// accumulated into caller-provided buffers of the same length so parallel
// workers can reduce deterministically.
class ParamTape {
 public:
  struct Group {
    std::string name;
    ParamCategory category;
    size_t offset = 0;
    size_t size = 0;
  };

  size_t alloc(const std::string& name, ParamCategory category, size_t n) {
    size_t offset = values.size();
    values.resize(offset + n, 0.0);
    grads.resize(values.size(), 0.0);
    groups.push_back({name, category, offset, n});
    return offset;
  }

  void zero_grad() { std::fill(grads.begin(), grads.end(), 0.0); }

  size_t size() const { return values.size(); }

  const Group* find_group(const std::string& name) const {
    for (const auto& g : groups)
      if (g.name == name) return &g;
    return nullptr;
  }

  std::vector<double> values;
  std::vector<double> grads;
  std::vector<Group> groups;
};

// Mip-NeRF-360 style contraction into the radius-2 ball: identity inside the
// unit ball, (2 - 1/|x|) * x/|x| outside.
Vec3 contract(const Vec3& x);
Mat3 contract_jacobian(const Vec3& x);

// Per-level downweighting factor erf(1/(sqrt(8) * scale * n_level)).
double downweight(double scale, int level_resolution);

struct FieldConfig {
  int levels = 8;
  int base_resolution = 16;
  double growth = 1.6;
  int features = 2;          // per level
  int hidden = 64;           // trunk width
  int hidden_layers = 2;
  int color_hidden = 32;
  int sem_classes = 0;       // 0 disables the semantic branch
  int sem_hidden = 32;
  bool proposal = false;     // sigma-only decoder
  int proposal_hidden = 32;
  size_t dense_max_vertices = size_t(1) << 18;
  size_t hash_table_size = size_t(1) << 19;
  double grid_init_scale = 1e-4;
};

// Multiresolution feature grid over [0,1]^3. Levels whose vertex count stays
// under dense_max_vertices are stored densely; finer levels fall back to a
// fixed-size table addressed by a deterministic spatial hash.
class GridEncoding {
 public:
  GridEncoding(const FieldConfig& cfg, ParamTape& tape, Rng& rng,
               const std::string& name);

  int levels() const { return int(level_res_.size()); }
  int features() const { return features_; }
  int output_dim() const { return levels() * features_; }
  int level_resolution(int l) const { return level_res_[l]; }
  size_t param_offset() const { return offset_; }
  size_t param_count() const { return count_; }

  // Downweighted trilinear features at x in [0,1]^3 (clamped).
  void encode(const ParamTape& tape, const Vec3& x, double scale,
              double* out) const;
  // d_out -> gradients on vertex features (into grad buffer) and on x.
  void backward(const ParamTape& tape, const Vec3& x, double scale,
                const double* d_out, double* grad, Vec3* dx) const;

 private:
  size_t vertex_index(int level, int ix, int iy, int iz) const;

  int features_;
  std::vector<int> level_res_;
  std::vector<size_t> level_offset_;   // in features, relative to offset_
  std::vector<size_t> level_vertices_;
  std::vector<uint8_t> level_hashed_;
  size_t offset_ = 0, count_ = 0;
};

// Fully connected stack with ReLU hidden activations and a linear output.
class Mlp {
 public:
  Mlp() = default;
  Mlp(int in_dim, const std::vector<int>& hidden, int out_dim, ParamTape& tape,
      Rng& rng, const std::string& name);

  int in_dim() const { return dims_.empty() ? 0 : dims_.front(); }
  int out_dim() const { return dims_.empty() ? 0 : dims_.back(); }
  // Activations buffer holds every layer's post-activation (input included).
  int act_size() const { return act_size_; }

  void forward(const ParamTape& tape, const double* in, double* acts,
               double* out) const;
  // d_out -> gradient on weights (grad buffer) and optionally on the input.
  void backward(const ParamTape& tape, const double* acts, const double* d_out,
                double* grad, double* d_in) const;

 private:
  std::vector<int> dims_;
  std::vector<size_t> w_offset_, b_offset_;
  int act_size_ = 0;
};

struct FieldOutput {
  double sigma = 0;
  Vec3 color = Vec3::Zero();
  VecX sem_logits;
  bool clamped = false;  // object query fell outside the box
};

struct FieldOutputGrad {
  double d_sigma = 0;
  Vec3 d_color = Vec3::Zero();
  VecX d_sem_logits;  // empty when unused
};

// Saved forward state for one query (positions are in grid domain [0,1]^3).
struct QueryRecord {
  std::vector<Vec3> positions;  // one per multisample
  Vec3 dir = Vec3::Zero();
  double scale = 0;
  VecX feat;                // averaged encoding
  VecX trunk_acts;
  VecX color_in, color_acts;
  VecX sem_acts;
  double sigma_pre = 0;
  Vec3 color_pre = Vec3::Zero();
  bool clamped = false;
};

enum class FieldRole { Background, Object, Proposal };

// Grid + decoder pair. Background queries take contracted coordinates mapped
// to [0,1]^3; object queries take box coordinates plus 0.5. The semantic
// branch reads the encoding through a stop-gradient so semantic supervision
// never touches geometry parameters.
class RadianceField {
 public:
  RadianceField(const FieldConfig& cfg, FieldRole role, ParamTape& tape,
                Rng& rng, const std::string& name);

  FieldRole role() const { return role_; }
  const FieldConfig& config() const { return cfg_; }
  const GridEncoding& grid() const { return *grid_; }
  const std::string& name() const { return name_; }

  // positions: multisample positions in [0,1]^3 (averaged before decoding).
  void query(const ParamTape& tape, const std::vector<Vec3>& positions,
             const Vec3& dir, double scale, FieldOutput* out,
             QueryRecord* rec = nullptr) const;

  // Semantic head applied to an explicit (detached) feature vector; lets a
  // frozen re-evaluation keep the stop-gradient boundary where backward
  // places it. Returns an empty vector when the branch is disabled.
  VecX semantic_logits(const ParamTape& tape, const VecX& feat) const;

  // Gradients of downstream loss -> parameter grads, per-position position
  // grads (resized to rec.positions.size()), and view-direction grad.
  // grad may be null to skip parameter accumulation (inputs only).
  void backward(const ParamTape& tape, const QueryRecord& rec,
                const FieldOutputGrad& d_out, double* grad,
                std::vector<Vec3>* d_positions, Vec3* d_dir = nullptr) const;

 private:
  FieldConfig cfg_;
  FieldRole role_;
  std::string name_;
  std::unique_ptr<GridEncoding> grid_;
  Mlp trunk_;        // features -> hidden
  Mlp color_head_;   // [hidden; dir] -> 3 (sigmoid)
  Mlp sem_head_;     // features (stop-grad) -> K logits
  size_t sigma_w_ = 0, sigma_b_ = 0;  // hidden -> 1 (softplus)
};

inline double softplus(double x) {
  return x > 30 ? x : std::log1p(std::exp(x));
}
inline double softplus_grad(double x) { return 1.0 / (1.0 + std::exp(-x)); }
inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace nerfsim
