#include "nerfsim/field.h"

#include <algorithm>
#include <cmath>

namespace nerfsim {

Vec3 contract(const Vec3& x) {
  double r = x.norm();
  if (r <= 1.0) return x;
  return (2.0 - 1.0 / r) * (x / r);
}

Mat3 contract_jacobian(const Vec3& x) {
  double r = x.norm();
  if (r <= 1.0) return Mat3::Identity();
  Vec3 u = x / r;
  Mat3 uut = u * u.transpose();
  return (2.0 - 1.0 / r) / r * (Mat3::Identity() - uut) + (1.0 / (r * r)) * uut;
}

double downweight(double scale, int level_resolution) {
  if (scale <= 0) return 1.0;
  return std::erf(1.0 / (std::sqrt(8.0) * scale * level_resolution));
}

namespace {

constexpr uint64_t kHashPrimes[3] = {1ull, 2654435761ull, 805459861ull};

size_t spatial_hash(int ix, int iy, int iz, size_t table) {
  uint64_t h = uint64_t(ix) * kHashPrimes[0] ^ uint64_t(iy) * kHashPrimes[1] ^
               uint64_t(iz) * kHashPrimes[2];
  return size_t(h % table);
}

}  // namespace

GridEncoding::GridEncoding(const FieldConfig& cfg, ParamTape& tape, Rng& rng,
                           const std::string& name)
    : features_(cfg.features) {
  double res = cfg.base_resolution;
  size_t total = 0;
  for (int l = 0; l < cfg.levels; ++l) {
    int n = std::max(1, int(std::lround(res)));
    size_t dense_vertices = size_t(n + 1) * (n + 1) * (n + 1);
    bool hashed = dense_vertices > cfg.dense_max_vertices;
    size_t vertices = hashed ? cfg.hash_table_size : dense_vertices;
    level_res_.push_back(n);
    level_hashed_.push_back(hashed ? 1 : 0);
    level_vertices_.push_back(vertices);
    level_offset_.push_back(total);
    total += vertices * features_;
    res *= cfg.growth;
  }
  offset_ = tape.alloc(name, ParamCategory::Grid, total);
  count_ = total;
  for (size_t i = 0; i < total; ++i)
    tape.values[offset_ + i] =
        rng.uniform(-cfg.grid_init_scale, cfg.grid_init_scale);
}

size_t GridEncoding::vertex_index(int level, int ix, int iy, int iz) const {
  if (level_hashed_[level])
    return spatial_hash(ix, iy, iz, level_vertices_[level]);
  size_t n1 = size_t(level_res_[level]) + 1;
  return (size_t(iz) * n1 + iy) * n1 + ix;
}

void GridEncoding::encode(const ParamTape& tape, const Vec3& x, double scale,
                          double* out) const {
  const double* params = tape.values.data() + offset_;
  for (int l = 0; l < levels(); ++l) {
    int n = level_res_[l];
    double w = downweight(scale, n);
    double u[3], frac[3];
    int cell[3];
    for (int a = 0; a < 3; ++a) {
      u[a] = std::clamp(x[a], 0.0, 1.0) * n;
      cell[a] = std::min(int(u[a]), n - 1);
      frac[a] = u[a] - cell[a];
    }
    const double* lvl = params + level_offset_[l];
    for (int f = 0; f < features_; ++f) out[l * features_ + f] = 0.0;
    for (int dz = 0; dz < 2; ++dz)
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx) {
          double cw = (dx ? frac[0] : 1 - frac[0]) *
                      (dy ? frac[1] : 1 - frac[1]) *
                      (dz ? frac[2] : 1 - frac[2]);
          size_t vi =
              vertex_index(l, cell[0] + dx, cell[1] + dy, cell[2] + dz);
          const double* feat = lvl + vi * features_;
          for (int f = 0; f < features_; ++f)
            out[l * features_ + f] += w * cw * feat[f];
        }
  }
}

void GridEncoding::backward(const ParamTape& tape, const Vec3& x, double scale,
                            const double* d_out, double* grad,
                            Vec3* dx) const {
  const double* params = tape.values.data() + offset_;
  if (dx) dx->setZero();
  for (int l = 0; l < levels(); ++l) {
    int n = level_res_[l];
    double w = downweight(scale, n);
    double u[3], frac[3];
    int cell[3];
    bool interior[3];
    for (int a = 0; a < 3; ++a) {
      double xa = std::clamp(x[a], 0.0, 1.0);
      interior[a] = x[a] > 0.0 && x[a] < 1.0;
      u[a] = xa * n;
      cell[a] = std::min(int(u[a]), n - 1);
      frac[a] = u[a] - cell[a];
    }
    const double* lvl = params + level_offset_[l];
    const double* dl = d_out + l * features_;
    for (int dz = 0; dz < 2; ++dz)
      for (int dy = 0; dy < 2; ++dy)
        for (int dx_ = 0; dx_ < 2; ++dx_) {
          double wx = dx_ ? frac[0] : 1 - frac[0];
          double wy = dy ? frac[1] : 1 - frac[1];
          double wz = dz ? frac[2] : 1 - frac[2];
          double cw = wx * wy * wz;
          size_t vi =
              vertex_index(l, cell[0] + dx_, cell[1] + dy, cell[2] + dz);
          const double* feat = lvl + vi * features_;
          double* gfeat =
              grad ? grad + offset_ + level_offset_[l] + vi * features_
                   : nullptr;
          double fdot = 0.0;
          for (int f = 0; f < features_; ++f) {
            if (gfeat) gfeat[f] += w * cw * dl[f];
            fdot += feat[f] * dl[f];
          }
          if (dx) {
            double sx = dx_ ? 1.0 : -1.0;
            double sy = dy ? 1.0 : -1.0;
            double sz = dz ? 1.0 : -1.0;
            if (interior[0]) (*dx)[0] += w * fdot * sx * wy * wz * n;
            if (interior[1]) (*dx)[1] += w * fdot * wx * sy * wz * n;
            if (interior[2]) (*dx)[2] += w * fdot * wx * wy * sz * n;
          }
        }
  }
}

Mlp::Mlp(int in_dim, const std::vector<int>& hidden, int out_dim,
         ParamTape& tape, Rng& rng, const std::string& name) {
  dims_.push_back(in_dim);
  for (int h : hidden) dims_.push_back(h);
  dims_.push_back(out_dim);
  for (size_t l = 0; l + 1 < dims_.size(); ++l) {
    int fan_in = dims_[l], fan_out = dims_[l + 1];
    size_t wo = tape.alloc(name + "/w" + std::to_string(l), ParamCategory::Mlp,
                           size_t(fan_in) * fan_out);
    size_t bo = tape.alloc(name + "/b" + std::to_string(l), ParamCategory::Mlp,
                           size_t(fan_out));
    double a = std::sqrt(6.0 / fan_in);
    for (size_t i = 0; i < size_t(fan_in) * fan_out; ++i)
      tape.values[wo + i] = rng.uniform(-a, a);
    w_offset_.push_back(wo);
    b_offset_.push_back(bo);
  }
  act_size_ = 0;
  for (int d : dims_) act_size_ += d;
}

void Mlp::forward(const ParamTape& tape, const double* in, double* acts,
                  double* out) const {
  std::copy(in, in + dims_[0], acts);
  double* cur = acts;
  for (size_t l = 0; l + 1 < dims_.size(); ++l) {
    int ni = dims_[l], no = dims_[l + 1];
    const double* W = tape.values.data() + w_offset_[l];
    const double* b = tape.values.data() + b_offset_[l];
    double* next = cur + ni;
    bool last = (l + 2 == dims_.size());
    for (int j = 0; j < no; ++j) {
      double s = b[j];
      const double* wr = W + size_t(j) * ni;
      for (int k = 0; k < ni; ++k) s += wr[k] * cur[k];
      next[j] = (last || s > 0) ? s : 0.0;
    }
    cur = next;
  }
  std::copy(cur, cur + dims_.back(), out);
}

void Mlp::backward(const ParamTape& tape, const double* acts,
                   const double* d_out, double* grad, double* d_in) const {
  // Walk the activation buffer backwards; hidden layers are ReLU so the
  // stored post-activation tells which units were live.
  std::vector<const double*> layer_act(dims_.size());
  {
    const double* p = acts;
    for (size_t l = 0; l < dims_.size(); ++l) {
      layer_act[l] = p;
      p += dims_[l];
    }
  }
  std::vector<double> delta(d_out, d_out + dims_.back());
  for (size_t li = dims_.size() - 1; li-- > 0;) {
    int ni = dims_[li], no = dims_[li + 1];
    const double* a_in = layer_act[li];
    const double* a_out = layer_act[li + 1];
    const double* W = tape.values.data() + w_offset_[li];
    double* gW = grad ? grad + w_offset_[li] : nullptr;
    double* gb = grad ? grad + b_offset_[li] : nullptr;
    bool last = (li + 2 == dims_.size());
    std::vector<double> next_delta(ni, 0.0);
    for (int j = 0; j < no; ++j) {
      double d = delta[j];
      if (!last && a_out[j] <= 0.0) d = 0.0;
      if (d == 0.0) continue;
      if (gb) gb[j] += d;
      const double* wr = W + size_t(j) * ni;
      double* gwr = gW ? gW + size_t(j) * ni : nullptr;
      for (int k = 0; k < ni; ++k) {
        if (gwr) gwr[k] += d * a_in[k];
        next_delta[k] += d * wr[k];
      }
    }
    if (li == 0) {
      if (d_in)
        for (int k = 0; k < ni; ++k) d_in[k] += next_delta[k];
      break;
    }
    delta = std::move(next_delta);
  }
}

RadianceField::RadianceField(const FieldConfig& cfg, FieldRole role,
                             ParamTape& tape, Rng& rng, const std::string& name)
    : cfg_(cfg), role_(role), name_(name) {
  grid_ = std::make_unique<GridEncoding>(cfg, tape, rng, name + "/grid");
  int in = grid_->output_dim();
  if (role == FieldRole::Proposal) {
    trunk_ = Mlp(in, {cfg.proposal_hidden}, 1, tape, rng, name + "/mlp");
    return;
  }
  std::vector<int> hidden(std::max(0, cfg.hidden_layers - 1), cfg.hidden);
  trunk_ = Mlp(in, hidden, cfg.hidden, tape, rng, name + "/mlp");
  sigma_w_ = tape.alloc(name + "/mlp/sigma_w", ParamCategory::Mlp, cfg.hidden);
  sigma_b_ = tape.alloc(name + "/mlp/sigma_b", ParamCategory::Mlp, 1);
  double a = std::sqrt(6.0 / cfg.hidden);
  for (int i = 0; i < cfg.hidden; ++i)
    tape.values[sigma_w_ + i] = rng.uniform(-a, a);
  color_head_ = Mlp(cfg.hidden + 3, {cfg.color_hidden}, 3, tape, rng,
                    name + "/mlp/color");
  if (cfg.sem_classes > 0)
    sem_head_ = Mlp(in, {cfg.sem_hidden}, cfg.sem_classes, tape, rng,
                    name + "/mlp/sem");
}

void RadianceField::query(const ParamTape& tape,
                          const std::vector<Vec3>& positions, const Vec3& dir,
                          double scale, FieldOutput* out,
                          QueryRecord* rec) const {
  const int fd = grid_->output_dim();
  VecX feat = VecX::Zero(fd);
  VecX tmp(fd);
  bool clamped = false;
  for (const Vec3& p : positions) {
    for (int a = 0; a < 3; ++a)
      if (p[a] < -1e-9 || p[a] > 1.0 + 1e-9) clamped = true;
    grid_->encode(tape, p, scale, tmp.data());
    feat += tmp;
  }
  feat /= double(positions.size());
  out->clamped = clamped;

  if (role_ == FieldRole::Proposal) {
    VecX acts(trunk_.act_size());
    double pre = 0;
    trunk_.forward(tape, feat.data(), acts.data(), &pre);
    out->sigma = softplus(pre);
    out->color.setZero();
    if (rec) {
      rec->positions = positions;
      rec->dir = dir;
      rec->scale = scale;
      rec->feat = std::move(feat);
      rec->trunk_acts = std::move(acts);
      rec->sigma_pre = pre;
      rec->clamped = clamped;
    }
    return;
  }

  VecX trunk_acts(trunk_.act_size());
  VecX h(cfg_.hidden);
  trunk_.forward(tape, feat.data(), trunk_acts.data(), h.data());

  double sigma_pre = tape.values[sigma_b_];
  for (int i = 0; i < cfg_.hidden; ++i)
    sigma_pre += tape.values[sigma_w_ + i] * h[i];
  out->sigma = softplus(sigma_pre);

  VecX color_in(cfg_.hidden + 3);
  color_in.head(cfg_.hidden) = h;
  color_in.tail(3) = dir;
  VecX color_acts(color_head_.act_size());
  Vec3 color_pre;
  color_head_.forward(tape, color_in.data(), color_acts.data(),
                      color_pre.data());
  for (int c = 0; c < 3; ++c) out->color[c] = sigmoid(color_pre[c]);

  VecX sem_acts;
  if (cfg_.sem_classes > 0) {
    out->sem_logits.resize(cfg_.sem_classes);
    sem_acts.resize(sem_head_.act_size());
    sem_head_.forward(tape, feat.data(), sem_acts.data(),
                      out->sem_logits.data());
  }

  if (rec) {
    rec->positions = positions;
    rec->dir = dir;
    rec->scale = scale;
    rec->feat = std::move(feat);
    rec->trunk_acts = std::move(trunk_acts);
    rec->color_in = std::move(color_in);
    rec->color_acts = std::move(color_acts);
    rec->sem_acts = std::move(sem_acts);
    rec->sigma_pre = sigma_pre;
    rec->color_pre = color_pre;
    rec->clamped = clamped;
  }
}

VecX RadianceField::semantic_logits(const ParamTape& tape,
                                    const VecX& feat) const {
  if (cfg_.sem_classes == 0) return VecX();
  VecX out(cfg_.sem_classes);
  VecX acts(sem_head_.act_size());
  sem_head_.forward(tape, feat.data(), acts.data(), out.data());
  return out;
}

void RadianceField::backward(const ParamTape& tape, const QueryRecord& rec,
                             const FieldOutputGrad& d_out, double* grad,
                             std::vector<Vec3>* d_positions,
                             Vec3* d_dir) const {
  const int fd = grid_->output_dim();
  VecX d_feat = VecX::Zero(fd);

  if (role_ == FieldRole::Proposal) {
    double d_pre = d_out.d_sigma * softplus_grad(rec.sigma_pre);
    if (d_pre != 0.0)
      trunk_.backward(tape, rec.trunk_acts.data(), &d_pre, grad,
                      d_feat.data());
  } else {
    // Semantic branch: gradients stop at the encoding (never into d_feat).
    if (grad && d_out.d_sem_logits.size() > 0 && cfg_.sem_classes > 0)
      sem_head_.backward(tape, rec.sem_acts.data(), d_out.d_sem_logits.data(),
                         grad, nullptr);

    VecX d_h = VecX::Zero(cfg_.hidden);

    Vec3 d_color_pre;
    bool color_active = d_out.d_color.squaredNorm() > 0;
    if (color_active) {
      for (int c = 0; c < 3; ++c) {
        double s = sigmoid(rec.color_pre[c]);
        d_color_pre[c] = d_out.d_color[c] * s * (1.0 - s);
      }
      VecX d_color_in = VecX::Zero(cfg_.hidden + 3);
      color_head_.backward(tape, rec.color_acts.data(), d_color_pre.data(),
                           grad, d_color_in.data());
      d_h += d_color_in.head(cfg_.hidden);
      if (d_dir) *d_dir += d_color_in.tail(3);
    }

    double d_sigma_pre = d_out.d_sigma * softplus_grad(rec.sigma_pre);
    if (d_sigma_pre != 0.0) {
      if (grad) grad[sigma_b_] += d_sigma_pre;
      for (int i = 0; i < cfg_.hidden; ++i) {
        if (grad)
          grad[sigma_w_ + i] += d_sigma_pre * rec.trunk_acts
                                    [trunk_.act_size() - cfg_.hidden + i];
        d_h[i] += d_sigma_pre * tape.values[sigma_w_ + i];
      }
    }

    if (d_h.squaredNorm() > 0)
      trunk_.backward(tape, rec.trunk_acts.data(), d_h.data(), grad,
                      d_feat.data());
  }

  if (d_positions) {
    d_positions->assign(rec.positions.size(), Vec3::Zero());
    if (d_feat.squaredNorm() > 0) {
      VecX d_each = d_feat / double(rec.positions.size());
      for (size_t i = 0; i < rec.positions.size(); ++i) {
        Vec3 dx;
        grid_->backward(tape, rec.positions[i], rec.scale, d_each.data(), grad,
                        &dx);
        (*d_positions)[i] = dx;
      }
    }
  } else if (d_feat.squaredNorm() > 0) {
    VecX d_each = d_feat / double(rec.positions.size());
    for (const Vec3& p : rec.positions)
      grid_->backward(tape, p, rec.scale, d_each.data(), grad, nullptr);
  }
}

}  // namespace nerfsim
