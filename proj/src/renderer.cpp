#include "nerfsim/renderer.h"

#include <algorithm>
#include <cmath>

#include "nerfsim/rng.h"
#include "nerfsim/threading.h"

namespace nerfsim {

namespace {

// Normalized ray parameter s in [0,1], linear in disparity so unbounded far
// fields get finite coverage.
double s_to_t(double s, double tn, double tf) {
  return 1.0 / ((1.0 - s) / tn + s / tf);
}

// Grid-domain scale of one world unit at x (contraction shrinks the far
// field); cube-root of the contraction Jacobian determinant.
double contract_scale(const Vec3& xn) {
  double r = xn.norm();
  if (r <= 1.0) return 1.0;
  double tang = (2.0 - 1.0 / r) / r;
  return std::cbrt(tang * tang / (r * r));
}

struct BackgroundMap {
  double radius = 1;
  Vec3 to_grid(const Vec3& xw) const {
    return contract(xw / radius) / 4.0 + Vec3::Constant(0.5);
  }
  Vec3 from_grid(const Vec3& p) const {
    Vec3 y = 4.0 * (p - Vec3::Constant(0.5));
    double r = y.norm();
    if (r <= 1.0) return radius * y;
    double rx = 1.0 / (2.0 - std::min(r, 2.0 - 1e-12));
    return radius * rx * (y / r);
  }
  // d(grid)/d(world), symmetric.
  Mat3 jacobian(const Vec3& xw) const {
    return contract_jacobian(xw / radius) / (4.0 * radius);
  }
  double grid_scale(const Vec3& xw, double world_radius) const {
    return world_radius * contract_scale(xw / radius) / (4.0 * radius);
  }
};

std::vector<double> interval_weights(const RaySamples& samples,
                                     const std::vector<double>& sigma) {
  std::vector<double> w(samples.count());
  double trans = 1.0;
  for (int i = 0; i < samples.count(); ++i) {
    double a = 1.0 - std::exp(-sigma[i] * samples.delta(i));
    w[i] = trans * a;
    trans *= 1.0 - a;
  }
  return w;
}

}  // namespace

// A degenerate histogram maps every sample into its bin exactly.
std::vector<double> resample_intervals(const RaySamples& prev,
                                       const std::vector<double>& weights,
                                       int count, Rng& rng) {
  int n = prev.count();
  double total = 0;
  for (double w : weights) total += w;
  std::vector<double> cdf(n + 1, 0.0);
  if (total < 1e-12) {
    for (int j = 0; j < n; ++j)
      cdf[j + 1] = cdf[j] + prev.s_delta(j);  // uniform in s
    total = cdf[n];
  } else {
    for (int j = 0; j < n; ++j) cdf[j + 1] = cdf[j] + weights[j];
  }
  for (auto& c : cdf) c /= total;
  cdf[n] = 1.0;

  std::vector<double> edges(count + 1);
  int bin = 0;
  for (int i = 0; i <= count; ++i) {
    double u = (i + rng.uniform()) / (count + 1);
    while (bin + 1 < n && cdf[bin + 1] < u) ++bin;
    double lo = cdf[bin], hi = cdf[bin + 1];
    double frac = hi > lo ? (u - lo) / (hi - lo) : 0.0;
    edges[i] = prev.s_edges[bin] +
               frac * (prev.s_edges[bin + 1] - prev.s_edges[bin]);
  }
  for (int i = 1; i <= count; ++i)
    edges[i] = std::max(edges[i], edges[i - 1] + 1e-9);
  return edges;
}

namespace {

void fill_t_edges(RaySamples* s, double tn, double tf) {
  s->edges.resize(s->s_edges.size());
  for (size_t i = 0; i < s->s_edges.size(); ++i)
    s->edges[i] = s_to_t(s->s_edges[i], tn, tf);
}

void route_samples(RaySamples* s, const std::vector<BoxSegment>& segs) {
  s->object.assign(s->edges.size() - 1, -1);
  for (size_t i = 0; i + 1 < s->edges.size(); ++i) {
    double tm = s->mid(int(i));
    for (const BoxSegment& seg : segs)
      if (tm >= seg.t_enter && tm <= seg.t_exit) {
        s->object[i] = seg.box_id;
        break;
      }
  }
}

// Sigma at stage-sample midpoints. Object-routed samples query the object
// field itself (so all stages agree on where objects are) but are fully
// detached from the gradient tape; a frozen re-render reuses their values.
void eval_stage(const Scene& scene, const Ray& ray, double time,
                const BackgroundMap& bg, int stage, StageRecord* out,
                const std::vector<double>* sigma_override) {
  int n = out->samples.count();
  out->sigma.resize(n);
  out->recs.resize(n);
  for (int i = 0; i < n; ++i) {
    double tm = out->samples.mid(i);
    Vec3 xw = ray.origin + tm * ray.dir;
    FieldOutput fo;
    int oid = out->samples.object[i];
    if (oid >= 0) {
      if (sigma_override) {
        out->sigma[i] = (*sigma_override)[i];
        continue;
      }
      const RadianceField* f = scene.object_field(oid);
      int bi = scene.box_index(oid);
      ObjectFrame of = box_to_object(xw, ray.dir, ray.cone_radius_rate,
                                     scene.boxes[bi], time);
      f->query(scene.tape, {of.x + Vec3::Constant(0.5)}, of.dir,
               of.cone_radius_rate * tm, &fo, &out->recs[i]);
    } else {
      scene.proposal[stage]->query(scene.tape, {bg.to_grid(xw)}, ray.dir,
                                   bg.grid_scale(xw, ray.cone_radius_rate * tm),
                                   &fo, &out->recs[i]);
    }
    out->sigma[i] = fo.sigma;
  }
  out->weights = interval_weights(out->samples, out->sigma);
}

VecX softmax(const VecX& z) {
  VecX e = (z.array() - z.maxCoeff()).exp();
  return e / e.sum();
}

}  // namespace

Scene::Scene(const SceneConfig& cfg_in, uint64_t seed) : cfg(cfg_in) {
  Rng rng(seed, 0xF1E1D);
  background = std::make_unique<RadianceField>(
      cfg.background, FieldRole::Background, tape, rng, "bg");
  FieldConfig pcfg = cfg.proposal;
  pcfg.proposal = true;
  pcfg.sem_classes = 0;
  for (int k = 0; k < 2; ++k)
    proposal[k] = std::make_unique<RadianceField>(
        pcfg, FieldRole::Proposal, tape, rng, "prop" + std::to_string(k));
  omega_off_ = tape.alloc("omega", ParamCategory::Omega, 5);
}

int Scene::add_camera(const CameraModel& cam) {
  int i = int(cameras.size());
  cameras.push_back(cam);
  cam_rot_off_.push_back(
      tape.alloc("cam" + std::to_string(i) + "/rot", ParamCategory::Pose, 3));
  cam_trans_off_.push_back(
      tape.alloc("cam" + std::to_string(i) + "/trans", ParamCategory::Pose, 3));
  return i;
}

int Scene::add_box(const TrackedBox& box) {
  int i = int(boxes.size());
  boxes.push_back(box);
  Rng rng(0xB0C5ull + uint64_t(box.id), 7);
  object_fields.push_back(std::make_unique<RadianceField>(
      cfg.object, FieldRole::Object, tape, rng,
      "obj" + std::to_string(box.id)));
  return i;
}

void Scene::register_track_time(int box_index, double time) {
  auto key = std::make_pair(box_index, TrackedBox::time_key(time));
  if (track_off_.count(key)) return;
  track_off_[key] =
      tape.alloc("track/box" + std::to_string(boxes[box_index].id) + "/t" +
                     std::to_string(key.second),
                 ParamCategory::Track, 4);
}

void Scene::sync_from_tape() {
  for (size_t i = 0; i < cameras.size(); ++i) {
    for (int a = 0; a < 3; ++a) {
      cameras[i].refine_rot[a] = tape.values[cam_rot_off_[i] + a];
      cameras[i].refine_trans[a] = tape.values[cam_trans_off_[i] + a];
    }
  }
  for (const auto& [key, off] : track_off_) {
    TrackedBox& box = boxes[key.first];
    box.refine_trans[key.second] =
        Vec3(tape.values[off], tape.values[off + 1], tape.values[off + 2]);
    box.refine_yaw[key.second] = tape.values[off + 3];
  }
}

int Scene::box_index(int box_id) const {
  for (size_t i = 0; i < boxes.size(); ++i)
    if (boxes[i].id == box_id) return int(i);
  return -1;
}

const RadianceField* Scene::object_field(int box_id) const {
  int i = box_index(box_id);
  return i < 0 ? nullptr : object_fields[i].get();
}

VecX Scene::omega() const {
  VecX w(5);
  for (int i = 0; i < 5; ++i) w[i] = tape.values[omega_off_ + i];
  return w;
}

size_t Scene::track_offset(int box_index, double time) const {
  auto it = track_off_.find({box_index, TrackedBox::time_key(time)});
  return it == track_off_.end() ? size_t(-1) : it->second;
}

FrozenRay RayRecord::frozen() const {
  FrozenRay f;
  f.stages[0] = stages[0].samples;
  f.stages[1] = stages[1].samples;
  f.stages[2] = samples;
  f.stage_sigma[0] = stages[0].sigma;
  f.stage_sigma[1] = stages[1].sigma;
  f.valid = true;
  return f;
}

RaySamples sample_cascade(const Scene& scene, const Ray& ray, double time,
                          uint64_t seed, std::array<StageRecord, 2>* stage_out,
                          const FrozenRay* frozen) {
  std::array<StageRecord, 2> local;
  std::array<StageRecord, 2>& stages = stage_out ? *stage_out : local;
  BackgroundMap bg{scene.cfg.scene_radius};

  std::vector<BoxSegment> segs;
  if (!frozen) segs = ray_box_segments(ray, scene.boxes, time);

  int np = scene.cfg.proposal_samples;
  for (int k = 0; k < 2; ++k) {
    if (frozen) {
      stages[k].samples = frozen->stages[k];
    } else if (k == 0) {
      RaySamples& s = stages[0].samples;
      s.s_edges.resize(np + 1);
      for (int j = 0; j <= np; ++j) s.s_edges[j] = double(j) / np;
      fill_t_edges(&s, ray.t_near, ray.t_far);
      route_samples(&s, segs);
    } else {
      Rng rng(seed, 0x100 + k);
      RaySamples& s = stages[1].samples;
      s.s_edges = resample_intervals(stages[0].samples, stages[0].weights, np, rng);
      fill_t_edges(&s, ray.t_near, ray.t_far);
      route_samples(&s, segs);
    }
    eval_stage(scene, ray, time, bg, k, &stages[k],
               frozen ? &frozen->stage_sigma[k] : nullptr);
  }

  RaySamples out;
  if (frozen) {
    out = frozen->stages[2];
  } else {
    Rng rng(seed, 0x102);
    out.s_edges = resample_intervals(stages[1].samples, stages[1].weights,
                                 scene.cfg.final_samples, rng);
    fill_t_edges(&out, ray.t_near, ray.t_far);
    route_samples(&out, segs);
  }
  return out;
}

RenderOutput volume_render(const RaySamples& samples,
                           const std::vector<double>& sigma,
                           const std::vector<Vec3>& color,
                           const std::vector<VecX>& sem_logits,
                           double sky_depth) {
  RenderOutput out;
  int n = samples.count();
  out.weights = interval_weights(samples, sigma);
  int classes = 0;
  for (const VecX& s : sem_logits)
    classes = std::max(classes, int(s.size()));
  if (classes) out.semantics = VecX::Zero(classes);

  double trans = 1.0;
  for (int i = 0; i < n; ++i) {
    double w = out.weights[i];
    out.color += w * color[i];
    out.disparity += w / samples.mid(i);
    out.opacity += w;
    if (classes && sem_logits[i].size())
      out.semantics += w * softmax(sem_logits[i]);
    if (samples.object[i] >= 0) out.object_mask[samples.object[i]] += w;
    trans *= std::exp(-sigma[i] * samples.delta(i));
  }
  out.trans_tail = trans;
  out.disparity += trans / sky_depth;
  return out;
}

void weights_backward(const RaySamples& samples,
                      const std::vector<double>& sigma,
                      const std::vector<double>& a, double g_tail,
                      std::vector<double>* d_sigma) {
  // w_i = T_i (1 - e^{-sigma_i d_i}); for j > i, dw_j/dsigma_i = -d_i w_j and
  // dT_tail/dsigma_i = -d_i T_tail, so one suffix sum covers everything.
  int n = samples.count();
  d_sigma->assign(n, 0.0);
  std::vector<double> trans(n + 1);
  trans[0] = 1.0;
  for (int i = 0; i < n; ++i)
    trans[i + 1] = trans[i] * std::exp(-sigma[i] * samples.delta(i));
  double suffix = g_tail * trans[n];
  for (int i = n - 1; i >= 0; --i) {
    double di = samples.delta(i);
    double alpha = 1.0 - std::exp(-sigma[i] * di);
    double wi = trans[i] * alpha;
    (*d_sigma)[i] = a[i] * trans[i] * (1.0 - alpha) * di - di * suffix;
    suffix += a[i] * wi;
  }
}

namespace {

RenderOutput render_ray_impl(const Scene& scene, const Ray& ray, double time,
                             uint64_t seed, const Vec3& jitter_axis,
                             int cam_index, RayRecord* rec,
                             const FrozenRay* frozen) {
  RayRecord local;
  RayRecord& r = rec ? *rec : local;
  r.ray = ray;
  r.time = time;
  r.seed = seed;
  r.cam_index = cam_index;
  r.base_dir = jitter_axis;
  r.samples = sample_cascade(scene, ray, time, seed, &r.stages, frozen);

  BackgroundMap bg{scene.cfg.scene_radius};
  Vec3 e1 = jitter_axis.unitOrthogonal();
  Vec3 e2 = jitter_axis.cross(e1).normalized();

  int n = r.samples.count();
  int m = std::max(1, scene.cfg.background_multisamples);
  r.back.resize(n);
  std::vector<double> sigma(n);
  std::vector<Vec3> color(n);
  std::vector<VecX> sem(n);
  for (int i = 0; i < n; ++i) {
    SampleBack& sb = r.back[i];
    sb.object_id = r.samples.object[i];
    sb.t_mid = r.samples.mid(i);
    Vec3 xw = ray.origin + sb.t_mid * ray.dir;
    FieldOutput fo;
    if (sb.object_id >= 0) {
      int bi = scene.box_index(sb.object_id);
      ObjectFrame of = box_to_object(xw, ray.dir, ray.cone_radius_rate,
                                     scene.boxes[bi], time);
      scene.object_fields[bi]->query(scene.tape,
                                     {of.x + Vec3::Constant(0.5)}, of.dir,
                                     of.cone_radius_rate * sb.t_mid, &fo,
                                     &sb.rec);
    } else {
      double rad = ray.cone_radius_rate * sb.t_mid;
      Rng jit(seed, 0x5000 + uint64_t(i));
      std::vector<Vec3> pts;
      pts.reserve(m);
      for (int s = 0; s < m; ++s) {
        Vec3 c = Vec3::Zero();
        if (m > 1) {
          double phi = 2.0 * kPi * (s + jit.uniform()) / m;
          double rr = rad * std::sqrt(jit.uniform());
          c = rr * (std::cos(phi) * e1 + std::sin(phi) * e2);
        }
        pts.push_back(bg.to_grid(xw + c));
      }
      scene.background->query(scene.tape, pts, ray.dir,
                              bg.grid_scale(xw, rad), &fo, &sb.rec);
    }
    sb.sigma = fo.sigma;
    sb.color = fo.color;
    sb.sem_logits = fo.sem_logits;
    sigma[i] = fo.sigma;
    color[i] = fo.color;
    sem[i] = fo.sem_logits;
  }

  r.out = volume_render(r.samples, sigma, color, sem, scene.cfg.sky_depth);
  r.weights = r.out.weights;
  r.trans_tail = r.out.trans_tail;
  return r.out;
}

}  // namespace

RenderOutput render_ray(const Scene& scene, const Ray& ray, double time,
                        uint64_t seed, RayRecord* rec,
                        const FrozenRay* frozen) {
  return render_ray_impl(scene, ray, time, seed, ray.dir, -1, rec, frozen);
}

RenderOutput render_pixel(const Scene& scene, int cam_index, double px,
                          double py, double time, uint64_t seed,
                          RayRecord* rec, const FrozenRay* frozen) {
  const CameraModel& cam = scene.cameras[cam_index];
  Ray ray = camera_ray(cam, px, py, scene.cfg.t_near, scene.cfg.t_far);
  // Multisample frame from the unrefined rotation so jitter offsets stay
  // constant under pose refinement.
  Vec3 dc((px - cam.cx) / cam.fx, (py - cam.cy) / cam.fy, 1.0);
  Vec3 base = cam.pose.R * dc.normalized();
  return render_ray_impl(scene, ray, time, seed, base, cam_index, rec, frozen);
}

namespace {

struct SampleChain {
  Vec3 d_origin = Vec3::Zero();
  Vec3 d_dir = Vec3::Zero();
};

// Routes one sample's position/direction gradients back to the ray and, for
// object samples, into the track offsets.
void chain_sample(const Scene& scene, const RayRecord& r, double t_mid,
                  int object_id, const QueryRecord& rec,
                  const std::vector<Vec3>& d_positions,
                  const Vec3& d_dir_field, double* grad, SampleChain* out) {
  BackgroundMap bg{scene.cfg.scene_radius};
  if (object_id < 0) {
    // Jitter offsets are constant vectors, so every multisample shares the
    // o + t*dir dependence; the Jacobian is taken at each multisample's own
    // world point, recovered by inverting the contraction.
    for (size_t mI = 0; mI < d_positions.size(); ++mI) {
      if (d_positions[mI].squaredNorm() == 0) continue;
      Vec3 xw = bg.from_grid(rec.positions[mI]);
      Vec3 d_xw = bg.jacobian(xw) * d_positions[mI];
      out->d_origin += d_xw;
      out->d_dir += t_mid * d_xw;
    }
    out->d_dir += d_dir_field;
    return;
  }

  int bi = scene.box_index(object_id);
  const TrackedBox& box = scene.boxes[bi];
  RigidTransform pose = interpolate_box_pose(box, r.time);
  Vec3 inv_dim = box.dim.cwiseInverse();
  Vec3 d_p = d_positions.empty() ? Vec3::Zero() : d_positions[0];
  Vec3 xw = r.ray.origin + t_mid * r.ray.dir;

  Vec3 d_xw = pose.R * inv_dim.cwiseProduct(d_p);
  out->d_origin += d_xw;
  out->d_dir += t_mid * d_xw + pose.R * d_dir_field;

  size_t off = scene.track_offset(bi, r.time);
  if (off != size_t(-1)) {
    Vec3 g_dt = -d_xw;
    Vec3 zc_p = Vec3::UnitZ().cross(xw - pose.t);
    Vec3 zc_d = Vec3::UnitZ().cross(r.ray.dir);
    double g_dyaw =
        d_p.dot(-inv_dim.cwiseProduct(pose.R.transpose() * zc_p)) +
        d_dir_field.dot(-(pose.R.transpose() * zc_d));
    for (int a = 0; a < 3; ++a) grad[off + a] += g_dt[a];
    grad[off + 3] += g_dyaw;
  }
}

}  // namespace

void render_ray_backward(const Scene& scene, const RayRecord& r,
                         const RayGrad& d, double* grad) {
  int n = r.samples.count();
  SampleChain chain;

  // Weight-space gradient of the final stage. Semantic supervision is
  // excluded here: the rendered distribution treats weights as constants.
  std::vector<double> a(n, 0.0);
  bool any = false;
  for (int i = 0; i < n; ++i) {
    double ai = d.d_opacity;
    ai += d.d_color.dot(r.back[i].color);
    ai += d.d_disparity / r.back[i].t_mid;
    if (!d.d_weights.empty()) ai += d.d_weights[i];
    a[i] = ai;
    if (ai != 0) any = true;
  }
  double g_tail = d.d_disparity / scene.cfg.sky_depth;
  std::vector<double> sigma(n);
  for (int i = 0; i < n; ++i) sigma[i] = r.back[i].sigma;
  std::vector<double> d_sigma(n, 0.0);
  if (any || g_tail != 0)
    weights_backward(r.samples, sigma, a, g_tail, &d_sigma);

  for (int i = 0; i < n; ++i) {
    const SampleBack& sb = r.back[i];
    FieldOutputGrad fg;
    fg.d_sigma = d_sigma[i];
    fg.d_color = r.weights[i] * d.d_color;
    if (d.d_semantics.size() && sb.sem_logits.size()) {
      VecX p = softmax(sb.sem_logits);
      double dot = p.dot(d.d_semantics);
      fg.d_sem_logits =
          r.weights[i] * (p.array() * (d.d_semantics.array() - dot)).matrix();
    }
    bool has_field_grad =
        fg.d_sigma != 0 || fg.d_color.squaredNorm() != 0 ||
        fg.d_sem_logits.size() != 0;
    if (!has_field_grad) continue;

    const RadianceField* field =
        sb.object_id >= 0 ? scene.object_field(sb.object_id)
                          : scene.background.get();
    std::vector<Vec3> d_pos;
    Vec3 d_dirf = Vec3::Zero();
    field->backward(scene.tape, sb.rec, fg, grad, &d_pos, &d_dirf);
    chain_sample(scene, r, sb.t_mid, sb.object_id, sb.rec, d_pos, d_dirf,
                 grad, &chain);
  }

  // Proposal stages: gradients reach the proposal networks (and the ray pose
  // through their sample positions); object-routed stage queries are fully
  // detached.
  for (int k = 0; k < 2; ++k) {
    const std::vector<double>& dw = d.d_stage_weights[k];
    if (dw.empty()) continue;
    const StageRecord& st = r.stages[k];
    std::vector<double> ds;
    weights_backward(st.samples, st.sigma, dw, 0.0, &ds);
    for (int i = 0; i < st.samples.count(); ++i) {
      if (ds[i] == 0) continue;
      if (st.samples.object[i] >= 0) continue;  // detached object query
      FieldOutputGrad fg;
      fg.d_sigma = ds[i];
      std::vector<Vec3> d_pos;
      Vec3 d_dirf = Vec3::Zero();
      scene.proposal[k]->backward(scene.tape, st.recs[i], fg, grad, &d_pos,
                                  &d_dirf);
      chain_sample(scene, r, st.samples.mid(i), -1, st.recs[i], d_pos, d_dirf,
                   grad, &chain);
    }
  }

  if (r.cam_index >= 0 &&
      (chain.d_origin.squaredNorm() != 0 || chain.d_dir.squaredNorm() != 0)) {
    const CameraModel& cam = scene.cameras[r.cam_index];
    size_t to = scene.camera_trans_offset(r.cam_index);
    for (int aI = 0; aI < 3; ++aI) grad[to + aI] += chain.d_origin[aI];
    // dir = exp(dr) * base_dir; d dir/d dr = -exp(dr) [base_dir]x Jr(dr).
    Mat3 E = axis_angle_to_matrix(cam.refine_rot);
    Mat3 hat;
    const Vec3& v = r.base_dir;
    hat << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
    Mat3 M = -E * hat * so3_right_jacobian(cam.refine_rot);
    Vec3 g_rot = M.transpose() * chain.d_dir;
    size_t ro = scene.camera_rot_offset(r.cam_index);
    for (int aI = 0; aI < 3; ++aI) grad[ro + aI] += g_rot[aI];
  }
}

FrameRender render_image(const Scene& scene, int cam_index, double time,
                         uint64_t seed, int threads) {
  const CameraModel& cam = scene.cameras[cam_index];
  int w = cam.width, h = cam.height;
  int classes = scene.cfg.background.sem_classes;
  FrameRender out;
  out.color = ImageF(w, h, 3);
  out.disparity = ImageF(w, h, 1);
  out.opacity = ImageF(w, h, 1);
  if (classes) out.semantics = ImageF(w, h, classes);
  for (const TrackedBox& box : scene.boxes) {
    if (box.keyframes.empty()) continue;
    if (time < box.keyframes.front().time - 1e-9 ||
        time > box.keyframes.back().time + 1e-9)
      continue;
    out.masks[box.id] = ImageF(w, h, 1, 0.0f);
  }

  parallel_for(h, threads, [&](int64_t y0, int64_t y1, int) {
    for (int64_t y = y0; y < y1; ++y) {
      for (int x = 0; x < w; ++x) {
        uint64_t px_seed =
            Rng(seed, uint64_t(cam_index) << 40 | uint64_t(y) * w + x)
                .next_u64();
        RenderOutput ro =
            render_pixel(scene, cam_index, double(x), double(y), time, px_seed);
        for (int c = 0; c < 3; ++c)
          out.color.at(x, int(y), c) = float(ro.color[c]);
        out.disparity.at(x, int(y)) = float(ro.disparity);
        out.opacity.at(x, int(y)) = float(ro.opacity);
        for (int c = 0; c < classes && c < ro.semantics.size(); ++c)
          out.semantics.at(x, int(y), c) = float(ro.semantics[c]);
        for (auto& [id, img] : out.masks) {
          auto it = ro.object_mask.find(id);
          if (it != ro.object_mask.end())
            img.at(x, int(y)) = float(it->second);
        }
      }
    }
  });
  return out;
}

}  // namespace nerfsim
