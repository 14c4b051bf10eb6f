#include "doctest.h"

#include <cmath>
#include <cstdio>

#include "nerfsim/training.h"
#include "nerfsim/rng.h"

using namespace nerfsim;

namespace {

FieldConfig small_field() {
  FieldConfig f;
  f.levels = 4;
  f.base_resolution = 4;
  f.growth = 2.0;
  f.features = 2;
  f.hidden = 16;
  f.hidden_layers = 2;
  f.color_hidden = 8;
  f.sem_classes = 3;
  f.sem_hidden = 8;
  return f;
}

SceneConfig small_scene_cfg() {
  SceneConfig sc;
  sc.background = small_field();
  sc.object = small_field();
  sc.proposal = small_field();
  sc.proposal.sem_classes = 0;
  sc.proposal.proposal_hidden = 8;
  sc.proposal_samples = 32;
  sc.final_samples = 16;
  sc.t_near = 0.5;
  sc.t_far = 30.0;
  sc.scene_radius = 8.0;
  return sc;
}

CameraModel small_cam() {
  CameraModel cam;
  cam.fx = cam.fy = 40;
  cam.cx = 16;
  cam.cy = 12;
  cam.width = 32;
  cam.height = 24;
  return cam;
}

TrackedBox small_box() {
  TrackedBox box;
  box.id = 1;
  box.dim = Vec3(1.2, 1.0, 1.4);
  box.keyframes = {{0.0, Mat3::Identity(), Vec3(0, 0, 3)},
                   {1.0, Mat3::Identity(), Vec3(0, 0, 3)}};
  return box;
}

void randomize_scene(Scene& scene, uint64_t seed) {
  Rng vr(seed);
  for (const auto& g : scene.tape.groups) {
    double s = 0.4;
    if (g.category == ParamCategory::Grid) s = 0.3;
    if (g.category == ParamCategory::Pose || g.category == ParamCategory::Track)
      s = 0.015;
    if (g.category == ParamCategory::Omega) s = 0.5;
    for (size_t i = 0; i < g.size; ++i)
      scene.tape.values[g.offset + i] = s * vr.normal();
  }
  scene.sync_from_tape();
}

RaySamples uniform_s(int n) {
  RaySamples s;
  s.edges.resize(n + 1);
  s.s_edges.resize(n + 1);
  for (int i = 0; i <= n; ++i) {
    double u = double(i) / n;
    s.s_edges[i] = u;
    s.edges[i] = 1.0 + u;  // meters are irrelevant to the s-space penalties
  }
  s.object.assign(n, -1);
  return s;
}

}  // namespace

TEST_CASE("supervision terms vanish on a perfect prediction") {
  RayTarget t;
  t.color = Vec3(0.3, 0.5, 0.7);
  t.disparity = 0.25;
  t.conf = VecX::Ones(5);
  t.has_lidar = true;
  t.lidar_disparity = 0.25;
  t.sem_class = 1;

  RenderOutput out;
  out.color = t.color;
  out.disparity = t.disparity;
  // Class distribution from logits with margin 20: essentially one-hot.
  VecX logits(3);
  logits << 0.0, 20.0, 0.0;
  double z = std::exp(0.0) * 2 + std::exp(20.0);
  out.semantics = VecX(3);
  for (int i = 0; i < 3; ++i) out.semantics[i] = std::exp(logits[i]) / z;

  VecX mix = VecX::Ones(5) / 5.0;
  LossWeights w;
  LossBreakdown b = supervision_loss(t, out, mix, w);
  CHECK(b.rgb == 0.0);
  CHECK(b.depth == 0.0);
  CHECK(b.lidar == 0.0);
  CHECK(b.semantic < 1e-3);
}

TEST_CASE("zero confidence masks the depth term entirely") {
  RayTarget t;
  t.disparity = 0.9;
  t.conf = VecX::Zero(5);
  RenderOutput out;
  out.disparity = 0.1;  // large error
  LossBreakdown b = supervision_loss(t, out, VecX::Ones(5) / 5.0, LossWeights{});
  CHECK(b.depth == 0.0);
}

TEST_CASE("supervision matches a hand-computed scalar case") {
  RayTarget t;
  t.color = Vec3(0.2, 0.4, 0.9);
  t.disparity = 0.3;
  t.conf = VecX(5);
  t.conf << 0.9, 0.1, 0.5, 0.7, 0.2;
  t.has_lidar = true;
  t.lidar_disparity = 0.42;
  t.sem_class = 2;

  RenderOutput out;
  out.color = Vec3(0.35, 0.1, 0.95);
  out.disparity = 0.18;
  out.semantics = VecX(3);
  out.semantics << 0.2, 0.3, 0.45;

  VecX omega(5);
  omega << 0.3, -0.2, 0.0, 0.5, -0.4;
  VecX mix(5);
  double zs = 0;
  for (int i = 0; i < 5; ++i) zs += std::exp(omega[i]);
  for (int i = 0; i < 5; ++i) mix[i] = std::exp(omega[i]) / zs;

  LossBreakdown b = supervision_loss(t, out, mix, LossWeights{});

  double rgb = (std::abs(0.35 - 0.2) + std::abs(0.1 - 0.4) +
                std::abs(0.95 - 0.9)) / 3.0;
  double chat = 0;
  for (int i = 0; i < 5; ++i) chat += mix[i] * t.conf[i];
  double depth = chat * std::abs(0.18 - 0.3);
  double lidar = std::abs(0.18 - 0.42);
  double sem = -std::log(0.45);
  CHECK(b.rgb == doctest::Approx(rgb).epsilon(1e-6));
  CHECK(b.depth == doctest::Approx(depth).epsilon(1e-6));
  CHECK(b.lidar == doctest::Approx(lidar).epsilon(1e-6));
  CHECK(b.semantic == doctest::Approx(sem).epsilon(1e-6));
}

TEST_CASE("distortion penalty: single interval closed form and gradient") {
  RaySamples s = uniform_s(8);
  std::vector<double> w(8, 0.0);
  w[3] = 0.6;
  double l = distortion_loss(s, w);
  CHECK(l == doctest::Approx((1.0 / 3.0) * 0.36 * 0.125).epsilon(1e-12));

  // Finite-difference check on a dense random histogram.
  Rng rng(4);
  for (auto& v : w) v = rng.uniform(0.0, 0.2);
  std::vector<double> dw(8, 0.0);
  distortion_loss(s, w, &dw);
  for (int i = 0; i < 8; ++i) {
    double eps = 1e-6;
    double saved = w[i];
    w[i] = saved + eps;
    double lp = distortion_loss(s, w);
    w[i] = saved - eps;
    double lm = distortion_loss(s, w);
    w[i] = saved;
    CHECK(dw[i] == doctest::Approx((lp - lm) / (2 * eps)).epsilon(1e-5));
  }
}

TEST_CASE("bound penalty is zero when the coarse histogram bins the fine one") {
  RaySamples coarse = uniform_s(4);
  RaySamples fine = uniform_s(8);
  Rng rng(9);
  std::vector<double> wf(8);
  for (auto& v : wf) v = rng.uniform(0.0, 0.3);
  std::vector<double> wc(4);
  for (int i = 0; i < 4; ++i) wc[i] = wf[2 * i] + wf[2 * i + 1];
  CHECK(bound_penalty(coarse, wc, fine, wf) == doctest::Approx(0.0));

  // Shrinking one coarse bin turns the penalty on, with a correct gradient.
  wc[2] *= 0.4;
  std::vector<double> dc(4, 0.0);
  double l = bound_penalty(coarse, wc, fine, wf, &dc);
  CHECK(l > 0.0);
  for (int i = 0; i < 4; ++i) {
    double eps = 1e-7;
    double saved = wc[i];
    wc[i] = saved + eps;
    double lp = bound_penalty(coarse, wc, fine, wf);
    wc[i] = saved - eps;
    double lm = bound_penalty(coarse, wc, fine, wf);
    wc[i] = saved;
    double fd = (lp - lm) / (2 * eps);
    if (std::abs(fd) < 1e-9 && std::abs(dc[i]) < 1e-9) continue;
    CHECK(dc[i] == doctest::Approx(fd).epsilon(1e-4));
  }

  // Misaligned edges: binning splits fine weights by overlap fraction.
  RaySamples off = uniform_s(4);
  for (auto& e : off.s_edges) e = std::min(1.0, e + 0.07);
  off.s_edges[0] = 0.0;
  std::vector<double> wc2(4, 10.0);  // generous bound, no penalty
  CHECK(bound_penalty(off, wc2, fine, wf) == 0.0);
}

TEST_CASE("smoothness vanishes on constant disparity") {
  SceneConfig cfg = small_scene_cfg();
  Scene scene(cfg, 3);
  scene.add_camera(small_cam());
  // Keep the scene empty: every ray is pure sky, disparity 1/sky_depth.
  for (const auto& g : scene.tape.groups)
    if (g.name.find("sigma_b") != std::string::npos)
      std::fill(scene.tape.values.begin() + g.offset,
                scene.tape.values.begin() + g.offset + g.size, -60.0);
  scene.sync_from_tape();

  TrainBatch batch;
  for (int k = 0; k < 4; ++k) {
    RayTarget t;
    t.cam_index = 0;
    t.px = 10 + (k % 2);
    t.py = 8 + (k / 2);
    t.time = 0.5;
    t.color = Vec3(0.5, 0.5, 0.5);
    t.disparity = 1.0 / cfg.sky_depth;
    batch.rays.push_back(t);
  }
  batch.patches.push_back({0, 1, 2, 3});
  LossBreakdown b = compute_loss(scene, batch, LossWeights{}, 5, 1);
  CHECK(b.smoothness < 1e-12);
  CHECK(b.depth < 1e-9);
}

TEST_CASE("loss gradients match finite differences per parameter group") {
  Scene scene(small_scene_cfg(), 61);
  scene.add_camera(small_cam());
  scene.add_box(small_box());
  scene.register_track_time(0, 0.5);
  randomize_scene(scene, 29);

  Rng tr(5);
  TrainBatch batch;
  // A 2x2 patch over the object, plus a LiDAR ray and a plain ray.
  double bx = 15.4, by = 11.3;
  for (int k = 0; k < 4; ++k) {
    RayTarget t;
    t.cam_index = 0;
    t.px = bx + (k % 2);
    t.py = by + (k / 2);
    t.time = 0.5;
    t.color = Vec3(tr.uniform(), tr.uniform(), tr.uniform());
    t.disparity = tr.uniform(0.1, 0.6);
    t.conf = VecX(5);
    for (int j = 0; j < 5; ++j) t.conf[j] = tr.uniform();
    t.sem_class = int(tr.uniform_int(3));
    batch.rays.push_back(t);
  }
  batch.patches.push_back({0, 1, 2, 3});
  {
    RayTarget t;
    t.cam_index = 0;
    t.px = 4.7;
    t.py = 18.2;
    t.time = 0.5;
    t.color = Vec3(0.8, 0.2, 0.4);
    t.disparity = 0.3;
    t.conf = VecX::Ones(5) * 0.7;
    t.has_lidar = true;
    t.lidar_disparity = 0.45;
    batch.rays.push_back(t);
    t.px = 26.1;
    t.py = 5.9;
    t.has_lidar = false;
    t.sem_class = 2;
    batch.rays.push_back(t);
  }

  LossWeights w;
  const uint64_t seed = 17;
  std::vector<double> grad(scene.tape.size(), 0.0);
  std::vector<RaySnapshot> frozen;
  LossBreakdown b =
      compute_loss(scene, batch, w, seed, 1, grad.data(), nullptr, &frozen);
  CHECK(b.rgb >= 0.0);
  CHECK(b.depth >= 0.0);
  CHECK(b.lidar >= 0.0);
  CHECK(b.semantic >= 0.0);
  CHECK(b.distortion >= 0.0);
  CHECK(b.proposal_bound >= 0.0);
  CHECK(b.smoothness >= 0.0);

  auto loss_at = [&]() {
    scene.sync_from_tape();  // pose/track offsets live on the tape
    return compute_loss(scene, batch, w, seed, 1, nullptr, &frozen).total(w);
  };

  const double eps = 1e-5;
  Rng pick(13);
  int mismatches = 0;
  for (const auto& g : scene.tape.groups) {
    bool exhaustive = g.category == ParamCategory::Pose ||
                      g.category == ParamCategory::Track ||
                      g.category == ParamCategory::Omega;
    int per_group = exhaustive ? int(g.size) : 8;
    for (int k = 0; k < per_group; ++k) {
      size_t i =
          g.offset + (exhaustive ? size_t(k) : pick.uniform_int(g.size));
      double saved = scene.tape.values[i];
      scene.tape.values[i] = saved + eps;
      double lp = loss_at();
      scene.tape.values[i] = saved - eps;
      double lm = loss_at();
      scene.tape.values[i] = saved;
      double fd = (lp - lm) / (2 * eps);
      if (std::abs(fd) < 1e-8 && std::abs(grad[i]) < 1e-8) continue;
      double rel = std::abs(fd - grad[i]) / std::max(1e-6, std::abs(fd));
      if (rel >= 1e-3) {
        ++mismatches;
        CAPTURE(g.name);
        CAPTURE(i - g.offset);
        CHECK(rel < 1e-3);
      }
    }
  }
  CHECK(mismatches == 0);
}

TEST_CASE("semantic supervision only reaches the semantic heads") {
  Scene scene(small_scene_cfg(), 71);
  scene.add_camera(small_cam());
  randomize_scene(scene, 33);

  TrainBatch batch;
  RayTarget t;
  t.cam_index = 0;
  t.px = 12.3;
  t.py = 9.8;
  t.time = 0.0;
  t.color = Vec3(0.5, 0.6, 0.7);
  t.disparity = 0.2;
  batch.rays.push_back(t);

  std::vector<double> g0(scene.tape.size(), 0.0);
  compute_loss(scene, batch, LossWeights{}, 3, 1, g0.data());
  batch.rays[0].sem_class = 1;
  std::vector<double> g1(scene.tape.size(), 0.0);
  compute_loss(scene, batch, LossWeights{}, 3, 1, g1.data());

  double sem_diff = 0, other_diff = 0;
  for (const auto& g : scene.tape.groups) {
    double n = 0;
    for (size_t i = 0; i < g.size; ++i)
      n += std::abs(g1[g.offset + i] - g0[g.offset + i]);
    if (g.name.find("/sem") != std::string::npos)
      sem_diff += n;
    else
      other_diff += n;
  }
  CHECK(sem_diff > 0.0);
  CHECK(other_diff == 0.0);
}

namespace {

TrainBatch overfit_batch(bool shared_color) {
  Rng tr(11);
  TrainBatch batch;
  Vec3 shared(0.6, 0.35, 0.5);
  for (int k = 0; k < 8; ++k) {
    RayTarget t;
    t.cam_index = 0;
    t.px = 3.0 + 3.5 * k;
    t.py = 5.0 + 1.7 * k;
    t.time = 0.0;
    t.color = shared_color ? shared
                           : Vec3(tr.uniform(0.2, 0.8), tr.uniform(0.2, 0.8),
                                  tr.uniform(0.2, 0.8));
    t.conf = VecX::Zero(5);  // ignore depth; these batches only fit color
    batch.rays.push_back(t);
  }
  return batch;
}

StepReport run_overfit(const TrainBatch& batch, int steps, bool regularized) {
  SceneConfig cfg = small_scene_cfg();
  cfg.proposal_samples = 16;
  cfg.final_samples = 8;
  Scene scene(cfg, 7);
  scene.add_camera(small_cam());
  OptimConfig oc;
  oc.decay_steps = steps;  // lr anneals to ~0 by the last step
  oc.lr_mlp = 1e-2;
  oc.lr_grid = 3e-2;
  Adam opt(scene.tape, oc);
  LossWeights w;
  if (!regularized) w.distortion = w.proposal_bound = w.smoothness = 0.0;
  StepReport rep;
  for (int step = 0; step < steps; ++step) {
    rep = train_step(scene, batch, w, opt, 77, 1);
    REQUIRE(rep.applied);
  }
  return rep;
}

}  // namespace

TEST_CASE("training overfits a tiny ray batch in 200 steps") {
  StepReport rep = run_overfit(overfit_batch(true), 200, false);
  CHECK(rep.loss.rgb < 1e-3);
}

TEST_CASE("training fits eight distinct ray colors under regularization") {
  StepReport rep = run_overfit(overfit_batch(false), 1000, true);
  CHECK(rep.loss.rgb < 1e-3);
}

TEST_CASE("zero learning rate leaves parameters bit-exact") {
  Scene scene(small_scene_cfg(), 9);
  scene.add_camera(small_cam());
  randomize_scene(scene, 2);
  std::vector<double> before = scene.tape.values;

  TrainBatch batch;
  RayTarget t;
  t.cam_index = 0;
  t.px = 8.5;
  t.py = 7.5;
  t.color = Vec3(0.1, 0.9, 0.4);
  t.disparity = 0.3;
  batch.rays.push_back(t);

  OptimConfig oc;
  oc.lr_grid = oc.lr_mlp = oc.lr_pose = oc.lr_track = 0.0;
  oc.lr_omega = oc.lr_env = 0.0;
  Adam opt(scene.tape, oc);
  StepReport rep = train_step(scene, batch, LossWeights{}, opt, 1, 1);
  CHECK(rep.applied);
  CHECK(scene.tape.values == before);
}

TEST_CASE("same seed yields identical loss trajectories") {
  auto run = [](std::vector<double>* losses) {
    Scene scene(small_scene_cfg(), 13);
    scene.add_camera(small_cam());
    scene.add_box(small_box());
    scene.register_track_time(0, 0.0);
    randomize_scene(scene, 4);
    TrainBatch batch;
    Rng tr(6);
    for (int k = 0; k < 6; ++k) {
      RayTarget t;
      t.cam_index = 0;
      t.px = tr.uniform(0.0, 31.0);
      t.py = tr.uniform(0.0, 23.0);
      t.color = Vec3(tr.uniform(), tr.uniform(), tr.uniform());
      t.disparity = tr.uniform(0.05, 0.5);
      t.conf = VecX::Ones(5) * 0.8;
      batch.rays.push_back(t);
    }
    Adam opt(scene.tape, OptimConfig{});
    for (int step = 0; step < 5; ++step) {
      StepReport rep = train_step(scene, batch, LossWeights{}, opt,
                                  100 + step, 2);
      losses->push_back(rep.total);
    }
    return scene.tape.values;
  };
  std::vector<double> la, lb;
  auto va = run(&la);
  auto vb = run(&lb);
  CHECK(la == lb);
  CHECK(va == vb);
}

TEST_CASE("non-finite loss aborts the step") {
  Scene scene(small_scene_cfg(), 21);
  scene.add_camera(small_cam());
  randomize_scene(scene, 8);
  std::vector<double> before = scene.tape.values;

  TrainBatch batch;
  RayTarget t;
  t.cam_index = 0;
  t.px = 8.5;
  t.py = 7.5;
  t.color = Vec3(std::nan(""), 0.5, 0.5);
  batch.rays.push_back(t);

  Adam opt(scene.tape, OptimConfig{});
  StepReport rep = train_step(scene, batch, LossWeights{}, opt, 1, 1);
  CHECK(!rep.applied);
  CHECK(scene.tape.values == before);
}

TEST_CASE("checkpoint round trip restores the tape bit-exactly") {
  Scene scene(small_scene_cfg(), 15);
  scene.add_camera(small_cam());
  randomize_scene(scene, 44);
  std::vector<double> saved = scene.tape.values;

  std::string path = "/tmp/nerfsim_ckpt_test.bin";
  save_checkpoint(path, scene.tape);
  for (auto& v : scene.tape.values) v += 1.0;
  load_checkpoint(path, scene.tape);
  CHECK(scene.tape.values == saved);

  // A tape with a different layout must refuse the file.
  Scene other(small_scene_cfg(), 15);
  other.add_camera(small_cam());
  other.add_camera(small_cam());
  CHECK_THROWS_AS(load_checkpoint(path, other.tape), Error);
  std::remove(path.c_str());
}
