#include "nerfsim/harness.h"

#include <nlohmann/json.hpp>

#include <cmath>
#include <filesystem>
#include <limits>
#include <thread>

#include "nerfsim/io.h"

namespace nerfsim {

namespace fs = std::filesystem;
using nlohmann::json;

void SynthConfig::validate() const {
  if (width <= 0 || height <= 0) throw Error("synth: image size must be positive");
  if (frames < 1) throw Error("synth: need at least one frame");
  if (rig_cameras < 1 || rig_cameras > 3) throw Error("synth: rig supports 1 to 3 cameras");
  if (dt <= 0) throw Error("synth: frame interval must be positive");
  if (lidar_step < 1) throw Error("synth: lidar step must be >= 1");
  if (lidar_outlier_rate < 0 || lidar_outlier_rate > 1)
    throw Error("synth: outlier rate must lie in [0,1]");
}

SyntheticScene default_toy_scene(const SynthConfig& cfg) {
  SyntheticScene s;
  s.classes = {"sky", "ground", "box", "sphere", "car"};
  s.statics.push_back({Vec3(4.5, 1.4, 0.5), Vec3(1.2, 1.0, 1.0), 0.3,
                       Vec3(0.75, 0.25, 0.20), 2});
  s.statics.push_back({Vec3(6.5, -0.9, 0.4), Vec3(0.8, 0.8, 0.8), -0.2,
                       Vec3(0.20, 0.35, 0.75), 2});
  s.spheres.push_back({Vec3(5.5, -1.9, 0.7), 0.7, Vec3(0.85, 0.70, 0.20), 3});
  if (cfg.moving_box) {
    TrackedBox car;
    car.id = 1;
    car.dim = Vec3(1.0, 0.8, 0.8);
    double t_end = (cfg.frames - 1) * cfg.dt;
    car.keyframes.push_back({0.0, Mat3::Identity(), Vec3(4.0, -2.2, 0.45)});
    car.keyframes.push_back(
        {std::max(t_end, cfg.dt), Mat3::Identity(), Vec3(4.0, 2.2, 0.45)});
    s.moving.push_back(car);
    s.moving_albedo.push_back(Vec3(0.80, 0.80, 0.85));
    s.moving_class.push_back(4);
  }
  return s;
}

namespace {

Mat3 rot_z(double a) {
  Mat3 r = Mat3::Identity();
  r(0, 0) = std::cos(a); r(0, 1) = -std::sin(a);
  r(1, 0) = std::sin(a); r(1, 1) = std::cos(a);
  return r;
}

// Camera axes for a rig camera heading along world +x rotated by yaw about
// world z (camera z forward, x right, y down; world z up).
RigidTransform rig_pose(double ego_x, double lateral, double yaw) {
  Mat3 front;
  front << 0, 0, 1, -1, 0, 0, 0, -1, 0;  // columns: right, down, forward
  RigidTransform p;
  p.R = rot_z(yaw) * front;
  p.t = Vec3(ego_x, lateral, 1.2);
  return p;
}

struct TraceHit {
  double t = std::numeric_limits<double>::infinity();
  int sem_class = 0;  // sky
  int moving = -1;    // index into scene.moving
  Vec3 albedo = Vec3::Zero();
  Vec3 normal = Vec3::UnitZ();
  bool sky = true;
};

// slab test in an axis-aligned local frame; reports the entry axis
bool slab_hit(const Vec3& o, const Vec3& d, const Vec3& half, double* t_enter,
              int* axis) {
  double lo = 1e-6, hi = std::numeric_limits<double>::infinity();
  int ax = 0;
  for (int k = 0; k < 3; ++k) {
    if (std::abs(d[k]) < 1e-12) {
      if (std::abs(o[k]) > half[k]) return false;
      continue;
    }
    double t0 = (-half[k] - o[k]) / d[k];
    double t1 = (half[k] - o[k]) / d[k];
    if (t0 > t1) std::swap(t0, t1);
    if (t0 > lo) { lo = t0; ax = k; }
    hi = std::min(hi, t1);
    if (lo > hi) return false;
  }
  if (!(lo > 1e-6)) return false;  // origin inside or behind
  *t_enter = lo;
  *axis = ax;
  return true;
}

TraceHit trace_ray(const SyntheticScene& s, const Vec3& origin, const Vec3& dir,
                   double time) {
  TraceHit hit;
  // ground plane
  if (std::abs(dir[2]) > 1e-12) {
    double t = (s.ground_z - origin[2]) / dir[2];
    if (t > 1e-6 && t < hit.t) {
      Vec3 p = origin + t * dir;
      int cx = int(std::floor(p[0] / s.checker));
      int cy = int(std::floor(p[1] / s.checker));
      hit = {t, s.ground_class, -1,
             ((cx + cy) & 1) ? s.ground_albedo_b : s.ground_albedo_a,
             Vec3::UnitZ(), false};
    }
  }
  for (const SynthBox& b : s.statics) {
    Mat3 r = rot_z(b.yaw);
    Vec3 o = r.transpose() * (origin - b.center);
    Vec3 d = r.transpose() * dir;
    double t;
    int axis;
    if (slab_hit(o, d, b.dim * 0.5, &t, &axis) && t < hit.t) {
      Vec3 n = Vec3::Zero();
      n[axis] = (o[axis] + t * d[axis]) > 0 ? 1.0 : -1.0;
      hit = {t, b.sem_class, -1, b.albedo, r * n, false};
    }
  }
  for (const SynthSphere& sp : s.spheres) {
    Vec3 oc = origin - sp.center;
    double bq = oc.dot(dir);
    double cq = oc.squaredNorm() - sp.radius * sp.radius;
    double disc = bq * bq - cq;
    if (disc < 0) continue;
    double t = -bq - std::sqrt(disc);
    if (t > 1e-6 && t < hit.t) {
      Vec3 p = origin + t * dir;
      hit = {t, sp.sem_class, -1, sp.albedo, (p - sp.center).normalized(),
             false};
    }
  }
  for (size_t m = 0; m < s.moving.size(); ++m) {
    const TrackedBox& box = s.moving[m];
    if (time < box.keyframes.front().time - 1e-9 ||
        time > box.keyframes.back().time + 1e-9)
      continue;
    RigidTransform pose = interpolate_box_pose(box, time);
    Vec3 o = pose.R.transpose() * (origin - pose.t);
    Vec3 d = pose.R.transpose() * dir;
    double t;
    int axis;
    if (slab_hit(o, d, box.dim * 0.5, &t, &axis) && t < hit.t) {
      Vec3 n = Vec3::Zero();
      n[axis] = (o[axis] + t * d[axis]) > 0 ? 1.0 : -1.0;
      hit = {t, s.moving_class[m], int(m), s.moving_albedo[m], pose.R * n,
             false};
    }
  }
  return hit;
}

Vec3 shade(const SyntheticScene& s, const TraceHit& hit) {
  if (hit.sky) return s.sky_color;
  double diffuse = std::max(0.0, hit.normal.dot(-s.light_dir));
  Vec3 c = hit.albedo * (0.45 + 0.55 * diffuse);
  return c.cwiseMin(1.0).cwiseMax(0.0);
}

json transform_json(const RigidTransform& p) {
  json r = json::array();
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) r.push_back(p.R(i, j));
  return {{"R", r}, {"t", {p.t[0], p.t[1], p.t[2]}}};
}

RigidTransform transform_from_json(const json& j) {
  RigidTransform p;
  for (int i = 0; i < 3; ++i)
    for (int j2 = 0; j2 < 3; ++j2) p.R(i, j2) = j["R"][3 * i + j2];
  for (int i = 0; i < 3; ++i) p.t[i] = j["t"][i];
  return p;
}

}  // namespace

SceneManifest generate_scene(const SynthConfig& cfg, const std::string& dir,
                             uint64_t seed, int threads) {
  cfg.validate();
  SyntheticScene scene = default_toy_scene(cfg);

  for (const char* sub : {"rgb", "depth", "sem", "flow", "lidar"})
    fs::create_directories(fs::path(dir) / sub);

  SceneManifest m;
  m.width = cfg.width;
  m.height = cfg.height;
  m.frames = cfg.frames;
  m.classes = scene.classes;
  for (int f = 0; f < cfg.frames; ++f) m.timestamps.push_back(f * cfg.dt);
  m.boxes = scene.moving;
  m.box_classes = scene.moving_class;

  double fov_focal = 0.87 * cfg.width;  // ~60 degree horizontal fov
  const double cam_yaw[3] = {0.0, 0.7, -0.7};
  const double cam_lat[3] = {0.0, 0.25, -0.25};
  for (int c = 0; c < cfg.rig_cameras; ++c) {
    ManifestCamera mc;
    mc.fx = mc.fy = fov_focal;
    mc.cx = (cfg.width - 1) / 2.0;
    mc.cy = (cfg.height - 1) / 2.0;
    mc.width = cfg.width;
    mc.height = cfg.height;
    for (int f = 0; f < cfg.frames; ++f)
      mc.poses.push_back(
          rig_pose(cfg.speed * m.timestamps[f], cam_lat[c], cam_yaw[c]));
    m.cameras.push_back(mc);
  }
  m.files.resize(cfg.rig_cameras, std::vector<FrameFiles>(cfg.frames));
  for (int c = 0; c < cfg.rig_cameras; ++c)
    for (int f = 0; f < cfg.frames; ++f) {
      FrameFiles& ff = m.files[c][f];
      std::string tag = "c" + std::to_string(c) + "_f" + std::to_string(f);
      ff.rgb = "rgb/" + tag + ".png";
      ff.depth = "depth/" + tag + ".f32";
      ff.semantic = "sem/" + tag + ".png";
      if (f + 1 < cfg.frames) ff.flow = "flow/" + tag + ".f32";
    }
  for (int f = 0; f < cfg.frames; ++f) {
    m.lidar_files.push_back("lidar/f" + std::to_string(f) + ".f32");
    m.lidar_poses.push_back(m.cameras[0].poses[f]);
  }

  auto render_frame_files = [&](int f) {
    double time = m.timestamps[f];
    for (int c = 0; c < cfg.rig_cameras; ++c) {
      const ManifestCamera& mc = m.cameras[c];
      CameraModel cam = manifest_camera(m, c, f);
      CameraModel cam_next =
          f + 1 < cfg.frames ? manifest_camera(m, c, f + 1) : cam;
      Vec3 fwd = mc.poses[f].R.col(2);
      ImageD rgb(cfg.width, cfg.height, 3);
      ImageD depth(cfg.width, cfg.height, 1);
      ImageU8 sem(cfg.width, cfg.height, 1);
      ImageD flow(cfg.width, cfg.height, 2, 0.0);
      for (int y = 0; y < cfg.height; ++y)
        for (int x = 0; x < cfg.width; ++x) {
          Vec3 pix((x - mc.cx) / mc.fx, (y - mc.cy) / mc.fy, 1.0);
          Vec3 d = (mc.poses[f].R * pix).normalized();
          TraceHit hit = trace_ray(scene, mc.poses[f].t, d, time);
          double z = hit.sky ? kSkyDepth : hit.t * d.dot(fwd);
          depth.at(x, y) = z;
          sem.at(x, y) = uint8_t(hit.sem_class);
          Vec3 col = shade(scene, hit);
          for (int k = 0; k < 3; ++k) rgb.at(x, y, k) = col[k];
          if (f + 1 < cfg.frames) {
            Vec3 p = mc.poses[f].t + (hit.sky ? kSkyDepth : hit.t) * d;
            if (hit.moving >= 0) {
              RigidTransform now =
                  interpolate_box_pose(scene.moving[hit.moving], time);
              RigidTransform next = interpolate_box_pose(
                  scene.moving[hit.moving], m.timestamps[f + 1]);
              p = next.apply(now.inverse().apply(p));
            }
            if (auto px = project(p, cam_next)) {
              flow.at(x, y, 0) = px->x - x;
              flow.at(x, y, 1) = px->y - y;
            }
          }
        }
      const FrameFiles& ff = m.files[c][f];
      write_png(dir + "/" + ff.rgb, to_u8(rgb));
      write_raw_f32(dir + "/" + ff.depth, to_f32(depth));
      write_png(dir + "/" + ff.semantic, sem);
      if (f + 1 < cfg.frames) write_raw_f32(dir + "/" + ff.flow, to_f32(flow));

      if (c == 0) {
        ImageF depth_now(cfg.width, cfg.height, 1);
        for (size_t i = 0; i < depth.size(); ++i)
          depth_now.raw()[i] = float(depth.raw()[i]);
        Rng rng(seed, 0x71DA0000ULL + uint64_t(f));
        std::vector<std::array<float, 4>> samples;
        for (int y = 0; y < cfg.height; y += cfg.lidar_step)
          for (int x = 0; x < cfg.width; x += cfg.lidar_step) {
            double z = depth.at(x, y);
            if (z >= 0.5 * kSkyDepth) continue;  // no sky returns
            bool outlier = rng.uniform() < cfg.lidar_outlier_rate;
            if (outlier) z *= rng.uniform(0.3, 3.0);
            samples.push_back({float(x), float(y), float(z), outlier ? 1.f : 0.f});
          }
        ImageF blob(int(samples.size()), 1, 4);
        for (size_t i = 0; i < samples.size(); ++i)
          for (int k = 0; k < 4; ++k) blob.raw()[4 * i + k] = samples[i][k];
        write_raw_f32(dir + "/" + m.lidar_files[f], blob);
      }
    }
  };

  threads = std::max(1, threads);
  if (threads == 1) {
    for (int f = 0; f < cfg.frames; ++f) render_frame_files(f);
  } else {
    std::vector<std::thread> pool;
    std::atomic<int> next{0};
    for (int w = 0; w < threads; ++w)
      pool.emplace_back([&] {
        for (int f = next++; f < cfg.frames; f = next++) render_frame_files(f);
      });
    for (auto& th : pool) th.join();
  }

  save_manifest(dir + "/manifest.json", m);
  return m;
}

std::string manifest_json(const SceneManifest& m) {
  json doc;
  doc["width"] = m.width;
  doc["height"] = m.height;
  doc["frames"] = m.frames;
  doc["timestamps"] = m.timestamps;
  doc["classes"] = m.classes;
  doc["units"] = "meters";
  for (const ManifestCamera& c : m.cameras) {
    json jc = {{"fx", c.fx}, {"fy", c.fy}, {"cx", c.cx}, {"cy", c.cy},
               {"width", c.width}, {"height", c.height}};
    for (const RigidTransform& p : c.poses) jc["poses"].push_back(transform_json(p));
    doc["cameras"].push_back(jc);
  }
  doc["boxes"] = json::array();
  for (size_t i = 0; i < m.boxes.size(); ++i) {
    const TrackedBox& b = m.boxes[i];
    json jb = {{"id", b.id},
               {"dim", {b.dim[0], b.dim[1], b.dim[2]}},
               {"class", m.box_classes[i]}};
    for (const BoxKeyframe& k : b.keyframes) {
      json jk = transform_json({k.rot, k.trans});
      jk["time"] = k.time;
      jb["keyframes"].push_back(jk);
    }
    doc["boxes"].push_back(jb);
  }
  doc["lidar"] = json::array();
  for (size_t f = 0; f < m.lidar_files.size(); ++f)
    doc["lidar"].push_back(
        {{"file", m.lidar_files[f]}, {"pose", transform_json(m.lidar_poses[f])}});
  doc["files"] = json::array();
  for (const auto& cam_files : m.files) {
    json jc = json::array();
    for (const FrameFiles& ff : cam_files)
      jc.push_back({{"rgb", ff.rgb},
                    {"depth", ff.depth},
                    {"semantic", ff.semantic},
                    {"flow", ff.flow}});
    doc["files"].push_back(jc);
  }
  return doc.dump(1) + "\n";
}

void save_manifest(const std::string& path, const SceneManifest& m) {
  write_text_atomic(path, manifest_json(m));
}

SceneManifest load_manifest(const std::string& path) {
  json doc = json::parse(read_text(path));
  SceneManifest m;
  m.width = doc["width"];
  m.height = doc["height"];
  m.frames = doc["frames"];
  m.timestamps = doc["timestamps"].get<std::vector<double>>();
  m.classes = doc["classes"].get<std::vector<std::string>>();
  for (const json& jc : doc["cameras"]) {
    ManifestCamera c;
    c.fx = jc["fx"]; c.fy = jc["fy"]; c.cx = jc["cx"]; c.cy = jc["cy"];
    c.width = jc["width"]; c.height = jc["height"];
    for (const json& jp : jc["poses"]) c.poses.push_back(transform_from_json(jp));
    m.cameras.push_back(c);
  }
  for (const json& jb : doc["boxes"]) {
    TrackedBox b;
    b.id = jb["id"];
    for (int i = 0; i < 3; ++i) b.dim[i] = jb["dim"][i];
    for (const json& jk : jb["keyframes"]) {
      RigidTransform p = transform_from_json(jk);
      b.keyframes.push_back({jk["time"], p.R, p.t});
    }
    m.boxes.push_back(b);
    m.box_classes.push_back(jb["class"]);
  }
  for (const json& jl : doc["lidar"]) {
    m.lidar_files.push_back(jl["file"]);
    m.lidar_poses.push_back(transform_from_json(jl["pose"]));
  }
  for (const json& jc : doc["files"]) {
    std::vector<FrameFiles> cam_files;
    for (const json& jf : jc)
      cam_files.push_back({jf["rgb"], jf["depth"], jf["semantic"], jf["flow"]});
    m.files.push_back(cam_files);
  }

  if (!std::is_sorted(m.timestamps.begin(), m.timestamps.end()))
    throw Error("manifest: timestamps not sorted");
  if (m.classes.empty()) throw Error("manifest: empty class table");
  std::string dir = fs::path(path).parent_path().string();
  if (dir.empty()) dir = ".";
  auto must_exist = [&](const std::string& rel) {
    if (!rel.empty() && !fs::exists(fs::path(dir) / rel))
      throw Error("manifest: missing file " + rel);
  };
  for (const auto& cam_files : m.files)
    for (const FrameFiles& ff : cam_files) {
      must_exist(ff.rgb);
      must_exist(ff.depth);
      must_exist(ff.semantic);
      must_exist(ff.flow);
    }
  for (const std::string& lf : m.lidar_files) must_exist(lf);
  return m;
}

Dataset load_dataset(const std::string& dir) {
  Dataset data;
  data.dir = dir;
  data.manifest = load_manifest(dir + "/manifest.json");
  const SceneManifest& m = data.manifest;
  data.rgb.resize(m.cameras.size());
  data.depth.resize(m.cameras.size());
  data.semantic.resize(m.cameras.size());
  data.flow.resize(m.cameras.size());
  for (size_t c = 0; c < m.cameras.size(); ++c)
    for (int f = 0; f < m.frames; ++f) {
      const FrameFiles& ff = m.files[c][f];
      data.rgb[c].push_back(to_f64(read_png(dir + "/" + ff.rgb)));
      data.depth[c].push_back(to_f64(read_raw_f32(dir + "/" + ff.depth)));
      ImageU8 sem = read_png(dir + "/" + ff.semantic);
      Image<int> labels(sem.width(), sem.height(), 1);
      for (size_t i = 0; i < sem.size(); ++i) labels.raw()[i] = sem.raw()[i];
      data.semantic[c].push_back(std::move(labels));
      if (!ff.flow.empty())
        data.flow[c].push_back(to_f64(read_raw_f32(dir + "/" + ff.flow)));
    }
  for (int f = 0; f < m.frames; ++f) {
    ImageF blob = read_raw_f32(dir + "/" + m.lidar_files[f]);
    std::vector<LidarSample> samples;
    for (int i = 0; i < blob.width(); ++i)
      samples.push_back({blob.at(i, 0, 0), blob.at(i, 0, 1),
                         double(blob.at(i, 0, 2)), blob.at(i, 0, 3) > 0.5f});
    data.lidar.push_back(std::move(samples));
  }
  return data;
}

LidarFrame lidar_frame(const Dataset& data, int frame) {
  LidarFrame lf;
  lf.pose = data.manifest.lidar_poses[frame];
  CameraModel cam = manifest_camera(data.manifest, 0, frame);
  cam.pose = RigidTransform{};  // sensor-frame points
  for (const LidarSample& s : data.lidar[frame])
    lf.points.push_back(unproject({s.px, s.py, s.depth}, cam));
  return lf;
}

CameraModel manifest_camera(const SceneManifest& m, int cam, int frame) {
  const ManifestCamera& mc = m.cameras[cam];
  CameraModel out;
  out.fx = mc.fx; out.fy = mc.fy; out.cx = mc.cx; out.cy = mc.cy;
  out.width = mc.width;
  out.height = mc.height;
  out.pose = mc.poses[frame];
  return out;
}

void populate_scene(Scene& scene, const SceneManifest& m) {
  for (size_t c = 0; c < m.cameras.size(); ++c)
    for (int f = 0; f < m.frames; ++f)
      scene.add_camera(manifest_camera(m, int(c), f));
  for (const TrackedBox& b : m.boxes) {
    int bi = scene.add_box(b);
    for (double t : m.timestamps)
      if (t >= b.keyframes.front().time - 1e-9 &&
          t <= b.keyframes.back().time + 1e-9)
        scene.register_track_time(bi, t);
  }
  scene.sync_from_tape();
}

TrainBatch sample_batch(const Dataset& data, int patches, int singles,
                        uint64_t seed, int step, int exclude_cam,
                        int exclude_frame) {
  const SceneManifest& m = data.manifest;
  Rng rng(seed, 0x8A7C0000ULL + uint64_t(step));
  TrainBatch batch;
  auto pick_view = [&](int* cam, int* frame) {
    do {
      *cam = int(rng.uniform_int(m.cameras.size()));
      *frame = int(rng.uniform_int(m.frames));
    } while (*cam == exclude_cam && *frame == exclude_frame);
  };
  auto push_ray = [&](int cam, int frame, int x, int y) {
    RayTarget t;
    t.cam_index = cam * m.frames + frame;
    t.px = x;
    t.py = y;
    t.time = m.timestamps[frame];
    for (int k = 0; k < 3; ++k) t.color[k] = data.rgb[cam][frame].at(x, y, k);
    t.disparity = 1.0 / data.depth[cam][frame].at(x, y);
    t.sem_class = data.semantic[cam][frame].at(x, y);
    if (cam == 0)
      for (const LidarSample& s : data.lidar[frame])
        if (int(s.px) == x && int(s.py) == y) {
          t.has_lidar = true;
          t.lidar_disparity = 1.0 / s.depth;
          break;
        }
    batch.rays.push_back(t);
    return int(batch.rays.size()) - 1;
  };
  for (int p = 0; p < patches; ++p) {
    int cam, frame;
    pick_view(&cam, &frame);
    int x = int(rng.uniform_int(m.width - 1));
    int y = int(rng.uniform_int(m.height - 1));
    std::array<int, 4> idx;
    idx[0] = push_ray(cam, frame, x, y);
    idx[1] = push_ray(cam, frame, x + 1, y);
    idx[2] = push_ray(cam, frame, x, y + 1);
    idx[3] = push_ray(cam, frame, x + 1, y + 1);
    batch.patches.push_back(idx);
  }
  for (int i = 0; i < singles; ++i) {
    int cam, frame;
    pick_view(&cam, &frame);
    push_ray(cam, frame, int(rng.uniform_int(m.width)),
             int(rng.uniform_int(m.height)));
  }
  return batch;
}

double psnr(const ImageD& a, const ImageD& b) {
  if (a.width() != b.width() || a.height() != b.height() ||
      a.channels() != b.channels())
    throw Error("psnr: shape mismatch");
  double mse = 0;
  for (size_t i = 0; i < a.size(); ++i) mse += sqr(a.raw()[i] - b.raw()[i]);
  mse /= double(a.size());
  if (mse <= 0) return 99.0;
  return std::min(99.0, 10.0 * std::log10(1.0 / mse));
}

double ssim(const ImageD& a, const ImageD& b) {
  if (a.width() != b.width() || a.height() != b.height() ||
      a.channels() != b.channels())
    throw Error("ssim: shape mismatch");
  ImageD map = ssim_map(to_gray(a), to_gray(b));
  double s = 0;
  for (size_t i = 0; i < map.size(); ++i) s += map.raw()[i];
  return s / double(map.size());
}

}  // namespace nerfsim
