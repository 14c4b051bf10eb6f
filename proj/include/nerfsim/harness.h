#pragma once

#include <map>
#include <string>
#include <vector>

#include "nerfsim/confidence.h"
#include "nerfsim/training.h"

namespace nerfsim {

// Knobs of the procedural toy dataset. Defaults reproduce the standard
// desk-scale setup: 64x64 frames, a 3-camera rig driving forward past a few
// primitives, one box crossing the road.
struct SynthConfig {
  int width = 64, height = 64;
  int frames = 30;
  int rig_cameras = 3;  // 1 = front only, up to front/left/right
  double dt = 0.1;      // seconds between frames
  double speed = 0.5;   // ego meters per second along +x
  int lidar_step = 4;   // beam pattern: every Nth pixel in x and y
  double lidar_outlier_rate = 0.0;
  bool moving_box = true;

  void validate() const;  // throws Error on nonsense values
};

struct SynthBox {
  Vec3 center = Vec3::Zero();
  Vec3 dim = Vec3::Ones();
  double yaw = 0;
  Vec3 albedo = Vec3::Ones();
  int sem_class = 2;
};

struct SynthSphere {
  Vec3 center = Vec3::Zero();
  double radius = 1;
  Vec3 albedo = Vec3::Ones();
  int sem_class = 3;
};

// Analytic scene: every pixel's depth, class, and flow are exact. World z is
// up, the ground is the plane z = ground_z.
struct SyntheticScene {
  double ground_z = 0;
  int ground_class = 1;
  Vec3 ground_albedo_a = Vec3(0.45, 0.45, 0.42);
  Vec3 ground_albedo_b = Vec3(0.30, 0.32, 0.30);
  double checker = 1.0;  // meters per ground tile
  Vec3 sky_color = Vec3(0.35, 0.55, 0.90);
  Vec3 light_dir = Vec3(0.3, 0.2, -0.9).normalized();
  std::vector<SynthBox> statics;
  std::vector<SynthSphere> spheres;
  std::vector<TrackedBox> moving;  // tracks without refinement offsets
  std::vector<Vec3> moving_albedo;
  std::vector<int> moving_class;
  std::vector<std::string> classes;  // dense ids from 0; 0 is sky
};

SyntheticScene default_toy_scene(const SynthConfig& cfg);

struct ManifestCamera {
  double fx = 1, fy = 1, cx = 0, cy = 0;
  int width = 0, height = 0;
  std::vector<RigidTransform> poses;  // camera -> world, one per frame
};

// Relative paths (from the dataset directory) of one camera-frame's files.
// flow is empty on the last frame.
struct FrameFiles {
  std::string rgb, depth, semantic, flow;
};

struct SceneManifest {
  int width = 0, height = 0, frames = 0;
  std::vector<double> timestamps;
  std::vector<std::string> classes;  // ids dense from 0
  std::vector<ManifestCamera> cameras;
  std::vector<TrackedBox> boxes;
  std::vector<int> box_classes;
  std::vector<std::string> lidar_files;     // per frame
  std::vector<RigidTransform> lidar_poses;  // sensor -> world
  std::vector<std::vector<FrameFiles>> files;  // [camera][frame]
};

// Ray-traces the scene into dir: PNG color and labels, raw float32 depth and
// forward flow, LiDAR pixel samples with recorded outlier labels, and
// manifest.json. Deterministic per seed, parallel over frames, every write
// atomic.
SceneManifest generate_scene(const SynthConfig& cfg, const std::string& dir,
                             uint64_t seed, int threads = 1);

std::string manifest_json(const SceneManifest& m);
void save_manifest(const std::string& path, const SceneManifest& m);
// Parses and validates: referenced files exist, timestamps sorted, class ids
// dense from 0.
SceneManifest load_manifest(const std::string& path);

// LiDAR sample: a pixel of the sensor camera with its (possibly corrupted)
// depth and the ground-truth outlier label.
struct LidarSample {
  double px = 0, py = 0;
  double depth = 0;
  bool outlier = false;
};

struct Dataset {
  std::string dir;
  SceneManifest manifest;
  std::vector<std::vector<ImageD>> rgb;          // [camera][frame]
  std::vector<std::vector<ImageD>> depth;        // meters
  std::vector<std::vector<Image<int>>> semantic;
  std::vector<std::vector<ImageD>> flow;         // 2 channels, frames-1 each
  std::vector<std::vector<LidarSample>> lidar;   // per frame, sensor = cam 0
};

Dataset load_dataset(const std::string& dir);

// Sensor-frame point cloud of one frame for the confidence pipeline.
LidarFrame lidar_frame(const Dataset& data, int frame);

// Camera of one rig position at one frame, ready for rendering.
CameraModel manifest_camera(const SceneManifest& m, int cam, int frame);

// Registers all cameras (camera-major, frame-minor, so scene camera index =
// cam * frames + frame), the tracked boxes, and their per-frame refinement
// slots.
void populate_scene(Scene& scene, const SceneManifest& m);

// Draws a training batch: `patches` 2x2 pixel blocks plus `singles` free
// rays, uniformly over cameras/frames/pixels from the (seed, step) stream.
// Rays on cam 0's LiDAR grid carry the LiDAR disparity target. The excluded
// (camera, frame) view is never sampled, so it can serve as a held-out view.
TrainBatch sample_batch(const Dataset& data, int patches, int singles,
                        uint64_t seed, int step, int exclude_cam = -1,
                        int exclude_frame = -1);

// 10 log10(1 / MSE) over all channels, capped at 99 dB. Throws on shape
// mismatch.
double psnr(const ImageD& a, const ImageD& b);

// Mean structural similarity of the grayscale conversions. Throws on shape
// mismatch.
double ssim(const ImageD& a, const ImageD& b);

}  // namespace nerfsim
