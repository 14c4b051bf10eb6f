#include "nerfsim/harness.h"

#include "doctest.h"

#include <filesystem>
#include <fstream>

#include "nerfsim/io.h"

using namespace nerfsim;
namespace fs = std::filesystem;

namespace {

std::string temp_dir(const std::string& tag) {
  fs::path p = fs::temp_directory_path() / ("nerfsim_harness_" + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p.string();
}

SynthConfig small_cfg() {
  SynthConfig cfg;
  cfg.width = 24;
  cfg.height = 20;
  cfg.frames = 3;
  cfg.rig_cameras = 2;
  return cfg;
}

std::string read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

// plain 2D-window SSIM, independent of the production kernel
double naive_ssim(const ImageD& a, const ImageD& b) {
  int w = a.width(), h = a.height();
  const int r = 5;
  double kernel[11];
  for (int i = -r; i <= r; ++i) kernel[i + r] = std::exp(-i * i / (2.0 * 1.5 * 1.5));
  double c1 = 1e-4, c2 = 9e-4, total = 0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double sw = 0, ma = 0, mb = 0, maa = 0, mbb = 0, mab = 0;
      for (int dy = -r; dy <= r; ++dy)
        for (int dx = -r; dx <= r; ++dx) {
          int xx = x + dx, yy = y + dy;
          if (xx < 0 || yy < 0 || xx >= w || yy >= h) continue;
          double k = kernel[dx + r] * kernel[dy + r];
          sw += k;
          ma += k * a.at(xx, yy);
          mb += k * b.at(xx, yy);
          maa += k * a.at(xx, yy) * a.at(xx, yy);
          mbb += k * b.at(xx, yy) * b.at(xx, yy);
          mab += k * a.at(xx, yy) * b.at(xx, yy);
        }
      ma /= sw; mb /= sw;
      double va = maa / sw - ma * ma, vb = mbb / sw - mb * mb;
      double cov = mab / sw - ma * mb;
      total += (2 * ma * mb + c1) * (2 * cov + c2) /
               ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
  return total / (w * h);
}

}  // namespace

TEST_CASE("invalid synthesis configs are rejected") {
  SynthConfig cfg;
  cfg.width = 0;
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = SynthConfig{};
  cfg.frames = 0;
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = SynthConfig{};
  cfg.lidar_outlier_rate = 1.5;
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = SynthConfig{};
  cfg.rig_cameras = 4;
  CHECK_THROWS_AS(cfg.validate(), Error);
  SynthConfig{}.validate();  // defaults are fine
}

TEST_CASE("clean lidar equals the ground-truth depth exactly") {
  std::string dir = temp_dir("lidar");
  generate_scene(small_cfg(), dir, 3);
  Dataset data = load_dataset(dir);
  REQUIRE(int(data.lidar.size()) == 3);
  for (int f = 0; f < 3; ++f) {
    CHECK(!data.lidar[f].empty());
    for (const LidarSample& s : data.lidar[f]) {
      CHECK(!s.outlier);
      CHECK(s.depth == data.depth[0][f].at(int(s.px), int(s.py)));
    }
  }
}

TEST_CASE("outlier injection corrupts exactly the labeled samples") {
  SynthConfig cfg = small_cfg();
  cfg.lidar_outlier_rate = 0.5;
  std::string dir = temp_dir("outlier");
  generate_scene(cfg, dir, 11);
  Dataset data = load_dataset(dir);
  int outliers = 0, clean = 0;
  for (int f = 0; f < cfg.frames; ++f)
    for (const LidarSample& s : data.lidar[f]) {
      double gt = data.depth[0][f].at(int(s.px), int(s.py));
      if (s.outlier) {
        ++outliers;
        CHECK(s.depth >= 0.3 * gt * 0.999);
        CHECK(s.depth <= 3.0 * gt * 1.001);
        CHECK(s.depth != gt);
      } else {
        ++clean;
        CHECK(s.depth == gt);
      }
    }
  CHECK(outliers > 10);
  CHECK(clean > 10);
}

TEST_CASE("static-scene flow matches the reprojection warp oracle") {
  SynthConfig cfg = small_cfg();
  cfg.moving_box = false;
  std::string dir = temp_dir("flow");
  SceneManifest m = generate_scene(cfg, dir, 1);
  Dataset data = load_dataset(dir);
  for (int c = 0; c < cfg.rig_cameras; ++c) {
    WarpField warp = warp_pixels(data.depth[c][0], manifest_camera(m, c, 0),
                                 manifest_camera(m, c, 1));
    const ImageD& flow = data.flow[c][0];
    int checked = 0;
    for (int y = 0; y < cfg.height; ++y)
      for (int x = 0; x < cfg.width; ++x) {
        if (!warp.valid.at(x, y)) continue;
        ++checked;
        CHECK(std::abs(flow.at(x, y, 0) - (warp.target_xy.at(x, y, 0) - x)) <
              2e-3);
        CHECK(std::abs(flow.at(x, y, 1) - (warp.target_xy.at(x, y, 1) - y)) <
              2e-3);
      }
    CHECK(checked > 100);
  }
}

TEST_CASE("exact ground truth earns full geometric confidence") {
  SynthConfig cfg = small_cfg();
  cfg.moving_box = false;
  // finer pixels shrink the bilinear resampling bias inside the estimator
  cfg.width = 64;
  cfg.height = 56;
  std::string dir = temp_dir("conf");
  SceneManifest m = generate_scene(cfg, dir, 2);
  Dataset data = load_dataset(dir);
  WarpField warp = warp_pixels(data.depth[0][0], manifest_camera(m, 0, 0),
                               manifest_camera(m, 0, 1));
  GeometryConfidence gc = geometry_confidence(data.depth[0][0],
                                              data.depth[0][1],
                                              data.flow[0][0], warp);
  // The depth estimator resamples the target bilinearly, so perspective
  // curvature leaves a small bias on slanted surfaces even with exact inputs.
  // Flat-depth regions (sky) must come out exact; the rest near one.
  auto flat = [&](int x, int y) {
    double d = data.depth[0][1].at(x, y);
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx) {
        int xx = std::clamp(x + dx, 0, cfg.width - 1);
        int yy = std::clamp(y + dy, 0, cfg.height - 1);
        if (data.depth[0][1].at(xx, yy) != d) return false;
      }
    return true;
  };
  double sum_d = 0, sum_f = 0;
  int n = 0, high = 0;
  for (int y = 0; y < cfg.height; ++y)
    for (int x = 0; x < cfg.width; ++x) {
      if (!warp.valid.at(x, y)) continue;
      ++n;
      sum_d += gc.c_depth.at(x, y);
      sum_f += gc.c_flow.at(x, y);
      CHECK(gc.c_flow.at(x, y) > 0.9);
      if (gc.c_depth.at(x, y) > 0.99) ++high;
      int tx = int(std::lround(warp.target_xy.at(x, y, 0)));
      int ty = int(std::lround(warp.target_xy.at(x, y, 1)));
      // the ego translation itself shifts the sky proxy depth by ~5e-6
      if (warp.valid.contains(tx, ty) && flat(tx, ty))
        CHECK(gc.c_depth.at(x, y) > 1.0 - 1e-4);
    }
  REQUIRE(n > 100);
  CHECK(sum_d / n > 0.97);
  CHECK(sum_f / n > 0.999);
  CHECK(double(high) / n > 0.8);
}

TEST_CASE("generation is byte-identical across reruns and thread counts") {
  SynthConfig cfg = small_cfg();
  cfg.lidar_outlier_rate = 0.3;
  std::string a = temp_dir("det_a"), b = temp_dir("det_b");
  generate_scene(cfg, a, 123, 1);
  generate_scene(cfg, b, 123, 3);
  int files = 0;
  for (const auto& entry : fs::recursive_directory_iterator(a)) {
    if (!entry.is_regular_file()) continue;
    ++files;
    std::string rel = fs::relative(entry.path(), a).string();
    CHECK(read_bytes(entry.path().string()) == read_bytes(b + "/" + rel));
  }
  CHECK(files > 20);
}

TEST_CASE("manifest round trips and its validation catches damage") {
  SynthConfig cfg = small_cfg();
  std::string dir = temp_dir("manifest");
  SceneManifest m = generate_scene(cfg, dir, 5);
  SceneManifest r = load_manifest(dir + "/manifest.json");
  CHECK(r.width == m.width);
  CHECK(r.frames == m.frames);
  CHECK(r.classes == m.classes);
  CHECK(r.timestamps == m.timestamps);
  REQUIRE(r.cameras.size() == m.cameras.size());
  CHECK((r.cameras[1].poses[2].t - m.cameras[1].poses[2].t).norm() < 1e-12);
  CHECK((r.cameras[1].poses[2].R - m.cameras[1].poses[2].R).norm() < 1e-12);
  REQUIRE(r.boxes.size() == 1);
  CHECK(r.boxes[0].dim == m.boxes[0].dim);
  CHECK(r.box_classes == m.box_classes);

  SceneManifest bad = m;
  std::swap(bad.timestamps[0], bad.timestamps[2]);
  save_manifest(dir + "/bad.json", bad);
  CHECK_THROWS_AS(load_manifest(dir + "/bad.json"), Error);

  fs::remove(dir + "/" + m.files[0][1].depth);
  CHECK_THROWS_AS(load_manifest(dir + "/manifest.json"), Error);
}

TEST_CASE("psnr follows the closed form and caps at 99") {
  ImageD a(8, 6, 3, 0.5);
  CHECK(psnr(a, a) == 99.0);
  ImageD b = a;
  for (size_t i = 0; i < b.size(); ++i) b.raw()[i] += 0.1;
  CHECK(psnr(a, b) == doctest::Approx(20.0).epsilon(1e-9));
  Rng rng(1, 0);
  ImageD c(8, 6, 3), d(8, 6, 3);
  for (size_t i = 0; i < c.size(); ++i) {
    c.raw()[i] = rng.uniform();
    d.raw()[i] = rng.uniform();
  }
  double mse = 0;
  for (size_t i = 0; i < c.size(); ++i) mse += sqr(c.raw()[i] - d.raw()[i]);
  mse /= double(c.size());
  CHECK(psnr(c, d) == doctest::Approx(10.0 * std::log10(1.0 / mse)).epsilon(1e-9));
  ImageD e(7, 6, 3);
  CHECK_THROWS_AS(psnr(a, e), Error);
}

TEST_CASE("ssim matches closed forms and a naive reference") {
  ImageD a(16, 14, 1, 0.4);
  CHECK(ssim(a, a) == doctest::Approx(1.0).epsilon(1e-12));
  ImageD b(16, 14, 1, 0.5);
  // zero variance: luminance term only
  double lum = (2 * 0.4 * 0.5 + 1e-4) / (0.4 * 0.4 + 0.5 * 0.5 + 1e-4);
  CHECK(ssim(a, b) == doctest::Approx(lum).epsilon(1e-12));

  ImageD cb(16, 14, 1), neg(16, 14, 1);
  for (int y = 0; y < 14; ++y)
    for (int x = 0; x < 16; ++x) {
      cb.at(x, y) = (x + y) % 2;
      neg.at(x, y) = 1.0 - cb.at(x, y);
    }
  double ref = naive_ssim(cb, neg);
  CHECK(ssim(cb, neg) == doctest::Approx(ref).epsilon(1e-9));
  CHECK(ref < -0.5);  // anticorrelated structure

  ImageD e(5, 5, 1);
  CHECK_THROWS_AS(ssim(a, e), Error);
}

TEST_CASE("dataset wires into the renderer and training batches") {
  SynthConfig cfg = small_cfg();
  std::string dir = temp_dir("wire");
  generate_scene(cfg, dir, 9);
  Dataset data = load_dataset(dir);

  FieldConfig tiny;
  tiny.levels = 3;
  tiny.base_resolution = 4;
  tiny.features = 2;
  tiny.hidden = 8;
  tiny.hidden_layers = 1;
  tiny.color_hidden = 8;
  tiny.sem_classes = 5;
  tiny.sem_hidden = 8;
  SceneConfig sc;
  sc.background = tiny;
  sc.object = tiny;
  sc.proposal = tiny;
  sc.proposal.sem_classes = 0;
  sc.proposal.proposal_hidden = 8;
  sc.proposal_samples = 12;
  sc.final_samples = 8;
  sc.t_near = 0.5;
  sc.t_far = 50.0;
  Scene scene(sc, 21);
  populate_scene(scene, data.manifest);
  CHECK(int(scene.cameras.size()) == cfg.rig_cameras * cfg.frames);
  CHECK(scene.boxes.size() == 1);

  TrainBatch batch = sample_batch(data, 2, 4, 77, 0);
  REQUIRE(int(batch.rays.size()) == 12);
  REQUIRE(int(batch.patches.size()) == 2);
  bool any_sem = false;
  for (const RayTarget& t : batch.rays) {
    CHECK(t.cam_index >= 0);
    CHECK(t.cam_index < int(scene.cameras.size()));
    CHECK(t.disparity > 0);
    CHECK(t.sem_class >= 0);
    CHECK(t.sem_class < 5);
    any_sem = true;
    int cam = t.cam_index / cfg.frames, frame = t.cam_index % cfg.frames;
    CHECK(t.color[0] == data.rgb[cam][frame].at(int(t.px), int(t.py), 0));
    CHECK(t.disparity ==
          1.0 / data.depth[cam][frame].at(int(t.px), int(t.py)));
  }
  CHECK(any_sem);
  for (const auto& p : batch.patches) {
    CHECK(batch.rays[p[1]].px == batch.rays[p[0]].px + 1);
    CHECK(batch.rays[p[2]].py == batch.rays[p[0]].py + 1);
    CHECK(batch.rays[p[3]].cam_index == batch.rays[p[0]].cam_index);
  }
  // a batch drawn on the lidar grid carries lidar targets somewhere
  TrainBatch big = sample_batch(data, 0, 400, 78, 1);
  int with_lidar = 0;
  for (const RayTarget& t : big.rays)
    if (t.has_lidar) {
      ++with_lidar;
      CHECK(t.lidar_disparity > 0);
    }
  CHECK(with_lidar > 0);

  LossWeights w;
  LossBreakdown loss = compute_loss(scene, batch, w, 101, 2);
  CHECK(std::isfinite(loss.total(w)));
  CHECK(loss.rgb > 0);

  LidarFrame lf = lidar_frame(data, 1);
  CHECK(lf.points.size() == data.lidar[1].size());
  for (const Vec3& p : lf.points) CHECK(p[2] > 0);  // in front of the sensor
}
