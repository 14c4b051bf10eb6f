#include "doctest.h"

#include <cmath>

#include "nerfsim/confidence.h"
#include "nerfsim/rng.h"

using namespace nerfsim;

TEST_CASE("lidar accumulation: identity, translation, matrix oracle") {
  Rng rng(3);
  std::vector<Vec3> pts;
  for (int i = 0; i < 50; ++i) pts.push_back(rng.normal3());

  // Single frame, identity relative pose.
  LidarFrame f0{pts, RigidTransform{}};
  auto same = accumulate_lidar({f0}, RigidTransform{});
  for (int i = 0; i < 50; ++i) CHECK((same[i] - pts[i]).norm() < 1e-15);

  // Pure translation between target and frame.
  Vec3 shift(1.5, -2.0, 0.25);
  LidarFrame f1{pts, RigidTransform{Mat3::Identity(), shift}};
  auto moved = accumulate_lidar({f1}, RigidTransform{});
  for (int i = 0; i < 50; ++i)
    CHECK((moved[i] - (pts[i] + shift)).norm() < 1e-14);

  // Three-frame sweep against a homogeneous-matrix oracle.
  std::vector<LidarFrame> frames;
  for (int k = 0; k < 3; ++k) {
    RigidTransform pose{axis_angle_to_matrix(0.3 * rng.normal3()),
                        rng.normal3()};
    frames.push_back({pts, pose});
  }
  RigidTransform target{axis_angle_to_matrix(0.2 * rng.normal3()),
                        rng.normal3()};
  auto merged = accumulate_lidar(frames, target);
  REQUIRE(merged.size() == 150);
  for (size_t k = 0; k < 3; ++k) {
    Mat4 Tt = Mat4::Identity(), Tf = Mat4::Identity();
    Tt.topLeftCorner<3, 3>() = target.R;
    Tt.topRightCorner<3, 1>() = target.t;
    Tf.topLeftCorner<3, 3>() = frames[k].pose.R;
    Tf.topRightCorner<3, 1>() = frames[k].pose.t;
    Mat4 rel = Tt.inverse() * Tf;
    for (size_t i = 0; i < pts.size(); ++i) {
      Vec4 ph(pts[i].x(), pts[i].y(), pts[i].z(), 1.0);
      Vec4 q = rel * ph;
      CHECK((merged[k * pts.size() + i] - q.head<3>()).norm() < 1e-12);
    }
  }
}

TEST_CASE("depth completion: exactness, constants, bounds") {
  int w = 20, h = 14;
  ImageD guide(w, h, 3, 0.5);

  // Fully dense input is returned unchanged.
  SparseDepth dense;
  dense.depth = ImageD(w, h, 1);
  dense.valid = ImageU8(w, h, 1, 1);
  Rng rng(9);
  for (auto& v : dense.depth.raw()) v = rng.uniform(1.0, 9.0);
  ImageD out = complete_depth(dense, guide);
  CHECK(out.raw() == dense.depth.raw());

  // A single sample floods the frame.
  SparseDepth one;
  one.depth = ImageD(w, h, 1, 0.0);
  one.valid = ImageU8(w, h, 1, 0);
  one.depth.at(7, 7) = 5.0;
  one.valid.at(7, 7) = 1;
  ImageD flood = complete_depth(one, guide);
  for (double v : flood.raw()) CHECK(v == doctest::Approx(5.0));

  // Output is bounded by the sample range and exact at sample locations.
  SparseDepth sp;
  sp.depth = ImageD(w, h, 1, 0.0);
  sp.valid = ImageU8(w, h, 1, 0);
  for (int i = 0; i < 15; ++i) {
    int x = int(rng.uniform_int(w)), y = int(rng.uniform_int(h));
    sp.depth.at(x, y) = rng.uniform(2.0, 8.0);
    sp.valid.at(x, y) = 1;
  }
  double lo = 1e9, hi = -1e9;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (sp.valid.at(x, y)) {
        lo = std::min(lo, sp.depth.at(x, y));
        hi = std::max(hi, sp.depth.at(x, y));
      }
  ImageD filled = complete_depth(sp, guide);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      CHECK(filled.at(x, y) >= lo - 1e-12);
      CHECK(filled.at(x, y) <= hi + 1e-12);
      if (sp.valid.at(x, y)) CHECK(filled.at(x, y) == sp.depth.at(x, y));
    }

  SparseDepth empty;
  empty.depth = ImageD(w, h, 1, 0.0);
  empty.valid = ImageU8(w, h, 1, 0);
  CHECK_THROWS(complete_depth(empty, guide));
}

TEST_CASE("depth completion respects image edges") {
  int w = 40, h = 30;
  ImageD guide(w, h, 3);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) guide.at(x, y, c) = x < w / 2 ? 0.0 : 1.0;

  SparseDepth sp;
  sp.depth = ImageD(w, h, 1, 0.0);
  sp.valid = ImageU8(w, h, 1, 0);
  sp.depth.at(5, 15) = 2.0;
  sp.valid.at(5, 15) = 1;
  sp.depth.at(35, 15) = 8.0;
  sp.valid.at(35, 15) = 1;

  ImageD out = complete_depth(sp, guide);
  int agree = 0, total = 0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double want = x < w / 2 ? 2.0 : 8.0;
      double other = x < w / 2 ? 8.0 : 2.0;
      ++total;
      if (std::abs(out.at(x, y) - want) < std::abs(out.at(x, y) - other))
        ++agree;
    }
  CHECK(double(agree) / total >= 0.9);
}

namespace {

WarpField identity_warp(int w, int h, double depth = 5.0) {
  WarpField warp;
  warp.target_xy = ImageD(w, h, 2);
  warp.target_depth = ImageD(w, h, 1, depth);
  warp.valid = ImageU8(w, h, 1, 1);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      warp.target_xy.at(x, y, 0) = x;
      warp.target_xy.at(x, y, 1) = y;
    }
  return warp;
}

ImageD random_rgb(int w, int h, uint64_t seed) {
  ImageD img(w, h, 3);
  Rng rng(seed);
  for (auto& v : img.raw()) v = rng.uniform();
  return img;
}

// Independent windowed-SSIM reference: direct 2D loops, renormalized
// Gaussian window, sigma 1.5, C1 = 1e-4, C2 = 9e-4.
ImageD reference_ssim(const ImageD& a, const ImageD& b) {
  int w = a.width(), h = a.height();
  ImageD out(w, h, 1);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double sw = 0, ma = 0, mb = 0, maa = 0, mbb = 0, mab = 0;
      for (int j = -5; j <= 5; ++j)
        for (int i = -5; i <= 5; ++i) {
          int xx = x + i, yy = y + j;
          if (xx < 0 || yy < 0 || xx >= w || yy >= h) continue;
          double g = std::exp(-(i * i + j * j) / (2.0 * 1.5 * 1.5));
          double va = a.at(xx, yy), vb = b.at(xx, yy);
          sw += g;
          ma += g * va;
          mb += g * vb;
          maa += g * va * va;
          mbb += g * vb * vb;
          mab += g * va * vb;
        }
      ma /= sw;
      mb /= sw;
      double va = maa / sw - ma * ma;
      double vb = mbb / sw - mb * mb;
      double cov = mab / sw - ma * mb;
      out.at(x, y) = ((2 * ma * mb + 1e-4) * (2 * cov + 9e-4)) /
                     ((ma * ma + mb * mb + 1e-4) * (va + vb + 9e-4));
    }
  return out;
}

}  // namespace

TEST_CASE("ssim matches an independent reference implementation") {
  for (uint64_t seed = 1; seed <= 5; ++seed) {
    ImageD a = to_gray(random_rgb(24, 18, seed));
    ImageD b = to_gray(random_rgb(24, 18, seed + 100));
    ImageD got = ssim_map(a, b);
    ImageD want = reference_ssim(a, b);
    double max_diff = 0;
    for (size_t i = 0; i < got.size(); ++i)
      max_diff = std::max(max_diff, std::abs(got.raw()[i] - want.raw()[i]));
    CHECK(max_diff < 1e-6);
  }
}

TEST_CASE("perception confidence: identical views score 1, opposites 0") {
  int w = 24, h = 18;
  ImageD img = random_rgb(w, h, 42);
  ImageD feat = feature_pyramid(img);
  WarpField warp = identity_warp(w, h);

  PerceptionConfidence pc = perception_confidence(img, img, feat, feat, warp);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      CHECK(pc.c_rgb.at(x, y) == doctest::Approx(1.0));
      CHECK(pc.c_ssim.at(x, y) == doctest::Approx(1.0).epsilon(1e-9));
      CHECK(pc.c_feat.at(x, y) == doctest::Approx(1.0).epsilon(1e-9));
    }

  ImageD black(w, h, 3, 0.0), white(w, h, 3, 1.0);
  ImageD fb = feature_pyramid(black);
  PerceptionConfidence contrast =
      perception_confidence(black, white, fb, fb, warp);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) CHECK(contrast.c_rgb.at(x, y) == 0.0);

  // Invalid warp pixels report zero confidence.
  warp.valid.at(3, 3) = 0;
  PerceptionConfidence inv = perception_confidence(img, img, feat, feat, warp);
  CHECK(inv.c_rgb.at(3, 3) == 0.0);
  CHECK(inv.c_ssim.at(3, 3) == 0.0);
  CHECK(inv.c_feat.at(3, 3) == 0.0);
}

TEST_CASE("gamma ramp and geometric consistency maps") {
  CHECK(gamma_conf(0.0) == 1.0);
  CHECK(gamma_conf(0.1) == doctest::Approx(0.5));
  CHECK(gamma_conf(0.2) == 0.0);
  CHECK(gamma_conf(0.5) == 0.0);
  // Continuity at the cutoff.
  CHECK(gamma_conf(0.2 - 1e-12) < 1e-10);

  int w = 16, h = 12;
  WarpField warp = identity_warp(w, h, 4.0);
  ImageD d_s(w, h, 1, 4.0);
  ImageD flow(w, h, 2, 0.0);

  ImageD d_t(w, h, 1, 4.0);
  GeometryConfidence perfect = geometry_confidence(d_s, d_t, flow, warp);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      CHECK(perfect.c_depth.at(x, y) == 1.0);
      CHECK(perfect.c_flow.at(x, y) == 1.0);  // zero motion, zero flow
    }

  // Relative depth error tau/2 -> confidence one half.
  ImageD off(w, h, 1, 4.0 - 0.4);
  GeometryConfidence half = geometry_confidence(d_s, off, flow, warp);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      CHECK(half.c_depth.at(x, y) == doctest::Approx(0.5));

  // At or beyond tau -> zero.
  ImageD bad(w, h, 1, 4.0 - 0.8);
  GeometryConfidence zero = geometry_confidence(d_s, bad, flow, warp);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) CHECK(zero.c_depth.at(x, y) <= 1e-12);

  // Static pixel but nonzero reference flow -> flow confidence zero.
  ImageD moving(w, h, 2, 2.0);
  GeometryConfidence fz = geometry_confidence(d_s, d_t, moving, warp);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) CHECK(fz.c_flow.at(x, y) == 0.0);
}

TEST_CASE("confidence combination: convexity and special cases") {
  int w = 8, h = 6;
  auto constant = [&](double v) { return ImageD(w, h, 1, v); };
  ConfidencePack pack{constant(1.0), constant(0.0), constant(0.5),
                      constant(0.5), constant(1.0)};

  // Uniform logits -> arithmetic mean.
  ImageD mean = combine_confidence(pack, VecX::Zero(5));
  for (double v : mean.raw()) CHECK(v == doctest::Approx(0.6));

  // Near-one-hot on the depth map.
  VecX hot = VecX::Zero(5);
  hot[3] = 60.0;
  ImageD depth_only = combine_confidence(pack, hot);
  for (double v : depth_only.raw()) CHECK(v == doctest::Approx(0.5));

  // All maps one -> one for any logits.
  ConfidencePack ones{constant(1), constant(1), constant(1), constant(1),
                      constant(1)};
  Rng rng(4);
  for (int trial = 0; trial < 5; ++trial) {
    VecX z(5);
    for (int i = 0; i < 5; ++i) z[i] = rng.normal();
    ImageD c = combine_confidence(ones, z);
    for (double v : c.raw()) CHECK(v == doctest::Approx(1.0));
  }

  // Pointwise convexity between the extremes.
  ConfidencePack rnd;
  ImageD* maps[5] = {&rnd.c_rgb, &rnd.c_ssim, &rnd.c_feat, &rnd.c_depth,
                     &rnd.c_flow};
  for (auto* m : maps) {
    *m = ImageD(w, h, 1);
    for (auto& v : m->raw()) v = rng.uniform();
  }
  VecX z(5);
  for (int i = 0; i < 5; ++i) z[i] = rng.normal();
  ImageD c = combine_confidence(rnd, z);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double lo = 1e9, hi = -1e9;
      for (auto* m : maps) {
        lo = std::min(lo, m->at(x, y));
        hi = std::max(hi, m->at(x, y));
      }
      CHECK(c.at(x, y) >= lo - 1e-12);
      CHECK(c.at(x, y) <= hi + 1e-12);
    }
}

TEST_CASE("confidence combination: logit gradient matches finite differences") {
  int w = 10, h = 7;
  Rng rng(17);
  ConfidencePack pack;
  ImageD* maps[5] = {&pack.c_rgb, &pack.c_ssim, &pack.c_feat, &pack.c_depth,
                     &pack.c_flow};
  for (auto* m : maps) {
    *m = ImageD(w, h, 1);
    for (auto& v : m->raw()) v = rng.uniform();
  }
  ImageD d_chat(w, h, 1);
  for (auto& v : d_chat.raw()) v = rng.normal();
  VecX z(5);
  for (int i = 0; i < 5; ++i) z[i] = rng.normal();

  VecX grad = combine_confidence_backward(pack, z, d_chat);
  auto loss = [&](const VecX& zz) {
    ImageD c = combine_confidence(pack, zz);
    double L = 0;
    for (size_t i = 0; i < c.size(); ++i) L += c.raw()[i] * d_chat.raw()[i];
    return L;
  };
  for (int i = 0; i < 5; ++i) {
    VecX zp = z, zm = z;
    zp[i] += 1e-6;
    zm[i] -= 1e-6;
    double fd = (loss(zp) - loss(zm)) / 2e-6;
    CHECK(std::abs(fd - grad[i]) < 1e-6 * std::max(1.0, std::abs(fd)));
  }
}

namespace {

// World texture: 8x8 cells of binary stripes with random orientation and
// phase, so misplaced sampling lands on visibly different content.
ImageD stripe_texture(int w, int h, uint64_t seed) {
  int cw = (w + 7) / 8, chh = (h + 7) / 8;
  std::vector<double> angle(size_t(cw) * chh), phase(size_t(cw) * chh);
  Rng rng(seed);
  for (size_t i = 0; i < angle.size(); ++i) {
    angle[i] = kPi * double(rng.uniform_int(4)) / 4.0;
    phase[i] = rng.uniform(0.0, 4.0);
  }
  ImageD img(w, h, 3);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      size_t cell = size_t(y / 8) * cw + x / 8;
      double u = std::cos(angle[cell]) * x + std::sin(angle[cell]) * y;
      double v = std::sin(2.0 * kPi * (u + phase[cell]) / 4.0) > 0 ? 1.0 : 0.0;
      for (int c = 0; c < 3; ++c) img.at(x, y, c) = v;
    }
  return img;
}

}  // namespace

TEST_CASE("outlier separation: corrupted depths score low, clean high") {
  // Stereo pair over a fronto-parallel plane at depth 5; the target camera
  // sits 0.4 m to the right, so the true disparity is fx*b/d = 4 px.
  const int w = 96, h = 64;
  const double d0 = 5.0, baseline = 0.4;
  CameraModel cam_s;
  cam_s.fx = cam_s.fy = 50;
  cam_s.cx = w / 2.0;
  cam_s.cy = h / 2.0;
  cam_s.width = w;
  cam_s.height = h;
  CameraModel cam_t = cam_s;
  cam_t.pose.t = Vec3(baseline, 0, 0);

  // Texture large enough that both views and misplaced lookups stay inside.
  ImageD tex = stripe_texture(w + 40, h, 77);
  ImageD img_s(w, h, 3), img_t(w, h, 3);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) {
        img_s.at(x, y, c) = tex.at(x + 20, y, c);
        img_t.at(x, y, c) = tex.at(x + 24, y, c);  // shifted by the disparity
      }

  // 10% of 8x8 blocks get depth 10x too near (relative error 9 >= 2*tau).
  ImageD depth_s(w, h, 1, d0);
  ImageU8 outlier(w, h, 1, 0);
  Rng pick(5);
  int blocks_x = w / 8, blocks_y = h / 8;
  int n_out = blocks_x * blocks_y / 10;
  for (int k = 0; k < n_out; ++k) {
    int bx = 1 + int(pick.uniform_int(blocks_x - 2));
    int by = 1 + int(pick.uniform_int(blocks_y - 2));
    for (int y = by * 8; y < by * 8 + 8; ++y)
      for (int x = bx * 8; x < bx * 8 + 8; ++x) {
        depth_s.at(x, y) = d0 / 10.0;
        outlier.at(x, y) = 1;
      }
  }

  WarpField warp = warp_pixels(depth_s, cam_s, cam_t);
  ImageD depth_t(w, h, 1, d0);
  ImageD flow(w, h, 2, 0.0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) flow.at(x, y, 0) = -4.0;

  ImageD feat_s = feature_pyramid(img_s);
  ImageD feat_t = feature_pyramid(img_t);
  PerceptionConfidence pc =
      perception_confidence(img_s, img_t, feat_s, feat_t, warp);
  GeometryConfidence gc = geometry_confidence(depth_s, depth_t, flow, warp);
  ConfidencePack pack{pc.c_rgb, pc.c_ssim, pc.c_feat, gc.c_depth, gc.c_flow};
  ImageD chat = combine_confidence(pack, VecX::Zero(5));

  double sum_out = 0, sum_clean = 0;
  int n_o = 0, n_c = 0;
  const int margin = 20;
  for (int y = margin; y < h - margin; ++y)
    for (int x = margin; x < w - margin; ++x) {
      if (outlier.at(x, y)) {
        sum_out += chat.at(x, y);
        ++n_o;
      } else {
        sum_clean += chat.at(x, y);
        ++n_c;
      }
    }
  REQUIRE(n_o > 50);
  REQUIRE(n_c > 500);
  CHECK(sum_out / n_o < 0.2);
  CHECK(sum_clean / n_c > 0.8);
}
