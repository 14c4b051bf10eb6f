#include "nerfsim/confidence.h"

#include <algorithm>
#include <cmath>

namespace nerfsim {

std::vector<Vec3> accumulate_lidar(const std::vector<LidarFrame>& frames,
                                   const RigidTransform& target_pose) {
  RigidTransform world_to_target = target_pose.inverse();
  std::vector<Vec3> merged;
  size_t total = 0;
  for (const auto& f : frames) total += f.points.size();
  merged.reserve(total);
  for (const auto& f : frames) {
    RigidTransform rel = world_to_target.compose(f.pose);
    for (const Vec3& p : f.points) merged.push_back(rel.apply(p));
  }
  return merged;
}

SparseDepth project_points(const std::vector<Vec3>& world_points,
                           const CameraModel& cam) {
  SparseDepth out;
  out.depth = ImageD(cam.width, cam.height, 1, 0.0);
  out.valid = ImageU8(cam.width, cam.height, 1, 0);
  for (const Vec3& p : world_points) {
    auto px = project(p, cam);
    if (!px) continue;
    int x = int(std::lround(px->x));
    int y = int(std::lround(px->y));
    if (!out.depth.contains(x, y)) continue;
    if (!out.valid.at(x, y) || px->d < out.depth.at(x, y)) {
      out.depth.at(x, y) = px->d;
      out.valid.at(x, y) = 1;
    }
  }
  return out;
}

ImageD complete_depth(const SparseDepth& sparse, const ImageD& guide, int k,
                      double sigma_s, double sigma_c) {
  const int w = sparse.depth.width(), h = sparse.depth.height();
  struct Sample {
    int x, y;
    double d;
  };
  std::vector<Sample> samples;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (sparse.valid.at(x, y)) samples.push_back({x, y, sparse.depth.at(x, y)});
  if (samples.empty()) throw Error("complete_depth: no valid samples");

  const int gc = guide.channels();
  ImageD out(w, h, 1);
  std::vector<std::pair<double, size_t>> near;  // (squared px dist, index)
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (sparse.valid.at(x, y)) {
        out.at(x, y) = sparse.depth.at(x, y);
        continue;
      }
      near.clear();
      near.reserve(samples.size());
      for (size_t i = 0; i < samples.size(); ++i) {
        double dx = samples[i].x - x, dy = samples[i].y - y;
        near.emplace_back(dx * dx + dy * dy, i);
      }
      size_t kk = std::min<size_t>(k, near.size());
      std::partial_sort(near.begin(), near.begin() + kk, near.end());
      double wsum = 0, dsum = 0;
      for (size_t j = 0; j < kk; ++j) {
        const Sample& s = samples[near[j].second];
        double dc2 = 0;
        for (int c = 0; c < gc; ++c) {
          double d = guide.at(x, y, c) - guide.at(s.x, s.y, c);
          dc2 += d * d;
        }
        double wgt = std::exp(-near[j].first / (2 * sigma_s * sigma_s)) *
                     std::exp(-dc2 / (2 * sigma_c * sigma_c));
        wsum += wgt;
        dsum += wgt * s.d;
      }
      if (wsum < 1e-300) {
        // All kNN weights underflowed; fall back to the plain nearest sample.
        out.at(x, y) = samples[near[0].second].d;
      } else {
        out.at(x, y) = dsum / wsum;
      }
    }
  }
  return out;
}

double gamma_conf(double x, double tau) {
  if (x >= tau) return 0.0;
  return 1.0 - x / tau;
}

ImageD gaussian_blur(const ImageD& img, double sigma) {
  if (sigma <= 0) return img;
  int radius = std::max(1, int(std::ceil(3.0 * sigma)));
  std::vector<double> kern(2 * radius + 1);
  for (int i = -radius; i <= radius; ++i)
    kern[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));

  const int w = img.width(), h = img.height(), ch = img.channels();
  ImageD tmp(w, h, ch), out(w, h, ch);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double norm = 0;
      for (int i = -radius; i <= radius; ++i)
        if (x + i >= 0 && x + i < w) norm += kern[i + radius];
      for (int c = 0; c < ch; ++c) {
        double s = 0;
        for (int i = -radius; i <= radius; ++i)
          if (x + i >= 0 && x + i < w)
            s += kern[i + radius] * img.at(x + i, y, c);
        tmp.at(x, y, c) = s / norm;
      }
    }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double norm = 0;
      for (int i = -radius; i <= radius; ++i)
        if (y + i >= 0 && y + i < h) norm += kern[i + radius];
      for (int c = 0; c < ch; ++c) {
        double s = 0;
        for (int i = -radius; i <= radius; ++i)
          if (y + i >= 0 && y + i < h)
            s += kern[i + radius] * tmp.at(x, y + i, c);
        out.at(x, y, c) = s / norm;
      }
    }
  return out;
}

namespace {

// 11x11 Gaussian-weighted local mean with border renormalization; separable
// passes are exact because the weights factorize.
ImageD ssim_mean(const ImageD& img) {
  const double sigma = 1.5;
  const int radius = 5;
  std::vector<double> kern(2 * radius + 1);
  for (int i = -radius; i <= radius; ++i)
    kern[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
  const int w = img.width(), h = img.height();
  ImageD tmp(w, h, 1), out(w, h, 1);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double s = 0, norm = 0;
      for (int i = -radius; i <= radius; ++i)
        if (x + i >= 0 && x + i < w) {
          s += kern[i + radius] * img.at(x + i, y);
          norm += kern[i + radius];
        }
      tmp.at(x, y) = s / norm;
    }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double s = 0, norm = 0;
      for (int i = -radius; i <= radius; ++i)
        if (y + i >= 0 && y + i < h) {
          s += kern[i + radius] * tmp.at(x, y + i);
          norm += kern[i + radius];
        }
      out.at(x, y) = s / norm;
    }
  return out;
}

}  // namespace

ImageD ssim_map(const ImageD& a, const ImageD& b) {
  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  const int w = a.width(), h = a.height();
  ImageD aa(w, h, 1), bb(w, h, 1), ab(w, h, 1);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      aa.at(x, y) = a.at(x, y) * a.at(x, y);
      bb.at(x, y) = b.at(x, y) * b.at(x, y);
      ab.at(x, y) = a.at(x, y) * b.at(x, y);
    }
  ImageD mu_a = ssim_mean(a), mu_b = ssim_mean(b);
  ImageD m_aa = ssim_mean(aa), m_bb = ssim_mean(bb), m_ab = ssim_mean(ab);

  ImageD out(w, h, 1);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double ma = mu_a.at(x, y), mb = mu_b.at(x, y);
      double va = m_aa.at(x, y) - ma * ma;
      double vb = m_bb.at(x, y) - mb * mb;
      double cov = m_ab.at(x, y) - ma * mb;
      double s = ((2 * ma * mb + c1) * (2 * cov + c2)) /
                 ((ma * ma + mb * mb + c1) * (va + vb + c2));
      out.at(x, y) = s;
    }
  return out;
}

ImageD feature_pyramid(const ImageD& rgb) {
  const int w = rgb.width(), h = rgb.height();
  const int bins = 4, octaves = 3;
  ImageD gray = to_gray(rgb);
  ImageD feat(w, h, bins * octaves, 0.0);

  for (int o = 0; o < octaves; ++o) {
    double sigma = double(1 << o);
    ImageD g = gaussian_blur(gray, sigma);
    ImageD hist(w, h, bins, 0.0);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double gx = g.at(std::min(x + 1, w - 1), y) -
                    g.at(std::max(x - 1, 0), y);
        double gy = g.at(x, std::min(y + 1, h - 1)) -
                    g.at(x, std::max(y - 1, 0));
        double mag = std::hypot(gx, gy);
        if (mag < 1e-12) continue;
        // Orientation folded to [0, pi): gradients of opposite sign describe
        // the same edge.
        double ang = std::atan2(gy, gx);
        if (ang < 0) ang += kPi;
        double fb = ang / kPi * bins;
        int b0 = std::min(bins - 1, int(fb));
        int b1 = (b0 + 1) % bins;
        double f = fb - b0;
        hist.at(x, y, b0) += (1 - f) * mag;
        hist.at(x, y, b1) += f * mag;
      }
    // Pool over the octave's receptive field.
    hist = gaussian_blur(hist, 2.0 * sigma);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        for (int b = 0; b < bins; ++b)
          feat.at(x, y, o * bins + b) = hist.at(x, y, b);
  }

  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double n2 = 0;
      for (int c = 0; c < bins * octaves; ++c)
        n2 += feat.at(x, y, c) * feat.at(x, y, c);
      double inv = 1.0 / std::sqrt(n2 + 1e-12);
      for (int c = 0; c < bins * octaves; ++c) feat.at(x, y, c) *= inv;
    }
  return feat;
}

PerceptionConfidence perception_confidence(const ImageD& image_s,
                                           const ImageD& image_t,
                                           const ImageD& feat_s,
                                           const ImageD& feat_t,
                                           const WarpField& warp) {
  const int w = image_s.width(), h = image_s.height();
  const int ch = image_s.channels(), fc = feat_s.channels();
  PerceptionConfidence out;
  out.c_rgb = ImageD(w, h, 1, 0.0);
  out.c_feat = ImageD(w, h, 1, 0.0);

  // Warped target image, for the windowed structural comparison.
  ImageD warped(w, h, ch, 0.0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (!warp.valid.at(x, y)) continue;
      double tx = warp.target_xy.at(x, y, 0);
      double ty = warp.target_xy.at(x, y, 1);
      double err = 0;
      for (int c = 0; c < ch; ++c) {
        double v = bilinear(image_t, tx, ty, c);
        warped.at(x, y, c) = v;
        err += std::abs(image_s.at(x, y, c) - v);
      }
      out.c_rgb.at(x, y) = clamp01(1.0 - err / ch);

      double d2 = 0;
      for (int c = 0; c < fc; ++c) {
        double d = feat_s.at(x, y, c) - bilinear(feat_t, tx, ty, c);
        d2 += d * d;
      }
      out.c_feat.at(x, y) = clamp01(1.0 - std::sqrt(d2));
    }

  ImageD ssim = ssim_map(to_gray(image_s), to_gray(warped));
  out.c_ssim = ImageD(w, h, 1, 0.0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (warp.valid.at(x, y)) out.c_ssim.at(x, y) = clamp01(ssim.at(x, y));
  return out;
}

GeometryConfidence geometry_confidence(const ImageD& depth_s,
                                       const ImageD& depth_t,
                                       const ImageD& flow,
                                       const WarpField& warp, double tau) {
  const int w = depth_s.width(), h = depth_s.height();
  GeometryConfidence out;
  out.c_depth = ImageD(w, h, 1, 0.0);
  out.c_flow = ImageD(w, h, 1, 0.0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (!warp.valid.at(x, y)) continue;
      double tx = warp.target_xy.at(x, y, 0);
      double ty = warp.target_xy.at(x, y, 1);
      double d_s = depth_s.at(x, y);
      double d_t = warp.target_depth.at(x, y);
      double d_obs = bilinear(depth_t, tx, ty, 0);
      out.c_depth.at(x, y) = gamma_conf(std::abs(d_t - d_obs) / d_s, tau);

      double dx = tx - x, dy = ty - y;
      double dn = std::hypot(dx, dy);
      double fx = flow.at(x, y, 0), fy = flow.at(x, y, 1);
      if (dn < 1e-3) {
        out.c_flow.at(x, y) = std::hypot(fx, fy) < 1e-3 ? 1.0 : 0.0;
      } else {
        double err = std::hypot(dx - fx, dy - fy);
        out.c_flow.at(x, y) = gamma_conf(err / dn, tau);
      }
    }
  return out;
}

namespace {

VecX softmax5(const VecX& z) {
  VecX e = (z.array() - z.maxCoeff()).exp();
  return e / e.sum();
}

}  // namespace

ImageD combine_confidence(const ConfidencePack& pack, const VecX& omega) {
  VecX w = softmax5(omega);
  const ImageD* maps[5] = {&pack.c_rgb, &pack.c_ssim, &pack.c_feat,
                           &pack.c_depth, &pack.c_flow};
  const int iw = pack.c_rgb.width(), ih = pack.c_rgb.height();
  ImageD out(iw, ih, 1, 0.0);
  for (int i = 0; i < 5; ++i)
    for (int y = 0; y < ih; ++y)
      for (int x = 0; x < iw; ++x)
        out.at(x, y) += w[i] * maps[i]->at(x, y);
  return out;
}

VecX combine_confidence_backward(const ConfidencePack& pack, const VecX& omega,
                                 const ImageD& d_combined) {
  VecX w = softmax5(omega);
  const ImageD* maps[5] = {&pack.c_rgb, &pack.c_ssim, &pack.c_feat,
                           &pack.c_depth, &pack.c_flow};
  // dL/dp_i, then through the softmax Jacobian.
  VecX d_p = VecX::Zero(5);
  for (int i = 0; i < 5; ++i)
    for (int y = 0; y < d_combined.height(); ++y)
      for (int x = 0; x < d_combined.width(); ++x)
        d_p[i] += d_combined.at(x, y) * maps[i]->at(x, y);
  double dot = w.dot(d_p);
  return (w.array() * (d_p.array() - dot)).matrix();
}

}  // namespace nerfsim
