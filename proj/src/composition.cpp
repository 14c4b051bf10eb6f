#include "nerfsim/composition.h"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "nerfsim/confidence.h"
#include "nerfsim/io.h"

namespace nerfsim {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

double median(std::vector<double>& v) {
  size_t m = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + m, v.end());
  double hi = v[m];
  if (v.size() % 2 == 1) return hi;
  double lo = *std::max_element(v.begin(), v.begin() + m);
  return 0.5 * (lo + hi);
}

Mat3 yaw_rotation(double yaw) {
  Mat3 r = Mat3::Identity();
  double c = std::cos(yaw), s = std::sin(yaw);
  r(0, 0) = c; r(0, 1) = -s;
  r(1, 0) = s; r(1, 1) = c;
  return r;
}

}  // namespace

GroundPlan build_ground_plan(const std::vector<PlanView>& views,
                             int ground_label, double cell, double keep_ratio,
                             uint64_t seed) {
  if (views.empty()) throw Error("ground plan: no input views");
  struct Point { double x, y, z; int label; };
  std::vector<Point> pts;
  for (size_t v = 0; v < views.size(); ++v) {
    const PlanView& pv = views[v];
    Rng rng(seed, 0xB1D0 + v);
    for (int y = 0; y < pv.depth.height(); ++y)
      for (int x = 0; x < pv.depth.width(); ++x) {
        double keep = rng.uniform();
        double d = pv.depth.at(x, y);
        if (keep >= keep_ratio) continue;
        if (!std::isfinite(d) || d <= 0 || d > 1e3) continue;  // sky / invalid
        Vec3 p = unproject({double(x), double(y), d}, pv.cam);
        pts.push_back({p[0], p[1], p[2], pv.semantic.at(x, y)});
      }
  }
  GroundPlan plan;
  plan.cell = cell;
  if (pts.empty()) {
    plan.labels = Image<int>(1, 1, 1, kUnknownLabel);
    plan.heights = ImageD(1, 1, 1, 0.0);
    return plan;
  }
  double minx = kInf, miny = kInf, maxx = -kInf, maxy = -kInf;
  for (const Point& p : pts) {
    minx = std::min(minx, p.x); maxx = std::max(maxx, p.x);
    miny = std::min(miny, p.y); maxy = std::max(maxy, p.y);
  }
  plan.origin = Vec2(std::floor(minx / cell) * cell,
                     std::floor(miny / cell) * cell);
  int w = int(std::floor((maxx - plan.origin[0]) / cell)) + 1;
  int h = int(std::floor((maxy - plan.origin[1]) / cell)) + 1;
  plan.labels = Image<int>(w, h, 1, kUnknownLabel);
  plan.heights = ImageD(w, h, 1, 0.0);

  std::vector<std::vector<std::pair<int, double>>> cells(size_t(w) * h);
  for (const Point& p : pts) {
    int cx = int(std::floor((p.x - plan.origin[0]) / cell));
    int cy = int(std::floor((p.y - plan.origin[1]) / cell));
    if (cx < 0 || cy < 0 || cx >= w || cy >= h) continue;
    cells[size_t(cy) * w + cx].push_back({p.label, p.z});
  }
  for (int cy = 0; cy < h; ++cy)
    for (int cx = 0; cx < w; ++cx) {
      auto& bucket = cells[size_t(cy) * w + cx];
      if (bucket.empty()) continue;
      std::map<int, int> votes;
      for (const auto& [lab, z] : bucket) ++votes[lab];
      int best = bucket.front().first, best_n = 0;
      for (const auto& [lab, n] : votes)
        if (n > best_n || (n == best_n && lab < best)) { best = lab; best_n = n; }
      plan.labels.at(cx, cy) = best;
      std::vector<double> zs;
      for (const auto& [lab, z] : bucket)
        if (lab == ground_label) zs.push_back(z);
      if (zs.empty())
        for (const auto& [lab, z] : bucket) zs.push_back(z);
      plan.heights.at(cx, cy) = median(zs);
    }
  return plan;
}

bool rectangles_intersect(const Vec2& ca, double yaw_a, const Vec2& ha,
                          const Vec2& cb, double yaw_b, const Vec2& hb) {
  // Separating axis test over both rectangles' edge normals.
  auto axes_of = [](double yaw) {
    return std::array<Vec2, 2>{Vec2(std::cos(yaw), std::sin(yaw)),
                               Vec2(-std::sin(yaw), std::cos(yaw))};
  };
  auto aa = axes_of(yaw_a);
  auto ab = axes_of(yaw_b);
  Vec2 d = cb - ca;
  for (const Vec2& axis : {aa[0], aa[1], ab[0], ab[1]}) {
    double ra = ha[0] * std::abs(axis.dot(aa[0])) +
                ha[1] * std::abs(axis.dot(aa[1]));
    double rb = hb[0] * std::abs(axis.dot(ab[0])) +
                hb[1] * std::abs(axis.dot(ab[1]));
    if (std::abs(axis.dot(d)) > ra + rb) return false;
  }
  return true;
}

std::vector<Placement> sample_placement(const GroundPlan& plan,
                                        const std::vector<int>& valid_labels,
                                        int count, const Vec2& footprint,
                                        uint64_t seed,
                                        const std::vector<Placement>* traces) {
  auto valid = [&](int label) {
    return std::find(valid_labels.begin(), valid_labels.end(), label) !=
           valid_labels.end();
  };
  std::vector<std::pair<int, int>> cells;
  for (int cy = 0; cy < plan.labels.height(); ++cy)
    for (int cx = 0; cx < plan.labels.width(); ++cx)
      if (valid(plan.labels.at(cx, cy))) cells.push_back({cx, cy});
  if (cells.empty()) throw Error("placement: no valid cell in the plan");
  if (traces && traces->empty()) throw Error("placement: empty trace list");

  Vec2 half = footprint * 0.5 + Vec2(0.3, 0.3);  // collision inflation
  Rng rng(seed, 0x9C4E);
  std::vector<Placement> out;
  int64_t attempts = 0, max_attempts = std::max(1000, 1000 * count);
  while (int(out.size()) < count && attempts++ < max_attempts) {
    Placement p;
    int cx, cy;
    if (traces) {
      const Placement& tr = (*traces)[rng.uniform_int(traces->size())];
      p.position = tr.position +
                   Vec3(0.3 * rng.normal(), 0.3 * rng.normal(), 0.0);
      p.yaw = tr.yaw + rng.uniform(-kPi / 6.0, kPi / 6.0);
      if (!plan.cell_of(p.position[0], p.position[1], &cx, &cy)) continue;
      if (!valid(plan.labels.at(cx, cy))) continue;
    } else {
      auto [icx, icy] = cells[rng.uniform_int(cells.size())];
      cx = icx; cy = icy;
      p.position[0] = plan.origin[0] + (cx + rng.uniform()) * plan.cell;
      p.position[1] = plan.origin[1] + (cy + rng.uniform()) * plan.cell;
      p.yaw = rng.uniform(0.0, 2.0 * kPi);
    }
    p.position[2] = plan.heights.at(cx, cy);
    bool collides = false;
    for (const Placement& q : out)
      if (rectangles_intersect(p.position.head<2>(), p.yaw, half,
                               q.position.head<2>(), q.yaw, half)) {
        collides = true;
        break;
      }
    if (!collides) out.push_back(p);
  }
  if (int(out.size()) < count)
    throw Error("placement: rejection sampling exhausted");
  return out;
}

TriangleMesh parse_obj(const std::string& text) {
  TriangleMesh mesh;
  std::istringstream in(text);
  std::string line;
  auto parse_index = [&](const std::string& tok) {
    int idx = std::stoi(tok.substr(0, tok.find('/')));
    if (idx < 0) idx = int(mesh.vertices.size()) + idx;  // relative
    else idx -= 1;
    if (idx < 0 || idx >= int(mesh.vertices.size()))
      throw Error("obj: vertex index out of range");
    return idx;
  };
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string tag;
    if (!(ls >> tag)) continue;
    if (tag == "v") {
      double x, y, z;
      if (!(ls >> x >> y >> z)) throw Error("obj: malformed vertex");
      Vec3 alb(0.7, 0.7, 0.7);
      double r, g, b;
      if (ls >> r >> g >> b) alb = Vec3(r, g, b);
      mesh.vertices.emplace_back(x, y, z);
      mesh.albedo.push_back(alb);
    } else if (tag == "f") {
      std::vector<int> idx;
      std::string tok;
      while (ls >> tok) idx.push_back(parse_index(tok));
      if (idx.size() < 3) throw Error("obj: face needs three vertices");
      for (size_t k = 2; k < idx.size(); ++k)  // fan triangulation
        mesh.triangles.push_back({idx[0], int(idx[k - 1]), idx[k]});
    }
    // vt / vn / comments ignored
  }
  // Drop degenerate triangles.
  std::vector<std::array<int, 3>> kept;
  for (const auto& t : mesh.triangles) {
    Vec3 e1 = mesh.vertices[t[1]] - mesh.vertices[t[0]];
    Vec3 e2 = mesh.vertices[t[2]] - mesh.vertices[t[0]];
    if (e1.cross(e2).norm() > 1e-12) kept.push_back(t);
  }
  mesh.triangles = std::move(kept);
  return mesh;
}

TriangleMesh load_obj(const std::string& path) {
  return parse_obj(read_text(path));
}

std::string to_obj(const TriangleMesh& mesh) {
  std::ostringstream out;
  out.precision(9);
  for (size_t i = 0; i < mesh.vertices.size(); ++i) {
    const Vec3& v = mesh.vertices[i];
    const Vec3& a = mesh.albedo[i];
    out << "v " << v[0] << ' ' << v[1] << ' ' << v[2] << ' ' << a[0] << ' '
        << a[1] << ' ' << a[2] << '\n';
  }
  for (const auto& t : mesh.triangles)
    out << "f " << t[0] + 1 << ' ' << t[1] + 1 << ' ' << t[2] + 1 << '\n';
  return out.str();
}

TriangleMesh transform_mesh(const TriangleMesh& mesh,
                            const RigidTransform& pose) {
  TriangleMesh out = mesh;
  for (Vec3& v : out.vertices) v = pose.apply(v);
  return out;
}

TriangleMesh box_mesh(const Vec3& dim, const Vec3& albedo) {
  TriangleMesh m;
  Vec3 h = dim * 0.5;
  for (int i = 0; i < 8; ++i) {
    m.vertices.emplace_back((i & 1) ? h[0] : -h[0], (i & 2) ? h[1] : -h[1],
                            (i & 4) ? h[2] : -h[2]);
    m.albedo.push_back(albedo);
  }
  const int faces[6][4] = {{0, 1, 3, 2}, {4, 6, 7, 5}, {0, 4, 5, 1},
                           {2, 3, 7, 6}, {0, 2, 6, 4}, {1, 5, 7, 3}};
  for (const auto& f : faces) {
    m.triangles.push_back({f[0], f[1], f[2]});
    m.triangles.push_back({f[0], f[2], f[3]});
  }
  return m;
}

namespace {

bool ray_triangle(const Vec3& o, const Vec3& d, const Vec3& v0, const Vec3& v1,
                  const Vec3& v2, double t_min, double* t_out) {
  Vec3 e1 = v1 - v0, e2 = v2 - v0;
  Vec3 p = d.cross(e2);
  double det = e1.dot(p);
  if (std::abs(det) < 1e-14) return false;
  double inv = 1.0 / det;
  Vec3 s = o - v0;
  double u = s.dot(p) * inv;
  if (u < -1e-12 || u > 1.0 + 1e-12) return false;
  Vec3 q = s.cross(e1);
  double v = d.dot(q) * inv;
  if (v < -1e-12 || u + v > 1.0 + 1e-12) return false;
  double t = e2.dot(q) * inv;
  if (t <= t_min) return false;
  *t_out = t;
  return true;
}

}  // namespace

bool mesh_hit(const TriangleMesh& mesh, const Vec3& origin, const Vec3& dir,
              double t_min, double* t_hit) {
  double best = kInf;
  for (const auto& tri : mesh.triangles) {
    double t;
    if (ray_triangle(origin, dir, mesh.vertices[tri[0]], mesh.vertices[tri[1]],
                     mesh.vertices[tri[2]], t_min, &t))
      best = std::min(best, t);
  }
  if (!std::isfinite(best)) return false;
  if (t_hit) *t_hit = best;
  return true;
}

namespace {

struct GBuf {
  ImageD depth;     // camera-frame z, +inf empty
  Image<int> tri;   // -1 empty
  ImageD bary;      // 3 channels
};

GBuf raster_impl(const TriangleMesh& mesh_cam, const CameraModel& cam) {
  GBuf gb;
  gb.depth = ImageD(cam.width, cam.height, 1, kInf);
  gb.tri = Image<int>(cam.width, cam.height, 1, -1);
  gb.bary = ImageD(cam.width, cam.height, 3, 0.0);
  for (size_t k = 0; k < mesh_cam.triangles.size(); ++k) {
    const auto& tri = mesh_cam.triangles[k];
    Vec3 vc[3];
    Vec2 sp[3];
    bool behind = false;
    for (int i = 0; i < 3; ++i) {
      vc[i] = mesh_cam.vertices[tri[i]];
      if (vc[i][2] < 1e-6) { behind = true; break; }
      sp[i] = Vec2(cam.fx * vc[i][0] / vc[i][2] + cam.cx,
                   cam.fy * vc[i][1] / vc[i][2] + cam.cy);
    }
    if (behind) continue;
    auto edge = [](const Vec2& a, const Vec2& b, const Vec2& q) {
      return (b[0] - a[0]) * (q[1] - a[1]) - (b[1] - a[1]) * (q[0] - a[0]);
    };
    double area = edge(sp[0], sp[1], sp[2]);
    if (std::abs(area) < 1e-12) continue;
    int x0 = std::max(0, int(std::floor(std::min({sp[0][0], sp[1][0], sp[2][0]}))));
    int x1 = std::min(cam.width - 1,
                      int(std::ceil(std::max({sp[0][0], sp[1][0], sp[2][0]}))));
    int y0 = std::max(0, int(std::floor(std::min({sp[0][1], sp[1][1], sp[2][1]}))));
    int y1 = std::min(cam.height - 1,
                      int(std::ceil(std::max({sp[0][1], sp[1][1], sp[2][1]}))));
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) {
        Vec2 q{double(x), double(y)};  // integer coords are pixel centers
        double l0 = edge(sp[1], sp[2], q) / area;
        double l1 = edge(sp[2], sp[0], q) / area;
        double l2 = edge(sp[0], sp[1], q) / area;
        if (l0 < -1e-12 || l1 < -1e-12 || l2 < -1e-12) continue;
        double invz = l0 / vc[0][2] + l1 / vc[1][2] + l2 / vc[2][2];
        double z = 1.0 / invz;
        if (z >= gb.depth.at(x, y)) continue;
        gb.depth.at(x, y) = z;
        gb.tri.at(x, y) = int(k);
        gb.bary.at(x, y, 0) = l0;
        gb.bary.at(x, y, 1) = l1;
        gb.bary.at(x, y, 2) = l2;
      }
  }
  return gb;
}

}  // namespace

RasterResult rasterize_depth(const TriangleMesh& mesh_cam,
                             const CameraModel& cam) {
  GBuf gb = raster_impl(mesh_cam, cam);
  RasterResult out;
  out.depth = std::move(gb.depth);
  out.mask = ImageU8(cam.width, cam.height, 1, 0);
  for (int y = 0; y < cam.height; ++y)
    for (int x = 0; x < cam.width; ++x)
      out.mask.at(x, y) = gb.tri.at(x, y) >= 0 ? 255 : 0;
  return out;
}

ComposedFrame compose_frame(const ImageD& bg_rgb, const ImageD& bg_depth,
                            const Image<int>& bg_semantic, const ImageD& fg_rgb,
                            const ImageU8& fg_mask, const ImageD& fg_depth,
                            const TriangleMesh& mesh_object,
                            const Placement& place, int fg_class,
                            const std::string& fg_label, int instance_id) {
  int w = bg_rgb.width(), h = bg_rgb.height();
  ComposedFrame out;
  out.rgb = bg_rgb;
  out.depth = bg_depth;
  out.semantic = bg_semantic;

  ImageU8 occluded(w, h, 1, 0);  // effective mask
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      occluded.at(x, y) =
          fg_mask.at(x, y) && fg_depth.at(x, y) < bg_depth.at(x, y) ? 255 : 0;

  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (!occluded.at(x, y)) continue;
      bool boundary = x == 0 || y == 0 || x == w - 1 || y == h - 1 ||
                      !occluded.at(x - 1, y) || !occluded.at(x + 1, y) ||
                      !occluded.at(x, y - 1) || !occluded.at(x, y + 1);
      double a = boundary ? 0.5 : 1.0;  // 1 px feather
      for (int c = 0; c < 3; ++c)
        out.rgb.at(x, y, c) =
            a * fg_rgb.at(x, y, c) + (1.0 - a) * bg_rgb.at(x, y, c);
      out.depth.at(x, y) = fg_depth.at(x, y);
      out.semantic.at(x, y) = fg_class;
    }
  out.instance_masks[instance_id] = std::move(occluded);

  Vec3 lo = Vec3::Constant(kInf), hi = Vec3::Constant(-kInf);
  for (const Vec3& v : mesh_object.vertices) {
    lo = lo.cwiseMin(v);
    hi = hi.cwiseMax(v);
  }
  BoxAnnotation ann;
  ann.label = fg_label;
  ann.dim = hi - lo;
  ann.center = place.position + yaw_rotation(place.yaw) * (0.5 * (lo + hi));
  ann.yaw = place.yaw;
  out.boxes.push_back(ann);
  return out;
}

std::string annotations_json(const ComposedFrame& frame,
                             const std::vector<std::string>& mask_paths) {
  nlohmann::json boxes = nlohmann::json::array();
  for (const auto& b : frame.boxes)
    boxes.push_back({{"class", b.label},
                     {"center", {b.center[0], b.center[1], b.center[2]}},
                     {"dim", {b.dim[0], b.dim[1], b.dim[2]}},
                     {"yaw", b.yaw}});
  nlohmann::json doc = {{"boxes", boxes}, {"masks", mask_paths}};
  return doc.dump(2) + "\n";
}

ImageD naive_shadow_mask(const TriangleMesh& mesh_world, const Vec3& light_dir,
                         double ground_z, const CameraModel& cam) {
  if (light_dir[2] >= -1e-9)
    throw Error("shadow: light direction must point downward");
  ImageU8 coarse(cam.width, cam.height, 1, 0);
  for (const Vec3& v : mesh_world.vertices) {
    double t = (ground_z - v[2]) / light_dir[2];
    if (t < 0) continue;
    Vec3 g = v + t * light_dir;
    auto px = project(g, cam);
    if (!px) continue;
    int x = int(std::lround(px->x)), y = int(std::lround(px->y));
    if (coarse.contains(x, y)) coarse.at(x, y) = 255;
  }
  // Morphological closing with a disk of radius 3, then Gaussian blur.
  const int r = 3;
  std::vector<std::pair<int, int>> disk;
  for (int dy = -r; dy <= r; ++dy)
    for (int dx = -r; dx <= r; ++dx)
      if (dx * dx + dy * dy <= r * r) disk.push_back({dx, dy});
  auto morph = [&](const ImageU8& src, bool dilate) {
    ImageU8 dst(src.width(), src.height(), 1, 0);
    for (int y = 0; y < src.height(); ++y)
      for (int x = 0; x < src.width(); ++x) {
        bool acc = !dilate;
        for (const auto& [dx, dy] : disk) {
          bool v = src.contains(x + dx, y + dy) ? src.at(x + dx, y + dy) != 0
                                                : false;
          acc = dilate ? (acc || v) : (acc && v);
          if (dilate == acc) break;
        }
        dst.at(x, y) = acc ? 255 : 0;
      }
    return dst;
  };
  ImageU8 closed = morph(morph(coarse, true), false);
  ImageD mask(cam.width, cam.height, 1, 0.0);
  for (int y = 0; y < cam.height; ++y)
    for (int x = 0; x < cam.width; ++x)
      mask.at(x, y) = closed.at(x, y) ? 1.0 : 0.0;
  return gaussian_blur(mask, 2.0);
}

void apply_shadow(ImageD* rgb, const ImageD& shadow, const ImageU8* exclude) {
  for (int y = 0; y < rgb->height(); ++y)
    for (int x = 0; x < rgb->width(); ++x) {
      if (exclude && exclude->at(x, y)) continue;
      double f = 1.0 - 0.5 * shadow.at(x, y);
      for (int c = 0; c < rgb->channels(); ++c) rgb->at(x, y, c) *= f;
    }
}

EnvMap EnvMap::make(int n, Rng& rng) {
  EnvMap env;
  env.params = VecX::Zero(8 * n);
  for (int i = 0; i < n; ++i) {
    double* g = env.params.data() + 8 * i;
    g[0] = rng.uniform(-1.2, 1.2);          // lat
    g[1] = rng.uniform(-kPi, kPi);          // lon
    g[2] = rng.uniform(0.2, 1.0);           // c
    g[3] = rng.uniform(0.2, 1.0);
    g[4] = rng.uniform(0.2, 1.0);
    g[5] = rng.uniform(0.5, 1.5);           // alpha
    g[6] = rng.uniform(0.2, 0.8);           // s
    g[7] = rng.uniform(0.2, 0.8);
  }
  return env;
}

EnvMap EnvMap::constant(const Vec3& radiance) {
  EnvMap env;
  env.params = VecX::Zero(8);
  env.params[2] = radiance[0];
  env.params[3] = radiance[1];
  env.params[4] = radiance[2];
  env.params[5] = 1.0;
  env.params[6] = env.params[7] = 100.0;  // effectively uniform
  return env;
}

namespace {

inline Vec2 latlong(const Vec3& dir) {
  double z = std::min(1.0, std::max(-1.0, dir[2]));
  return Vec2(std::asin(z), std::atan2(dir[1], dir[0]));
}

}  // namespace

Vec3 envmap_eval(const EnvMap& env, const Vec3& dir) {
  Vec2 ll = latlong(dir);
  Vec3 sum = Vec3::Zero();
  for (int i = 0; i < env.count(); ++i) {
    const double* g = env.params.data() + 8 * i;
    double dlat = ll[0] - g[0];
    double dlon = angle_diff(ll[1], g[1]);
    double s1 = g[6] * g[6] + 1e-6, s2 = g[7] * g[7] + 1e-6;
    double e = std::exp(-0.5 * (dlat * dlat / s1 + dlon * dlon / s2));
    sum += g[5] * e * Vec3(g[2], g[3], g[4]);
  }
  return sum.cwiseMax(0.0);
}

void envmap_eval_backward(const EnvMap& env, const Vec3& dir,
                          const Vec3& d_radiance, VecX* grad) {
  Vec2 ll = latlong(dir);
  // Channels clamped at zero get no gradient.
  Vec3 raw = Vec3::Zero();
  for (int i = 0; i < env.count(); ++i) {
    const double* g = env.params.data() + 8 * i;
    double dlat = ll[0] - g[0];
    double dlon = angle_diff(ll[1], g[1]);
    double s1 = g[6] * g[6] + 1e-6, s2 = g[7] * g[7] + 1e-6;
    double e = std::exp(-0.5 * (dlat * dlat / s1 + dlon * dlon / s2));
    raw += g[5] * e * Vec3(g[2], g[3], g[4]);
  }
  Vec3 d = d_radiance;
  for (int c = 0; c < 3; ++c)
    if (raw[c] < 0) d[c] = 0;
  for (int i = 0; i < env.count(); ++i) {
    const double* g = env.params.data() + 8 * i;
    double* dg = grad->data() + 8 * i;
    double dlat = ll[0] - g[0];
    double dlon = angle_diff(ll[1], g[1]);
    double s1 = g[6] * g[6] + 1e-6, s2 = g[7] * g[7] + 1e-6;
    double e = std::exp(-0.5 * (dlat * dlat / s1 + dlon * dlon / s2));
    double cdot = g[2] * d[0] + g[3] * d[1] + g[4] * d[2];
    double d_e = g[5] * cdot;                    // through the exponential
    dg[2] += g[5] * e * d[0];
    dg[3] += g[5] * e * d[1];
    dg[4] += g[5] * e * d[2];
    dg[5] += e * cdot;
    dg[0] += d_e * e * dlat / s1;                // d dlat/d lat_i = -1
    dg[1] += d_e * e * dlon / s2;
    dg[6] += d_e * e * (dlat * dlat / (s1 * s1)) * g[6];
    dg[7] += d_e * e * (dlon * dlon / (s2 * s2)) * g[7];
  }
}

double shadow_intensity(const Vec3& x, const TriangleMesh& mesh_world,
                        const EnvMap& light, int rays, uint64_t seed) {
  if (mesh_world.triangles.empty()) return 1.0;
  auto dirs = hemisphere_directions(rays, seed);
  double num = 0, den = 0;
  for (const Vec3& d : dirs) {
    double lum = envmap_eval(light, d).mean();
    double wc = lum * d[2];  // |omega . up|
    den += wc;
    if (!mesh_hit(mesh_world, x + 1e-4 * d, d)) num += wc;
  }
  return den > 0 ? num / den : 1.0;
}

ImageD intensity_map(const ImageD& bg_depth, const CameraModel& cam,
                     const TriangleMesh& mesh_world, const EnvMap& light,
                     int rays, uint64_t seed) {
  ImageD out(bg_depth.width(), bg_depth.height(), 1, 1.0);
  for (int y = 0; y < bg_depth.height(); ++y)
    for (int x = 0; x < bg_depth.width(); ++x) {
      double d = bg_depth.at(x, y);
      if (!std::isfinite(d) || d <= 0 || d > 1e3) continue;
      Vec3 p = unproject({double(x), double(y), d}, cam);
      out.at(x, y) = shadow_intensity(p, mesh_world, light, rays, seed);
    }
  return out;
}

namespace {

// Cached per-pixel shading geometry for the Lambertian integral.
struct ShadePoint {
  int x, y;
  Vec3 albedo;
  std::vector<Vec3> world_dirs;   // hemisphere about the surface normal
  std::vector<double> weight;     // 2 cos(theta) / rays
};

std::vector<ShadePoint> shade_points(const TriangleMesh& mesh_world,
                                     const CameraModel& cam, int rays,
                                     uint64_t seed, GBuf* gb_out) {
  RigidTransform cam_pose = cam.refined_pose();
  TriangleMesh mesh_cam = transform_mesh(mesh_world, cam_pose.inverse());
  GBuf gb = raster_impl(mesh_cam, cam);
  auto dirs = hemisphere_directions(rays, seed);
  std::vector<ShadePoint> pts;
  for (int y = 0; y < cam.height; ++y)
    for (int x = 0; x < cam.width; ++x) {
      int k = gb.tri.at(x, y);
      if (k < 0) continue;
      const auto& tri = mesh_cam.triangles[k];
      Vec3 v0 = mesh_cam.vertices[tri[0]];
      Vec3 v1 = mesh_cam.vertices[tri[1]];
      Vec3 v2 = mesh_cam.vertices[tri[2]];
      double z = gb.depth.at(x, y);
      Vec3 pos((x - cam.cx) / cam.fx * z, (y - cam.cy) / cam.fy * z, z);
      Vec3 n = (v1 - v0).cross(v2 - v0).normalized();
      if (n.dot(pos) > 0) n = -n;  // face the camera
      // Perspective-correct per-vertex albedo.
      double l[3] = {gb.bary.at(x, y, 0), gb.bary.at(x, y, 1),
                     gb.bary.at(x, y, 2)};
      double iz[3] = {1.0 / v0[2], 1.0 / v1[2], 1.0 / v2[2]};
      double wsum = l[0] * iz[0] + l[1] * iz[1] + l[2] * iz[2];
      Vec3 alb = (l[0] * iz[0] * mesh_world.albedo[tri[0]] +
                  l[1] * iz[1] * mesh_world.albedo[tri[1]] +
                  l[2] * iz[2] * mesh_world.albedo[tri[2]]) /
                 wsum;
      Vec3 b0 = n.unitOrthogonal();
      Vec3 b1 = n.cross(b0);
      ShadePoint sp;
      sp.x = x;
      sp.y = y;
      sp.albedo = alb;
      sp.world_dirs.reserve(dirs.size());
      sp.weight.reserve(dirs.size());
      for (const Vec3& d : dirs) {
        Vec3 local = d[0] * b0 + d[1] * b1 + d[2] * n;
        sp.world_dirs.push_back(cam_pose.R * local);
        sp.weight.push_back(2.0 * d[2] / double(rays));
      }
      pts.push_back(std::move(sp));
    }
  if (gb_out) *gb_out = std::move(gb);
  return pts;
}

}  // namespace

RelightResult relight_object(const TriangleMesh& mesh_world, const EnvMap& env,
                             const CameraModel& cam, int rays, uint64_t seed) {
  GBuf gb;
  auto pts = shade_points(mesh_world, cam, rays, seed, &gb);
  RelightResult out;
  out.rgb = ImageD(cam.width, cam.height, 3, 0.0);
  out.mask = ImageU8(cam.width, cam.height, 1, 0);
  out.depth = std::move(gb.depth);
  for (const ShadePoint& sp : pts) {
    Vec3 acc = Vec3::Zero();
    for (size_t r = 0; r < sp.world_dirs.size(); ++r)
      acc += sp.weight[r] * envmap_eval(env, sp.world_dirs[r]);
    Vec3 rgb = sp.albedo.cwiseProduct(acc);
    for (int c = 0; c < 3; ++c) out.rgb.at(sp.x, sp.y, c) = rgb[c];
    out.mask.at(sp.x, sp.y) = 255;
  }
  return out;
}

ImageD composed_pbr(const ImageD& bg_rgb, const ImageD& fg_rgb,
                    const ImageU8& fg_mask, const ImageD& intensity) {
  ImageD out(bg_rgb.width(), bg_rgb.height(), 3, 0.0);
  for (int y = 0; y < out.height(); ++y)
    for (int x = 0; x < out.width(); ++x) {
      double m = fg_mask.at(x, y) ? 1.0 : 0.0;
      double it = intensity.at(x, y);
      for (int c = 0; c < 3; ++c)
        out.at(x, y, c) =
            bg_rgb.at(x, y, c) * it * (1.0 - m) + fg_rgb.at(x, y, c) * m;
    }
  return out;
}

LightOptReport optimize_lighting(const ImageD& bg_rgb,
                                 const TriangleMesh& mesh_world, EnvMap* l_sun,
                                 EnvMap* l_comp, const ImageD& reference,
                                 const CameraModel& cam, int steps,
                                 double peak_lr, int rays, uint64_t seed) {
  auto pts = shade_points(mesh_world, cam, rays, seed, nullptr);
  size_t ns = l_sun->params.size(), nc = l_comp->params.size();
  double n_px = double(bg_rgb.size());

  // Adam with cosine decay over the Gaussian parameters of both maps.
  VecX theta(ns + nc), m = VecX::Zero(ns + nc), v = VecX::Zero(ns + nc);
  theta.head(ns) = l_sun->params;
  theta.tail(nc) = l_comp->params;

  LightOptReport rep;
  for (int step = 0; step < steps; ++step) {
    l_sun->params = theta.head(ns);
    l_comp->params = theta.tail(nc);
    VecX grad = VecX::Zero(ns + nc);
    // Background pixels are untouched by the maps (intensity handled by the
    // caller), so the photometric signal and gradient come from the object.
    ImageD composed = bg_rgb;
    for (const ShadePoint& sp : pts) {
      Vec3 acc = Vec3::Zero();
      for (size_t r = 0; r < sp.world_dirs.size(); ++r) {
        acc += sp.weight[r] * (envmap_eval(*l_sun, sp.world_dirs[r]) +
                               envmap_eval(*l_comp, sp.world_dirs[r]));
      }
      Vec3 rgb = sp.albedo.cwiseProduct(acc);
      for (int c = 0; c < 3; ++c) composed.at(sp.x, sp.y, c) = rgb[c];
    }
    double loss = 0;
    for (int y = 0; y < bg_rgb.height(); ++y)
      for (int x = 0; x < bg_rgb.width(); ++x)
        for (int c = 0; c < 3; ++c)
          loss += sqr(composed.at(x, y, c) - reference.at(x, y, c));
    for (const ShadePoint& sp : pts) {
      Vec3 err;
      for (int c = 0; c < 3; ++c)
        err[c] = composed.at(sp.x, sp.y, c) - reference.at(sp.x, sp.y, c);
      Vec3 d_rgb = (2.0 / n_px) * err;
      Vec3 d_acc = sp.albedo.cwiseProduct(d_rgb);
      for (size_t r = 0; r < sp.world_dirs.size(); ++r) {
        Vec3 d_rad = sp.weight[r] * d_acc;
        VecX gs = VecX::Zero(ns);
        VecX gc = VecX::Zero(nc);
        envmap_eval_backward(*l_sun, sp.world_dirs[r], d_rad, &gs);
        envmap_eval_backward(*l_comp, sp.world_dirs[r], d_rad, &gc);
        grad.head(ns) += gs;
        grad.tail(nc) += gc;
      }
    }
    loss /= n_px;
    rep.loss.push_back(loss);
    // near machine zero the ratio test is pure jitter, hence the floor
    double floor = std::max(1e-10, 1e-4 * rep.loss.front());
    if (step >= 100 && loss > floor && loss > 10.0 * rep.loss[step - 100]) {
      rep.aborted = true;
      break;
    }
    double lr = peak_lr * 0.5 *
                (1.0 + std::cos(kPi * double(step) / std::max(1, steps)));
    double bc1 = 1.0 - std::pow(0.9, step + 1);
    double bc2 = 1.0 - std::pow(0.99, step + 1);
    for (int i = 0; i < theta.size(); ++i) {
      m[i] = 0.9 * m[i] + 0.1 * grad[i];
      v[i] = 0.99 * v[i] + 0.01 * grad[i] * grad[i];
      theta[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + 1e-8);
    }
  }
  l_sun->params = theta.head(ns);
  l_comp->params = theta.tail(nc);
  return rep;
}

}  // namespace nerfsim
