#include "nerfsim/training.h"

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstring>
#include <numeric>

#include "nerfsim/io.h"
#include "nerfsim/threading.h"

namespace nerfsim {

namespace {

double sgn(double x) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); }

VecX softmax_vec(const VecX& z) {
  VecX out = z;
  double mx = z.maxCoeff();
  double sum = 0;
  for (int i = 0; i < z.size(); ++i) {
    out[i] = std::exp(z[i] - mx);
    sum += out[i];
  }
  return out / sum;
}

// Semantic distribution with the weights and encoder features pinned to the
// snapshot; only the semantic heads stay live, matching the stop-gradient
// boundary of the backward pass.
VecX frozen_semantics(const Scene& scene, const RaySnapshot& snap,
                      int classes) {
  VecX p = VecX::Zero(classes);
  for (size_t i = 0; i < snap.sem_feat.size(); ++i) {
    if (snap.sem_feat[i].size() == 0) continue;
    const RadianceField* f = snap.sem_object[i] >= 0
                                 ? scene.object_field(snap.sem_object[i])
                                 : scene.background.get();
    VecX logits = f->semantic_logits(scene.tape, snap.sem_feat[i]);
    if (logits.size() == classes)
      p += snap.final_weights[i] * softmax_vec(logits);
  }
  return p;
}

}  // namespace

double distortion_loss(const RaySamples& samples, const std::vector<double>& w,
                       std::vector<double>* d_w) {
  int n = int(w.size());
  double loss = 0;
  for (int i = 0; i < n; ++i) {
    double acc = 0;  // sum_j w_j |m_i - m_j|
    for (int j = 0; j < n; ++j)
      acc += w[j] * std::abs(samples.s_mid(i) - samples.s_mid(j));
    loss += w[i] * acc + (1.0 / 3.0) * w[i] * w[i] * samples.s_delta(i);
    if (d_w) (*d_w)[i] += 2.0 * acc + (2.0 / 3.0) * w[i] * samples.s_delta(i);
  }
  return loss;
}

double bound_penalty(const RaySamples& coarse,
                     const std::vector<double>& w_coarse,
                     const RaySamples& fine, const std::vector<double>& w_fine,
                     std::vector<double>* d_coarse) {
  int nc = int(w_coarse.size());
  int nf = int(w_fine.size());
  // Bin the fine histogram onto the coarse intervals, splitting each fine
  // weight proportionally to overlap so equal histograms bin to themselves.
  std::vector<double> binned(nc, 0.0);
  int p = 0;
  for (int f = 0; f < nf; ++f) {
    double a = fine.s_edges[f], b = fine.s_edges[f + 1];
    double width = b - a;
    while (p > 0 && coarse.s_edges[p] > a) --p;
    while (p + 1 < nc && coarse.s_edges[p + 1] <= a) ++p;
    if (width <= 1e-15) {
      binned[p] += w_fine[f];
      continue;
    }
    for (int q = p; q < nc && coarse.s_edges[q] < b; ++q) {
      double lo = std::max(a, coarse.s_edges[q]);
      double hi = std::min(b, coarse.s_edges[q + 1]);
      if (hi > lo) binned[q] += w_fine[f] * (hi - lo) / width;
    }
  }
  double loss = 0;
  for (int q = 0; q < nc; ++q) {
    double e = binned[q] - w_coarse[q];
    if (e <= 0) continue;
    // Normalizing by the (detached) target keeps the penalty and its
    // gradient bounded by the target mass even for empty coarse bins.
    double den = binned[q] + 1e-6;
    loss += e * e / den;
    if (d_coarse) (*d_coarse)[q] += -2.0 * e / den;
  }
  return loss;
}

LossBreakdown supervision_loss(const RayTarget& target,
                               const RenderOutput& render, const VecX& mix,
                               const LossWeights& w, double ray_scale,
                               double lidar_scale, RayGrad* d, VecX* d_mix) {
  LossBreakdown b;

  Vec3 err = render.color - target.color;
  b.rgb = (std::abs(err[0]) + std::abs(err[1]) + std::abs(err[2])) / 3.0;
  if (d)
    for (int c = 0; c < 3; ++c)
      d->d_color[c] += ray_scale * sgn(err[c]) / 3.0;

  double chat = 1.0;
  if (target.conf.size() > 0) chat = mix.dot(target.conf);
  double derr = render.disparity - target.disparity;
  b.depth = chat * std::abs(derr);
  if (d) d->d_disparity += ray_scale * w.depth * chat * sgn(derr);
  if (d_mix && target.conf.size() > 0)
    *d_mix += (ray_scale * w.depth * std::abs(derr)) * target.conf;

  if (target.has_lidar) {
    double lerr = render.disparity - target.lidar_disparity;
    b.lidar = std::abs(lerr);
    if (d) d->d_disparity += lidar_scale * w.lidar * sgn(lerr);
  }

  if (target.sem_class >= 0 && render.semantics.size() > 0) {
    double p = std::max(render.semantics[target.sem_class], 1e-12);
    b.semantic = -std::log(p);
    if (d) {
      if (d->d_semantics.size() == 0)
        d->d_semantics = VecX::Zero(render.semantics.size());
      d->d_semantics[target.sem_class] += ray_scale * w.semantic * (-1.0 / p);
    }
  }
  return b;
}

LossBreakdown compute_loss(const Scene& scene, const TrainBatch& batch,
                           const LossWeights& w, uint64_t seed, int threads,
                           double* grad, const std::vector<RaySnapshot>* frozen,
                           std::vector<RaySnapshot>* frozen_out) {
  int n_rays = int(batch.rays.size());
  LossBreakdown total;
  if (n_rays == 0) return total;
  int n_lidar = 0;
  for (const auto& r : batch.rays) n_lidar += r.has_lidar ? 1 : 0;
  double rs = 1.0 / n_rays;
  double ls = 1.0 / std::max(1, n_lidar);
  int n_pairs = 4 * int(batch.patches.size());
  double ps = 1.0 / std::max(1, n_pairs);
  if (frozen_out) frozen_out->resize(n_rays);

  VecX mix = softmax_vec(scene.omega());

  // Work units: each 2x2 patch is one unit (its rays couple through the
  // smoothness term), remaining rays are singletons.
  std::vector<char> in_patch(n_rays, 0);
  for (const auto& p : batch.patches)
    for (int id : p) in_patch[id] = 1;
  std::vector<std::vector<int>> units;
  for (const auto& p : batch.patches)
    units.push_back({p[0], p[1], p[2], p[3]});
  for (int i = 0; i < n_rays; ++i)
    if (!in_patch[i]) units.push_back({i});

  int workers = std::max(1, threads);
  std::vector<std::vector<double>> wgrad(workers);
  std::vector<VecX> wmix(workers, VecX::Zero(5));
  std::vector<LossBreakdown> wloss(workers);

  parallel_for(int64_t(units.size()), threads,
               [&](int64_t ub, int64_t ue, int wk) {
    if (grad) wgrad[wk].assign(scene.tape.size(), 0.0);
    LossBreakdown& acc = wloss[wk];
    for (int64_t u = ub; u < ue; ++u) {
      const auto& unit = units[u];
      std::vector<RayRecord> recs(unit.size());
      std::vector<RayGrad> gs(unit.size());
      for (size_t k = 0; k < unit.size(); ++k) {
        int id = unit[k];
        const RayTarget& t = batch.rays[id];
        uint64_t rseed = Rng(seed, 0x600000 + uint64_t(id)).next_u64();
        const RaySnapshot* snap =
            frozen && (*frozen)[id].valid ? &(*frozen)[id] : nullptr;
        RenderOutput out =
            render_pixel(scene, t.cam_index, t.px, t.py, t.time, rseed,
                         &recs[k], snap ? &snap->frozen : nullptr);
        if (snap && out.semantics.size() > 0)
          out.semantics =
              frozen_semantics(scene, *snap, int(out.semantics.size()));
        if (frozen_out) {
          RaySnapshot& s = (*frozen_out)[id];
          s.frozen = recs[k].frozen();
          s.stage1_weights = recs[k].stages[1].weights;
          s.final_weights = recs[k].weights;
          s.sem_object.resize(recs[k].back.size());
          s.sem_feat.resize(recs[k].back.size());
          for (size_t i = 0; i < recs[k].back.size(); ++i) {
            s.sem_object[i] = recs[k].back[i].object_id;
            s.sem_feat[i] = recs[k].back[i].sem_logits.size()
                                ? recs[k].back[i].rec.feat
                                : VecX();
          }
          s.valid = true;
        }

        RayGrad& g = gs[k];
        g.d_weights.assign(out.weights.size(), 0.0);
        for (int st = 0; st < 2; ++st)
          g.d_stage_weights[st].assign(recs[k].stages[st].weights.size(), 0.0);

        LossBreakdown b = supervision_loss(t, out, mix, w, rs, ls,
                                           grad ? &g : nullptr,
                                           grad ? &wmix[wk] : nullptr);
        acc.rgb += rs * b.rgb;
        acc.depth += rs * b.depth;
        acc.lidar += ls * b.lidar;
        acc.semantic += rs * b.semantic;

        std::vector<double> dw(out.weights.size(), 0.0);
        acc.distortion += rs * distortion_loss(recs[k].samples, recs[k].weights,
                                               grad ? &dw : nullptr);
        if (grad)
          for (size_t i = 0; i < dw.size(); ++i)
            g.d_weights[i] += rs * w.distortion * dw[i];

        // The bound targets (next stage's histogram) are detached; a frozen
        // evaluation reuses the snapshot values so only the bounding side of
        // the penalty responds to parameter perturbations.
        const std::vector<double>& tgt1 =
            snap ? snap->stage1_weights : recs[k].stages[1].weights;
        const std::vector<double>& tgtf = snap ? snap->final_weights
                                               : recs[k].weights;
        std::vector<double> d0(g.d_stage_weights[0].size(), 0.0);
        std::vector<double> d1(g.d_stage_weights[1].size(), 0.0);
        double bp = bound_penalty(recs[k].stages[0].samples,
                                  recs[k].stages[0].weights,
                                  recs[k].stages[1].samples, tgt1,
                                  grad ? &d0 : nullptr);
        bp += bound_penalty(recs[k].stages[1].samples,
                            recs[k].stages[1].weights, recs[k].samples, tgtf,
                            grad ? &d1 : nullptr);
        acc.proposal_bound += rs * bp;
        if (grad) {
          for (size_t i = 0; i < d0.size(); ++i)
            g.d_stage_weights[0][i] += rs * w.proposal_bound * d0[i];
          for (size_t i = 0; i < d1.size(); ++i)
            g.d_stage_weights[1][i] += rs * w.proposal_bound * d1[i];
        }
      }

      if (unit.size() == 4) {
        // Pairs: two horizontal, two vertical.
        const int pairs[4][2] = {{0, 1}, {2, 3}, {0, 2}, {1, 3}};
        for (const auto& pr : pairs) {
          int a = pr[0], bq = pr[1];
          const RayTarget& ta = batch.rays[unit[a]];
          const RayTarget& tb = batch.rays[unit[bq]];
          double edge = std::exp(-(ta.color - tb.color).cwiseAbs().mean());
          double dd = recs[a].out.disparity - recs[bq].out.disparity;
          acc.smoothness += ps * std::abs(dd) * edge;
          if (grad) {
            double gsm = ps * w.smoothness * sgn(dd) * edge;
            gs[a].d_disparity += gsm;
            gs[bq].d_disparity -= gsm;
          }
        }
      }

      if (grad)
        for (size_t k = 0; k < unit.size(); ++k)
          render_ray_backward(scene, recs[k], gs[k], wgrad[wk].data());
    }
  });

  VecX d_mix = VecX::Zero(5);
  for (int wk = 0; wk < workers; ++wk) {
    const LossBreakdown& b = wloss[wk];
    total.rgb += b.rgb;
    total.depth += b.depth;
    total.lidar += b.lidar;
    total.semantic += b.semantic;
    total.distortion += b.distortion;
    total.proposal_bound += b.proposal_bound;
    total.smoothness += b.smoothness;
    d_mix += wmix[wk];
    if (grad && !wgrad[wk].empty())
      for (size_t i = 0; i < wgrad[wk].size(); ++i) grad[i] += wgrad[wk][i];
  }
  if (grad) {
    // Chain the mixture-probability gradient through the softmax.
    double dot = mix.dot(d_mix);
    size_t off = scene.omega_offset();
    for (int j = 0; j < 5; ++j) grad[off + j] += mix[j] * (d_mix[j] - dot);
  }
  return total;
}

Adam::Adam(const ParamTape& tape, const OptimConfig& cfg)
    : cfg_(cfg), m_(tape.size(), 0.0), v_(tape.size(), 0.0) {}

double Adam::schedule() const {
  int d = std::max(1, cfg_.decay_steps);
  double u = std::min(t_, d) / double(d);
  return 0.5 * (1.0 + std::cos(kPi * u));
}

double Adam::lr_for(ParamCategory cat) const {
  switch (cat) {
    case ParamCategory::Grid: return cfg_.lr_grid;
    case ParamCategory::Mlp: return cfg_.lr_mlp;
    case ParamCategory::Omega: return cfg_.lr_omega;
    case ParamCategory::Pose: return cfg_.lr_pose;
    case ParamCategory::Track: return cfg_.lr_track;
    case ParamCategory::EnvMap: return cfg_.lr_env;
  }
  return 0.0;
}

void Adam::step(ParamTape& tape) {
  double decay = schedule();
  ++t_;
  double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
  double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
  for (const auto& g : tape.groups) {
    double lr = lr_for(g.category) * decay;
    for (size_t i = g.offset; i < g.offset + g.size; ++i) {
      double gr = tape.grads[i];
      m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * gr;
      v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * gr * gr;
      double mhat = m_[i] / bc1;
      double vhat = v_[i] / bc2;
      tape.values[i] -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
  }
}

StepReport train_step(Scene& scene, const TrainBatch& batch,
                      const LossWeights& w, Adam& opt, uint64_t seed,
                      int threads) {
  StepReport rep;
  scene.tape.zero_grad();
  rep.loss = compute_loss(scene, batch, w, seed, threads,
                          scene.tape.grads.data());
  rep.total = rep.loss.total(w);
  if (!std::isfinite(rep.total)) {
    rep.applied = false;
    return rep;
  }
  opt.step(scene.tape);
  scene.sync_from_tape();
  rep.applied = true;
  return rep;
}

void save_checkpoint(const std::string& path, const ParamTape& tape) {
  nlohmann::json groups = nlohmann::json::array();
  for (const auto& g : tape.groups)
    groups.push_back({{"name", g.name},
                      {"category", int(g.category)},
                      {"offset", g.offset},
                      {"size", g.size}});
  nlohmann::json head = {{"format", "nerfsim-tape-1"},
                         {"count", tape.values.size()},
                         {"groups", groups}};
  std::string blob = head.dump() + "\n";
  size_t bytes = tape.values.size() * sizeof(double);
  size_t base = blob.size();
  blob.resize(base + bytes);
  std::memcpy(blob.data() + base, tape.values.data(), bytes);
  write_text_atomic(path, blob);
}

void load_checkpoint(const std::string& path, ParamTape& tape) {
  std::string blob = read_text(path);
  size_t nl = blob.find('\n');
  if (nl == std::string::npos) throw Error("checkpoint: missing header");
  nlohmann::json head = nlohmann::json::parse(blob.substr(0, nl));
  if (head.value("format", "") != std::string("nerfsim-tape-1"))
    throw Error("checkpoint: unknown format");
  if (head.at("count").get<size_t>() != tape.values.size())
    throw Error("checkpoint: parameter count mismatch");
  const auto& groups = head.at("groups");
  if (groups.size() != tape.groups.size())
    throw Error("checkpoint: group table mismatch");
  for (size_t i = 0; i < tape.groups.size(); ++i) {
    const auto& g = groups[i];
    if (g.at("name").get<std::string>() != tape.groups[i].name ||
        g.at("offset").get<size_t>() != tape.groups[i].offset ||
        g.at("size").get<size_t>() != tape.groups[i].size)
      throw Error("checkpoint: group table mismatch at " + tape.groups[i].name);
  }
  size_t bytes = tape.values.size() * sizeof(double);
  if (blob.size() - nl - 1 != bytes)
    throw Error("checkpoint: payload size mismatch");
  std::memcpy(tape.values.data(), blob.data() + nl + 1, bytes);
}

}  // namespace nerfsim
