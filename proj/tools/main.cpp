// Command line front end: dataset synthesis, training, rendering,
// confidence maps, composition, relighting, and metric evaluation.

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <cstdio>
#include <filesystem>

#include "nerfsim/composition.h"
#include "nerfsim/harness.h"
#include "nerfsim/io.h"

using namespace nerfsim;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

json load_config(const std::string& path) {
  if (path.empty()) return json::object();
  return json::parse(read_text(path));
}

template <typename T>
T cfg_get(const json& cfg, const std::string& key, T fallback) {
  if (cfg.contains(key)) return cfg.at(key).get<T>();
  return fallback;
}

SceneConfig scene_config(const json& cfg, int sem_classes) {
  json sc = cfg.value("scene", json::object());
  SceneConfig out;
  out.background.levels = cfg_get(sc, "levels", 6);
  out.background.base_resolution = cfg_get(sc, "base_resolution", 16);
  out.background.growth = cfg_get(sc, "growth", 1.5);
  out.background.features = cfg_get(sc, "features", 2);
  out.background.hidden = cfg_get(sc, "hidden", 32);
  out.background.hidden_layers = cfg_get(sc, "hidden_layers", 2);
  out.background.color_hidden = cfg_get(sc, "color_hidden", 16);
  out.background.sem_classes = sem_classes;
  out.background.sem_hidden = cfg_get(sc, "sem_hidden", 16);
  out.object = out.background;
  out.object.levels = cfg_get(sc, "object_levels", 4);
  out.object.base_resolution = cfg_get(sc, "object_base_resolution", 8);
  out.proposal = out.background;
  out.proposal.sem_classes = 0;
  out.proposal.levels = cfg_get(sc, "proposal_levels", 4);
  out.proposal.hidden = cfg_get(sc, "proposal_hidden", 16);
  out.proposal.proposal_hidden = cfg_get(sc, "proposal_hidden", 16);
  out.proposal_samples = cfg_get(sc, "proposal_samples", 32);
  out.final_samples = cfg_get(sc, "final_samples", 16);
  out.t_near = cfg_get(sc, "t_near", 0.2);
  out.t_far = cfg_get(sc, "t_far", 60.0);
  out.scene_radius = cfg_get(sc, "scene_radius", 10.0);
  return out;
}

OptimConfig optim_config(const json& cfg, int steps) {
  json oc = cfg.value("optim", json::object());
  OptimConfig out;
  out.lr_grid = cfg_get(oc, "lr_grid", out.lr_grid);
  out.lr_mlp = cfg_get(oc, "lr_mlp", out.lr_mlp);
  out.lr_pose = cfg_get(oc, "lr_pose", out.lr_pose);
  out.lr_track = cfg_get(oc, "lr_track", out.lr_track);
  out.lr_omega = cfg_get(oc, "lr_omega", out.lr_omega);
  out.lr_env = cfg_get(oc, "lr_env", out.lr_env);
  out.decay_steps = cfg_get(oc, "decay_steps", steps);
  return out;
}

LossWeights loss_weights(const json& cfg) {
  json lw = cfg.value("weights", json::object());
  LossWeights w;
  w.depth = cfg_get(lw, "depth", w.depth);
  w.lidar = cfg_get(lw, "lidar", w.lidar);
  w.semantic = cfg_get(lw, "semantic", w.semantic);
  w.distortion = cfg_get(lw, "distortion", w.distortion);
  w.proposal_bound = cfg_get(lw, "proposal_bound", w.proposal_bound);
  w.smoothness = cfg_get(lw, "smoothness", w.smoothness);
  return w;
}

ImageD clamp01_image(const ImageF& img) {
  ImageD out(img.width(), img.height(), img.channels());
  for (size_t i = 0; i < img.size(); ++i)
    out.raw()[i] = clamp01(double(img.raw()[i]));
  return out;
}

void write_frame_render(const std::string& stem, const FrameRender& fr) {
  write_png(stem + "_rgb.png", to_u8(clamp01_image(fr.color)));
  write_raw_f32(stem + "_disp.f32", fr.disparity);
  if (fr.semantics.channels() > 0) {
    ImageU8 labels(fr.semantics.width(), fr.semantics.height(), 1);
    for (int y = 0; y < labels.height(); ++y)
      for (int x = 0; x < labels.width(); ++x) {
        int best = 0;
        for (int c = 1; c < fr.semantics.channels(); ++c)
          if (fr.semantics.at(x, y, c) > fr.semantics.at(x, y, best)) best = c;
        labels.at(x, y) = uint8_t(best);
      }
    write_png(stem + "_sem.png", labels);
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"composite radiance field simulation toolkit"};
  app.require_subcommand(1);
  app.fallthrough();  // global flags may appear after the subcommand

  uint64_t seed = 0;
  int threads = 1;
  std::string config_path;
  app.add_option("--seed", seed, "global rng seed");
  app.add_option("--threads", threads, "worker thread count");
  app.add_option("--config", config_path, "JSON config file");

  // ---- synth ----
  auto* synth = app.add_subcommand("synth", "generate a toy dataset");
  std::string synth_out;
  SynthConfig synth_cfg;
  bool static_only = false;
  synth->add_option("--out", synth_out, "output directory")->required();
  synth->add_option("--width", synth_cfg.width);
  synth->add_option("--height", synth_cfg.height);
  synth->add_option("--frames", synth_cfg.frames);
  synth->add_option("--cameras", synth_cfg.rig_cameras);
  synth->add_option("--lidar-step", synth_cfg.lidar_step);
  synth->add_option("--outlier-rate", synth_cfg.lidar_outlier_rate);
  synth->add_flag("--static-only", static_only, "disable the moving box");

  // ---- train ----
  auto* train = app.add_subcommand("train", "fit the composite field");
  std::string train_data, train_out;
  int train_steps = 1000, train_patches = 8, train_singles = 32;
  train->add_option("--data", train_data, "dataset directory")->required();
  train->add_option("--out", train_out, "checkpoint path")->required();
  train->add_option("--steps", train_steps);
  train->add_option("--batch-patches", train_patches);
  train->add_option("--batch-singles", train_singles);

  // ---- render ----
  auto* render = app.add_subcommand("render", "render from a checkpoint");
  std::string render_data, render_ckpt, render_out;
  int render_cam = 0, render_frame = 0;
  std::vector<double> d_s;
  double d_theta = 0, d_phi = 0;
  render->add_option("--data", render_data, "dataset directory")->required();
  render->add_option("--checkpoint", render_ckpt)->required();
  render->add_option("--out", render_out, "output directory")->required();
  render->add_option("--cam", render_cam);
  render->add_option("--frame", render_frame, "frame index, -1 for all");
  render->add_option("--ds", d_s, "translation perturbation ranges (x y z, m)")
      ->expected(3);
  render->add_option("--dtheta", d_theta, "pitch perturbation range, degrees");
  render->add_option("--dphi", d_phi, "yaw perturbation range, degrees");

  // ---- confidence ----
  auto* conf = app.add_subcommand("confidence", "emit confidence maps");
  std::string conf_data, conf_out;
  conf->add_option("--data", conf_data)->required();
  conf->add_option("--out", conf_out)->required();

  // ---- compose ----
  auto* compose = app.add_subcommand("compose", "insert objects into frames");
  std::string comp_data, comp_out, comp_mesh;
  int comp_cam = 0, comp_frame = 0, comp_count = 1;
  compose->add_option("--data", comp_data)->required();
  compose->add_option("--out", comp_out)->required();
  compose->add_option("--mesh", comp_mesh, "OBJ asset (default: box)");
  compose->add_option("--cam", comp_cam);
  compose->add_option("--frame", comp_frame);
  compose->add_option("--count", comp_count);

  // ---- relight ----
  auto* relight = app.add_subcommand("relight", "optimized-lighting insert");
  std::string rel_data, rel_out, rel_mesh;
  int rel_cam = 0, rel_frame = 0, rel_steps = 500, rel_rays = 64;
  relight->add_option("--data", rel_data)->required();
  relight->add_option("--out", rel_out)->required();
  relight->add_option("--mesh", rel_mesh, "OBJ asset (default: box)");
  relight->add_option("--cam", rel_cam);
  relight->add_option("--frame", rel_frame);
  relight->add_option("--steps", rel_steps);
  relight->add_option("--rays", rel_rays);

  // ---- eval ----
  auto* eval = app.add_subcommand("eval", "PSNR/SSIM of renders vs GT");
  std::string eval_data, eval_renders, eval_out;
  eval->add_option("--data", eval_data)->required();
  eval->add_option("--renders", eval_renders, "directory of *_rgb.png renders")
      ->required();
  eval->add_option("--out", eval_out, "CSV path (default stdout)");

  CLI11_PARSE(app, argc, argv);

  try {
    json cfg = load_config(config_path);

    if (*synth) {
      synth_cfg.moving_box = !static_only;
      json sj = cfg.value("synth", json::object());
      synth_cfg.width = cfg_get(sj, "width", synth_cfg.width);
      synth_cfg.height = cfg_get(sj, "height", synth_cfg.height);
      synth_cfg.frames = cfg_get(sj, "frames", synth_cfg.frames);
      synth_cfg.lidar_outlier_rate =
          cfg_get(sj, "outlier_rate", synth_cfg.lidar_outlier_rate);
      generate_scene(synth_cfg, synth_out, seed, threads);
      std::printf("wrote %s/manifest.json\n", synth_out.c_str());
    }

    if (*train) {
      Dataset data = load_dataset(train_data);
      Scene scene(scene_config(cfg, int(data.manifest.classes.size())), seed);
      populate_scene(scene, data.manifest);
      Adam opt(scene.tape, optim_config(cfg, train_steps));
      LossWeights w = loss_weights(cfg);
      for (int step = 0; step < train_steps; ++step) {
        TrainBatch batch =
            sample_batch(data, train_patches, train_singles, seed, step);
        StepReport rep = train_step(scene, batch, w, opt,
                                    seed + 0x17E0000ULL + step, threads);
        if (step % 100 == 0 || step + 1 == train_steps)
          std::printf("step %5d  loss %.6f  rgb %.6f%s\n", step, rep.total,
                      rep.loss.rgb, rep.applied ? "" : "  (skipped)");
      }
      save_checkpoint(train_out, scene.tape);
      std::printf("wrote %s\n", train_out.c_str());
    }

    if (*render) {
      Dataset data = load_dataset(render_data);
      Scene scene(scene_config(cfg, int(data.manifest.classes.size())), seed);
      populate_scene(scene, data.manifest);
      load_checkpoint(render_ckpt, scene.tape);
      scene.sync_from_tape();
      fs::create_directories(render_out);
      Rng rng(seed, 0x9E27B);
      int f0 = render_frame < 0 ? 0 : render_frame;
      int f1 = render_frame < 0 ? data.manifest.frames : render_frame + 1;
      for (int f = f0; f < f1; ++f) {
        int cam_index = render_cam * data.manifest.frames + f;
        CameraModel& cam = scene.cameras[cam_index];
        CameraModel original = cam;
        if (!d_s.empty() || d_theta != 0 || d_phi != 0) {
          Vec3 dt = Vec3::Zero();
          for (int k = 0; k < 3 && k < int(d_s.size()); ++k)
            dt[k] = rng.uniform(-d_s[k], d_s[k]);
          double pitch = rng.uniform(-1.0, 1.0) * d_theta * kPi / 180.0;
          double yaw = rng.uniform(-1.0, 1.0) * d_phi * kPi / 180.0;
          Mat3 yaw_r = axis_angle_to_matrix(Vec3(0, 0, yaw));
          cam.pose.t += dt;
          cam.pose.R = yaw_r * cam.pose.R *
                       axis_angle_to_matrix(Vec3(pitch, 0, 0));
        }
        FrameRender fr = render_image(scene, cam_index,
                                      data.manifest.timestamps[f],
                                      seed + 0xF0F0 + f, threads);
        char stem[64];
        std::snprintf(stem, sizeof stem, "c%d_f%d", render_cam, f);
        write_frame_render(render_out + "/" + stem, fr);
        cam = original;
      }
      std::printf("wrote renders to %s\n", render_out.c_str());
    }

    if (*conf) {
      Dataset data = load_dataset(conf_data);
      const SceneManifest& m = data.manifest;
      fs::create_directories(conf_out);
      for (size_t c = 0; c < m.cameras.size(); ++c)
        for (int f = 0; f + 1 < m.frames; ++f) {
          CameraModel cam_s = manifest_camera(m, int(c), f);
          CameraModel cam_t = manifest_camera(m, int(c), f + 1);
          WarpField warp = warp_pixels(data.depth[c][f], cam_s, cam_t);
          PerceptionConfidence pc = perception_confidence(
              data.rgb[c][f], data.rgb[c][f + 1],
              feature_pyramid(data.rgb[c][f]),
              feature_pyramid(data.rgb[c][f + 1]), warp);
          GeometryConfidence gc =
              geometry_confidence(data.depth[c][f], data.depth[c][f + 1],
                                  data.flow[c][f], warp);
          ConfidencePack pack{pc.c_rgb, pc.c_ssim, pc.c_feat, gc.c_depth,
                              gc.c_flow};
          ImageD combined = combine_confidence(pack, VecX::Zero(5));
          char stem[64];
          std::snprintf(stem, sizeof stem, "/c%zu_f%d", c, f);
          std::string base = conf_out + stem;
          write_raw_f32(base + "_rgb.f32", to_f32(pack.c_rgb));
          write_raw_f32(base + "_ssim.f32", to_f32(pack.c_ssim));
          write_raw_f32(base + "_feat.f32", to_f32(pack.c_feat));
          write_raw_f32(base + "_depth.f32", to_f32(pack.c_depth));
          write_raw_f32(base + "_flow.f32", to_f32(pack.c_flow));
          write_raw_f32(base + "_combined.f32", to_f32(combined));
        }
      std::printf("wrote confidence maps to %s\n", conf_out.c_str());
    }

    if (*compose || *relight) {
      bool do_relight = bool(*relight);
      std::string data_dir = do_relight ? rel_data : comp_data;
      std::string out_dir = do_relight ? rel_out : comp_out;
      std::string mesh_path = do_relight ? rel_mesh : comp_mesh;
      int cam_i = do_relight ? rel_cam : comp_cam;
      int frame_i = do_relight ? rel_frame : comp_frame;

      Dataset data = load_dataset(data_dir);
      const SceneManifest& m = data.manifest;
      fs::create_directories(out_dir);
      CameraModel cam = manifest_camera(m, cam_i, frame_i);

      // ground plan from the ground-truth views of this rig camera
      std::vector<PlanView> views;
      for (int f = 0; f < m.frames; ++f)
        views.push_back({data.semantic[cam_i][f], data.depth[cam_i][f],
                         manifest_camera(m, cam_i, f)});
      int ground_label = 1;
      for (size_t i = 0; i < m.classes.size(); ++i)
        if (m.classes[i] == "ground") ground_label = int(i);
      GroundPlan plan = build_ground_plan(views, ground_label, 0.25, 0.1, seed);

      TriangleMesh asset = mesh_path.empty()
                               ? box_mesh(Vec3(0.8, 0.8, 0.8),
                                          Vec3(0.7, 0.3, 0.25))
                               : load_obj(mesh_path);
      Vec3 lo = Vec3::Constant(1e30), hi = Vec3::Constant(-1e30);
      for (const Vec3& v : asset.vertices) {
        lo = lo.cwiseMin(v);
        hi = hi.cwiseMax(v);
      }
      // rest the asset on the ground at its placement cell
      for (Vec3& v : asset.vertices) v[2] -= lo[2];
      Vec2 footprint(hi[0] - lo[0], hi[1] - lo[1]);

      int count = do_relight ? 1 : comp_count;
      auto places = sample_placement(plan, {ground_label}, count, footprint,
                                     seed);
      json cfg_env = cfg.value("lighting", json::object());

      ComposedFrame frame;
      frame.rgb = data.rgb[cam_i][frame_i];
      frame.depth = data.depth[cam_i][frame_i];
      frame.semantic = data.semantic[cam_i][frame_i];
      std::vector<std::string> mask_paths;

      int inserted_class = int(m.classes.size()) - 1;  // reuse "car"
      for (int i = 0; i < count; ++i) {
        RigidTransform place_pose{axis_angle_to_matrix(
                                      Vec3(0, 0, places[i].yaw)),
                                  places[i].position};
        TriangleMesh world = transform_mesh(asset, place_pose);
        TriangleMesh mesh_cam =
            transform_mesh(world, cam.refined_pose().inverse());
        RasterResult raster = rasterize_depth(mesh_cam, cam);

        ImageD fg_rgb(cam.width, cam.height, 3, 0.0);
        if (do_relight) {
          Rng er(seed, 0xE2131);
          EnvMap sun = EnvMap::make(cfg_get(cfg_env, "gaussians", 4), er);
          EnvMap comp_map = EnvMap::make(cfg_get(cfg_env, "gaussians", 4), er);
          LightOptReport rep = optimize_lighting(
              data.rgb[cam_i][frame_i], world, &sun, &comp_map,
              data.rgb[cam_i][frame_i], cam, rel_steps, 5e-3, rel_rays, seed);
          std::printf("lighting fit: %zu steps, final loss %.6g%s\n",
                      rep.loss.size(), rep.loss.empty() ? 0.0 : rep.loss.back(),
                      rep.aborted ? " (aborted)" : "");
          EnvMap sum = sun;
          sum.params.conservativeResize(sun.params.size() +
                                        comp_map.params.size());
          sum.params.tail(comp_map.params.size()) = comp_map.params;
          RelightResult lit = relight_object(world, sum, cam, rel_rays, seed);
          fg_rgb = lit.rgb;
          ImageD intensity =
              intensity_map(data.depth[cam_i][frame_i], cam, world, sun, 64,
                            seed);
          ImageD base = composed_pbr(frame.rgb, fg_rgb, raster.mask, intensity);
          frame.rgb = base;
        } else {
          RelightResult lit = relight_object(
              world, EnvMap::constant(Vec3(1, 1, 1)), cam, 128, seed);
          fg_rgb = lit.rgb;
        }
        ComposedFrame next = compose_frame(
            frame.rgb, frame.depth, frame.semantic, fg_rgb, raster.mask,
            raster.depth, asset, places[i], inserted_class,
            m.classes[inserted_class], i);
        frame.rgb = next.rgb;
        frame.depth = next.depth;
        frame.semantic = next.semantic;
        frame.boxes.push_back(next.boxes[0]);
        ImageD shadow = naive_shadow_mask(world, Vec3(0.35, 0.2, -0.91).normalized(),
                                          places[i].position[2], cam);
        apply_shadow(&frame.rgb, shadow, &next.instance_masks.at(i));
        char mname[64];
        std::snprintf(mname, sizeof mname, "mask_%d.png", i);
        write_png(out_dir + "/" + mname, next.instance_masks.at(i));
        mask_paths.push_back(mname);
      }
      write_png(out_dir + "/composed.png", to_u8(frame.rgb));
      write_raw_f32(out_dir + "/composed_depth.f32", to_f32(frame.depth));
      write_text_atomic(out_dir + "/annotations.json",
                        annotations_json(frame, mask_paths));
      std::printf("wrote composite to %s\n", out_dir.c_str());
    }

    if (*eval) {
      Dataset data = load_dataset(eval_data);
      std::string csv = "camera,frame,psnr,ssim\n";
      for (size_t c = 0; c < data.manifest.cameras.size(); ++c)
        for (int f = 0; f < data.manifest.frames; ++f) {
          char stem[64];
          std::snprintf(stem, sizeof stem, "/c%zu_f%d_rgb.png", c, f);
          std::string path = eval_renders + stem;
          if (!fs::exists(path)) continue;
          ImageD render_img = to_f64(read_png(path));
          double p = psnr(render_img, data.rgb[c][f]);
          double s = ssim(render_img, data.rgb[c][f]);
          char row[128];
          std::snprintf(row, sizeof row, "%zu,%d,%.4f,%.4f\n", c, f, p, s);
          csv += row;
        }
      if (eval_out.empty())
        std::fputs(csv.c_str(), stdout);
      else
        write_text_atomic(eval_out, csv);
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
