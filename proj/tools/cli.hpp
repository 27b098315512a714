#pragma once

// Subcommands of the mishape tool. run_cli is separate from main so tests can
// drive it in-process.

#include <algorithm>
#include <atomic>
#include <csignal>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "mishape/error.hpp"
#include "mishape/motion_net.hpp"
#include "mishape/perturbation.hpp"
#include "mishape/render.hpp"
#include "mishape/scene.hpp"
#include "mishape/segmentation.hpp"
#include "mishape/session.hpp"
#include "mishape/shaping.hpp"
#include "mishape/verification.hpp"

#include "mishape/http.hpp"

namespace mishape::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitCheckFailed = 1;
inline constexpr int kExitError = 2;

inline void report_error(std::ostream& err, std::string_view category, const std::string& message,
                         const std::string& context) {
  err << "error[" << category << "]: " << message;
  if (!context.empty()) err << " (" << context << ")";
  err << '\n';
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) out.push_back(cur);
  return out;
}

inline double parse_double(const std::string& s, const std::string& flag) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used == s.size()) return v;
  } catch (const std::exception&) {
  }
  fail(ErrorCategory::argument, "not a number: '" + s + "'", flag);
}

inline int parse_int(const std::string& s, const std::string& flag) {
  try {
    std::size_t used = 0;
    const int v = std::stoi(s, &used);
    if (used == s.size()) return v;
  } catch (const std::exception&) {
  }
  fail(ErrorCategory::argument, "not an integer: '" + s + "'", flag);
}

inline Vec3 parse_vec3(const std::string& s, const std::string& flag) {
  const auto parts = split(s, ',');
  if (parts.size() != 3) fail(ErrorCategory::argument, "expected x,y,z", flag);
  return {parse_double(parts[0], flag), parse_double(parts[1], flag), parse_double(parts[2], flag)};
}

inline std::vector<int> parse_ids(const std::string& s, const std::string& flag) {
  std::vector<int> out;
  for (const auto& p : split(s, ',')) out.push_back(parse_int(p, flag));
  if (out.empty()) fail(ErrorCategory::argument, "no ids given", flag);
  return out;
}

struct PixelPrompt {
  int px = 0, py = 0, cam = 0;
};

/// "px,py@cam"; the camera index is optional and defaults to 0.
inline PixelPrompt parse_prompt(const std::string& s) {
  PixelPrompt p;
  std::string xy = s;
  if (auto at = s.find('@'); at != std::string::npos) {
    xy = s.substr(0, at);
    p.cam = parse_int(s.substr(at + 1), "--prompt");
  }
  const auto parts = split(xy, ',');
  if (parts.size() != 2) fail(ErrorCategory::argument, "expected px,py@cam", "--prompt");
  p.px = parse_int(parts[0], "--prompt");
  p.py = parse_int(parts[1], "--prompt");
  return p;
}

inline const Camera& ring_camera(const std::vector<Camera>& cams, int k, const std::string& flag) {
  if (k < 0 || k >= static_cast<int>(cams.size())) fail(ErrorCategory::argument, "camera index out of range", flag);
  return cams[static_cast<std::size_t>(k)];
}

inline std::vector<int> load_labels(const std::string& path, const Scene& scene) {
  if (path.empty()) return labels_of(scene);
  try {
    return labels_from_json(detail::parse_json_text(detail::read_file(path), path), scene.size());
  } catch (const Error& e) {
    if (e.category() == ErrorCategory::io) throw;
    throw Error(e.category(), e.what(), path + ": " + e.context());
  }
}

inline nlohmann::json load_json(const std::string& path) {
  return detail::parse_json_text(detail::read_file(path), path);
}

/// Resolves --prompt or --ids to Gaussian ids on the canonical scene.
inline std::vector<int> resolve_prompt(const Scene& scene, const std::string& prompt, const std::string& ids,
                                       const std::vector<Camera>& cams) {
  if (!prompt.empty() && !ids.empty()) fail(ErrorCategory::argument, "give either --prompt or --ids", "--prompt");
  if (!ids.empty()) {
    auto out = parse_ids(ids, "--ids");
    require_ids(out, scene.size());
    return out;
  }
  if (prompt.empty()) fail(ErrorCategory::argument, "a prompt is required", "--prompt");
  const PixelPrompt p = parse_prompt(prompt);
  return {prompt_to_gaussian(scene, ring_camera(cams, p.cam, "--prompt"), p.px, p.py)};
}

inline std::string stem_path(const std::string& out, const std::string& suffix) {
  std::filesystem::path p(out);
  return (p.parent_path() / (p.stem().string() + suffix)).string();
}

inline std::atomic<httplib::Server*> g_server{nullptr};

inline void stop_server(int) {
  if (auto* s = g_server.load()) s->stop();
}

inline int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Mutual-information shaping of Gaussian motion fields"};
  app.require_subcommand(1);

  // gen-scene
  std::string spec_file, preset = "default", scene_out;
  std::optional<std::uint64_t> scene_seed;
  auto* gen = app.add_subcommand("gen-scene", "Generate a synthetic labelled scene");
  gen->add_option("--spec", spec_file, "Scene spec (JSON)")->check(CLI::ExistingFile);
  gen->add_option("--preset", preset, "default or entangled when no spec is given");
  gen->add_option("--seed", scene_seed, "Override the spec seed");
  gen->add_option("--out", scene_out, "Scene file to write")->required();

  // label
  std::string label_scene, label_out, mask_dir;
  int views = 8, view_w = 128, view_h = 128;
  auto* label = app.add_subcommand("label", "Coarse mask labeling over a camera ring");
  label->add_option("--scene", label_scene)->required()->check(CLI::ExistingFile);
  label->add_option("--views", views, "Cameras on the ring");
  label->add_option("--width", view_w);
  label->add_option("--height", view_h);
  label->add_option("--masks", mask_dir, "Directory for per-view PGM masks");
  label->add_option("--out", label_out)->required();

  // shape
  std::string shape_scene, shape_labels, shape_config, shape_out, shape_log;
  std::optional<int> iterations, batch, width, k;
  std::optional<std::uint64_t> seed, net_seed;
  std::optional<double> lr;
  std::string mode;
  auto* shp = app.add_subcommand("shape", "Shape the motion network");
  shp->add_option("--scene", shape_scene)->required()->check(CLI::ExistingFile);
  shp->add_option("--labels", shape_labels, "Labels file; ground truth from the scene otherwise")->check(CLI::ExistingFile);
  shp->add_option("--config", shape_config, "Shaping config (JSON)")->check(CLI::ExistingFile);
  shp->add_option("--out", shape_out, "Checkpoint to write")->required();
  shp->add_option("--log", shape_log, "Training log (CSV)");
  shp->add_option("--iterations", iterations);
  shp->add_option("--batch", batch);
  shp->add_option("--k", k);
  shp->add_option("--lr", lr);
  shp->add_option("--seed", seed, "Sampling seed");
  shp->add_option("--net-seed", net_seed, "Initialisation seed");
  shp->add_option("--width", width);
  shp->add_option("--mode", mode, "activation or jacobigs");

  // verify
  std::string ver_scene, ver_ckpt, ver_labels, ver_checks, ver_baseline, ver_report;
  auto* ver = app.add_subcommand("verify", "Numerical checks of a shaped checkpoint");
  ver->add_option("--scene", ver_scene)->required()->check(CLI::ExistingFile);
  ver->add_option("--checkpoint", ver_ckpt)->required()->check(CLI::ExistingFile);
  ver->add_option("--labels", ver_labels)->check(CLI::ExistingFile);
  ver->add_option("--checks", ver_checks, "Comma-separated subset of checks");
  ver->add_option("--baseline", ver_baseline, "Full-Jacobian shaped checkpoint for the drift control")
      ->check(CLI::ExistingFile);
  ver->add_option("--report", ver_report, "JSON report file");

  // perturb
  std::string per_scene, per_ckpt, per_labels, per_prompt, per_ids, per_u = "0,0,1", per_out, per_frames;
  std::optional<double> per_scale;
  double per_auto = 0.1;
  int per_steps = 1, per_cam = 0;
  bool no_refresh = false;
  auto* per = app.add_subcommand("perturb", "Perturb the shaping layer and record the trajectory");
  per->add_option("--scene", per_scene)->required()->check(CLI::ExistingFile);
  per->add_option("--checkpoint", per_ckpt)->required()->check(CLI::ExistingFile);
  per->add_option("--labels", per_labels)->check(CLI::ExistingFile);
  per->add_option("--prompt", per_prompt, "px,py@cam");
  per->add_option("--ids", per_ids, "Comma-separated Gaussian ids");
  per->add_option("--u", per_u, "Direction x,y,z");
  auto* scale_opt = per->add_option("--scale", per_scale, "Raw step size");
  per->add_option("--auto-scale", per_auto, "Largest |dx| on the target object, world units")->excludes(scale_opt);
  per->add_option("--steps", per_steps);
  per->add_flag("--no-refresh", no_refresh, "Reuse the first direction for every step");
  per->add_option("--out", per_out)->required();
  per->add_option("--frames", per_frames, "Directory for PPM frames");
  per->add_option("--camera", per_cam, "Ring camera for frames");

  // segment
  std::string seg_scene, seg_ckpt, seg_prompt, seg_ids, seg_report, seg_mask;
  double seg_tau = 0.5, seg_auto = 0.05;
  int seg_cam = 0;
  auto* seg = app.add_subcommand("segment", "Segment an object by perturbation");
  seg->add_option("--scene", seg_scene)->required()->check(CLI::ExistingFile);
  seg->add_option("--checkpoint", seg_ckpt)->required()->check(CLI::ExistingFile);
  seg->add_option("--prompt", seg_prompt, "px,py@cam");
  seg->add_option("--ids", seg_ids);
  seg->add_option("--tau", seg_tau);
  seg->add_option("--auto-distance", seg_auto);
  seg->add_option("--report", seg_report)->required();
  seg->add_option("--mask", seg_mask, "PGM of the selection seen from --camera");
  seg->add_option("--camera", seg_cam);

  // serve
  std::string srv_scene, srv_ckpt, srv_labels, srv_host = "127.0.0.1";
  int srv_port = 8080;
  auto* srv = app.add_subcommand("serve", "HTTP session server");
  srv->add_option("--scene", srv_scene)->required()->check(CLI::ExistingFile);
  srv->add_option("--checkpoint", srv_ckpt)->required()->check(CLI::ExistingFile);
  srv->add_option("--labels", srv_labels)->check(CLI::ExistingFile);
  srv->add_option("--host", srv_host);
  srv->add_option("--port", srv_port);

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    report_error(err, "argument", e.what(), "");
    return kExitError;
  }

  try {
    if (*gen) {
      SceneSpec spec = preset == "entangled" ? entangled_scene_spec() : default_scene_spec();
      if (preset != "default" && preset != "entangled") fail(ErrorCategory::argument, "unknown preset", "--preset");
      if (!spec_file.empty()) spec = spec_from_json(load_json(spec_file));
      if (scene_seed) spec.seed = *scene_seed;
      const Scene scene = generate_scene(spec);
      save_scene(scene, scene_out);
      out << "wrote " << scene.size() << " Gaussians to " << scene_out << '\n';
      return kExitOk;
    }

    if (*label) {
      const Scene scene = load_scene(label_scene);
      if (views < 1) fail(ErrorCategory::argument, "at least one view required", "--views");
      const auto cams = camera_ring(scene, views, view_w, view_h);
      std::vector<MaskImage> masks;
      for (const auto& c : cams) masks.push_back(synth_masks(scene, c));
      const CoarseLabels cl = coarse_mask_label(scene, cams, masks);
      if (!mask_dir.empty()) {
        std::filesystem::create_directories(mask_dir);
        for (std::size_t v = 0; v < masks.size(); ++v)
          write_pgm(masks[v], (std::filesystem::path(mask_dir) / ("mask_" + std::to_string(v) + ".pgm")).string());
      }
      detail::write_file(label_out, labels_to_json(cl).dump());
      out << "labelled " << scene.size() << " Gaussians, " << cl.flagged_count() << " never visible\n";
      return kExitOk;
    }

    if (*shp) {
      const Scene scene = load_scene(shape_scene);
      const std::vector<int> labels = load_labels(shape_labels, scene);
      ShapingConfig cfg;
      NetConfig nc;
      if (!shape_config.empty()) {
        const nlohmann::json j = load_json(shape_config);
        cfg = shaping_config_from_json(j);
        if (j.contains("net")) nc = config_from_json(j["net"]);
      }
      if (iterations) cfg.iterations = *iterations;
      if (batch) cfg.batch = *batch;
      if (k) cfg.k = *k;
      if (lr) cfg.lr = *lr;
      if (seed) cfg.seed = *seed;
      if (net_seed) nc.seed = *net_seed;
      if (width) nc.width = *width;
      if (!mode.empty()) cfg = shaping_config_from_json({{"mi_mode", mode}}, cfg);
      validate(nc);
      cfg.batch = std::min<int>(cfg.batch, static_cast<int>(scene.size()));
      const ShapeResult res = shape(init(nc), scene, labels, cfg);
      save_net(res.net, shape_out);
      if (!shape_log.empty()) detail::write_file(shape_log, res.log.to_csv());
      if (res.diverged) {
        report_error(err, "numeric", "shaping diverged, last finite checkpoint written: " + res.message, shape_out);
        return kExitError;
      }
      if (!res.log.records.empty()) {
        const auto& last = res.log.records.back();
        out << "shaped " << cfg.iterations << " iterations: L_MI " << last.mi << " L_reg " << last.reg << " L_norm "
            << last.norm << " intra " << last.intra_cos << " inter " << last.inter_cos << '\n';
      }
      return kExitOk;
    }

    if (*ver) {
      const Scene scene = load_scene(ver_scene);
      const MotionNet net = load_net(ver_ckpt);
      const std::vector<int> labels = load_labels(ver_labels, scene);
      VerifyOptions opt;
      if (!ver_checks.empty()) opt.checks = split(ver_checks, ',');
      std::optional<MotionNet> baseline;
      if (!ver_baseline.empty()) baseline = load_net(ver_baseline);
      const VerifyReport rep = run_verification(net, scene, labels, opt, baseline ? &*baseline : nullptr);
      out << rep.to_table();
      if (!ver_report.empty()) detail::write_file(ver_report, rep.to_json().dump(1));
      return rep.exit_code();
    }

    if (*per) {
      const Scene scene = load_scene(per_scene);
      const MotionNet net = load_net(per_ckpt);
      const std::vector<int> labels = load_labels(per_labels, scene);
      const auto cams = camera_ring(scene);
      const std::vector<int> ids = resolve_prompt(scene, per_prompt, per_ids, cams);
      if (per_steps < 0) fail(ErrorCategory::argument, "steps must be non-negative", "--steps");
      const std::vector<Vec3> inputs = positions(scene);
      Perturbation p = make_perturbation(net, inputs, ids, direction_from_xyz(parse_vec3(per_u, "--u")), 0.0);
      if (per_scale) {
        if (!std::isfinite(*per_scale)) fail(ErrorCategory::argument, "scale must be finite", "--scale");
        p.scale = *per_scale;
      } else {
        if (!(per_auto > 0.0)) fail(ErrorCategory::argument, "auto-scale distance must be positive", "--auto-scale");
        p.scale = auto_scale(net, inputs, prompt_region(labels, ids), p.n, per_auto);
      }
      const std::vector<SequenceStep> seq(static_cast<std::size_t>(per_steps), SequenceStep{p, !no_refresh});
      const Trajectory t = run_sequence(net, inputs, scene, seq);
      std::vector<std::string> snaps;
      for (std::size_t i = 0; i < t.steps.size(); ++i) {
        const std::string path = stem_path(per_out, ".step" + std::to_string(i) + ".scene.json");
        save_scene(t.steps[i].scene, path);
        snaps.push_back(std::filesystem::path(path).filename().string());
      }
      detail::write_file(per_out, trajectory_to_json(t, snaps).dump(1));
      if (!per_frames.empty()) {
        std::filesystem::create_directories(per_frames);
        const Camera& cam = ring_camera(cams, per_cam, "--camera");
        for (std::size_t i = 0; i < t.steps.size(); ++i) {
          char name[32];
          std::snprintf(name, sizeof name, "frame_%03zu.ppm", i);
          write_ppm(render_color(t.steps[i].scene, cam), (std::filesystem::path(per_frames) / name).string());
        }
      }
      out << "applied " << per_steps << " step(s) at scale " << p.scale << " from Gaussian " << ids.front() << '\n';
      return kExitOk;
    }

    if (*seg) {
      const Scene scene = load_scene(seg_scene);
      const MotionNet net = load_net(seg_ckpt);
      const auto cams = camera_ring(scene);
      const std::vector<int> ids = resolve_prompt(scene, seg_prompt, seg_ids, cams);
      SegmentOptions opt;
      opt.tau = seg_tau;
      opt.auto_distance = seg_auto;
      const std::vector<int> gt = labels_of(scene);
      const int target = gt[static_cast<std::size_t>(ids.front())];
      std::optional<double> inter;
      if (std::count_if(gt.begin(), gt.end(), [](int l) { return l != 0; }) > 1) {
        const auto probe = sample_probe(gt, 512, 0);
        const auto ws = check_wellshaped(net, positions(scene), gt, probe);
        if (ws[1].samples > 0) inter = ws[1].statistic;
      }
      ObjectSegmentation obj = evaluate_segmentation(net, scene, ids, target, target ? cams : std::vector<Camera>{}, opt);
      detail::write_file(seg_report, segmentation_report({obj}, seg_tau, inter).dump(1));
      if (!seg_mask.empty()) {
        const SegmentResult res = segment_by_perturbation(net, positions(scene), ids, opt);
        write_pgm(project_mask(scene, res.selected, ring_camera(cams, seg_cam, "--camera"), 255), seg_mask);
      }
      out << "selected " << obj.selected << " Gaussians, IoU " << obj.iou_3d << ", mIoU " << obj.miou_2d << '\n';
      return kExitOk;
    }

    if (*srv) {
      Session session(load_scene(srv_scene), load_net(srv_ckpt),
                      srv_labels.empty() ? std::nullopt : std::optional<std::vector<int>>(load_labels(srv_labels, load_scene(srv_scene))));
      httplib::Server server;
      mount(server, session);
      g_server = &server;
      std::signal(SIGINT, stop_server);
      std::signal(SIGTERM, stop_server);
      out << "serving on http://" << srv_host << ':' << srv_port << '\n' << std::flush;
      const bool ok = server.listen(srv_host, srv_port);
      g_server = nullptr;
      if (!ok) fail(ErrorCategory::io, "cannot listen on port " + std::to_string(srv_port), "--port");
      return kExitOk;
    }
  } catch (const Error& e) {
    report_error(err, to_string(e.category()), e.what(), e.context());
    return kExitError;
  } catch (const std::filesystem::filesystem_error& e) {
    report_error(err, "io", e.what(), e.path1().string());
    return kExitError;
  }
  return kExitError;
}

}  // namespace mishape::cli
