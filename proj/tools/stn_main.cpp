#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "stn/annotations.hpp"
#include "stn/association.hpp"
#include "stn/density.hpp"
#include "stn/image.hpp"
#include "stn/metrics.hpp"
#include "stn/network.hpp"
#include "stn/pipeline.hpp"
#include "stn/runconfig.hpp"
#include "stn/synth.hpp"
#include "stn/tracking.hpp"

namespace fs = std::filesystem;
using namespace stn;

namespace {

struct CommonOpts {
  std::string config_path;
  std::vector<std::string> overrides;  // key=value, win over the file
};

RunConfig resolve_config(const CommonOpts& opts) {
  RunConfig cfg;
  if (!opts.config_path.empty()) cfg = RunConfig::from_file(opts.config_path);
  for (const auto& kv : opts.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) {
      throw std::runtime_error("--set expects key=value, got '" + kv + "'");
    }
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  return cfg;
}

void add_common(CLI::App* cmd, CommonOpts& opts) {
  cmd->add_option("--config", opts.config_path, "key=value config file");
  cmd->add_option("--set", opts.overrides, "config override, key=value (wins over --config)")
      ->take_all();
}

std::string frame_name(int f) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "f%04d.pgm", f);
  return buf;
}

void write_scene(const Scene& scene, const fs::path& dir) {
  fs::create_directories(dir / "frames");
  for (std::size_t f = 0; f < scene.frames.size(); ++f) {
    write_pgm(scene.frames[f], (dir / "frames" / frame_name(static_cast<int>(f))).string());
  }
  save_annotations(scene.trajectories, (dir / "annotations.csv").string());
}

std::vector<ImageFrame> load_scene_frames(const fs::path& dir) {
  std::vector<ImageFrame> frames;
  for (int f = 0;; ++f) {
    const auto path = dir / "frames" / frame_name(f);
    if (!fs::exists(path)) break;
    frames.push_back(read_pgm(path.string()));
  }
  if (frames.size() < 2) {
    throw std::runtime_error("scene at " + dir.string() + " has fewer than 2 frames");
  }
  return frames;
}

std::vector<fs::path> dirs_with(const fs::path& root, const std::string& marker,
                                const std::string& what) {
  if (fs::exists(root / marker)) return {root};
  std::vector<fs::path> dirs;
  if (fs::exists(root)) {
    for (const auto& entry : fs::directory_iterator(root)) {
      if (entry.is_directory() && fs::exists(entry.path() / marker)) {
        dirs.push_back(entry.path());
      }
    }
  }
  std::sort(dirs.begin(), dirs.end());
  if (dirs.empty()) {
    throw std::runtime_error("no " + what + " (directories with " + marker + ") under " +
                             root.string());
  }
  return dirs;
}

std::vector<fs::path> scene_dirs(const fs::path& root) {
  return dirs_with(root, "annotations.csv", "scenes");
}

std::vector<fs::path> prediction_dirs(const fs::path& root) {
  return dirs_with(root, "detections.csv", "predictions");
}

int cmd_synth(const CommonOpts& common, const std::string& out_dir, int num_scenes) {
  auto cfg = resolve_config(common);
  fs::create_directories(out_dir);
  cfg.save((fs::path(out_dir) / "config.resolved").string());
  auto scenes = make_dataset(cfg.scene, num_scenes, cfg.scene.seed);
  for (int s = 0; s < num_scenes; ++s) {
    char name[32];
    std::snprintf(name, sizeof(name), "scene_%03d", s);
    write_scene(scenes[s], fs::path(out_dir) / name);
  }
  std::printf("wrote %d scene(s) under %s\n", num_scenes, out_dir.c_str());
  return 0;
}

int cmd_train(const CommonOpts& common, const std::string& data_dir, const std::string& stage,
              const std::string& out_ckpt, const std::string& init_ckpt,
              const std::string& loss_log_path) {
  auto cfg = resolve_config(common);
  const bool run1 = stage == "1" || stage == "both";
  const bool run2 = stage == "2" || stage == "both";
  if (!run1 && !run2) throw std::runtime_error("--stage must be 1, 2 or both");
  if (stage == "2" && init_ckpt.empty()) {
    throw std::runtime_error("--stage 2 requires --init with a stage-1 checkpoint");
  }

  std::vector<TrainingScene> data;
  for (const auto& dir : scene_dirs(data_dir)) {
    auto frames = load_scene_frames(dir);
    auto trajs = load_annotations((dir / "annotations.csv").string());
    validate_trajectories(trajs, frames[0].width, frames[0].height);
    auto annos = annotations_per_frame(trajs, static_cast<int>(frames.size()));
    data.push_back(prepare_training_scene(frames, annos, cfg.model));
  }

  auto state = init_model(cfg.model, cfg.train_seed);
  if (!init_ckpt.empty()) load_checkpoint(state, init_ckpt);
  std::vector<StepLog> log;
  if (run1) train_stage(state, data, 1, cfg.train_steps_stage1, cfg.train_seed + 1, &log);
  if (run2) train_stage(state, data, 2, cfg.train_steps_stage2, cfg.train_seed + 2, &log);
  save_checkpoint(state, out_ckpt);
  if (!loss_log_path.empty()) write_loss_log(log, loss_log_path);
  std::printf("trained %zu step(s) over %zu scene(s), checkpoint at %s\n", log.size(),
              data.size(), out_ckpt.c_str());
  return 0;
}

int cmd_infer(const CommonOpts& common, const std::string& ckpt, const std::string& data_dir,
              const std::string& out_dir, bool dump_density) {
  auto cfg = resolve_config(common);
  auto state = init_model(cfg.model, cfg.train_seed);
  load_checkpoint(state, ckpt);
  for (const auto& dir : scene_dirs(data_dir)) {
    auto frames = load_scene_frames(dir);
    auto seq = infer_sequence(state, frames);
    const fs::path out = fs::path(out_dir) / dir.filename();
    fs::create_directories(out);
    {
      std::ofstream counts((out / "counts.csv").string());
      counts << "frame,count\n";
      for (std::size_t f = 0; f < seq.counts.size(); ++f) {
        counts << f << "," << seq.counts[f] << "\n";
      }
    }
    save_detections(seq.detections, (out / "detections.csv").string());
    save_offsets(seq.detections, seq.fwd_offsets, seq.bwd_offsets,
                 (out / "offsets.csv").string());
    if (dump_density) {
      for (std::size_t f = 0; f < seq.density_level1.size(); ++f) {
        char name[32];
        std::snprintf(name, sizeof(name), "density_%04zu.dmap", f);
        write_density_map(*seq.density_level1[f], (out / name).string());
      }
    }
    std::printf("inferred %zu frame(s) for %s\n", seq.counts.size(),
                dir.filename().string().c_str());
  }
  return 0;
}

int cmd_track(const CommonOpts& common, const std::string& pred_dir, bool no_offsets) {
  auto cfg = resolve_config(common);
  for (const auto& entry : prediction_dirs(pred_dir)) {
    auto dets = load_detections((entry / "detections.csv").string());
    std::vector<std::vector<Vec2>> fwd(dets.size());
    for (std::size_t f = 0; f < dets.size(); ++f) fwd[f].assign(dets[f].size(), Vec2{});
    if (!no_offsets) {
      auto rows = load_offsets((entry / "offsets.csv").string(), dets);
      fwd = rows.fwd;
    }
    auto frames = to_linker_frames(dets, fwd);
    auto tracks = link_from_variant(frames, cfg.track,
                                    no_offsets ? LinkVariant::without_offsets
                                               : LinkVariant::with_offsets);
    save_tracks(tracks, (entry / "tracks.csv").string());
    std::printf("linked %zu tracklet(s) for %s\n", tracks.tracks.size(),
                entry.filename().string().c_str());
  }
  return 0;
}

int cmd_eval(const CommonOpts& common, const std::string& gt_dir, const std::string& pred_dir,
             const std::string& out_path) {
  auto cfg = resolve_config(common);
  auto gts = scene_dirs(gt_dir);

  CountSeries series;
  std::vector<std::vector<DetectedPoint>> pred_frames;
  std::vector<std::vector<Vec2>> gt_frames;
  TrackSet pooled_tracks;
  std::vector<Trajectory> pooled_gt;
  int id_base = 0, frame_base = 0;

  for (const auto& dir : gts) {
    const fs::path pdir = fs::path(pred_dir) / dir.filename();
    auto trajs = load_annotations((dir / "annotations.csv").string());
    int T = 0;
    for (const auto& t : trajs) {
      for (const auto& p : t.points) T = std::max(T, p.frame + 1);
    }
    const auto annos = annotations_per_frame(trajs, T);

    // counts
    std::vector<double> est(T, 0.0);
    {
      std::ifstream in((pdir / "counts.csv").string());
      if (!in) throw std::runtime_error("eval: missing " + (pdir / "counts.csv").string());
      std::string line;
      std::getline(in, line);
      if (line != "frame,count") {
        throw std::runtime_error("eval: " + (pdir / "counts.csv").string() +
                                 ":1: expected header 'frame,count'");
      }
      int lineno = 1;
      while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        int f = 0;
        double c = 0;
        if (std::sscanf(line.c_str(), "%d,%lf", &f, &c) != 2 || f < 0 || f >= T) {
          throw std::runtime_error("eval: " + (pdir / "counts.csv").string() + ":" +
                                   std::to_string(lineno) + ": malformed line '" + line + "'");
        }
        est[f] = c;
      }
    }
    std::vector<double> gt_counts(T);
    for (int f = 0; f < T; ++f) gt_counts[f] = static_cast<double>(annos[f].points.size());
    series.gt.push_back(std::move(gt_counts));
    series.est.push_back(std::move(est));

    // detections
    auto dets = load_detections((pdir / "detections.csv").string());
    dets.resize(T);
    for (int f = 0; f < T; ++f) {
      pred_frames.push_back(dets[f]);
      std::vector<Vec2> pts;
      for (const auto& p : annos[f].points) pts.push_back({p.x, p.y});
      gt_frames.push_back(std::move(pts));
    }

    // tracks
    auto tracks = load_tracks((pdir / "tracks.csv").string());
    int max_id = 0;
    for (auto& t : tracks.tracks) {
      max_id = std::max(max_id, t.id);
      t.id += id_base;
      for (auto& p : t.points) p.frame += frame_base;
      pooled_tracks.tracks.push_back(std::move(t));
    }
    for (auto t : trajs) {
      for (auto& p : t.points) p.frame += frame_base;
      pooled_gt.push_back(std::move(t));
    }
    id_base += max_id;
    frame_base += T;
  }

  EvalReport report;
  std::tie(report.mae, report.mse) = mae_mse(series);
  report.loc = localization_map(pred_frames, gt_frames);
  report.trk = tracking_map(pooled_tracks, pooled_gt, cfg.eval_track_match_dist);

  const auto table = format_report_table(report);
  std::fputs(table.c_str(), stdout);
  if (!out_path.empty()) {
    std::ofstream out(out_path);
    out << format_report_keyvalues(report);
  }
  return 0;
}

int cmd_render(const std::string& density_path, const std::string& tracks_path, int width,
               int height, const std::string& out_path) {
  if (!density_path.empty()) {
    auto grid = read_density_map(density_path);
    const int H = grid->shape[0], W = grid->shape[1];
    double peak = 0.0;
    for (double v : grid->data) peak = std::max(peak, v);
    ImageFrame img(W, H);
    for (std::size_t i = 0; i < grid->data.size(); ++i) {
      img.pixels[i] = peak > 0.0 ? std::max(0.0, grid->data[i]) / peak : 0.0;
    }
    write_pgm(img, out_path);
    std::printf("rendered density map to %s\n", out_path.c_str());
    return 0;
  }
  if (tracks_path.empty()) throw std::runtime_error("render: need --density or --tracks");
  if (width <= 0 || height <= 0) {
    throw std::runtime_error("render: --tracks needs --width and --height");
  }
  auto tracks = load_tracks(tracks_path);
  const std::size_t n = static_cast<std::size_t>(width) * height;
  std::vector<double> r(n, 0.0), g(n, 0.0), b(n, 0.0);
  auto put = [&](int x, int y, double cr, double cg, double cb) {
    if (x < 0 || x >= width || y < 0 || y >= height) return;
    const std::size_t i = static_cast<std::size_t>(y) * width + x;
    r[i] = cr;
    g[i] = cg;
    b[i] = cb;
  };
  for (const auto& t : tracks.tracks) {
    // deterministic identity color from a small hash
    const std::uint32_t h = static_cast<std::uint32_t>(t.id) * 2654435761u;
    const double cr = 0.25 + 0.75 * ((h >> 0) & 0xff) / 255.0;
    const double cg = 0.25 + 0.75 * ((h >> 8) & 0xff) / 255.0;
    const double cb = 0.25 + 0.75 * ((h >> 16) & 0xff) / 255.0;
    for (std::size_t i = 0; i + 1 < t.points.size(); ++i) {
      const auto& p0 = t.points[i];
      const auto& p1 = t.points[i + 1];
      const int steps = std::max(2, static_cast<int>(std::hypot(p1.x - p0.x, p1.y - p0.y)) * 2);
      for (int s = 0; s <= steps; ++s) {
        const double a = static_cast<double>(s) / steps;
        put(static_cast<int>(std::lround(p0.x + a * (p1.x - p0.x))),
            static_cast<int>(std::lround(p0.y + a * (p1.y - p0.y))), cr, cg, cb);
      }
    }
    if (t.points.size() == 1) {
      put(static_cast<int>(std::lround(t.points[0].x)),
          static_cast<int>(std::lround(t.points[0].y)), cr, cg, cb);
    }
  }
  write_ppm(r, g, b, width, height, out_path);
  std::printf("rendered %zu tracklet(s) to %s\n", tracks.tracks.size(), out_path.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"stn: crowd density, localization and tracking on frame pairs"};
  app.require_subcommand(1);

  CommonOpts synth_c, train_c, infer_c, track_c, eval_c;
  std::string out_dir, data_dir, stage = "both", ckpt, init_ckpt, loss_log, pred_dir, gt_dir;
  std::string density_path, tracks_path, out_path;
  int num_scenes = 1, width = 0, height = 0;
  bool dump_density = false, no_offsets = false;

  auto* synth = app.add_subcommand("synth", "generate synthetic crowd scenes");
  add_common(synth, synth_c);
  synth->add_option("--out-dir", out_dir, "output directory")->required();
  synth->add_option("--scenes", num_scenes, "number of scenes");

  auto* train = app.add_subcommand("train", "train the model");
  add_common(train, train_c);
  train->add_option("--data", data_dir, "dataset directory")->required();
  train->add_option("--stage", stage, "1, 2 or both");
  train->add_option("--out", ckpt, "output checkpoint")->required();
  train->add_option("--init", init_ckpt, "initial checkpoint (required for --stage 2)");
  train->add_option("--loss-log", loss_log, "per-step loss CSV");

  auto* infer = app.add_subcommand("infer", "run inference over scenes");
  add_common(infer, infer_c);
  infer->add_option("--ckpt", ckpt, "checkpoint")->required();
  infer->add_option("--data", data_dir, "dataset directory")->required();
  infer->add_option("--out-dir", out_dir, "prediction output directory")->required();
  infer->add_flag("--dump-density", dump_density, "also write per-frame density maps");

  auto* track = app.add_subcommand("track", "link detections into trajectories");
  add_common(track, track_c);
  track->add_option("--pred", pred_dir, "prediction directory (from infer)")->required();
  track->add_flag("--no-offsets", no_offsets, "ignore predicted offsets (zero motion)");

  auto* eval = app.add_subcommand("eval", "score predictions against ground truth");
  add_common(eval, eval_c);
  eval->add_option("--gt", gt_dir, "dataset directory with annotations")->required();
  eval->add_option("--pred", pred_dir, "prediction directory")->required();
  eval->add_option("--out", out_path, "key=value report file");

  auto* render = app.add_subcommand("render", "render density maps or tracks");
  render->add_option("--density", density_path, "density map file");
  render->add_option("--tracks", tracks_path, "track CSV");
  render->add_option("--width", width, "canvas width for --tracks");
  render->add_option("--height", height, "canvas height for --tracks");
  render->add_option("--out", out_path, "output image")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth->parsed()) return cmd_synth(synth_c, out_dir, num_scenes);
    if (train->parsed()) return cmd_train(train_c, data_dir, stage, ckpt, init_ckpt, loss_log);
    if (infer->parsed()) return cmd_infer(infer_c, ckpt, data_dir, out_dir, dump_density);
    if (track->parsed()) return cmd_track(track_c, pred_dir, no_offsets);
    if (eval->parsed()) return cmd_eval(eval_c, gt_dir, pred_dir, out_path);
    if (render->parsed()) return cmd_render(density_path, tracks_path, width, height, out_path);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
