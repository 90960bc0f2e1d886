#include "stn/pipeline.hpp"

#include <cstdio>
#include <fstream>
#include <stdexcept>

namespace stn {

std::vector<Scene> make_dataset(const SceneConfig& base, int num_scenes,
                                std::uint64_t first_seed) {
  std::vector<Scene> scenes;
  scenes.reserve(num_scenes);
  for (int i = 0; i < num_scenes; ++i) {
    SceneConfig cfg = base;
    cfg.seed = first_seed + static_cast<std::uint64_t>(i);
    scenes.push_back(generate_scene(cfg));
  }
  return scenes;
}

std::vector<std::vector<LinkerDetection>> to_linker_frames(
    const std::vector<std::vector<DetectedPoint>>& detections,
    const std::vector<std::vector<Vec2>>& fwd_offsets) {
  if (detections.size() != fwd_offsets.size()) {
    throw std::runtime_error("to_linker_frames: offsets do not match detections");
  }
  std::vector<std::vector<LinkerDetection>> frames(detections.size());
  for (std::size_t f = 0; f < detections.size(); ++f) {
    if (detections[f].size() != fwd_offsets[f].size()) {
      throw std::runtime_error("to_linker_frames: offset rows mismatch in frame " +
                               std::to_string(f));
    }
    frames[f].reserve(detections[f].size());
    for (std::size_t i = 0; i < detections[f].size(); ++i) {
      const auto& d = detections[f][i];
      frames[f].push_back(
          {d.x, d.y, d.conf, {d.x - fwd_offsets[f][i].x, d.y - fwd_offsets[f][i].y}});
    }
  }
  return frames;
}

ScenePredictions predict_scene(ModelState& state, const Scene& scene, const FlowCosts& costs,
                               bool use_offsets) {
  ScenePredictions out;
  auto seq = infer_sequence(state, scene.frames);
  out.counts = seq.counts;
  out.detections = seq.detections;
  auto frames = to_linker_frames(seq.detections, seq.fwd_offsets);
  out.tracks = link_from_variant(frames, costs,
                                 use_offsets ? LinkVariant::with_offsets
                                             : LinkVariant::without_offsets);
  return out;
}

EvalReport evaluate_scenes(const std::vector<Scene>& scenes,
                           const std::vector<ScenePredictions>& preds, double track_match_dist) {
  if (scenes.size() != preds.size()) {
    throw std::runtime_error("evaluate_scenes: " + std::to_string(preds.size()) +
                             " prediction sets for " + std::to_string(scenes.size()) + " scenes");
  }
  EvalReport report;
  CountSeries series;
  std::vector<std::vector<DetectedPoint>> pred_frames;
  std::vector<std::vector<Vec2>> gt_frames;
  for (std::size_t s = 0; s < scenes.size(); ++s) {
    const int T = static_cast<int>(scenes[s].frames.size());
    const auto annos = annotations_per_frame(scenes[s].trajectories, T);
    std::vector<double> gt_counts(T);
    for (int f = 0; f < T; ++f) {
      gt_counts[f] = static_cast<double>(annos[f].points.size());
      std::vector<Vec2> pts;
      pts.reserve(annos[f].points.size());
      for (const auto& p : annos[f].points) pts.push_back({p.x, p.y});
      gt_frames.push_back(std::move(pts));
      pred_frames.push_back(f < static_cast<int>(preds[s].detections.size())
                                ? preds[s].detections[f]
                                : std::vector<DetectedPoint>{});
    }
    series.gt.push_back(std::move(gt_counts));
    series.est.push_back(preds[s].counts);
  }
  std::tie(report.mae, report.mse) = mae_mse(series);
  report.loc = localization_map(pred_frames, gt_frames);

  // tracking pooled across scenes with identity offsets per scene
  TrackSet pooled_pred;
  std::vector<Trajectory> pooled_gt;
  int id_base = 0;
  int frame_base = 0;
  for (std::size_t s = 0; s < scenes.size(); ++s) {
    int max_id = 0;
    for (const auto& t : preds[s].tracks.tracks) {
      Tracklet shifted = t;
      shifted.id += id_base;
      for (auto& p : shifted.points) p.frame += frame_base;
      pooled_pred.tracks.push_back(std::move(shifted));
      max_id = std::max(max_id, t.id);
    }
    for (const auto& t : scenes[s].trajectories) {
      Trajectory shifted = t;
      for (auto& p : shifted.points) p.frame += frame_base;
      pooled_gt.push_back(std::move(shifted));
    }
    id_base += max_id;
    frame_base += static_cast<int>(scenes[s].frames.size());
  }
  report.trk = tracking_map(pooled_pred, pooled_gt, track_match_dist);
  return report;
}

ExperimentResult run_experiment(const RunConfig& cfg) {
  const int total = cfg.scenes_train + cfg.scenes_test;
  auto scenes = make_dataset(cfg.scene, total, cfg.scene.seed);

  std::vector<TrainingScene> train_data;
  for (int s = 0; s < cfg.scenes_train; ++s) {
    const auto annos =
        annotations_per_frame(scenes[s].trajectories, static_cast<int>(scenes[s].frames.size()));
    train_data.push_back(prepare_training_scene(scenes[s].frames, annos, cfg.model));
  }

  ExperimentResult res;
  auto state = init_model(cfg.model, cfg.train_seed);
  train_stage(state, train_data, 1, cfg.train_steps_stage1, cfg.train_seed + 1, &res.loss_log);
  train_stage(state, train_data, 2, cfg.train_steps_stage2, cfg.train_seed + 2, &res.loss_log);

  std::vector<Scene> test_scenes(scenes.begin() + cfg.scenes_train, scenes.end());
  std::vector<ScenePredictions> preds;
  for (const auto& scene : test_scenes) {
    preds.push_back(predict_scene(state, scene, cfg.track, cfg.model.use_association));
  }
  res.report = evaluate_scenes(test_scenes, preds, cfg.eval_track_match_dist);
  return res;
}

void write_loss_log(const std::vector<StepLog>& log, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_loss_log: cannot open " + path);
  out << "step,stage,loss\n";
  char buf[96];
  for (const auto& row : log) {
    std::snprintf(buf, sizeof(buf), "%d,%d,%.17g\n", row.step, row.stage, row.loss);
    out << buf;
  }
  if (!out) throw std::runtime_error("write_loss_log: write failed for " + path);
}

}  // namespace stn
