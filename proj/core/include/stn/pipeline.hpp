#pragma once

#include <string>
#include <vector>

#include "stn/metrics.hpp"
#include "stn/network.hpp"
#include "stn/runconfig.hpp"
#include "stn/synth.hpp"
#include "stn/tracking.hpp"

namespace stn {

// Scenes seeded scene.seed + index; deterministic per config.
std::vector<Scene> make_dataset(const SceneConfig& base, int num_scenes,
                                std::uint64_t first_seed);

// Detections enriched with projected positions for the linker.
std::vector<std::vector<LinkerDetection>> to_linker_frames(
    const std::vector<std::vector<DetectedPoint>>& detections,
    const std::vector<std::vector<Vec2>>& fwd_offsets);

struct ScenePredictions {
  std::vector<double> counts;
  std::vector<std::vector<DetectedPoint>> detections;
  TrackSet tracks;
};

// Full report over parallel per-scene ground truth and predictions.
EvalReport evaluate_scenes(const std::vector<Scene>& scenes,
                           const std::vector<ScenePredictions>& preds, double track_match_dist);

// Inference + linking over one scene.
ScenePredictions predict_scene(ModelState& state, const Scene& scene, const FlowCosts& costs,
                               bool use_offsets);

struct ExperimentResult {
  std::vector<StepLog> loss_log;
  EvalReport report;
};

// Two-stage training on the train split, evaluation on the test split.
ExperimentResult run_experiment(const RunConfig& cfg);

void write_loss_log(const std::vector<StepLog>& log, const std::string& path);

}  // namespace stn
