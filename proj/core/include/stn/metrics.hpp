#pragma once

#include <array>
#include <string>
#include <vector>

#include "stn/annotations.hpp"
#include "stn/localization.hpp"
#include "stn/tracking.hpp"

namespace stn {

// Ground-truth and estimated per-frame counts, one inner vector per video.
struct CountSeries {
  std::vector<std::vector<double>> gt;
  std::vector<std::vector<double>> est;
};

// MAE = mean |z - z^| over all frames of all videos, MSE = sqrt of the mean
// squared error; frames weighted equally across videos.
std::pair<double, double> mae_mse(const CountSeries& series);

// Greedy localization matching: predictions in descending confidence, each
// claims its nearest unclaimed ground truth within dist_threshold; leftover
// predictions are false positives.
struct GreedyMatches {
  std::vector<std::pair<double, bool>> scored;  // (confidence, is_tp), desc confidence
  int num_gt = 0;
  int num_tp = 0;
};
GreedyMatches greedy_match(const std::vector<DetectedPoint>& preds,
                           const std::vector<Vec2>& gts, double dist_threshold);

// All-points average precision from (confidence, tp) pairs.
double average_precision(std::vector<std::pair<double, bool>> scored, int num_gt);

struct LocalizationEval {
  std::array<double, 25> ap{};  // thresholds 1..25 px
  double l_map = 0.0;
  double ap10 = 0.0, ap15 = 0.0, ap20 = 0.0;
  bool empty_gt_warning = false;
};
LocalizationEval localization_map(const std::vector<std::vector<DetectedPoint>>& pred_frames,
                                  const std::vector<std::vector<Vec2>>& gt_frames);

struct TrackingEval {
  std::array<double, 3> ap{};  // ratio thresholds 0.10, 0.15, 0.20
  double t_map = 0.0;
  bool empty_gt_warning = false;
};
// Tracklets in descending mean confidence claim their best-ratio unclaimed GT
// trajectory (ratio = matched frames within match_dist / GT length); a claim
// is a TP at threshold r iff its ratio is strictly larger than r.
TrackingEval tracking_map(const TrackSet& pred, const std::vector<Trajectory>& gt,
                          double match_dist = 25.0);

struct EvalReport {
  double mae = 0.0;
  double mse = 0.0;
  LocalizationEval loc;
  TrackingEval trk;

  bool operator==(const EvalReport&) const = default;
};

std::string format_report_table(const EvalReport& r);
std::string format_report_keyvalues(const EvalReport& r);

}  // namespace stn
