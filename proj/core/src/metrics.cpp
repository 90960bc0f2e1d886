#include "stn/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace stn {

std::pair<double, double> mae_mse(const CountSeries& series) {
  if (series.gt.size() != series.est.size()) {
    throw std::runtime_error("mae_mse: video count mismatch");
  }
  std::size_t total = 0;
  double abs_acc = 0.0, sq_acc = 0.0;
  for (std::size_t v = 0; v < series.gt.size(); ++v) {
    if (series.gt[v].size() != series.est[v].size()) {
      throw std::runtime_error("mae_mse: frame count mismatch in video " + std::to_string(v));
    }
    for (std::size_t f = 0; f < series.gt[v].size(); ++f) {
      const double e = series.gt[v][f] - series.est[v][f];
      abs_acc += std::abs(e);
      sq_acc += e * e;
      ++total;
    }
  }
  if (total == 0) throw std::runtime_error("mae_mse: empty series");
  return {abs_acc / total, std::sqrt(sq_acc / total)};
}

GreedyMatches greedy_match(const std::vector<DetectedPoint>& preds, const std::vector<Vec2>& gts,
                           double dist_threshold) {
  if (dist_threshold <= 0.0) throw std::runtime_error("greedy_match: threshold must be > 0");
  GreedyMatches out;
  out.num_gt = static_cast<int>(gts.size());
  std::vector<int> order(preds.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    if (preds[a].conf != preds[b].conf) return preds[a].conf > preds[b].conf;
    return a < b;
  });
  std::vector<bool> claimed(gts.size(), false);
  const double t2 = dist_threshold * dist_threshold;
  for (int pi : order) {
    double best = std::numeric_limits<double>::infinity();
    int best_gt = -1;
    for (std::size_t gi = 0; gi < gts.size(); ++gi) {
      if (claimed[gi]) continue;
      const double dx = preds[pi].x - gts[gi].x;
      const double dy = preds[pi].y - gts[gi].y;
      const double d2 = dx * dx + dy * dy;
      if (d2 < best) {
        best = d2;
        best_gt = static_cast<int>(gi);
      }
    }
    const bool tp = best_gt >= 0 && best <= t2;
    if (tp) {
      claimed[best_gt] = true;
      ++out.num_tp;
    }
    out.scored.emplace_back(preds[pi].conf, tp);
  }
  return out;
}

double average_precision(std::vector<std::pair<double, bool>> scored, int num_gt) {
  if (num_gt <= 0) return 0.0;
  std::stable_sort(scored.begin(), scored.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  const std::size_t n = scored.size();
  std::vector<double> precision(n), recall(n);
  int tp = 0;
  for (std::size_t k = 0; k < n; ++k) {
    if (scored[k].second) ++tp;
    precision[k] = static_cast<double>(tp) / static_cast<double>(k + 1);
    recall[k] = static_cast<double>(tp) / num_gt;
  }
  // area under the precision envelope over all recall points
  double ap = 0.0;
  double env = 0.0;
  for (std::size_t k = n; k-- > 0;) {
    env = std::max(env, precision[k]);
    const double r_prev = k == 0 ? 0.0 : recall[k - 1];
    ap += env * (recall[k] - r_prev);
  }
  return ap;
}

LocalizationEval localization_map(const std::vector<std::vector<DetectedPoint>>& pred_frames,
                                  const std::vector<std::vector<Vec2>>& gt_frames) {
  if (pred_frames.size() != gt_frames.size()) {
    throw std::runtime_error("localization_map: frame count mismatch (" +
                             std::to_string(pred_frames.size()) + " prediction frames, " +
                             std::to_string(gt_frames.size()) + " ground-truth frames)");
  }
  LocalizationEval out;
  int total_gt = 0;
  for (const auto& g : gt_frames) total_gt += static_cast<int>(g.size());
  if (total_gt == 0) {
    out.empty_gt_warning = true;
    return out;  // undefined AP reported as 0
  }
  for (int t = 1; t <= 25; ++t) {
    std::vector<std::pair<double, bool>> pooled;
    for (std::size_t f = 0; f < pred_frames.size(); ++f) {
      auto m = greedy_match(pred_frames[f], gt_frames[f], static_cast<double>(t));
      pooled.insert(pooled.end(), m.scored.begin(), m.scored.end());
    }
    out.ap[t - 1] = average_precision(std::move(pooled), total_gt);
  }
  out.l_map = std::accumulate(out.ap.begin(), out.ap.end(), 0.0) / 25.0;
  out.ap10 = out.ap[9];
  out.ap15 = out.ap[14];
  out.ap20 = out.ap[19];
  return out;
}

TrackingEval tracking_map(const TrackSet& pred, const std::vector<Trajectory>& gt,
                          double match_dist) {
  TrackingEval out;
  if (gt.empty()) {
    out.empty_gt_warning = true;
    return out;
  }
  // tracklets in descending mean confidence; ties keep input order
  std::vector<int> order(pred.tracks.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return pred.tracks[a].mean_conf > pred.tracks[b].mean_conf;
  });

  const double d2max = match_dist * match_dist;
  auto matched_ratio = [&](const Tracklet& t, const Trajectory& g) {
    if (g.points.empty()) return 0.0;
    int hits = 0;
    for (const auto& gp : g.points) {
      for (const auto& tp : t.points) {
        if (tp.frame != gp.frame) continue;
        const double dx = tp.x - gp.x, dy = tp.y - gp.y;
        if (dx * dx + dy * dy <= d2max) ++hits;
        break;  // one tracklet point per frame
      }
    }
    return static_cast<double>(hits) / static_cast<double>(g.points.size());
  };

  std::vector<bool> claimed(gt.size(), false);
  std::vector<std::pair<double, double>> claims;  // (mean_conf, claimed ratio) per tracklet
  claims.reserve(order.size());
  for (int ti : order) {
    double best_ratio = 0.0;
    int best_gt = -1;
    for (std::size_t gi = 0; gi < gt.size(); ++gi) {
      if (claimed[gi]) continue;
      const double r = matched_ratio(pred.tracks[ti], gt[gi]);
      if (r > best_ratio) {  // strict: ties keep the lower GT index
        best_ratio = r;
        best_gt = static_cast<int>(gi);
      }
    }
    if (best_gt >= 0) claimed[best_gt] = true;  // only ratio > 0 claims
    claims.emplace_back(pred.tracks[ti].mean_conf, best_ratio);
  }

  const std::array<double, 3> thresholds{0.10, 0.15, 0.20};
  for (std::size_t k = 0; k < thresholds.size(); ++k) {
    std::vector<std::pair<double, bool>> scored;
    scored.reserve(claims.size());
    for (const auto& [conf, ratio] : claims) scored.emplace_back(conf, ratio > thresholds[k]);
    out.ap[k] = average_precision(std::move(scored), static_cast<int>(gt.size()));
  }
  out.t_map = (out.ap[0] + out.ap[1] + out.ap[2]) / 3.0;
  return out;
}

std::string format_report_table(const EvalReport& r) {
  std::ostringstream os;
  char buf[160];
  os << "metric        value\n";
  os << "------------  --------\n";
  std::snprintf(buf, sizeof(buf), "MAE           %.4f\n", r.mae);
  os << buf;
  std::snprintf(buf, sizeof(buf), "MSE           %.4f\n", r.mse);
  os << buf;
  std::snprintf(buf, sizeof(buf), "L-mAP         %.4f\n", r.loc.l_map);
  os << buf;
  std::snprintf(buf, sizeof(buf), "L-AP@10       %.4f\n", r.loc.ap10);
  os << buf;
  std::snprintf(buf, sizeof(buf), "L-AP@15       %.4f\n", r.loc.ap15);
  os << buf;
  std::snprintf(buf, sizeof(buf), "L-AP@20       %.4f\n", r.loc.ap20);
  os << buf;
  std::snprintf(buf, sizeof(buf), "T-mAP         %.4f\n", r.trk.t_map);
  os << buf;
  std::snprintf(buf, sizeof(buf), "T-AP@0.10     %.4f\n", r.trk.ap[0]);
  os << buf;
  std::snprintf(buf, sizeof(buf), "T-AP@0.15     %.4f\n", r.trk.ap[1]);
  os << buf;
  std::snprintf(buf, sizeof(buf), "T-AP@0.20     %.4f\n", r.trk.ap[2]);
  os << buf;
  if (r.loc.empty_gt_warning || r.trk.empty_gt_warning) {
    os << "warning: no ground truth present, AP metrics reported as 0\n";
  }
  return os.str();
}

std::string format_report_keyvalues(const EvalReport& r) {
  std::ostringstream os;
  char buf[160];
  auto kv = [&](const char* key, double v) {
    std::snprintf(buf, sizeof(buf), "%s=%.17g\n", key, v);
    os << buf;
  };
  kv("mae", r.mae);
  kv("mse", r.mse);
  kv("l_map", r.loc.l_map);
  for (int t = 1; t <= 25; ++t) {
    std::snprintf(buf, sizeof(buf), "l_ap@%d=%.17g\n", t, r.loc.ap[t - 1]);
    os << buf;
  }
  kv("t_map", r.trk.t_map);
  kv("t_ap@0.10", r.trk.ap[0]);
  kv("t_ap@0.15", r.trk.ap[1]);
  kv("t_ap@0.20", r.trk.ap[2]);
  return os.str();
}

}  // namespace stn
