#include "stn/metrics.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

using namespace stn;

namespace {

// independent confidence-ordered matcher used as the oracle
int greedy_tp_ref(std::vector<DetectedPoint> preds, const std::vector<Vec2>& gts,
                  double threshold) {
  std::stable_sort(preds.begin(), preds.end(),
                   [](const auto& a, const auto& b) { return a.conf > b.conf; });
  std::vector<bool> taken(gts.size(), false);
  int tp = 0;
  for (const auto& p : preds) {
    int best = -1;
    double bd = 1e300;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (taken[g]) continue;
      const double d = std::hypot(p.x - gts[g].x, p.y - gts[g].y);
      if (d < bd) {
        bd = d;
        best = static_cast<int>(g);
      }
    }
    if (best >= 0 && bd <= threshold) {
      taken[best] = true;
      ++tp;
    }
  }
  return tp;
}

// maximum bipartite matching size under the distance threshold
int max_matching_ref(const std::vector<DetectedPoint>& preds, const std::vector<Vec2>& gts,
                     double threshold) {
  const int n = static_cast<int>(preds.size());
  const int m = static_cast<int>(gts.size());
  std::vector<std::vector<int>> adj(n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < m; ++j) {
      if (std::hypot(preds[i].x - gts[j].x, preds[i].y - gts[j].y) <= threshold) {
        adj[i].push_back(j);
      }
    }
  }
  std::vector<int> match_gt(m, -1);
  std::vector<bool> visited;
  std::function<bool(int)> augment = [&](int i) {
    for (int j : adj[i]) {
      if (visited[j]) continue;
      visited[j] = true;
      if (match_gt[j] < 0 || augment(match_gt[j])) {
        match_gt[j] = i;
        return true;
      }
    }
    return false;
  };
  int size = 0;
  for (int i = 0; i < n; ++i) {
    visited.assign(m, false);
    if (augment(i)) ++size;
  }
  return size;
}

Trajectory make_traj(int id, int frames, double x0, double y0, double dx, double dy) {
  Trajectory t;
  t.id = id;
  for (int f = 0; f < frames; ++f) t.points.push_back({f, x0 + dx * f, y0 + dy * f});
  return t;
}

TrackSet echo_tracks(const std::vector<Trajectory>& gt, double conf = 1.0) {
  TrackSet ts;
  for (const auto& g : gt) {
    Tracklet t;
    t.id = g.id;
    for (const auto& p : g.points) t.points.push_back({p.frame, p.x, p.y, conf});
    t.mean_conf = conf;
    ts.tracks.push_back(std::move(t));
  }
  return ts;
}

}  // namespace

TEST_SUITE("metrics") {

TEST_CASE("exact counts give zero errors") {
  CountSeries s;
  s.gt = {{10, 20, 30}};
  s.est = {{10, 20, 30}};
  auto [mae, mse] = mae_mse(s);
  CHECK(mae == 0.0);
  CHECK(mse == 0.0);
}

TEST_CASE("two-frame count errors reproduce the closed form") {
  CountSeries s;
  s.gt = {{10, 20}};
  s.est = {{12, 16}};
  auto [mae, mse] = mae_mse(s);
  CHECK(std::abs(mae - 3.0) < 1e-12);
  CHECK(std::abs(mse - std::sqrt(10.0)) < 1e-12);
}

TEST_CASE("videos are weighted by frame counts, not averaged per video") {
  CountSeries s;
  s.gt = {{10.0, 10.0, 10.0}, {5.0}};
  s.est = {{11.0, 11.0, 11.0}, {9.0}};
  auto [mae, mse] = mae_mse(s);
  // formula: (1/sum N_i) * sum |e|, so (3*1 + 4) / 4
  CHECK(mae == doctest::Approx((3.0 * 1.0 + 4.0) / 4.0).epsilon(1e-12));
  CHECK(mse == doctest::Approx(std::sqrt((3.0 * 1.0 + 16.0) / 4.0)).epsilon(1e-12));
}

TEST_CASE("mae_mse rejects an empty series") {
  CHECK_THROWS_AS(mae_mse(CountSeries{}), std::runtime_error);
}

TEST_CASE("one prediction on one ground truth within threshold is a true positive") {
  auto m = greedy_match({{5.0, 5.0, 0.9}}, {{6.0, 5.0}}, 5.0);
  CHECK(m.num_tp == 1);
}

TEST_CASE("a duplicate prediction becomes a false positive") {
  auto m = greedy_match({{5.0, 5.0, 0.9}, {5.5, 5.0, 0.8}}, {{5.0, 5.0}}, 5.0);
  CHECK(m.num_tp == 1);
  REQUIRE(m.scored.size() == 2);
  CHECK(m.scored[0].second);
  CHECK_FALSE(m.scored[1].second);
}

TEST_CASE("greedy matching equals the reference on random small instances") {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> pos(0.0, 20.0), conf(0.0, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<DetectedPoint> preds;
    std::vector<Vec2> gts;
    const int np = static_cast<int>(rng() % 7);
    const int ng = static_cast<int>(rng() % 7);
    for (int i = 0; i < np; ++i) preds.push_back({pos(rng), pos(rng), conf(rng)});
    for (int i = 0; i < ng; ++i) gts.push_back({pos(rng), pos(rng)});
    const double thr = 1.0 + (trial % 8);
    auto m = greedy_match(preds, gts, thr);
    CHECK(m.num_tp == greedy_tp_ref(preds, gts, thr));
    // never better than the optimal assignment
    CHECK(m.num_tp <= max_matching_ref(preds, gts, thr));
  }
}

TEST_CASE("greedy matching is independent of ground-truth order") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> pos(0.0, 20.0), conf(0.0, 1.0);
  std::vector<DetectedPoint> preds;
  std::vector<Vec2> gts;
  for (int i = 0; i < 6; ++i) preds.push_back({pos(rng), pos(rng), conf(rng)});
  for (int i = 0; i < 6; ++i) gts.push_back({pos(rng), pos(rng)});
  auto base = greedy_match(preds, gts, 6.0);
  auto shuffled = gts;
  std::reverse(shuffled.begin(), shuffled.end());
  auto other = greedy_match(preds, shuffled, 6.0);
  CHECK(base.num_tp == other.num_tp);
  REQUIRE(base.scored.size() == other.scored.size());
  for (std::size_t i = 0; i < base.scored.size(); ++i) {
    CHECK(base.scored[i] == other.scored[i]);
  }
}

TEST_CASE("single hit at distance five yields an l-map of 21/25") {
  std::vector<std::vector<DetectedPoint>> preds = {{{10.0, 5.0, 1.0}}};
  std::vector<std::vector<Vec2>> gts = {{{5.0, 5.0}}};
  auto ev = localization_map(preds, gts);
  for (int t = 1; t <= 25; ++t) {
    CHECK(ev.ap[t - 1] == (t >= 5 ? 1.0 : 0.0));
  }
  CHECK(ev.l_map == doctest::Approx(21.0 / 25.0).epsilon(1e-12));
}

TEST_CASE("perfect detections give an l-map of one") {
  std::vector<std::vector<DetectedPoint>> preds(3);
  std::vector<std::vector<Vec2>> gts(3);
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> pos(0.0, 30.0);
  for (int f = 0; f < 3; ++f) {
    for (int i = 0; i < 4; ++i) {
      const double x = pos(rng), y = pos(rng);
      gts[f].push_back({x, y});
      preds[f].push_back({x, y, 1.0});
    }
  }
  auto ev = localization_map(preds, gts);
  CHECK(ev.l_map == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("one correct and one false prediction give ap one half") {
  std::vector<std::vector<DetectedPoint>> preds = {
      {{5.0, 5.0, 0.9}, {100.0, 100.0, 0.8}}};
  std::vector<std::vector<Vec2>> gts = {{{5.0, 5.0}, {50.0, 50.0}}};
  auto ev = localization_map(preds, gts);
  CHECK(ev.ap[24] == doctest::Approx(0.5).epsilon(1e-12));  // permissive threshold
}

TEST_CASE("ap grows with the distance threshold and l-map is their mean") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> pos(0.0, 40.0), conf(0.0, 1.0), noise(-8.0, 8.0);
  std::vector<std::vector<DetectedPoint>> preds(4);
  std::vector<std::vector<Vec2>> gts(4);
  for (int f = 0; f < 4; ++f) {
    for (int i = 0; i < 6; ++i) {
      const double x = pos(rng), y = pos(rng);
      gts[f].push_back({x, y});
      preds[f].push_back({x + noise(rng), y + noise(rng), conf(rng)});
    }
  }
  auto ev = localization_map(preds, gts);
  for (int t = 1; t < 25; ++t) CHECK(ev.ap[t] >= ev.ap[t - 1] - 1e-12);
  double mean = 0.0;
  for (double a : ev.ap) mean += a;
  CHECK(std::abs(ev.l_map - mean / 25.0) < 1e-12);
}

TEST_CASE("empty ground truth reports zero with a warning") {
  auto ev = localization_map({{{1.0, 1.0, 0.5}}}, {{}});
  CHECK(ev.empty_gt_warning);
  CHECK(ev.l_map == 0.0);
}

TEST_CASE("ground truth echoed as tracks gives a t-map of one") {
  std::vector<Trajectory> gt = {make_traj(1, 10, 5, 5, 1, 0), make_traj(2, 10, 20, 20, 0, 1)};
  auto ev = tracking_map(echo_tracks(gt), gt);
  CHECK(ev.t_map == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("an eight-of-ten overlap is correct at every ratio threshold") {
  std::vector<Trajectory> gt = {make_traj(1, 10, 5, 5, 1, 0)};
  TrackSet ts;
  Tracklet t;
  t.id = 1;
  for (int f = 0; f < 8; ++f) t.points.push_back({f, 5.0 + f, 5.0, 0.9});
  t.mean_conf = 0.9;
  ts.tracks.push_back(t);
  auto ev = tracking_map(ts, gt);
  for (double ap : ev.ap) CHECK(ap == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("a ratio of 0.15 passes only the strictly smaller threshold") {
  // 3 matched frames of a 20-frame ground truth: ratio 0.15 exactly
  std::vector<Trajectory> gt = {make_traj(1, 20, 5, 5, 0, 0)};
  TrackSet ts;
  Tracklet t;
  t.id = 1;
  for (int f = 0; f < 3; ++f) t.points.push_back({f, 5.0, 5.0, 0.9});
  for (int f = 3; f < 6; ++f) t.points.push_back({f, 500.0, 500.0, 0.9});  // far away
  t.mean_conf = 0.9;
  ts.tracks.push_back(t);
  auto ev = tracking_map(ts, gt);
  CHECK(ev.ap[0] == doctest::Approx(1.0).epsilon(1e-12));  // 0.15 > 0.10
  CHECK(ev.ap[1] == 0.0);                                  // not > 0.15
  CHECK(ev.ap[2] == 0.0);
}

TEST_CASE("empty ground-truth trajectories warn and report zero") {
  auto ev = tracking_map(TrackSet{}, {});
  CHECK(ev.empty_gt_warning);
  CHECK(ev.t_map == 0.0);
}

TEST_CASE("report formats carry the headline numbers") {
  EvalReport r;
  r.mae = 1.25;
  r.loc.l_map = 0.84;
  r.trk.t_map = 0.5;
  auto table = format_report_table(r);
  CHECK(table.find("1.2500") != std::string::npos);
  CHECK(table.find("0.8400") != std::string::npos);
  auto kv = format_report_keyvalues(r);
  CHECK(kv.find("l_map=") != std::string::npos);
  CHECK(kv.find("t_ap@0.10=") != std::string::npos);
}

}  // TEST_SUITE
