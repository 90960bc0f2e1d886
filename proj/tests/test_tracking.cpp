#include "stn/tracking.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>
#include <set>

using namespace stn;

namespace {

struct Instance {
  std::vector<std::vector<LinkerDetection>> frames;
};

// exhaustive optimum: enumerate every set of node-disjoint frame-contiguous
// paths buildable from the gated arcs and take the minimum total cost
struct Enumerator {
  const Instance& inst;
  const FlowCosts& costs;
  std::vector<std::pair<int, int>> dets;  // (frame, index)
  std::vector<bool> used;
  double best = 0.0;

  Enumerator(const Instance& i, const FlowCosts& c) : inst(i), costs(c) {
    for (std::size_t f = 0; f < inst.frames.size(); ++f) {
      for (std::size_t k = 0; k < inst.frames[f].size(); ++k) {
        dets.emplace_back(static_cast<int>(f), static_cast<int>(k));
      }
    }
    used.assign(dets.size(), false);
  }

  double det_cost(int f, int k) const {
    const double conf = std::clamp(inst.frames[f][k].conf, 1e-4, 1.0 - 1e-4);
    return std::log((1.0 - conf) / conf);
  }
  bool linkable(int f, int i, int j) const {
    const double dx = inst.frames[f][i].projected.x - inst.frames[f + 1][j].x;
    const double dy = inst.frames[f][i].projected.y - inst.frames[f + 1][j].y;
    return std::sqrt(dx * dx + dy * dy) <= costs.gate;
  }
  double link_cost(int f, int i, int j) const {
    const double dx = inst.frames[f][i].projected.x - inst.frames[f + 1][j].x;
    const double dy = inst.frames[f][i].projected.y - inst.frames[f + 1][j].y;
    return costs.lambda_link * std::sqrt(dx * dx + dy * dy);
  }

  int find_det(int f, int k) const {
    for (std::size_t d = 0; d < dets.size(); ++d) {
      if (dets[d] == std::make_pair(f, k)) return static_cast<int>(d);
    }
    return -1;
  }

  double run() {
    best = 0.0;
    explore(0);
    return best;
  }

  // detections ordered by (frame, index): any path continuation has a higher
  // order than its start, so deciding starts in order covers every path set
  void explore(int d) {
    if (d == static_cast<int>(dets.size())) {
      evaluate_current();
      return;
    }
    explore(d + 1);  // detection d never starts a path
    if (!used[d]) {
      // detection d starts a path; enumerate its continuations
      const auto [f, k] = dets[d];
      used[d] = true;
      extend_collect(f, k, costs.entry + det_cost(f, k), d);
      used[d] = false;
    }
  }
  double running = 0.0;
  void extend_collect(int f, int k, double path_cost, int d) {
    {
      running += path_cost + costs.exit;
      explore(d + 1);
      running -= path_cost + costs.exit;
    }
    if (f + 1 < static_cast<int>(inst.frames.size())) {
      for (std::size_t j = 0; j < inst.frames[f + 1].size(); ++j) {
        const int dj = find_det(f + 1, static_cast<int>(j));
        if (used[dj] || !linkable(f, k, static_cast<int>(j))) continue;
        used[dj] = true;
        extend_collect(f + 1, static_cast<int>(j),
                       path_cost + link_cost(f, k, static_cast<int>(j)) +
                           det_cost(f + 1, static_cast<int>(j)),
                       d);
        used[dj] = false;
      }
    }
  }
  void evaluate_current() { best = std::min(best, running); }
};

double enumerate_optimum(const Instance& inst, const FlowCosts& costs) {
  Enumerator e(inst, costs);
  return e.run();
}

LinkerDetection det(double x, double y, double conf) { return {x, y, conf, {x, y}}; }

}  // namespace

TEST_SUITE("tracking") {

TEST_CASE("detection cost is zero at confidence one half") {
  Instance inst;
  inst.frames = {{det(1, 1, 0.5)}};
  auto g = build_flow_graph(inst.frames, FlowCosts{});
  bool found = false;
  for (const auto& a : g.arcs) {
    if (a.from == 2 && a.to == 3) {
      CHECK(a.cost == doctest::Approx(0.0));
      found = true;
    }
  }
  CHECK(found);
}

TEST_CASE("transition cost is zero when the projection lands on the detection") {
  Instance inst;
  auto d0 = det(5, 5, 0.9);
  d0.projected = {8.0, 5.0};
  inst.frames = {{d0}, {det(8, 5, 0.9)}};
  auto g = build_flow_graph(inst.frames, FlowCosts{});
  bool found = false;
  for (const auto& a : g.arcs) {
    if (a.from == 3 && a.to == 4) {
      CHECK(a.cost == doctest::Approx(0.0));
      found = true;
    }
  }
  CHECK(found);
}

TEST_CASE("two-frame two-detection instance builds the hand-enumerated arc set") {
  Instance inst;
  inst.frames = {{det(0, 0, 0.9), det(30, 0, 0.8)}, {det(1, 0, 0.9)}};
  FlowCosts costs;
  costs.gate = 10.0;
  auto g = build_flow_graph(inst.frames, costs);
  // per detection: entry, exit, in->out; transitions: only det(0,0) reaches det(1,0)
  // nodes: source 0, sink 1, d0=(2,3), d1=(4,5), d2=(6,7)
  REQUIRE(g.detections.size() == 3);
  int transitions = 0;
  for (const auto& a : g.arcs) {
    if (a.from == 3 && a.to == 6) ++transitions;     // d0 out -> d2 in
    CHECK_FALSE((a.from == 5 && a.to == 6));         // d1 is out of gate
  }
  CHECK(transitions == 1);
  CHECK(g.arcs.size() == 3 * 3 + 1);
}

TEST_CASE("one confident detection per frame links into a single tracklet") {
  Instance inst;
  for (int f = 0; f < 5; ++f) inst.frames.push_back({det(10.0 + f, 10.0, 0.95)});
  auto tracks = solve_min_cost_flow(build_flow_graph(inst.frames, FlowCosts{}));
  REQUIRE(tracks.tracks.size() == 1);
  CHECK(tracks.tracks[0].points.size() == 5);
  for (int f = 0; f < 5; ++f) CHECK(tracks.tracks[0].points[f].frame == f);
}

TEST_CASE("half-confidence detections with positive entry and exit costs yield nothing") {
  Instance inst;
  for (int f = 0; f < 4; ++f) inst.frames.push_back({det(10.0 + f, 10.0, 0.5)});
  auto tracks = solve_min_cost_flow(build_flow_graph(inst.frames, FlowCosts{}));
  CHECK(tracks.tracks.empty());
  CHECK(tracks.total_cost == 0.0);
}

TEST_CASE("offset-guided projections keep identities through a crossing") {
  // two targets swap sides between frames; nearest-position linking crosses them
  Instance inst;
  auto a0 = det(0, 0, 0.95);
  a0.projected = {10.0, 10.0};
  auto b0 = det(10, 0, 0.95);
  b0.projected = {0.0, 10.0};
  inst.frames = {{a0, b0}, {det(10, 10, 0.95), det(0, 10, 0.95)}};
  FlowCosts costs;
  costs.gate = 25.0;

  auto with = link_from_variant(inst.frames, costs, LinkVariant::with_offsets);
  REQUIRE(with.tracks.size() == 2);
  // track starting at (0,0) must continue at (10,10)
  for (const auto& t : with.tracks) {
    REQUIRE(t.points.size() == 2);
    if (t.points[0].x == 0.0) CHECK(t.points[1].x == 10.0);
    if (t.points[0].x == 10.0) CHECK(t.points[1].x == 0.0);
  }

  auto without = link_from_variant(inst.frames, costs, LinkVariant::without_offsets);
  REQUIRE(without.tracks.size() == 2);
  for (const auto& t : without.tracks) {
    REQUIRE(t.points.size() == 2);
    if (t.points[0].x == 0.0) CHECK(t.points[1].x == 0.0);  // identity swap
  }

  // solver matches the exhaustive optimum on the 2x2 instance
  auto g = build_flow_graph(inst.frames, costs);
  CHECK(solve_min_cost_flow(g).total_cost ==
        doctest::Approx(enumerate_optimum(inst, costs)).epsilon(1e-9));
}

TEST_CASE("solver cost equals exhaustive enumeration on random small instances") {
  std::mt19937_64 rng(2024);
  std::uniform_real_distribution<double> pos(0.0, 40.0), conf(0.05, 0.99), jitter(-3.0, 3.0);
  FlowCosts costs;
  costs.gate = 18.0;
  for (int trial = 0; trial < 60; ++trial) {
    Instance inst;
    const int F = 2 + static_cast<int>(rng() % 2);
    int remaining = 2 + static_cast<int>(rng() % 5);  // up to 6 detections
    inst.frames.resize(F);
    for (int f = 0; f < F && remaining > 0; ++f) {
      const int here = f == F - 1 ? remaining : static_cast<int>(rng() % (remaining + 1));
      for (int k = 0; k < here; ++k) {
        auto d = det(pos(rng), pos(rng), conf(rng));
        d.projected = {d.x + jitter(rng), d.y + jitter(rng)};
        inst.frames[f].push_back(d);
      }
      remaining -= here;
    }
    auto solved = solve_min_cost_flow(build_flow_graph(inst.frames, costs));
    const double opt = enumerate_optimum(inst, costs);
    CHECK(solved.total_cost == doctest::Approx(opt).epsilon(1e-9));
    // node-disjointness
    std::set<std::pair<int, long>> seen;
    for (const auto& t : solved.tracks) {
      for (const auto& p : t.points) {
        const auto key = std::make_pair(p.frame, std::lround(p.x * 1024) * 100000 +
                                                     std::lround(p.y * 1024));
        CHECK(seen.insert(key).second);
      }
    }
  }
}

TEST_CASE("variants agree on a static scene") {
  Instance inst;
  for (int f = 0; f < 4; ++f) {
    inst.frames.push_back({det(5, 5, 0.9), det(20, 20, 0.85)});
  }
  FlowCosts costs;
  auto a = link_from_variant(inst.frames, costs, LinkVariant::with_offsets);
  auto b = link_from_variant(inst.frames, costs, LinkVariant::without_offsets);
  REQUIRE(a.tracks.size() == b.tracks.size());
  CHECK(a.total_cost == doctest::Approx(b.total_cost));
}

TEST_CASE("fast coherent drift keeps links only with offsets") {
  Instance inst;
  // motion of 15 px per frame against a 12 px gate
  for (int f = 0; f < 3; ++f) {
    auto d = det(5.0 + 15.0 * f, 10.0, 0.95);
    d.projected = {5.0 + 15.0 * (f + 1), 10.0};
    inst.frames.push_back({d});
  }
  FlowCosts costs;
  costs.gate = 12.0;
  auto with = link_from_variant(inst.frames, costs, LinkVariant::with_offsets);
  REQUIRE(with.tracks.size() == 1);
  CHECK(with.tracks[0].points.size() == 3);
  auto without = link_from_variant(inst.frames, costs, LinkVariant::without_offsets);
  for (const auto& t : without.tracks) CHECK(t.points.size() == 1);
}

TEST_CASE("empty detections produce an empty track set") {
  Instance inst;
  inst.frames.resize(5);
  auto tracks = link_from_variant(inst.frames, FlowCosts{}, LinkVariant::with_offsets);
  CHECK(tracks.tracks.empty());
}

TEST_CASE("track file round trip") {
  Instance inst;
  for (int f = 0; f < 3; ++f) inst.frames.push_back({det(4.0 + f, 9.0, 0.9)});
  auto tracks = solve_min_cost_flow(build_flow_graph(inst.frames, FlowCosts{}));
  const auto path = std::filesystem::temp_directory_path() / "stn_tracks.csv";
  save_tracks(tracks, path.string());
  auto back = load_tracks(path.string());
  REQUIRE(back.tracks.size() == tracks.tracks.size());
  CHECK(back.tracks[0].points.size() == tracks.tracks[0].points.size());
  CHECK(back.tracks[0].mean_conf == doctest::Approx(tracks.tracks[0].mean_conf));
  std::filesystem::remove(path);
}

}  // TEST_SUITE
