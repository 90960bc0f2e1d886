#pragma once

#include <string>
#include <vector>

#include "stn/localization.hpp"
#include "stn/tensor.hpp"

namespace stn {

// A detection enriched with its predicted next-frame position p' = p - o.
struct LinkerDetection {
  double x = 0.0;
  double y = 0.0;
  double conf = 0.0;
  Vec2 projected;  // where this target should be in the next frame
};

struct FlowCosts {
  double entry = 2.0;
  double exit = 2.0;
  double lambda_link = 0.04;  // cost per px of projected-to-observed distance
  double gate = 25.0;         // px, no transition arcs beyond this
};

// Unit-capacity DAG over split detection nodes. Node ids: 0 = source,
// 1 = sink, detection k owns nodes 2+2k (in) and 3+2k (out).
struct FlowGraph {
  struct Arc {
    int from = 0;
    int to = 0;
    double cost = 0.0;
  };
  struct DetectionRef {
    int frame = 0;
    int index = 0;  // within its frame
    double conf = 0.0;
    double x = 0.0, y = 0.0;
  };
  std::vector<Arc> arcs;
  std::vector<DetectionRef> detections;
  int num_nodes = 2;
};

struct Tracklet {
  int id = 0;
  struct Point {
    int frame = 0;
    double x = 0.0, y = 0.0;
    double conf = 0.0;
  };
  std::vector<Point> points;
  double mean_conf = 0.0;
};

struct TrackSet {
  std::vector<Tracklet> tracks;
  double total_cost = 0.0;  // sum of accepted path costs
};

// Detection arc cost log((1-conf)/conf) with conf clamped to [1e-4, 1-1e-4];
// transition cost lambda * |p'_i - p_j| within the gate; entry/exit constants.
FlowGraph build_flow_graph(const std::vector<std::vector<LinkerDetection>>& frames,
                           const FlowCosts& costs);

// Repeatedly extracts the minimum-cost source-to-sink path (topological
// relaxation, ties to the lower node index), accepts while the path cost is
// negative, and removes used detections. Node-disjoint by construction.
TrackSet solve_min_cost_flow(const FlowGraph& graph);

enum class LinkVariant { with_offsets, without_offsets };

// without_offsets forces p' = p (zero motion) in the transition cost.
TrackSet link_from_variant(const std::vector<std::vector<LinkerDetection>>& frames,
                           const FlowCosts& costs, LinkVariant variant);

// CSV `track_id,frame,x,y,conf`
void save_tracks(const TrackSet& tracks, const std::string& path);
TrackSet load_tracks(const std::string& path);

}  // namespace stn
