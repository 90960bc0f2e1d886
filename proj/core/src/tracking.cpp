#include "stn/tracking.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <stdexcept>

namespace stn {

FlowGraph build_flow_graph(const std::vector<std::vector<LinkerDetection>>& frames,
                           const FlowCosts& costs) {
  if (costs.gate <= 0.0) throw std::runtime_error("build_flow_graph: gate must be > 0");
  FlowGraph g;
  // assign node pairs frame by frame so node order is topological
  std::vector<std::vector<int>> det_id(frames.size());
  for (std::size_t f = 0; f < frames.size(); ++f) {
    det_id[f].resize(frames[f].size());
    for (std::size_t i = 0; i < frames[f].size(); ++i) {
      det_id[f][i] = static_cast<int>(g.detections.size());
      g.detections.push_back({static_cast<int>(f), static_cast<int>(i), frames[f][i].conf,
                              frames[f][i].x, frames[f][i].y});
    }
  }
  g.num_nodes = 2 + 2 * static_cast<int>(g.detections.size());
  auto in_node = [](int k) { return 2 + 2 * k; };
  auto out_node = [](int k) { return 3 + 2 * k; };

  for (std::size_t f = 0; f < frames.size(); ++f) {
    for (std::size_t i = 0; i < frames[f].size(); ++i) {
      const int k = det_id[f][i];
      const double conf = std::clamp(frames[f][i].conf, 1e-4, 1.0 - 1e-4);
      g.arcs.push_back({in_node(k), out_node(k), std::log((1.0 - conf) / conf)});
      g.arcs.push_back({0, in_node(k), costs.entry});
      g.arcs.push_back({out_node(k), 1, costs.exit});
      if (f + 1 < frames.size()) {
        for (std::size_t j = 0; j < frames[f + 1].size(); ++j) {
          const double dx = frames[f][i].projected.x - frames[f + 1][j].x;
          const double dy = frames[f][i].projected.y - frames[f + 1][j].y;
          const double d = std::sqrt(dx * dx + dy * dy);
          if (d <= costs.gate) {
            g.arcs.push_back({out_node(k), in_node(det_id[f + 1][j]), costs.lambda_link * d});
          }
        }
      }
    }
  }
  return g;
}

TrackSet solve_min_cost_flow(const FlowGraph& graph) {
  const int n = graph.num_nodes;
  // unit-capacity successive shortest paths with residual arcs: augment along
  // the cheapest source-to-sink path while its cost stays negative, which
  // yields the cost-minimizing set of node-disjoint paths
  struct Edge {
    int to;
    double cost;
    int cap;       // remaining capacity (0 or 1)
    int partner;   // index of the reverse edge
    bool forward;  // original arc (true) or residual reverse (false)
  };
  std::vector<std::vector<Edge>> adj(n);
  {
    auto arcs = graph.arcs;
    std::sort(arcs.begin(), arcs.end(), [](const FlowGraph::Arc& a, const FlowGraph::Arc& b) {
      if (a.from != b.from) return a.from < b.from;
      if (a.to != b.to) return a.to < b.to;
      return a.cost < b.cost;
    });
    for (const auto& a : arcs) {
      adj[a.from].push_back({a.to, a.cost, 1, static_cast<int>(adj[a.to].size()), true});
      adj[a.to].push_back({a.from, -a.cost, 0, static_cast<int>(adj[a.from].size()) - 1, false});
    }
  }

  constexpr double inf = std::numeric_limits<double>::infinity();
  TrackSet out;
  while (true) {
    // Bellman-Ford; the residual graph of shortest-path augmentations has no
    // negative cycles, so n-1 rounds suffice
    std::vector<double> dist(n, inf);
    std::vector<std::pair<int, int>> parent(n, {-1, -1});  // (node, edge index)
    dist[0] = 0.0;
    for (int round = 0; round < n; ++round) {
      bool changed = false;
      for (int u = 0; u < n; ++u) {
        if (dist[u] == inf) continue;
        for (std::size_t e = 0; e < adj[u].size(); ++e) {
          const auto& edge = adj[u][e];
          if (edge.cap <= 0) continue;
          if (dist[u] + edge.cost < dist[edge.to] - 1e-15) {  // strict: keeps first-found parent
            dist[edge.to] = dist[u] + edge.cost;
            parent[edge.to] = {u, static_cast<int>(e)};
            changed = true;
          }
        }
      }
      if (!changed) break;
    }
    if (dist[1] == inf || dist[1] >= 0.0) break;  // accept only negative-cost paths
    out.total_cost += dist[1];
    for (int v = 1; v != 0;) {
      const auto [u, e] = parent[v];
      adj[u][e].cap -= 1;
      adj[adj[u][e].to][adj[u][e].partner].cap += 1;
      v = u;
    }
  }

  // decompose the final flow into node-disjoint paths; a spent source arc
  // opens one tracklet (a forward edge carries flow iff its capacity is 0)
  auto det_of_node = [](int node) { return (node - 2) / 2; };
  for (const auto& start : adj[0]) {
    if (!start.forward || start.cap != 0) continue;
    Tracklet t;
    t.id = static_cast<int>(out.tracks.size()) + 1;
    int v = start.to;
    while (v != 1) {
      if ((v - 2) % 2 == 0) {
        const auto& d = graph.detections[det_of_node(v)];
        t.points.push_back({d.frame, d.x, d.y, d.conf});
      }
      int next = -1;
      for (const auto& e : adj[v]) {
        if (e.forward && e.cap == 0) {
          next = e.to;
          break;
        }
      }
      if (next < 0) throw std::runtime_error("solve_min_cost_flow: broken flow decomposition");
      v = next;
    }
    double acc = 0.0;
    for (const auto& p : t.points) acc += p.conf;
    t.mean_conf = t.points.empty() ? 0.0 : acc / static_cast<double>(t.points.size());
    out.tracks.push_back(std::move(t));
  }
  return out;
}

TrackSet link_from_variant(const std::vector<std::vector<LinkerDetection>>& frames,
                           const FlowCosts& costs, LinkVariant variant) {
  if (variant == LinkVariant::with_offsets) {
    return solve_min_cost_flow(build_flow_graph(frames, costs));
  }
  auto zeroed = frames;
  for (auto& frame : zeroed) {
    for (auto& d : frame) d.projected = {d.x, d.y};
  }
  return solve_min_cost_flow(build_flow_graph(zeroed, costs));
}

void save_tracks(const TrackSet& tracks, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_tracks: cannot open " + path);
  out << "track_id,frame,x,y,conf\n";
  char buf[160];
  for (const auto& t : tracks.tracks) {
    for (const auto& p : t.points) {
      std::snprintf(buf, sizeof(buf), "%d,%d,%.4f,%.4f,%.6f\n", t.id, p.frame, p.x, p.y, p.conf);
      out << buf;
    }
  }
  if (!out) throw std::runtime_error("save_tracks: write failed for " + path);
}

TrackSet load_tracks(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_tracks: cannot open " + path);
  std::string line;
  if (!std::getline(in, line) || line != "track_id,frame,x,y,conf") {
    throw std::runtime_error("load_tracks: " + path + ":1: expected header 'track_id,frame,x,y,conf'");
  }
  std::map<int, Tracklet> by_id;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    int id = 0, frame = 0;
    double x, y, conf;
    if (std::sscanf(line.c_str(), "%d,%d,%lf,%lf,%lf", &id, &frame, &x, &y, &conf) != 5) {
      throw std::runtime_error("load_tracks: " + path + ":" + std::to_string(lineno) +
                               ": malformed line '" + line + "'");
    }
    auto& t = by_id[id];
    t.id = id;
    t.points.push_back({frame, x, y, conf});
  }
  TrackSet out;
  for (auto& [id, t] : by_id) {
    std::sort(t.points.begin(), t.points.end(),
              [](const auto& a, const auto& b) { return a.frame < b.frame; });
    for (std::size_t i = 1; i < t.points.size(); ++i) {
      if (t.points[i].frame != t.points[i - 1].frame + 1) {
        throw std::runtime_error("load_tracks: track " + std::to_string(id) +
                                 " is not frame-contiguous at frame " +
                                 std::to_string(t.points[i].frame));
      }
    }
    double acc = 0.0;
    for (const auto& p : t.points) acc += p.conf;
    t.mean_conf = t.points.empty() ? 0.0 : acc / static_cast<double>(t.points.size());
    out.tracks.push_back(std::move(t));
  }
  return out;
}

}  // namespace stn
