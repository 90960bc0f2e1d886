#include "stn/association.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace stn {

namespace {

double dist2(const Vec2& a, const Vec2& b) {
  return (a.x - b.x) * (a.x - b.x) + (a.y - b.y) * (a.y - b.y);
}

}  // namespace

NeighborGraph knn_neighbors(const std::vector<Vec2>& points, int beta) {
  if (beta < 1) throw std::runtime_error("knn_neighbors: beta must be >= 1");
  const int n = static_cast<int>(points.size());
  NeighborGraph g;
  g.neighbors.resize(n);
  std::vector<std::pair<double, int>> order;
  for (int i = 0; i < n; ++i) {
    order.clear();
    for (int j = 0; j < n; ++j) {
      if (j == i) continue;
      order.emplace_back(dist2(points[i], points[j]), j);
    }
    std::sort(order.begin(), order.end());
    const int take = std::min<int>(beta, static_cast<int>(order.size()));
    for (int t = 0; t < take; ++t) g.neighbors[i].push_back(order[t].second);
  }
  return g;
}

NeighborGraph radius_neighbors(const std::vector<Vec2>& points, double radius) {
  if (radius <= 0.0) throw std::runtime_error("radius_neighbors: radius must be > 0");
  const int n = static_cast<int>(points.size());
  NeighborGraph g;
  g.neighbors.resize(n);
  const double r2 = radius * radius;
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      if (j != i && dist2(points[i], points[j]) <= r2) g.neighbors[i].push_back(j);
    }
  }
  return g;
}

AssociationParams make_association_params(int feature_channels, int hidden, ParamRegistry& reg,
                                          std::mt19937_64& rng, const std::string& prefix) {
  AssociationParams p;
  int in_ch = feature_channels;
  for (int l = 0; l < 3; ++l) {
    const std::string lp = prefix + ".layer" + std::to_string(l + 1);
    p.layers[l].agg_w = reg.he(lp + ".agg.w", {hidden, 2 + in_ch}, 2 + in_ch, rng);
    p.layers[l].agg_b = reg.zeros(lp + ".agg.b", {hidden});
    p.layers[l].point_w = reg.he(lp + ".point.w", {hidden, hidden}, hidden, rng);
    p.layers[l].point_b = reg.zeros(lp + ".point.b", {hidden});
    in_ch = hidden;
  }
  // zero head: a fresh model predicts zero motion
  p.head_w = reg.zeros(prefix + ".head.w", {2, hidden});
  p.head_b = reg.zeros(prefix + ".head.b", {2});
  return p;
}

TensorPtr point_neighborhood_layer(Graph& g, const PointLayerParams& p,
                                   const std::vector<Vec2>& points, const TensorPtr& features,
                                   const NeighborGraph& graph) {
  const int n = static_cast<int>(points.size());
  if (n == 0) return nullptr;
  if (!features || features->shape[0] != n) {
    throw std::runtime_error("point_neighborhood_layer: features do not match point count");
  }
  const int hidden = p.point_w->shape[0];
  std::vector<int> src, nbr;
  for (int i = 0; i < n; ++i) {
    for (int j : graph.neighbors[i]) {
      src.push_back(i);
      nbr.push_back(j);
    }
  }
  TensorPtr agg;
  if (src.empty()) {
    agg = make_tensor({n, hidden});  // isolated points aggregate nothing
  } else {
    auto relpos = make_tensor({static_cast<int>(src.size()), 2});
    for (std::size_t e = 0; e < src.size(); ++e) {
      relpos->at2(static_cast<int>(e), 0) = points[nbr[e]].x - points[src[e]].x;
      relpos->at2(static_cast<int>(e), 1) = points[nbr[e]].y - points[src[e]].y;
    }
    auto edge_in = g.concat_cols(relpos, g.gather_rows(features, nbr));
    auto edge_h = g.relu(g.dense_rows(edge_in, p.agg_w, p.agg_b));
    agg = g.segment_sum_rows(edge_h, src, n);
  }
  return g.relu(g.dense_rows(agg, p.point_w, p.point_b));
}

TensorPtr apply_association(Graph& g, const AssociationParams& p, const std::vector<Vec2>& points,
                            const TensorPtr& feature_map, int beta) {
  if (points.empty()) return nullptr;
  auto graph = knn_neighbors(points, beta);
  auto feats = g.sample_points_bilinear(feature_map, points);
  for (const auto& layer : p.layers) {
    feats = point_neighborhood_layer(g, layer, points, feats, graph);
  }
  return g.dense_rows(feats, p.head_w, p.head_b);
}

ProposalMatches match_proposals_to_gt(const std::vector<DetectedPoint>& proposals,
                                      const FrameAnnotations& gt_this,
                                      const FrameAnnotations& gt_paired, double match_radius) {
  ProposalMatches out;
  // identity -> position in the paired frame
  std::vector<int> paired_of(gt_this.points.size(), -1);
  for (std::size_t gi = 0; gi < gt_this.points.size(); ++gi) {
    for (std::size_t pj = 0; pj < gt_paired.points.size(); ++pj) {
      if (gt_paired.points[pj].id == gt_this.points[gi].id) {
        paired_of[gi] = static_cast<int>(pj);
        break;
      }
    }
  }
  std::vector<int> order(proposals.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    if (proposals[a].conf != proposals[b].conf) return proposals[a].conf > proposals[b].conf;
    return a < b;
  });
  std::vector<bool> claimed(gt_this.points.size(), false);
  const double r2 = match_radius * match_radius;
  for (int pi : order) {
    const Vec2 pos{proposals[pi].x, proposals[pi].y};
    double best = std::numeric_limits<double>::infinity();
    int best_gt = -1;
    for (std::size_t gi = 0; gi < gt_this.points.size(); ++gi) {
      if (claimed[gi] || paired_of[gi] < 0) continue;
      const double d2 = dist2(pos, {gt_this.points[gi].x, gt_this.points[gi].y});
      if (d2 < best) {
        best = d2;
        best_gt = static_cast<int>(gi);
      }
    }
    if (best_gt >= 0 && best <= r2) {
      claimed[best_gt] = true;
      const auto& tgt = gt_paired.points[paired_of[best_gt]];
      out.matched.push_back({pi, pos, {tgt.x, tgt.y}});
    } else {
      ++out.num_unmatched;
    }
  }
  return out;
}

namespace {

// one direction of the context loss: (1/(2M)) * (prediction + relation residuals)
TensorPtr direction_loss(Graph& g, const std::vector<DetectedPoint>& proposals,
                         const TensorPtr& offsets, const ProposalMatches& matches,
                         double neighbor_radius, bool use_relation) {
  const int m = static_cast<int>(matches.matched.size());
  if (m == 0 || !offsets) return make_scalar(0.0);
  const int n = static_cast<int>(proposals.size());
  auto positions = make_tensor({n, 2});
  for (int i = 0; i < n; ++i) {
    positions->at2(i, 0) = proposals[i].x;
    positions->at2(i, 1) = proposals[i].y;
  }
  auto projected = g.sub(positions, offsets);  // p' = p - o

  std::vector<int> rows(m);
  auto targets = make_tensor({m, 2});
  std::vector<Vec2> matched_pos(m);
  for (int k = 0; k < m; ++k) {
    rows[k] = matches.matched[k].proposal_index;
    targets->at2(k, 0) = matches.matched[k].target_paired.x;
    targets->at2(k, 1) = matches.matched[k].target_paired.y;
    matched_pos[k] = matches.matched[k].position;
  }
  auto proj_m = g.gather_rows(projected, rows);
  auto total = g.l1_sum(proj_m, targets);

  if (use_relation) {
    auto graph = radius_neighbors(matched_pos, neighbor_radius);
    std::vector<int> ei, ej;
    for (int i = 0; i < m; ++i) {
      for (int j : graph.neighbors[i]) {
        ei.push_back(i);
        ej.push_back(j);
      }
    }
    if (!ei.empty()) {
      auto v_pred = g.sub(g.gather_rows(proj_m, ej), g.gather_rows(proj_m, ei));
      auto v_gt = make_tensor({static_cast<int>(ei.size()), 2});
      for (std::size_t e = 0; e < ei.size(); ++e) {
        v_gt->at2(static_cast<int>(e), 0) = targets->at2(ej[e], 0) - targets->at2(ei[e], 0);
        v_gt->at2(static_cast<int>(e), 1) = targets->at2(ej[e], 1) - targets->at2(ei[e], 1);
      }
      total = g.add(total, g.l1_sum(v_pred, v_gt));
    }
  }
  return g.mul_scalar(total, 1.0 / (2.0 * m));
}

}  // namespace

ContextLossResult neighboring_context_loss(
    Graph& g, const std::vector<DetectedPoint>& proposals_a, const TensorPtr& offsets_a,
    const std::vector<DetectedPoint>& proposals_b, const TensorPtr& offsets_b,
    const FrameAnnotations& gt_a, const FrameAnnotations& gt_b, double match_radius,
    double neighbor_radius, const ContextLossFlags& flags) {
  ContextLossResult res;
  const auto matches_fwd = match_proposals_to_gt(proposals_a, gt_a, gt_b, match_radius);
  res.matched_forward = static_cast<int>(matches_fwd.matched.size());
  res.unmatched_forward = matches_fwd.num_unmatched;
  res.loss = direction_loss(g, proposals_a, offsets_a, matches_fwd, neighbor_radius,
                            flags.use_relation);
  if (flags.use_cycle) {
    const auto matches_bwd = match_proposals_to_gt(proposals_b, gt_b, gt_a, match_radius);
    res.matched_backward = static_cast<int>(matches_bwd.matched.size());
    res.unmatched_backward = matches_bwd.num_unmatched;
    res.loss = g.add(res.loss, direction_loss(g, proposals_b, offsets_b, matches_bwd,
                                              neighbor_radius, flags.use_relation));
  }
  return res;
}

void save_offsets(const std::vector<std::vector<DetectedPoint>>& detections,
                  const std::vector<std::vector<Vec2>>& fwd,
                  const std::vector<std::vector<Vec2>>& bwd, const std::string& path) {
  if (fwd.size() != detections.size() || bwd.size() != detections.size()) {
    throw std::runtime_error("save_offsets: per-frame list sizes disagree");
  }
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_offsets: cannot open " + path);
  out << "frame,x,y,ox_fwd,oy_fwd,ox_bwd,oy_bwd\n";
  char buf[224];
  for (std::size_t f = 0; f < detections.size(); ++f) {
    if (fwd[f].size() != detections[f].size() || bwd[f].size() != detections[f].size()) {
      throw std::runtime_error("save_offsets: offset rows do not match detections in frame " +
                               std::to_string(f));
    }
    for (std::size_t i = 0; i < detections[f].size(); ++i) {
      std::snprintf(buf, sizeof(buf), "%zu,%.4f,%.4f,%.6f,%.6f,%.6f,%.6f\n", f,
                    detections[f][i].x, detections[f][i].y, fwd[f][i].x, fwd[f][i].y,
                    bwd[f][i].x, bwd[f][i].y);
      out << buf;
    }
  }
  if (!out) throw std::runtime_error("save_offsets: write failed for " + path);
}

OffsetRows load_offsets(const std::string& path,
                        const std::vector<std::vector<DetectedPoint>>& detections) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_offsets: cannot open " + path);
  std::string line;
  if (!std::getline(in, line) || line != "frame,x,y,ox_fwd,oy_fwd,ox_bwd,oy_bwd") {
    throw std::runtime_error("load_offsets: " + path + ":1: bad header");
  }
  OffsetRows rows;
  rows.fwd.resize(detections.size());
  rows.bwd.resize(detections.size());
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    int frame = 0;
    double x, y, fx, fy, bx, by;
    if (std::sscanf(line.c_str(), "%d,%lf,%lf,%lf,%lf,%lf,%lf", &frame, &x, &y, &fx, &fy, &bx,
                    &by) != 7 ||
        frame < 0 || frame >= static_cast<int>(detections.size())) {
      throw std::runtime_error("load_offsets: " + path + ":" + std::to_string(lineno) +
                               ": malformed line '" + line + "'");
    }
    const std::size_t i = rows.fwd[frame].size();
    if (i >= detections[frame].size() ||
        std::abs(detections[frame][i].x - x) > 0.01 ||
        std::abs(detections[frame][i].y - y) > 0.01) {
      throw std::runtime_error("load_offsets: " + path + ":" + std::to_string(lineno) +
                               ": row does not align with the detections file");
    }
    rows.fwd[frame].push_back({fx, fy});
    rows.bwd[frame].push_back({bx, by});
  }
  for (std::size_t f = 0; f < detections.size(); ++f) {
    if (rows.fwd[f].size() != detections[f].size()) {
      throw std::runtime_error("load_offsets: frame " + std::to_string(f) +
                               " has fewer offset rows than detections");
    }
  }
  return rows;
}

}  // namespace stn
