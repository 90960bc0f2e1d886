#pragma once

#include <array>
#include <string>
#include <vector>

#include "stn/annotations.hpp"
#include "stn/localization.hpp"
#include "stn/params.hpp"
#include "stn/tensor.hpp"

namespace stn {

// Per-point neighbor index lists, self excluded.
struct NeighborGraph {
  std::vector<std::vector<int>> neighbors;
};

// Exact Euclidean k-nearest sets, ties broken by lower index. Fewer than
// beta other points means every other point is used.
NeighborGraph knn_neighbors(const std::vector<Vec2>& points, int beta);
NeighborGraph radius_neighbors(const std::vector<Vec2>& points, double radius);

// (p_j - o_j) - (p_i - o_i): relative position of two projected points.
inline Vec2 relation_vector(const Vec2& p_i, const Vec2& o_i, const Vec2& p_j, const Vec2& o_j) {
  return {(p_j.x - o_j.x) - (p_i.x - o_i.x), (p_j.y - o_j.y) - (p_i.y - o_i.y)};
}

struct PointLayerParams {
  TensorPtr agg_w, agg_b;      // MLP on (relative position, neighbor feature)
  TensorPtr point_w, point_b;  // pointwise MLP after the neighbor sum
};

struct AssociationParams {
  std::array<PointLayerParams, 3> layers;
  TensorPtr head_w, head_b;  // final offset head, zero-initialized
};

AssociationParams make_association_params(int feature_channels, int hidden, ParamRegistry& reg,
                                          std::mt19937_64& rng, const std::string& prefix);

// One neighborhood layer: per point, sum over its neighbors of an MLP applied
// to (relative position, neighbor feature), then a pointwise MLP. Permutation
// invariant in the neighbor order. Returns [N, hidden]; null for no points.
TensorPtr point_neighborhood_layer(Graph& g, const PointLayerParams& p,
                                   const std::vector<Vec2>& points, const TensorPtr& features,
                                   const NeighborGraph& graph);

// Three stacked neighborhood layers over features sampled from the fused
// stride-1 map, then the offset head. Returns [N, 2]; null for no points.
TensorPtr apply_association(Graph& g, const AssociationParams& p, const std::vector<Vec2>& points,
                            const TensorPtr& feature_map, int beta);

// Proposal-to-identity correspondence for the loss: proposals in descending
// confidence greedily claim the nearest unclaimed ground-truth point within
// match_radius whose identity also exists in the paired frame.
struct MatchedProposal {
  int proposal_index = 0;
  Vec2 position;       // proposal location in this frame
  Vec2 target_paired;  // same identity's ground-truth location in the paired frame
};
struct ProposalMatches {
  std::vector<MatchedProposal> matched;
  int num_unmatched = 0;
};
ProposalMatches match_proposals_to_gt(const std::vector<DetectedPoint>& proposals,
                                      const FrameAnnotations& gt_this,
                                      const FrameAnnotations& gt_paired, double match_radius);

struct ContextLossFlags {
  bool use_relation = true;
  bool use_cycle = true;
};

struct ContextLossResult {
  TensorPtr loss;  // scalar
  int matched_forward = 0;
  int matched_backward = 0;
  int unmatched_forward = 0;
  int unmatched_backward = 0;
};

// Eq-style neighboring context objective: per direction, (1/(2M)) * sum of the
// l1 prediction residual plus, within the radius graph over matched proposals,
// the l1 relation residual. The cycle adds the mirrored direction.
// offsets_* are [N,2] rows aligned with the proposal lists (p' = p - o).
ContextLossResult neighboring_context_loss(
    Graph& g, const std::vector<DetectedPoint>& proposals_a, const TensorPtr& offsets_a,
    const std::vector<DetectedPoint>& proposals_b, const TensorPtr& offsets_b,
    const FrameAnnotations& gt_a, const FrameAnnotations& gt_b, double match_radius,
    double neighbor_radius, const ContextLossFlags& flags);

// Debug CSV `frame,x,y,ox_fwd,oy_fwd,ox_bwd,oy_bwd`
void save_offsets(const std::vector<std::vector<DetectedPoint>>& detections,
                  const std::vector<std::vector<Vec2>>& fwd,
                  const std::vector<std::vector<Vec2>>& bwd, const std::string& path);
struct OffsetRows {
  std::vector<std::vector<Vec2>> fwd;
  std::vector<std::vector<Vec2>> bwd;
};
OffsetRows load_offsets(const std::string& path,
                        const std::vector<std::vector<DetectedPoint>>& detections);

}  // namespace stn
