#pragma once

#include <array>
#include <string>
#include <vector>

#include "stn/annotations.hpp"
#include "stn/params.hpp"
#include "stn/tensor.hpp"

namespace stn {

struct LevelShape {
  int height = 0;
  int width = 0;
  int stride = 1;
};

// Proposal anchored at grid cell (i,j) of a level with stride s sits at image
// coordinates (j*s + (s-1)/2, i*s + (s-1)/2); exact inverse of decode.
Vec2 proposal_anchor(int i, int j, int stride);

// Per-level classification labels and regression targets for tiled point
// proposals. labels[l] is row-major {0,1}; targets[l] is laid out as the
// matching [2,H,W] map (dx plane then dy plane) and only meaningful where the
// label is 1.
struct ProposalLabels {
  std::vector<LevelShape> shapes;
  std::vector<std::vector<double>> labels;
  std::vector<std::vector<double>> targets;
  int num_positive = 0;
};

// Positive iff the anchor lies within match_radius of its nearest ground-truth
// point (ties broken by smaller ground-truth index); the target offset points
// at that ground truth.
ProposalLabels assign_labels(const FrameAnnotations& annotations,
                             const std::vector<LevelShape>& shapes, double match_radius);

// Per-level score and regression maps: level 1 is the attention-fused
// stride-1 prediction used for decoding, levels 2 and 3 are native-resolution
// heads on the gated features.
struct LocOutputs {
  std::array<TensorPtr, 3> cls;  // [1,H,W] each, sigmoid scores
  std::array<TensorPtr, 3> reg;  // [2,H,W] each, (dx, dy) px
};

struct AttentionBlockParams {
  TensorPtr mlp_w1, mlp_b1, mlp_w2, mlp_b2;  // channel gate bottleneck
  TensorPtr spatial_w, spatial_b;            // 7x7 conv over [mean;max] planes
};

struct LocalizationBranchParams {
  std::array<AttentionBlockParams, 3> attention;
  TensorPtr fuse_w, fuse_b;                 // 3x3 conv on concatenated stride-1 features
  std::array<TensorPtr, 2> aux_w, aux_b;    // 1x1 heads at levels 2 and 3
};

struct LocalizationParams {
  LocalizationBranchParams cls;
  LocalizationBranchParams reg;
};

LocalizationParams make_localization_params(const std::array<int, 3>& widths, int reduction,
                                            double cls_prior, ParamRegistry& reg,
                                            std::mt19937_64& rng, const std::string& prefix);

// channel gate then spatial gate; identity when disabled (the plain-fusion hook)
TensorPtr apply_attention(Graph& g, const AttentionBlockParams& p, const TensorPtr& feat,
                          bool enabled);

LocOutputs apply_localization(Graph& g, const LocalizationParams& p,
                              const std::array<TensorPtr, 3>& feats, bool attention_enabled);

// (1/L) * sum over levels and cells of the log loss plus, on positives only,
// the squared regression error.
TensorPtr localization_loss(Graph& g, const std::vector<TensorPtr>& cls,
                            const std::vector<TensorPtr>& reg, const ProposalLabels& labels);

struct DetectedPoint {
  double x = 0.0;
  double y = 0.0;
  double conf = 0.0;
};

// Decode the stride-1 maps, drop candidates under the confidence floor,
// greedy-NMS by descending confidence, keep the best top_m.
std::vector<DetectedPoint> decode_and_nms(const Tensor& cls_map, const Tensor& reg_map,
                                          double nms_radius, int top_m,
                                          double confidence_floor = 0.01);

// CSV `frame,x,y,conf`
void save_detections(const std::vector<std::vector<DetectedPoint>>& per_frame,
                     const std::string& path);
std::vector<std::vector<DetectedPoint>> load_detections(const std::string& path);

}  // namespace stn
