#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "stn/annotations.hpp"
#include "stn/association.hpp"
#include "stn/density.hpp"
#include "stn/image.hpp"
#include "stn/localization.hpp"
#include "stn/params.hpp"
#include "stn/tensor.hpp"

namespace stn {

struct ModelConfig {
  std::array<int, 3> widths{16, 32, 64};  // backbone channel widths, ascending
  int max_disp = 4;                       // correlation search radius (cells per level)
  DensityLossWeights density_weights;     // {2.0, 0.5, 0.05}
  double match_radius = 10.0;             // px, proposal-to-GT assignment
  double neighbor_radius = 50.0;          // px, relation-term neighborhood
  double nms_radius = 5.0;                // px
  int top_m = 128;                        // proposals kept per frame
  int beta = 8;                           // nearest points per neighborhood layer
  int batch_size = 4;                     // K
  double learning_rate = 1e-4;  // toy default; 1e-6 is the reference value tuned
                                // for a pretrained backbone, selectable by config
  double grad_clip_norm = 10.0;  // 0 disables (gradient-check mode)
  double decode_floor = 0.01;
  double cls_prior = 0.005;  // initial head probability, kept under the floor
  int attention_reduction = 4;
  int point_hidden = 16;  // offset-head MLP width
  bool attention_enabled = true;
  // ablation switches
  bool use_localization = true;  // off also disables association
  bool use_association = true;
  bool use_relation = true;
  bool use_cycle = true;

  void validate() const;
};

struct BackboneParams {
  // two 3x3 convolutions per group, maxpool between groups
  std::array<TensorPtr, 3> conv_a_w, conv_a_b;
  std::array<TensorPtr, 3> conv_b_w, conv_b_b;
};

struct DecoderParams {
  // per level: 1x1 mix of (skip, correlation, upsampled deeper level), then 3x3
  std::array<TensorPtr, 3> mix_w, mix_b;
  std::array<TensorPtr, 3> conv_w, conv_b;
};

struct DensityHeadParams {
  std::array<TensorPtr, 3> w, b;  // 1x1 linear per level
};

struct ModelState {
  ModelConfig cfg;
  ParamRegistry params;
  BackboneParams backbone;
  DecoderParams decoder;
  DensityHeadParams density;
  LocalizationParams loc;
  AssociationParams ass;
  int stage = 1;
  std::set<std::string> frozen;
  // optimizer moments, keyed like params
  std::map<std::string, std::vector<double>> adam_m, adam_v;
  std::int64_t adam_t = 0;
};

ModelState init_model(const ModelConfig& cfg, std::uint64_t seed);

// Per-frame outputs of one frame-pair forward pass.
struct ForwardOutputs {
  std::array<DensityPyramid, 2> density;
  std::array<LocOutputs, 2> loc;               // empty tensors when localization is off
  std::array<std::array<TensorPtr, 3>, 2> features;  // fused decoder features per frame
};

// Siamese two-branch extraction, per-scale correlation against the other
// frame, U-style top-down fusion, then the per-frame heads.
ForwardOutputs forward(ModelState& state, Graph& g, const ImageFrame& frame_a,
                       const ImageFrame& frame_b, bool with_grad);

// Ground truth for one frame pair.
struct PairGroundTruth {
  const FrameAnnotations* annos_a = nullptr;
  const FrameAnnotations* annos_b = nullptr;
  const std::array<DensityPyramid, 2>* density = nullptr;  // gt pyramids for both frames
  const ProposalLabels* labels_a = nullptr;
  const ProposalLabels* labels_b = nullptr;
};

struct PairLossBreakdown {
  TensorPtr total;
  double density = 0.0;
  double localization = 0.0;
  double association = 0.0;
  int matched = 0, unmatched = 0;
};

// L_den + L_loc + L_ass for one pair (terms excised by the ablation flags and
// the training stage).
PairLossBreakdown multi_task_loss(ModelState& state, Graph& g, const ForwardOutputs& out,
                                  const PairGroundTruth& gt, bool with_association);

// Bias-corrected Adam over all non-frozen parameters; call after backward().
void adam_step(ModelState& state, double lr, double beta1 = 0.9, double beta2 = 0.999,
               double eps = 1e-8);

// Global-norm gradient clip over non-frozen parameters (no-op when limit <= 0).
void clip_gradients(ModelState& state, double max_norm);

struct TrainingScene {
  std::vector<ImageFrame> frames;
  std::vector<FrameAnnotations> annos;
  std::vector<DensityPyramid> gt_density;
  std::vector<ProposalLabels> labels;
};

TrainingScene prepare_training_scene(const std::vector<ImageFrame>& frames,
                                     const std::vector<FrameAnnotations>& annos,
                                     const ModelConfig& cfg);

struct StepLog {
  int step = 0;
  int stage = 0;
  double loss = 0.0;
};

// One optimization stage. Stage 2 freezes the density heads and enables the
// association objective. Deterministic for a fixed seed.
void train_stage(ModelState& state, const std::vector<TrainingScene>& data, int stage, int steps,
                 std::uint64_t seed, std::vector<StepLog>* log);

// Single-pair inference.
struct InferResult {
  std::array<double, 2> counts{};
  std::array<std::vector<DetectedPoint>, 2> detections;
  std::vector<Vec2> fwd_offsets;   // aligned with detections[0]
  std::vector<Vec2> bwd_offsets;   // aligned with detections[1]
  std::vector<Vec2> projected;     // p' = p - o_fwd for detections[0]
};
InferResult infer(ModelState& state, const ImageFrame& frame_a, const ImageFrame& frame_b);

// Whole-sequence inference: frame t comes from pair (t, t+1), the last frame
// from the final pair's second branch. Forward offsets come from the pair
// where the frame is first, backward offsets from the pair where it is second.
struct SequenceInference {
  std::vector<double> counts;
  std::vector<std::vector<DetectedPoint>> detections;
  std::vector<std::vector<Vec2>> fwd_offsets;
  std::vector<std::vector<Vec2>> bwd_offsets;
  std::vector<TensorPtr> density_level1;  // per frame, for rendering/inspection
};
SequenceInference infer_sequence(ModelState& state, const std::vector<ImageFrame>& frames);

// Named-tensor checkpoint: magic `STNW`, u32 count, then per tensor u16 name
// length, name bytes, u8 rank, u32 extents, 64-bit data; little-endian.
void save_checkpoint(const ModelState& state, const std::string& path);
void load_checkpoint(ModelState& state, const std::string& path);

}  // namespace stn
