#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <vector>

#include "stn/annotations.hpp"
#include "stn/image.hpp"

namespace stn {

// Crowd-scene generator settings. People move in drift-coherent groups with
// per-person jitter and reflective walls; every person exists in every frame.
struct SceneConfig {
  int width = 320;
  int height = 180;
  int num_frames = 16;
  int num_people = 144;
  int min_people = 25;
  int max_people = 455;
  int num_groups = 4;
  double drift_speed = 1.0;    // px/frame, shared direction per group
  double jitter_sigma = 0.3;   // px, per person per frame
  double blob_sigma = 3.0;     // px, rendered head size
  double clutter_amplitude = 0.1;
  std::uint64_t seed = 1;
};

struct Scene {
  std::vector<ImageFrame> frames;
  std::vector<Trajectory> trajectories;
};

Scene generate_scene(const SceneConfig& cfg);

// Quadrant split. The dividing lines sit between pixel columns W/2-1 and W/2
// (rows likewise); a point exactly on a line goes to the lower-index patch.
// Patch order: top-left, top-right, bottom-left, bottom-right.
struct FramePatches {
  std::array<ImageFrame, 4> frames;
  std::array<FrameAnnotations, 4> annotations;
};
FramePatches split_frame_patches(const ImageFrame& frame, const FrameAnnotations& annotations);

// Horizontal flip (probability 0.5 unless forced) plus random crop.
// Annotated points outside the crop are dropped.
struct AugmentConfig {
  int crop_width = 0;   // 0 keeps full width
  int crop_height = 0;  // 0 keeps full height
  bool force_flip = false;
  bool disable_flip = false;
};
struct Augmented {
  ImageFrame frame;
  FrameAnnotations annotations;
  bool flipped = false;
};
Augmented augment(const ImageFrame& frame, const FrameAnnotations& annotations,
                  const AugmentConfig& cfg, std::mt19937_64& rng);

}  // namespace stn
