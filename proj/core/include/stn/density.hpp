#pragma once

#include <string>
#include <vector>

#include "stn/annotations.hpp"
#include "stn/tensor.hpp"

namespace stn {

// Three density grids at strides 1, 2, 4. Level l has shape
// (H/2^(l-1), W/2^(l-1)); every level carries the same total mass.
struct DensityPyramid {
  std::vector<TensorPtr> levels;
};

inline constexpr int kDensityLevels = 3;

struct DensityLossWeights {
  std::array<double, 3> w{2.0, 0.5, 0.05};
};

// Per-point Gaussian bandwidths: 0.3 * mean distance to the min(3, n-1)
// nearest other points, clamped to [1, 25] px; 15 px for a lone point.
std::vector<double> adaptive_sigma(const std::vector<FrameAnnotations::Entry>& points);

// Unit-mass truncated (4 sigma) Gaussian splats on the stride-1 grid,
// coarser levels by mass-preserving 2x2 sum pooling.
DensityPyramid build_density_pyramid(const FrameAnnotations& annotations, int height, int width);

// (1/(2L)) * sum over frames, levels, cells of w_l * (pred - gt)^2.
TensorPtr density_loss(Graph& g, const std::array<DensityPyramid, 2>& pred,
                       const std::array<DensityPyramid, 2>& gt, const DensityLossWeights& w);

double count_from_map(const Tensor& level1);

// Binary container: magic `DMAP`, u32 height, u32 width, then h*w
// little-endian 32-bit floats, row-major.
void write_density_map(const Tensor& grid, const std::string& path);
TensorPtr read_density_map(const std::string& path);

}  // namespace stn
