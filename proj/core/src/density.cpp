#include "stn/density.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace stn {

namespace {

constexpr double kSigmaScale = 0.3;
constexpr double kSigmaLonePoint = 15.0;
constexpr double kSigmaMin = 1.0;
constexpr double kSigmaMax = 25.0;
constexpr double kTruncation = 4.0;  // kernel support radius in sigmas

TensorPtr sum_pool2(const Tensor& src) {
  const int H = src.shape[0], W = src.shape[1];
  if (H % 2 != 0 || W % 2 != 0) {
    throw std::runtime_error("density sum pooling needs even extents, got " +
                             shape_str(src.shape));
  }
  auto out = make_tensor({H / 2, W / 2});
  for (int y = 0; y < H / 2; ++y) {
    for (int x = 0; x < W / 2; ++x) {
      out->at2(y, x) = src.at2(2 * y, 2 * x) + src.at2(2 * y, 2 * x + 1) +
                       src.at2(2 * y + 1, 2 * x) + src.at2(2 * y + 1, 2 * x + 1);
    }
  }
  return out;
}

}  // namespace

std::vector<double> adaptive_sigma(const std::vector<FrameAnnotations::Entry>& points) {
  const int n = static_cast<int>(points.size());
  if (n == 0) throw std::runtime_error("adaptive_sigma: empty point set");
  std::vector<double> sigmas(n);
  if (n == 1) {
    sigmas[0] = kSigmaLonePoint;
    return sigmas;
  }
  const int k = std::min(3, n - 1);
  std::vector<double> dists;
  dists.reserve(n - 1);
  for (int i = 0; i < n; ++i) {
    dists.clear();
    for (int j = 0; j < n; ++j) {
      if (j == i) continue;
      const double dx = points[j].x - points[i].x;
      const double dy = points[j].y - points[i].y;
      dists.push_back(std::sqrt(dx * dx + dy * dy));
    }
    std::nth_element(dists.begin(), dists.begin() + (k - 1), dists.end());
    double mean = 0.0;
    for (int t = 0; t < k; ++t) mean += dists[t];
    mean /= k;
    sigmas[i] = std::clamp(kSigmaScale * mean, kSigmaMin, kSigmaMax);
  }
  return sigmas;
}

DensityPyramid build_density_pyramid(const FrameAnnotations& annotations, int height, int width) {
  if (height % 4 != 0 || width % 4 != 0) {
    throw std::runtime_error("build_density_pyramid: extents must be divisible by 4, got " +
                             std::to_string(width) + "x" + std::to_string(height));
  }
  auto level1 = make_tensor({height, width});
  if (!annotations.points.empty()) {
    const auto sigmas = adaptive_sigma(annotations.points);
    for (std::size_t i = 0; i < annotations.points.size(); ++i) {
      const auto& p = annotations.points[i];
      if (!point_in_bounds(p.x, p.y, width, height)) {
        throw std::runtime_error("build_density_pyramid: point (" + std::to_string(p.x) + ", " +
                                 std::to_string(p.y) + ") outside " + std::to_string(width) + "x" +
                                 std::to_string(height));
      }
      const double sigma = sigmas[i];
      const double rad = kTruncation * sigma;
      const int x0 = std::max(0, static_cast<int>(std::floor(p.x - rad)));
      const int x1 = std::min(width - 1, static_cast<int>(std::ceil(p.x + rad)));
      const int y0 = std::max(0, static_cast<int>(std::floor(p.y - rad)));
      const int y1 = std::min(height - 1, static_cast<int>(std::ceil(p.y + rad)));
      const double inv2s2 = 1.0 / (2.0 * sigma * sigma);
      // accumulate the truncated kernel, then renormalize to unit mass so the
      // count-equals-mass invariant is exact even at image borders
      double mass = 0.0;
      for (int y = y0; y <= y1; ++y) {
        for (int x = x0; x <= x1; ++x) {
          const double d2 = (x - p.x) * (x - p.x) + (y - p.y) * (y - p.y);
          if (d2 > rad * rad) continue;
          mass += std::exp(-d2 * inv2s2);
        }
      }
      if (mass <= 0.0) {
        // support collapsed to nothing (cannot happen with sigma >= 1, kept as guard)
        level1->at2(static_cast<int>(std::lround(p.y)), static_cast<int>(std::lround(p.x))) += 1.0;
        continue;
      }
      const double inv_mass = 1.0 / mass;
      for (int y = y0; y <= y1; ++y) {
        for (int x = x0; x <= x1; ++x) {
          const double d2 = (x - p.x) * (x - p.x) + (y - p.y) * (y - p.y);
          if (d2 > rad * rad) continue;
          level1->at2(y, x) += std::exp(-d2 * inv2s2) * inv_mass;
        }
      }
    }
  }
  DensityPyramid pyr;
  pyr.levels.push_back(level1);
  pyr.levels.push_back(sum_pool2(*pyr.levels[0]));
  pyr.levels.push_back(sum_pool2(*pyr.levels[1]));
  return pyr;
}

TensorPtr density_loss(Graph& g, const std::array<DensityPyramid, 2>& pred,
                       const std::array<DensityPyramid, 2>& gt, const DensityLossWeights& w) {
  TensorPtr total = make_scalar(0.0);
  for (int t = 0; t < 2; ++t) {
    if (pred[t].levels.size() != kDensityLevels || gt[t].levels.size() != kDensityLevels) {
      throw std::runtime_error("density_loss: pyramids must have 3 levels");
    }
    for (int l = 0; l < kDensityLevels; ++l) {
      const auto& p = pred[t].levels[l];
      const auto& q = gt[t].levels[l];
      if (p->shape != q->shape) {
        throw std::runtime_error("density_loss: level " + std::to_string(l + 1) +
                                 " shape mismatch " + shape_str(p->shape) + " vs " +
                                 shape_str(q->shape));
      }
      auto term = g.mul_scalar(g.sum(g.square(g.sub(p, q))), w.w[l]);
      total = g.add(total, term);
    }
  }
  return g.mul_scalar(total, 1.0 / (2.0 * kDensityLevels));
}

double count_from_map(const Tensor& level1) {
  double acc = 0.0;
  for (double v : level1.data) acc += v;
  return acc;
}

void write_density_map(const Tensor& grid, const std::string& path) {
  if (grid.shape.size() != 2) {
    throw std::runtime_error("write_density_map: grid must be rank 2, got " +
                             shape_str(grid.shape));
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_density_map: cannot open " + path);
  out.write("DMAP", 4);
  const std::uint32_t h = static_cast<std::uint32_t>(grid.shape[0]);
  const std::uint32_t w = static_cast<std::uint32_t>(grid.shape[1]);
  out.write(reinterpret_cast<const char*>(&h), 4);
  out.write(reinterpret_cast<const char*>(&w), 4);
  std::vector<float> vals(grid.data.begin(), grid.data.end());
  out.write(reinterpret_cast<const char*>(vals.data()),
            static_cast<std::streamsize>(vals.size() * sizeof(float)));
  if (!out) throw std::runtime_error("write_density_map: write failed for " + path);
}

TensorPtr read_density_map(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("read_density_map: cannot open " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "DMAP", 4) != 0) {
    throw std::runtime_error("read_density_map: " + path + " is not a density map file");
  }
  std::uint32_t h = 0, w = 0;
  in.read(reinterpret_cast<char*>(&h), 4);
  in.read(reinterpret_cast<char*>(&w), 4);
  if (!in || h == 0 || w == 0) throw std::runtime_error("read_density_map: bad header in " + path);
  std::vector<float> vals(static_cast<std::size_t>(h) * w);
  in.read(reinterpret_cast<char*>(vals.data()),
          static_cast<std::streamsize>(vals.size() * sizeof(float)));
  if (!in) throw std::runtime_error("read_density_map: truncated data in " + path);
  auto t = make_tensor({static_cast<int>(h), static_cast<int>(w)});
  for (std::size_t i = 0; i < vals.size(); ++i) t->data[i] = vals[i];
  return t;
}

}  // namespace stn
