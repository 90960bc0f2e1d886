#include "stn/synth.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace stn {

namespace {

// keep positions strictly inside the frame with a 1 px margin
double reflect_into(double v, double lo, double hi) {
  const double span = hi - lo;
  if (span <= 0.0) return lo;
  double t = std::fmod(v - lo, 2.0 * span);
  if (t < 0.0) t += 2.0 * span;
  return t <= span ? lo + t : hi - (t - span);
}

}  // namespace

Scene generate_scene(const SceneConfig& cfg) {
  if (cfg.width <= 0 || cfg.height <= 0) {
    throw std::runtime_error("generate_scene: zero-area frame");
  }
  if (cfg.num_frames < 2) throw std::runtime_error("generate_scene: need at least 2 frames");
  if (cfg.num_people < cfg.min_people || cfg.num_people > cfg.max_people) {
    throw std::runtime_error("generate_scene: num_people " + std::to_string(cfg.num_people) +
                             " outside configured [" + std::to_string(cfg.min_people) + ", " +
                             std::to_string(cfg.max_people) + "]");
  }
  if (cfg.num_groups < 1) throw std::runtime_error("generate_scene: need at least one group");

  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);

  const double margin = 1.0;
  const double xlo = margin, xhi = cfg.width - 1 - margin;
  const double ylo = margin, yhi = cfg.height - 1 - margin;

  // one drift vector per group
  std::vector<double> gdx(cfg.num_groups), gdy(cfg.num_groups);
  for (int gi = 0; gi < cfg.num_groups; ++gi) {
    const double ang = unit(rng) * 2.0 * M_PI;
    gdx[gi] = std::cos(ang) * cfg.drift_speed;
    gdy[gi] = std::sin(ang) * cfg.drift_speed;
  }

  struct Person {
    int group;
    double x, y;
  };
  std::vector<Person> people(cfg.num_people);
  for (int i = 0; i < cfg.num_people; ++i) {
    people[i].group = i % cfg.num_groups;
    people[i].x = xlo + unit(rng) * (xhi - xlo);
    people[i].y = ylo + unit(rng) * (yhi - ylo);
  }

  Scene scene;
  scene.trajectories.resize(cfg.num_people);
  for (int i = 0; i < cfg.num_people; ++i) scene.trajectories[i].id = i + 1;

  scene.frames.reserve(cfg.num_frames);
  const int rad = static_cast<int>(std::ceil(4.0 * cfg.blob_sigma));
  const double inv2s2 = cfg.blob_sigma > 0.0 ? 1.0 / (2.0 * cfg.blob_sigma * cfg.blob_sigma) : 0.0;

  for (int f = 0; f < cfg.num_frames; ++f) {
    if (f > 0) {
      for (auto& p : people) {
        p.x = reflect_into(p.x + gdx[p.group] + gauss(rng) * cfg.jitter_sigma, xlo, xhi);
        p.y = reflect_into(p.y + gdy[p.group] + gauss(rng) * cfg.jitter_sigma, ylo, yhi);
      }
    }
    ImageFrame frame(cfg.width, cfg.height);
    for (auto& v : frame.pixels) v = unit(rng) * cfg.clutter_amplitude;
    for (int i = 0; i < cfg.num_people; ++i) {
      const auto& p = people[i];
      scene.trajectories[i].points.push_back({f, p.x, p.y});
      if (cfg.blob_sigma <= 0.0) continue;
      const int cx = static_cast<int>(std::lround(p.x));
      const int cy = static_cast<int>(std::lround(p.y));
      for (int yy = std::max(0, cy - rad); yy <= std::min(cfg.height - 1, cy + rad); ++yy) {
        for (int xx = std::max(0, cx - rad); xx <= std::min(cfg.width - 1, cx + rad); ++xx) {
          const double d2 = (xx - p.x) * (xx - p.x) + (yy - p.y) * (yy - p.y);
          frame.at(yy, xx) += std::exp(-d2 * inv2s2);
        }
      }
    }
    for (auto& v : frame.pixels) v = std::clamp(v, 0.0, 1.0);
    scene.frames.push_back(std::move(frame));
  }
  return scene;
}

FramePatches split_frame_patches(const ImageFrame& frame, const FrameAnnotations& annotations) {
  const int W = frame.width, H = frame.height;
  if (W % 2 != 0 || H % 2 != 0) {
    throw std::runtime_error("split_frame_patches: extents must be even, got " +
                             std::to_string(W) + "x" + std::to_string(H));
  }
  const int w2 = W / 2, h2 = H / 2;
  FramePatches out;
  for (int q = 0; q < 4; ++q) {
    out.frames[q] = ImageFrame(w2, h2);
    out.annotations[q].frame = annotations.frame;
  }
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      const int q = (y < h2 ? 0 : 2) + (x < w2 ? 0 : 1);
      out.frames[q].at(y % h2, x % w2) = frame.at(y, x);
    }
  }
  // geometric dividing line between pixels w2-1 and w2; ties to lower index
  const double split_x = w2 - 0.5;
  const double split_y = h2 - 0.5;
  for (const auto& p : annotations.points) {
    const int col = p.x > split_x ? 1 : 0;
    const int row = p.y > split_y ? 1 : 0;
    const int q = row * 2 + col;
    out.annotations[q].points.push_back({p.id, p.x - col * w2, p.y - row * h2});
  }
  return out;
}

Augmented augment(const ImageFrame& frame, const FrameAnnotations& annotations,
                  const AugmentConfig& cfg, std::mt19937_64& rng) {
  const int W = frame.width, H = frame.height;
  const int cw = cfg.crop_width > 0 ? cfg.crop_width : W;
  const int ch = cfg.crop_height > 0 ? cfg.crop_height : H;
  if (cw > W || ch > H) {
    throw std::runtime_error("augment: crop " + std::to_string(cw) + "x" + std::to_string(ch) +
                             " larger than frame " + std::to_string(W) + "x" + std::to_string(H));
  }
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  bool flip = cfg.force_flip;
  if (!cfg.force_flip && !cfg.disable_flip) flip = unit(rng) < 0.5;
  const int ox = (W == cw) ? 0 : std::min(static_cast<int>(unit(rng) * (W - cw + 1)), W - cw);
  const int oy = (H == ch) ? 0 : std::min(static_cast<int>(unit(rng) * (H - ch + 1)), H - ch);

  Augmented out;
  out.flipped = flip;
  out.frame = ImageFrame(cw, ch);
  for (int y = 0; y < ch; ++y) {
    for (int x = 0; x < cw; ++x) {
      const int sx = flip ? (W - 1 - (x + ox)) : (x + ox);
      out.frame.at(y, x) = frame.at(y + oy, sx);
    }
  }
  out.annotations.frame = annotations.frame;
  for (const auto& p : annotations.points) {
    // flip happens before the crop, matching the pixel path
    const double x = (flip ? (W - 1 - p.x) : p.x) - ox;
    const double y = p.y - oy;
    if (x >= -0.5 && x <= cw - 0.5 && y >= -0.5 && y <= ch - 0.5) {
      out.annotations.points.push_back({p.id, x, y});
    }
  }
  return out;
}

}  // namespace stn
