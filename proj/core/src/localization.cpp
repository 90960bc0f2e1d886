#include "stn/localization.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <stdexcept>

namespace stn {

Vec2 proposal_anchor(int i, int j, int stride) {
  const double half = (stride - 1) / 2.0;
  return {j * stride + half, i * stride + half};
}

ProposalLabels assign_labels(const FrameAnnotations& annotations,
                             const std::vector<LevelShape>& shapes, double match_radius) {
  if (match_radius <= 0.0) throw std::runtime_error("assign_labels: match_radius must be > 0");
  ProposalLabels out;
  out.shapes = shapes;
  for (const auto& s : shapes) {
    if (s.height <= 0 || s.width <= 0) {
      throw std::runtime_error("assign_labels: empty level shape " + std::to_string(s.width) +
                               "x" + std::to_string(s.height));
    }
    std::vector<double> labels(static_cast<std::size_t>(s.height) * s.width, 0.0);
    std::vector<double> targets(2 * labels.size(), 0.0);
    for (int i = 0; i < s.height; ++i) {
      for (int j = 0; j < s.width; ++j) {
        const Vec2 a = proposal_anchor(i, j, s.stride);
        double best = std::numeric_limits<double>::infinity();
        int best_gt = -1;
        for (std::size_t gi = 0; gi < annotations.points.size(); ++gi) {
          const auto& p = annotations.points[gi];
          const double d2 = (p.x - a.x) * (p.x - a.x) + (p.y - a.y) * (p.y - a.y);
          if (d2 < best) {  // strict: equidistant points keep the smaller index
            best = d2;
            best_gt = static_cast<int>(gi);
          }
        }
        if (best_gt >= 0 && std::sqrt(best) <= match_radius) {
          const std::size_t cell = static_cast<std::size_t>(i) * s.width + j;
          labels[cell] = 1.0;
          targets[cell] = annotations.points[best_gt].x - a.x;                  // dx plane
          targets[labels.size() + cell] = annotations.points[best_gt].y - a.y;  // dy plane
          ++out.num_positive;
        }
      }
    }
    out.labels.push_back(std::move(labels));
    out.targets.push_back(std::move(targets));
  }
  return out;
}

LocalizationParams make_localization_params(const std::array<int, 3>& widths, int reduction,
                                            double cls_prior, ParamRegistry& reg,
                                            std::mt19937_64& rng, const std::string& prefix) {
  auto make_branch = [&](const std::string& bp, int out_ch, double bias_value) {
    LocalizationBranchParams b;
    for (int l = 0; l < 3; ++l) {
      const int c = widths[l];
      const int r = std::max(1, c / reduction);
      auto& a = b.attention[l];
      const std::string ap = bp + ".att" + std::to_string(l + 1);
      a.mlp_w1 = reg.he(ap + ".w1", {r, c}, c, rng);
      a.mlp_b1 = reg.zeros(ap + ".b1", {r});
      a.mlp_w2 = reg.he(ap + ".w2", {c, r}, r, rng);
      a.mlp_b2 = reg.zeros(ap + ".b2", {c});
      a.spatial_w = reg.he(ap + ".sw", {1, 2, 7, 7}, 2 * 7 * 7, rng);
      a.spatial_b = reg.zeros(ap + ".sb", {1});
    }
    const int cat = widths[0] + widths[1] + widths[2];
    b.fuse_w = reg.he(bp + ".fuse.w", {out_ch, cat, 3, 3}, cat * 9, rng);
    b.fuse_b = reg.constant(bp + ".fuse.b", {out_ch}, bias_value);
    for (int l = 0; l < 2; ++l) {
      const std::string hp = bp + ".aux" + std::to_string(l + 2);
      b.aux_w[l] = reg.he(hp + ".w", {out_ch, widths[l + 1], 1, 1}, widths[l + 1], rng);
      b.aux_b[l] = reg.constant(hp + ".b", {out_ch}, bias_value);
    }
    return b;
  };
  const double prior_logit = std::log(cls_prior / (1.0 - cls_prior));
  LocalizationParams p;
  p.cls = make_branch(prefix + ".cls", 1, prior_logit);
  p.reg = make_branch(prefix + ".reg", 2, 0.0);
  return p;
}

TensorPtr apply_attention(Graph& g, const AttentionBlockParams& p, const TensorPtr& feat,
                          bool enabled) {
  if (!enabled) return feat;
  auto mlp = [&](const TensorPtr& v) {
    return g.dense(g.relu(g.dense(v, p.mlp_w1, p.mlp_b1)), p.mlp_w2, p.mlp_b2);
  };
  auto cgate = g.sigmoid(g.add(mlp(g.channel_avg_pool(feat)), mlp(g.channel_max_pool(feat))));
  auto x = g.scale_channels(feat, cgate);
  auto stats = g.concat_channels({g.mean_over_channels(x), g.max_over_channels(x)});
  auto sgate = g.sigmoid(g.conv2d(stats, p.spatial_w, p.spatial_b, 1, 3));
  return g.scale_spatial(x, sgate);
}

namespace {

std::array<TensorPtr, 3> apply_branch(Graph& g, const LocalizationBranchParams& p,
                                      const std::array<TensorPtr, 3>& feats,
                                      bool attention_enabled) {
  std::array<TensorPtr, 3> gated;
  for (int l = 0; l < 3; ++l) gated[l] = apply_attention(g, p.attention[l], feats[l], attention_enabled);
  auto up2 = g.upsample2_bilinear(gated[1]);
  auto up3 = g.upsample2_bilinear(g.upsample2_bilinear(gated[2]));
  auto fused = g.concat_channels({gated[0], up2, up3});
  std::array<TensorPtr, 3> maps;
  maps[0] = g.conv2d(fused, p.fuse_w, p.fuse_b, 1, 1);
  maps[1] = g.conv2d(gated[1], p.aux_w[0], p.aux_b[0], 1, 0);
  maps[2] = g.conv2d(gated[2], p.aux_w[1], p.aux_b[1], 1, 0);
  return maps;
}

}  // namespace

LocOutputs apply_localization(Graph& g, const LocalizationParams& p,
                              const std::array<TensorPtr, 3>& feats, bool attention_enabled) {
  LocOutputs out;
  auto cls_raw = apply_branch(g, p.cls, feats, attention_enabled);
  auto reg_raw = apply_branch(g, p.reg, feats, attention_enabled);
  for (int l = 0; l < 3; ++l) {
    out.cls[l] = g.sigmoid(cls_raw[l]);
    out.reg[l] = reg_raw[l];
  }
  return out;
}

TensorPtr localization_loss(Graph& g, const std::vector<TensorPtr>& cls,
                            const std::vector<TensorPtr>& reg, const ProposalLabels& labels) {
  const std::size_t L = labels.labels.size();
  if (cls.size() != L || reg.size() != L) {
    throw std::runtime_error("localization_loss: got " + std::to_string(cls.size()) +
                             " score maps and " + std::to_string(reg.size()) +
                             " regression maps for " + std::to_string(L) + " label levels");
  }
  TensorPtr total = make_scalar(0.0);
  for (std::size_t l = 0; l < L; ++l) {
    const auto& shape = labels.shapes[l];
    const std::size_t cells = static_cast<std::size_t>(shape.height) * shape.width;
    if (cls[l]->data.size() != cells || reg[l]->data.size() != 2 * cells) {
      throw std::runtime_error("localization_loss: level " + std::to_string(l + 1) +
                               " map shapes " + shape_str(cls[l]->shape) + "/" +
                               shape_str(reg[l]->shape) + " do not match labels " +
                               std::to_string(shape.width) + "x" + std::to_string(shape.height));
    }
    total = g.add(total, g.bce_sum(cls[l], labels.labels[l]));
    // mask duplicated over the two regression planes
    std::vector<double> mask2(2 * cells);
    std::copy(labels.labels[l].begin(), labels.labels[l].end(), mask2.begin());
    std::copy(labels.labels[l].begin(), labels.labels[l].end(), mask2.begin() + cells);
    total = g.add(total, g.masked_sq_sum(reg[l], labels.targets[l], mask2));
  }
  return g.mul_scalar(total, 1.0 / static_cast<double>(L));
}

std::vector<DetectedPoint> decode_and_nms(const Tensor& cls_map, const Tensor& reg_map,
                                          double nms_radius, int top_m,
                                          double confidence_floor) {
  if (nms_radius <= 0.0) throw std::runtime_error("decode_and_nms: nms_radius must be > 0");
  int H = 0, W = 0;
  if (cls_map.shape.size() == 3 && cls_map.shape[0] == 1) {
    H = cls_map.shape[1];
    W = cls_map.shape[2];
  } else if (cls_map.shape.size() == 2) {
    H = cls_map.shape[0];
    W = cls_map.shape[1];
  } else {
    throw std::runtime_error("decode_and_nms: score map must be [H,W] or [1,H,W], got " +
                             shape_str(cls_map.shape));
  }
  if (reg_map.shape != Shape{2, H, W}) {
    throw std::runtime_error("decode_and_nms: regression map " + shape_str(reg_map.shape) +
                             " does not match score map " + shape_str(cls_map.shape));
  }
  struct Cand {
    double conf;
    double x, y;
    int cell;
  };
  std::vector<Cand> cands;
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  for (int i = 0; i < H; ++i) {
    for (int j = 0; j < W; ++j) {
      const std::size_t cell = static_cast<std::size_t>(i) * W + j;
      const double conf = cls_map.data[cell];
      if (conf < confidence_floor) continue;
      cands.push_back({conf, j + reg_map.data[cell], i + reg_map.data[plane + cell],
                       static_cast<int>(cell)});
    }
  }
  std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
    if (a.conf != b.conf) return a.conf > b.conf;
    return a.cell < b.cell;
  });
  std::vector<DetectedPoint> kept;
  const double r2 = nms_radius * nms_radius;
  for (const auto& c : cands) {
    bool suppressed = false;
    for (const auto& k : kept) {
      const double d2 = (k.x - c.x) * (k.x - c.x) + (k.y - c.y) * (k.y - c.y);
      if (d2 < r2) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) {
      kept.push_back({c.x, c.y, c.conf});
      if (static_cast<int>(kept.size()) == top_m) break;
    }
  }
  return kept;
}

void save_detections(const std::vector<std::vector<DetectedPoint>>& per_frame,
                     const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_detections: cannot open " + path);
  out << "frame,x,y,conf\n";
  char buf[160];
  for (std::size_t f = 0; f < per_frame.size(); ++f) {
    for (const auto& d : per_frame[f]) {
      std::snprintf(buf, sizeof(buf), "%zu,%.4f,%.4f,%.6f\n", f, d.x, d.y, d.conf);
      out << buf;
    }
  }
  if (!out) throw std::runtime_error("save_detections: write failed for " + path);
}

std::vector<std::vector<DetectedPoint>> load_detections(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_detections: cannot open " + path);
  std::string line;
  if (!std::getline(in, line) || line != "frame,x,y,conf") {
    throw std::runtime_error("load_detections: " + path + ":1: expected header 'frame,x,y,conf'");
  }
  std::vector<std::vector<DetectedPoint>> out;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    int frame = 0;
    DetectedPoint d;
    if (std::sscanf(line.c_str(), "%d,%lf,%lf,%lf", &frame, &d.x, &d.y, &d.conf) != 4 ||
        frame < 0) {
      throw std::runtime_error("load_detections: " + path + ":" + std::to_string(lineno) +
                               ": malformed line '" + line + "'");
    }
    if (static_cast<int>(out.size()) <= frame) out.resize(frame + 1);
    out[frame].push_back(d);
  }
  return out;
}

}  // namespace stn
