#include "stn/network.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <stdexcept>

namespace stn {

namespace {

constexpr const char* kDensityPrefix = "density.";

TensorPtr frame_to_tensor(const ImageFrame& frame) {
  auto t = make_tensor({1, frame.height, frame.width});
  t->data = frame.pixels;
  return t;
}

std::vector<LevelShape> level_shapes(int height, int width) {
  return {{height, width, 1}, {height / 2, width / 2, 2}, {height / 4, width / 4, 4}};
}

std::vector<Vec2> to_points(const std::vector<DetectedPoint>& dets) {
  std::vector<Vec2> pts;
  pts.reserve(dets.size());
  for (const auto& d : dets) pts.push_back({d.x, d.y});
  return pts;
}

}  // namespace

void ModelConfig::validate() const {
  if (widths[0] <= 0 || widths[0] > widths[1] || widths[1] > widths[2]) {
    throw std::runtime_error("ModelConfig: backbone widths must be positive and ascending");
  }
  if (max_disp < 0) throw std::runtime_error("ModelConfig: max_disp must be >= 0");
  if (match_radius <= 0 || neighbor_radius <= 0 || nms_radius <= 0) {
    throw std::runtime_error("ModelConfig: radii must be > 0");
  }
  if (top_m < 1 || beta < 1 || batch_size < 1) {
    throw std::runtime_error("ModelConfig: top_m, beta and batch_size must be >= 1");
  }
  if (cls_prior <= 0.0 || cls_prior >= 1.0) {
    throw std::runtime_error("ModelConfig: cls_prior must be in (0,1)");
  }
  for (const double w : density_weights.w) {
    if (w <= 0.0) throw std::runtime_error("ModelConfig: density weights must be positive");
  }
}

ModelState init_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ModelState s;
  s.cfg = cfg;
  std::mt19937_64 rng(seed);
  auto& reg = s.params;
  const auto& w = cfg.widths;
  const int corr_ch = (2 * cfg.max_disp + 1) * (2 * cfg.max_disp + 1);

  const std::array<int, 3> in_ch{1, w[0], w[1]};
  for (int l = 0; l < 3; ++l) {
    const std::string gp = "backbone.g" + std::to_string(l + 1);
    s.backbone.conv_a_w[l] = reg.he(gp + ".a.w", {w[l], in_ch[l], 3, 3}, in_ch[l] * 9, rng);
    s.backbone.conv_a_b[l] = reg.zeros(gp + ".a.b", {w[l]});
    s.backbone.conv_b_w[l] = reg.he(gp + ".b.w", {w[l], w[l], 3, 3}, w[l] * 9, rng);
    s.backbone.conv_b_b[l] = reg.zeros(gp + ".b.b", {w[l]});
  }
  // deepest level fuses (skip, correlation); shallower levels also take the
  // upsampled deeper feature
  const std::array<int, 3> mix_in{w[0] + corr_ch + w[1], w[1] + corr_ch + w[2], w[2] + corr_ch};
  for (int l = 0; l < 3; ++l) {
    const std::string dp = "decoder.l" + std::to_string(l + 1);
    s.decoder.mix_w[l] = reg.he(dp + ".mix.w", {w[l], mix_in[l], 1, 1}, mix_in[l], rng);
    s.decoder.mix_b[l] = reg.zeros(dp + ".mix.b", {w[l]});
    s.decoder.conv_w[l] = reg.he(dp + ".conv.w", {w[l], w[l], 3, 3}, w[l] * 9, rng);
    s.decoder.conv_b[l] = reg.zeros(dp + ".conv.b", {w[l]});
  }
  for (int l = 0; l < 3; ++l) {
    const std::string hp = std::string(kDensityPrefix) + "l" + std::to_string(l + 1);
    s.density.w[l] = reg.he(hp + ".w", {1, w[l], 1, 1}, w[l], rng);
    s.density.b[l] = reg.zeros(hp + ".b", {1});
  }
  if (cfg.use_localization) {
    s.loc = make_localization_params(w, cfg.attention_reduction, cfg.cls_prior, reg, rng, "loc");
    if (cfg.use_association) {
      s.ass = make_association_params(w[0], cfg.point_hidden, reg, rng, "ass");
    }
  }
  return s;
}

ForwardOutputs forward(ModelState& state, Graph& g, const ImageFrame& frame_a,
                       const ImageFrame& frame_b, bool /*with_grad*/) {
  if (frame_a.width != frame_b.width || frame_a.height != frame_b.height) {
    throw std::runtime_error("forward: frame shapes differ");
  }
  if (frame_a.width % 4 != 0 || frame_a.height % 4 != 0) {
    throw std::runtime_error("forward: frame extents must be divisible by 4, got " +
                             std::to_string(frame_a.width) + "x" + std::to_string(frame_a.height));
  }
  const auto& cfg = state.cfg;

  auto extract = [&](const TensorPtr& img) {
    std::array<TensorPtr, 3> feats;
    TensorPtr x = img;
    for (int l = 0; l < 3; ++l) {
      if (l > 0) x = g.maxpool2(feats[l - 1]);
      x = g.relu(g.conv2d(x, state.backbone.conv_a_w[l], state.backbone.conv_a_b[l], 1, 1));
      x = g.relu(g.conv2d(x, state.backbone.conv_b_w[l], state.backbone.conv_b_b[l], 1, 1));
      feats[l] = x;
    }
    return feats;
  };

  auto ta = frame_to_tensor(frame_a);
  auto tb = frame_to_tensor(frame_b);
  auto fa = extract(ta);
  auto fb = extract(tb);

  // each frame's decoder sees the correlation towards the other frame, so the
  // shared offset head reads "own position minus paired position" in both runs
  auto decode_side = [&](const std::array<TensorPtr, 3>& own,
                         const std::array<TensorPtr, 3>& other) {
    std::array<TensorPtr, 3> fused;
    TensorPtr deeper;
    for (int l = 2; l >= 0; --l) {
      auto corr = g.correlate(own[l], other[l], cfg.max_disp);
      std::vector<TensorPtr> cat{own[l], corr};
      if (deeper) cat.push_back(g.upsample2_bilinear(deeper));
      auto mixed = g.relu(g.conv2d(g.concat_channels(cat), state.decoder.mix_w[l],
                                   state.decoder.mix_b[l], 1, 0));
      fused[l] = g.relu(g.conv2d(mixed, state.decoder.conv_w[l], state.decoder.conv_b[l], 1, 1));
      deeper = fused[l];
    }
    return fused;
  };

  ForwardOutputs out;
  out.features[0] = decode_side(fa, fb);
  out.features[1] = decode_side(fb, fa);

  for (int t = 0; t < 2; ++t) {
    DensityPyramid pyr;
    for (int l = 0; l < 3; ++l) {
      auto m = g.conv2d(out.features[t][l], state.density.w[l], state.density.b[l], 1, 0);
      pyr.levels.push_back(g.reshape(m, {m->shape[1], m->shape[2]}));
    }
    out.density[t] = std::move(pyr);
    if (cfg.use_localization) {
      out.loc[t] = apply_localization(g, state.loc, out.features[t], cfg.attention_enabled);
    }
  }
  return out;
}

PairLossBreakdown multi_task_loss(ModelState& state, Graph& g, const ForwardOutputs& out,
                                  const PairGroundTruth& gt, bool with_association) {
  const auto& cfg = state.cfg;
  PairLossBreakdown res;
  auto den = density_loss(g, out.density, *gt.density, cfg.density_weights);
  res.density = den->value();
  res.total = den;

  if (cfg.use_localization) {
    const std::array<const ProposalLabels*, 2> labels{gt.labels_a, gt.labels_b};
    TensorPtr loc_total = make_scalar(0.0);
    for (int t = 0; t < 2; ++t) {
      std::vector<TensorPtr> cls(out.loc[t].cls.begin(), out.loc[t].cls.end());
      std::vector<TensorPtr> reg(out.loc[t].reg.begin(), out.loc[t].reg.end());
      loc_total = g.add(loc_total, localization_loss(g, cls, reg, *labels[t]));
    }
    loc_total = g.mul_scalar(loc_total, 0.5);
    res.localization = loc_total->value();
    res.total = g.add(res.total, loc_total);

    if (with_association && cfg.use_association) {
      auto dets_a = decode_and_nms(*out.loc[0].cls[0], *out.loc[0].reg[0], cfg.nms_radius,
                                   cfg.top_m, cfg.decode_floor);
      auto dets_b = decode_and_nms(*out.loc[1].cls[0], *out.loc[1].reg[0], cfg.nms_radius,
                                   cfg.top_m, cfg.decode_floor);
      TensorPtr off_a, off_b;
      if (!dets_a.empty()) {
        off_a = apply_association(g, state.ass, to_points(dets_a), out.features[0][0], cfg.beta);
      }
      if (!dets_b.empty()) {
        off_b = apply_association(g, state.ass, to_points(dets_b), out.features[1][0], cfg.beta);
      }
      ContextLossFlags flags{cfg.use_relation, cfg.use_cycle};
      auto ass = neighboring_context_loss(g, dets_a, off_a, dets_b, off_b, *gt.annos_a,
                                          *gt.annos_b, cfg.match_radius, cfg.neighbor_radius,
                                          flags);
      res.association = ass.loss->value();
      res.matched = ass.matched_forward + ass.matched_backward;
      res.unmatched = ass.unmatched_forward + ass.unmatched_backward;
      res.total = g.add(res.total, ass.loss);
    }
  }
  return res;
}

void clip_gradients(ModelState& state, double max_norm) {
  if (max_norm <= 0.0) return;
  double sq = 0.0;
  for (const auto& [name, t] : state.params.all()) {
    if (state.frozen.count(name)) continue;
    for (double gv : t->grad) sq += gv * gv;
  }
  const double norm = std::sqrt(sq);
  if (norm <= max_norm) return;
  const double scale = max_norm / norm;
  for (const auto& [name, t] : state.params.all()) {
    if (state.frozen.count(name)) continue;
    for (double& gv : t->grad) gv *= scale;
  }
}

void adam_step(ModelState& state, double lr, double beta1, double beta2, double eps) {
  state.adam_t += 1;
  const double t = static_cast<double>(state.adam_t);
  const double bc1 = 1.0 - std::pow(beta1, t);
  const double bc2 = 1.0 - std::pow(beta2, t);
  for (const auto& [name, p] : state.params.all()) {
    if (state.frozen.count(name)) continue;
    auto& m = state.adam_m[name];
    auto& v = state.adam_v[name];
    if (m.empty()) m.assign(p->data.size(), 0.0);
    if (v.empty()) v.assign(p->data.size(), 0.0);
    for (std::size_t i = 0; i < p->data.size(); ++i) {
      const double gv = p->grad[i];
      if (!std::isfinite(gv)) {
        throw std::runtime_error("adam_step: non-finite gradient in parameter '" + name + "'");
      }
      m[i] = beta1 * m[i] + (1.0 - beta1) * gv;
      v[i] = beta2 * v[i] + (1.0 - beta2) * gv * gv;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      p->data[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

TrainingScene prepare_training_scene(const std::vector<ImageFrame>& frames,
                                     const std::vector<FrameAnnotations>& annos,
                                     const ModelConfig& cfg) {
  if (frames.size() != annos.size() || frames.size() < 2) {
    throw std::runtime_error("prepare_training_scene: need >= 2 annotated frames");
  }
  TrainingScene scene;
  scene.frames = frames;
  scene.annos = annos;
  const auto shapes = level_shapes(frames[0].height, frames[0].width);
  for (std::size_t f = 0; f < frames.size(); ++f) {
    const auto pyr = build_density_pyramid(annos[f], frames[f].height, frames[f].width);
    scene.gt_density.push_back(pyr);
    if (cfg.use_localization) {
      scene.labels.push_back(assign_labels(annos[f], shapes, cfg.match_radius));
    }
  }
  return scene;
}

void train_stage(ModelState& state, const std::vector<TrainingScene>& data, int stage, int steps,
                 std::uint64_t seed, std::vector<StepLog>* log) {
  if (data.empty()) throw std::runtime_error("train_stage: empty dataset");
  if (stage != 1 && stage != 2) throw std::runtime_error("train_stage: stage must be 1 or 2");
  state.stage = stage;
  if (stage == 2) {
    for (const auto& [name, t] : state.params.all()) {
      if (name.rfind(kDensityPrefix, 0) == 0) state.frozen.insert(name);
    }
  } else {
    state.frozen.clear();
  }
  const auto& cfg = state.cfg;
  const bool with_association = stage == 2 && cfg.use_association && cfg.use_localization;
  std::mt19937_64 rng(seed);

  for (int step = 1; step <= steps; ++step) {
    for (const auto& [name, t] : state.params.all()) t->zero_grad();
    Graph g;
    TensorPtr total = make_scalar(0.0);
    for (int k = 0; k < cfg.batch_size; ++k) {
      const auto& scene = data[rng() % data.size()];
      const std::size_t t0 = rng() % (scene.frames.size() - 1);
      auto out = forward(state, g, scene.frames[t0], scene.frames[t0 + 1], true);
      PairGroundTruth gt;
      gt.annos_a = &scene.annos[t0];
      gt.annos_b = &scene.annos[t0 + 1];
      std::array<DensityPyramid, 2> gtd{scene.gt_density[t0], scene.gt_density[t0 + 1]};
      gt.density = &gtd;
      if (cfg.use_localization) {
        gt.labels_a = &scene.labels[t0];
        gt.labels_b = &scene.labels[t0 + 1];
      }
      auto loss = multi_task_loss(state, g, out, gt, with_association);
      total = g.add(total, loss.total);
    }
    total = g.mul_scalar(total, 1.0 / cfg.batch_size);
    g.backward(total);
    clip_gradients(state, cfg.grad_clip_norm);
    adam_step(state, cfg.learning_rate);
    if (log) {
      log->push_back({static_cast<int>(log->size()) + 1, stage, total->value()});
    }
  }
}

InferResult infer(ModelState& state, const ImageFrame& frame_a, const ImageFrame& frame_b) {
  Graph g(false);
  auto out = forward(state, g, frame_a, frame_b, false);
  const auto& cfg = state.cfg;
  InferResult res;
  for (int t = 0; t < 2; ++t) {
    res.counts[t] = count_from_map(*out.density[t].levels[0]);
    if (cfg.use_localization) {
      res.detections[t] = decode_and_nms(*out.loc[t].cls[0], *out.loc[t].reg[0], cfg.nms_radius,
                                         cfg.top_m, cfg.decode_floor);
    }
  }
  auto offsets_for = [&](const std::vector<DetectedPoint>& dets, const TensorPtr& fmap) {
    std::vector<Vec2> offs(dets.size(), Vec2{});
    if (!dets.empty() && cfg.use_association && cfg.use_localization) {
      auto o = apply_association(g, state.ass, to_points(dets), fmap, cfg.beta);
      for (std::size_t i = 0; i < dets.size(); ++i) {
        offs[i] = {o->at2(static_cast<int>(i), 0), o->at2(static_cast<int>(i), 1)};
      }
    }
    return offs;
  };
  res.fwd_offsets = offsets_for(res.detections[0], out.features[0][0]);
  res.bwd_offsets = offsets_for(res.detections[1], out.features[1][0]);
  res.projected.reserve(res.detections[0].size());
  for (std::size_t i = 0; i < res.detections[0].size(); ++i) {
    res.projected.push_back({res.detections[0][i].x - res.fwd_offsets[i].x,
                             res.detections[0][i].y - res.fwd_offsets[i].y});
  }
  return res;
}

SequenceInference infer_sequence(ModelState& state, const std::vector<ImageFrame>& frames) {
  if (frames.size() < 2) throw std::runtime_error("infer_sequence: need >= 2 frames");
  const auto& cfg = state.cfg;
  const std::size_t T = frames.size();

  struct PairCache {
    std::array<std::vector<DetectedPoint>, 2> dets;
    std::array<TensorPtr, 2> feat1;    // stride-1 fused features per side
    std::array<TensorPtr, 2> density1;
    std::array<double, 2> counts{};
  };
  std::vector<PairCache> pairs(T - 1);
  for (std::size_t t = 0; t + 1 < T; ++t) {
    Graph g(false);
    auto out = forward(state, g, frames[t], frames[t + 1], false);
    for (int s = 0; s < 2; ++s) {
      pairs[t].counts[s] = count_from_map(*out.density[s].levels[0]);
      pairs[t].density1[s] = out.density[s].levels[0];
      pairs[t].feat1[s] = out.features[s][0];
      if (cfg.use_localization) {
        pairs[t].dets[s] = decode_and_nms(*out.loc[s].cls[0], *out.loc[s].reg[0], cfg.nms_radius,
                                          cfg.top_m, cfg.decode_floor);
      }
    }
  }

  SequenceInference seq;
  seq.counts.resize(T);
  seq.detections.resize(T);
  seq.density_level1.resize(T);
  for (std::size_t t = 0; t + 1 < T; ++t) {
    seq.counts[t] = pairs[t].counts[0];
    seq.detections[t] = pairs[t].dets[0];
    seq.density_level1[t] = pairs[t].density1[0];
  }
  seq.counts[T - 1] = pairs[T - 2].counts[1];
  seq.detections[T - 1] = pairs[T - 2].dets[1];
  seq.density_level1[T - 1] = pairs[T - 2].density1[1];

  seq.fwd_offsets.assign(T, {});
  seq.bwd_offsets.assign(T, {});
  for (std::size_t t = 0; t < T; ++t) {
    seq.fwd_offsets[t].assign(seq.detections[t].size(), Vec2{});
    seq.bwd_offsets[t].assign(seq.detections[t].size(), Vec2{});
  }
  if (cfg.use_association && cfg.use_localization) {
    auto eval_offsets = [&](const std::vector<DetectedPoint>& dets, const TensorPtr& fmap,
                            std::vector<Vec2>& into) {
      if (dets.empty()) return;
      Graph g(false);
      auto o = apply_association(g, state.ass, to_points(dets), fmap, cfg.beta);
      for (std::size_t i = 0; i < dets.size(); ++i) {
        into[i] = {o->at2(static_cast<int>(i), 0), o->at2(static_cast<int>(i), 1)};
      }
    };
    for (std::size_t t = 0; t + 1 < T; ++t) {
      eval_offsets(seq.detections[t], pairs[t].feat1[0], seq.fwd_offsets[t]);
      eval_offsets(seq.detections[t + 1], pairs[t].feat1[1], seq.bwd_offsets[t + 1]);
    }
  }
  return seq;
}

void save_checkpoint(const ModelState& state, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path);
  out.write("STNW", 4);
  const std::uint32_t count = static_cast<std::uint32_t>(state.params.all().size());
  out.write(reinterpret_cast<const char*>(&count), 4);
  for (const auto& [name, t] : state.params.all()) {
    const std::uint16_t len = static_cast<std::uint16_t>(name.size());
    out.write(reinterpret_cast<const char*>(&len), 2);
    out.write(name.data(), len);
    const std::uint8_t rank = static_cast<std::uint8_t>(t->shape.size());
    out.write(reinterpret_cast<const char*>(&rank), 1);
    for (int e : t->shape) {
      const std::uint32_t ext = static_cast<std::uint32_t>(e);
      out.write(reinterpret_cast<const char*>(&ext), 4);
    }
    out.write(reinterpret_cast<const char*>(t->data.data()),
              static_cast<std::streamsize>(t->data.size() * sizeof(double)));
  }
  if (!out) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

void load_checkpoint(ModelState& state, const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "STNW", 4) != 0) {
    throw std::runtime_error("load_checkpoint: " + path + " is not a checkpoint file");
  }
  std::uint32_t count = 0;
  in.read(reinterpret_cast<char*>(&count), 4);
  std::map<std::string, TensorPtr> loaded;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::uint16_t len = 0;
    in.read(reinterpret_cast<char*>(&len), 2);
    std::string name(len, '\0');
    in.read(name.data(), len);
    std::uint8_t rank = 0;
    in.read(reinterpret_cast<char*>(&rank), 1);
    Shape shape(rank);
    for (int r = 0; r < rank; ++r) {
      std::uint32_t ext = 0;
      in.read(reinterpret_cast<char*>(&ext), 4);
      shape[r] = static_cast<int>(ext);
    }
    if (!in) throw std::runtime_error("load_checkpoint: truncated header in " + path);
    auto t = make_tensor(shape);
    in.read(reinterpret_cast<char*>(t->data.data()),
            static_cast<std::streamsize>(t->data.size() * sizeof(double)));
    if (!in) throw std::runtime_error("load_checkpoint: truncated data in " + path);
    loaded.emplace(std::move(name), std::move(t));
  }
  for (const auto& [name, t] : state.params.all()) {
    auto it = loaded.find(name);
    if (it == loaded.end()) {
      throw std::runtime_error("load_checkpoint: parameter '" + name + "' missing from " + path);
    }
    if (it->second->shape != t->shape) {
      throw std::runtime_error("load_checkpoint: parameter '" + name + "' has shape " +
                               shape_str(it->second->shape) + ", model expects " +
                               shape_str(t->shape));
    }
    t->data = it->second->data;
  }
}

}  // namespace stn
