// Test-side reference implementations and the finite-difference gradient
// checker. Everything here is deliberately independent of the graph ops it
// checks: plain nested loops, no shared kernels.
#pragma once

#include "stn/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>
#include <vector>

namespace oracles {

inline void fill_uniform(std::mt19937_64& rng, stn::Tensor& t, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  for (auto& v : t.data) v = d(rng);
}

// Distinct, well-separated values so max/kink ops stay away from ties under
// the finite-difference step.
inline void fill_distinct(std::mt19937_64& rng, stn::Tensor& t, double lo = -1.0, double hi = 1.0) {
  const std::size_t n = t.data.size();
  const double span = hi - lo;
  const double step = span / static_cast<double>(n + 1);
  for (std::size_t i = 0; i < n; ++i) t.data[i] = lo + step * (static_cast<double>(i) + 0.5);
  std::shuffle(t.data.begin(), t.data.end(), rng);
  std::uniform_real_distribution<double> jitter(-step / 8.0, step / 8.0);
  for (auto& v : t.data) {
    v += jitter(rng);
    if (std::abs(v) < step / 4.0) v += (v >= 0.0 ? step : -step) / 2.0;  // keep off relu kink
  }
}

// Builds the loss from fresh leaves; used once with gradients on, then
// repeatedly on perturbed copies with gradients off.
using LossBuilder =
    std::function<stn::TensorPtr(stn::Graph&, const std::vector<stn::TensorPtr>&)>;

struct FdReport {
  double max_rel_err = 0.0;
};

inline FdReport fd_check(const LossBuilder& build, const std::vector<stn::TensorPtr>& leaves,
                         double step = 1e-5) {
  // analytic pass
  for (const auto& leaf : leaves) leaf->zero_grad();
  {
    stn::Graph g;
    auto loss = build(g, leaves);
    g.backward(loss);
  }

  FdReport rep;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    for (std::size_t i = 0; i < leaves[li]->data.size(); ++i) {
      const double saved = leaves[li]->data[i];
      auto run = [&](double v) {
        std::vector<stn::TensorPtr> copies;
        copies.reserve(leaves.size());
        for (std::size_t k = 0; k < leaves.size(); ++k) {
          auto c = stn::make_tensor(leaves[k]->shape, leaves[k]->data, false);
          copies.push_back(c);
        }
        copies[li]->data[i] = v;
        stn::Graph g;
        return build(g, copies)->value();
      };
      const double fp = run(saved + step);
      const double fm = run(saved - step);
      const double g_fd = (fp - fm) / (2.0 * step);
      const double g_an = leaves[li]->grad[i];
      const double rel = std::abs(g_an - g_fd) / std::max(1.0, std::abs(g_an));
      rep.max_rel_err = std::max(rep.max_rel_err, rel);
    }
  }
  return rep;
}

// ---- nested-loop references ---------------------------------------------

inline std::vector<double> conv2d_ref(const stn::Tensor& in, const stn::Tensor& k,
                                      const stn::Tensor& b, int stride, int pad) {
  const int C = in.shape[0], H = in.shape[1], W = in.shape[2];
  const int K = k.shape[0], kh = k.shape[2], kw = k.shape[3];
  const int Ho = (H + 2 * pad - kh) / stride + 1;
  const int Wo = (W + 2 * pad - kw) / stride + 1;
  std::vector<double> out(static_cast<std::size_t>(K) * Ho * Wo, 0.0);
  for (int o = 0; o < K; ++o)
    for (int oy = 0; oy < Ho; ++oy)
      for (int ox = 0; ox < Wo; ++ox) {
        double acc = b.data[o];
        for (int c = 0; c < C; ++c)
          for (int u = 0; u < kh; ++u)
            for (int v = 0; v < kw; ++v) {
              const int iy = oy * stride + u - pad;
              const int ix = ox * stride + v - pad;
              if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
              acc += in.data[(static_cast<std::size_t>(c) * H + iy) * W + ix] *
                     k.data[((static_cast<std::size_t>(o) * C + c) * kh + u) * kw + v];
            }
        out[(static_cast<std::size_t>(o) * Ho + oy) * Wo + ox] = acc;
      }
  return out;
}

inline std::vector<double> correlate_ref(const stn::Tensor& f1, const stn::Tensor& f2,
                                         int max_disp) {
  const int C = f1.shape[0], H = f1.shape[1], W = f1.shape[2];
  const int D = 2 * max_disp + 1;
  std::vector<double> out(static_cast<std::size_t>(D) * D * H * W, 0.0);
  for (int dy = -max_disp; dy <= max_disp; ++dy)
    for (int dx = -max_disp; dx <= max_disp; ++dx) {
      const int q = (dy + max_disp) * D + (dx + max_disp);
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
          const int y2 = y + dy, x2 = x + dx;
          if (y2 < 0 || y2 >= H || x2 < 0 || x2 >= W) continue;
          double acc = 0.0;
          for (int c = 0; c < C; ++c)
            acc += f1.data[(static_cast<std::size_t>(c) * H + y) * W + x] *
                   f2.data[(static_cast<std::size_t>(c) * H + y2) * W + x2];
          out[(static_cast<std::size_t>(q) * H + y) * W + x] = acc / C;
        }
    }
  return out;
}

inline std::vector<double> dense_ref(const stn::Tensor& x, const stn::Tensor& w,
                                     const stn::Tensor& b) {
  const int n = x.shape[0], m = w.shape[0];
  std::vector<double> out(m, 0.0);
  for (int i = 0; i < m; ++i) {
    double acc = b.data[i];
    for (int j = 0; j < n; ++j) acc += w.data[static_cast<std::size_t>(i) * n + j] * x.data[j];
    out[i] = acc;
  }
  return out;
}

}  // namespace oracles
