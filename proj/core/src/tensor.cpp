#include "stn/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace stn {

namespace {

using MatMap = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using ConstMatMap =
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

void check_rank(const TensorPtr& t, int rank, const char* op, const char* name) {
  if (static_cast<int>(t->shape.size()) != rank) {
    fail(std::string(op) + ": " + name + " must have rank " + std::to_string(rank) + ", got shape " +
         shape_str(t->shape));
  }
}

void check_same_shape(const TensorPtr& a, const TensorPtr& b, const char* op) {
  if (a->shape != b->shape) {
    fail(std::string(op) + ": shape mismatch " + shape_str(a->shape) + " vs " + shape_str(b->shape));
  }
}

// column buffer layout: [(C*kh*kw) rows] x [(Ho*Wo) cols], row-major
void im2col(const double* input, int C, int H, int W, int kh, int kw, int stride, int pad,
            int Ho, int Wo, double* col) {
  const int cols = Ho * Wo;
  for (int c = 0; c < C; ++c) {
    for (int u = 0; u < kh; ++u) {
      for (int v = 0; v < kw; ++v) {
        double* row = col + ((static_cast<std::int64_t>(c) * kh + u) * kw + v) * cols;
        for (int oy = 0; oy < Ho; ++oy) {
          const int iy = oy * stride + u - pad;
          if (iy < 0 || iy >= H) {
            std::fill(row + oy * Wo, row + (oy + 1) * Wo, 0.0);
            continue;
          }
          const double* src = input + (static_cast<std::int64_t>(c) * H + iy) * W;
          for (int ox = 0; ox < Wo; ++ox) {
            const int ix = ox * stride + v - pad;
            row[oy * Wo + ox] = (ix < 0 || ix >= W) ? 0.0 : src[ix];
          }
        }
      }
    }
  }
}

void col2im_acc(const double* col, int C, int H, int W, int kh, int kw, int stride, int pad,
                int Ho, int Wo, double* grad_input) {
  const int cols = Ho * Wo;
  for (int c = 0; c < C; ++c) {
    for (int u = 0; u < kh; ++u) {
      for (int v = 0; v < kw; ++v) {
        const double* row = col + ((static_cast<std::int64_t>(c) * kh + u) * kw + v) * cols;
        for (int oy = 0; oy < Ho; ++oy) {
          const int iy = oy * stride + u - pad;
          if (iy < 0 || iy >= H) continue;
          double* dst = grad_input + (static_cast<std::int64_t>(c) * H + iy) * W;
          for (int ox = 0; ox < Wo; ++ox) {
            const int ix = ox * stride + v - pad;
            if (ix >= 0 && ix < W) dst[ix] += row[oy * Wo + ox];
          }
        }
      }
    }
  }
}

struct BilinearTap {
  int i0, i1;
  double f;
};

// align-corners-false sampling of the source pixel grid, borders clamped
BilinearTap upsample_tap(int d, int size) {
  const double s = (d + 0.5) / 2.0 - 0.5;
  const double fl = std::floor(s);
  BilinearTap t;
  t.i0 = std::clamp(static_cast<int>(fl), 0, size - 1);
  t.i1 = std::clamp(static_cast<int>(fl) + 1, 0, size - 1);
  t.f = s - fl;
  return t;
}

}  // namespace

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (int e : shape) {
    if (e <= 0) fail("tensor shape has non-positive extent " + shape_str(shape));
    n *= e;
  }
  if (shape.empty()) fail("tensor shape must not be empty");
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

Tensor::Tensor(Shape s, bool rg) : shape(std::move(s)), requires_grad(rg) {
  const std::int64_t n = shape_numel(shape);
  data.assign(static_cast<std::size_t>(n), 0.0);
  if (requires_grad) grad.assign(static_cast<std::size_t>(n), 0.0);
}

double Tensor::value() const {
  if (!is_scalar()) fail("value(): tensor is not scalar, shape " + shape_str(shape));
  return data[0];
}

double& Tensor::at2(int i, int j) { return data[static_cast<std::size_t>(i) * shape[1] + j]; }
double Tensor::at2(int i, int j) const { return data[static_cast<std::size_t>(i) * shape[1] + j]; }

double& Tensor::at3(int c, int y, int x) {
  return data[(static_cast<std::size_t>(c) * shape[1] + y) * shape[2] + x];
}
double Tensor::at3(int c, int y, int x) const {
  return data[(static_cast<std::size_t>(c) * shape[1] + y) * shape[2] + x];
}

void Tensor::zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }

TensorPtr make_tensor(Shape shape, bool requires_grad) {
  return std::make_shared<Tensor>(std::move(shape), requires_grad);
}

TensorPtr make_tensor(Shape shape, std::vector<double> values, bool requires_grad) {
  auto t = std::make_shared<Tensor>(std::move(shape), requires_grad);
  if (static_cast<std::int64_t>(values.size()) != t->numel()) {
    fail("make_tensor: " + std::to_string(values.size()) + " values for shape " +
         shape_str(t->shape));
  }
  t->data = std::move(values);
  return t;
}

TensorPtr make_tensor(Shape shape, std::initializer_list<double> values, bool requires_grad) {
  return make_tensor(std::move(shape), std::vector<double>(values), requires_grad);
}

TensorPtr make_scalar(double v, bool requires_grad) {
  auto t = std::make_shared<Tensor>(Shape{1}, requires_grad);
  t->data[0] = v;
  return t;
}

TensorPtr Graph::result(Shape shape, bool requires_grad) {
  return std::make_shared<Tensor>(std::move(shape), requires_grad && recording_);
}

void Graph::record(std::function<void()> back) {
  if (recording_) tape_.push_back(Node{std::move(back)});
}

void Graph::backward(const TensorPtr& loss) {
  if (!loss->is_scalar()) {
    fail("backward: loss must be scalar, got shape " + shape_str(loss->shape));
  }
  if (!loss->requires_grad) return;  // nothing on the tape feeds it
  loss->grad[0] += 1.0;
  for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) it->back();
}

TensorPtr Graph::conv2d(const TensorPtr& input, const TensorPtr& kernel, const TensorPtr& bias,
                        int stride, int pad) {
  check_rank(input, 3, "conv2d", "input");
  check_rank(kernel, 4, "conv2d", "kernel");
  check_rank(bias, 1, "conv2d", "bias");
  const int C = input->shape[0], H = input->shape[1], W = input->shape[2];
  const int K = kernel->shape[0], kh = kernel->shape[2], kw = kernel->shape[3];
  if (kernel->shape[1] != C) {
    fail("conv2d: kernel channels " + shape_str(kernel->shape) + " do not match input " +
         shape_str(input->shape));
  }
  if (bias->shape[0] != K) {
    fail("conv2d: bias " + shape_str(bias->shape) + " does not match kernel count " +
         std::to_string(K));
  }
  if (kh % 2 == 0 || kw % 2 == 0) fail("conv2d: kernel extents must be odd");
  if (pad < 0 || stride < 1) fail("conv2d: invalid stride/pad");
  const int eh = H + 2 * pad - kh;
  const int ew = W + 2 * pad - kw;
  if (eh < 0 || ew < 0 || eh % stride != 0 || ew % stride != 0) {
    fail("conv2d: input " + shape_str(input->shape) + " incompatible with kernel " +
         shape_str(kernel->shape) + " stride " + std::to_string(stride) + " pad " +
         std::to_string(pad));
  }
  const int Ho = eh / stride + 1;
  const int Wo = ew / stride + 1;
  const int patch = C * kh * kw;
  const int cols = Ho * Wo;

  auto out = result({K, Ho, Wo}, input->requires_grad || kernel->requires_grad ||
                                     bias->requires_grad);
  std::vector<double> col(static_cast<std::size_t>(patch) * cols);
  im2col(input->data.data(), C, H, W, kh, kw, stride, pad, Ho, Wo, col.data());
  {
    ConstMatMap Wm(kernel->data.data(), K, patch);
    ConstMatMap Cm(col.data(), patch, cols);
    MatMap Om(out->data.data(), K, cols);
    Om.noalias() = Wm * Cm;
    for (int k = 0; k < K; ++k) Om.row(k).array() += bias->data[k];
  }

  if (out->requires_grad) {
    record([input, kernel, bias, out, stride, pad, C, H, W, K, kh, kw, Ho, Wo, patch, cols]() {
      ConstMatMap dO(out->grad.data(), K, cols);
      if (kernel->requires_grad || input->requires_grad) {
        std::vector<double> col(static_cast<std::size_t>(patch) * cols);
        im2col(input->data.data(), C, H, W, kh, kw, stride, pad, Ho, Wo, col.data());
        if (kernel->requires_grad) {
          MatMap dW(kernel->grad.data(), K, patch);
          ConstMatMap Cm(col.data(), patch, cols);
          dW.noalias() += dO * Cm.transpose();
        }
        if (input->requires_grad) {
          std::vector<double> dcol(static_cast<std::size_t>(patch) * cols);
          ConstMatMap Wm(kernel->data.data(), K, patch);
          MatMap dC(dcol.data(), patch, cols);
          dC.noalias() = Wm.transpose() * dO;
          col2im_acc(dcol.data(), C, H, W, kh, kw, stride, pad, Ho, Wo, input->grad.data());
        }
      }
      if (bias->requires_grad) {
        for (int k = 0; k < K; ++k) bias->grad[k] += dO.row(k).sum();
      }
    });
  }
  return out;
}

TensorPtr Graph::relu(const TensorPtr& x) {
  auto out = result(x->shape, x->requires_grad);
  for (std::size_t i = 0; i < x->data.size(); ++i) out->data[i] = x->data[i] > 0.0 ? x->data[i] : 0.0;
  if (out->requires_grad) {
    record([x, out]() {
      for (std::size_t i = 0; i < x->data.size(); ++i) {
        if (x->data[i] > 0.0) x->grad[i] += out->grad[i];
      }
    });
  }
  return out;
}

TensorPtr Graph::sigmoid(const TensorPtr& x) {
  auto out = result(x->shape, x->requires_grad);
  for (std::size_t i = 0; i < x->data.size(); ++i) out->data[i] = 1.0 / (1.0 + std::exp(-x->data[i]));
  if (out->requires_grad) {
    record([x, out]() {
      for (std::size_t i = 0; i < x->data.size(); ++i) {
        const double s = out->data[i];
        x->grad[i] += s * (1.0 - s) * out->grad[i];
      }
    });
  }
  return out;
}

TensorPtr Graph::add(const TensorPtr& a, const TensorPtr& b) {
  check_same_shape(a, b, "add");
  auto out = result(a->shape, a->requires_grad || b->requires_grad);
  for (std::size_t i = 0; i < a->data.size(); ++i) out->data[i] = a->data[i] + b->data[i];
  if (out->requires_grad) {
    record([a, b, out]() {
      if (a->requires_grad)
        for (std::size_t i = 0; i < a->data.size(); ++i) a->grad[i] += out->grad[i];
      if (b->requires_grad)
        for (std::size_t i = 0; i < b->data.size(); ++i) b->grad[i] += out->grad[i];
    });
  }
  return out;
}

TensorPtr Graph::sub(const TensorPtr& a, const TensorPtr& b) {
  check_same_shape(a, b, "sub");
  auto out = result(a->shape, a->requires_grad || b->requires_grad);
  for (std::size_t i = 0; i < a->data.size(); ++i) out->data[i] = a->data[i] - b->data[i];
  if (out->requires_grad) {
    record([a, b, out]() {
      if (a->requires_grad)
        for (std::size_t i = 0; i < a->data.size(); ++i) a->grad[i] += out->grad[i];
      if (b->requires_grad)
        for (std::size_t i = 0; i < b->data.size(); ++i) b->grad[i] -= out->grad[i];
    });
  }
  return out;
}

TensorPtr Graph::mul_scalar(const TensorPtr& x, double s) {
  auto out = result(x->shape, x->requires_grad);
  for (std::size_t i = 0; i < x->data.size(); ++i) out->data[i] = x->data[i] * s;
  if (out->requires_grad) {
    record([x, out, s]() {
      for (std::size_t i = 0; i < x->data.size(); ++i) x->grad[i] += s * out->grad[i];
    });
  }
  return out;
}

TensorPtr Graph::concat_channels(const std::vector<TensorPtr>& xs) {
  if (xs.empty()) fail("concat_channels: no inputs");
  for (const auto& x : xs) check_rank(x, 3, "concat_channels", "input");
  const int H = xs[0]->shape[1], W = xs[0]->shape[2];
  int C = 0;
  bool rg = false;
  for (const auto& x : xs) {
    if (x->shape[1] != H || x->shape[2] != W) {
      fail("concat_channels: spatial mismatch " + shape_str(xs[0]->shape) + " vs " +
           shape_str(x->shape));
    }
    C += x->shape[0];
    rg = rg || x->requires_grad;
  }
  auto out = result({C, H, W}, rg);
  std::size_t off = 0;
  for (const auto& x : xs) {
    std::copy(x->data.begin(), x->data.end(), out->data.begin() + off);
    off += x->data.size();
  }
  if (rg) {
    record([xs, out]() {
      std::size_t off = 0;
      for (const auto& x : xs) {
        if (x->requires_grad) {
          for (std::size_t i = 0; i < x->data.size(); ++i) x->grad[i] += out->grad[off + i];
        }
        off += x->data.size();
      }
    });
  }
  return out;
}

TensorPtr Graph::maxpool2(const TensorPtr& x) {
  check_rank(x, 3, "maxpool2", "input");
  const int C = x->shape[0], H = x->shape[1], W = x->shape[2];
  if (H % 2 != 0 || W % 2 != 0) {
    fail("maxpool2: spatial extents must be even, got " + shape_str(x->shape));
  }
  const int Ho = H / 2, Wo = W / 2;
  auto out = result({C, Ho, Wo}, x->requires_grad);
  auto argmax = std::make_shared<std::vector<std::int64_t>>(out->data.size());
  for (int c = 0; c < C; ++c) {
    for (int oy = 0; oy < Ho; ++oy) {
      for (int ox = 0; ox < Wo; ++ox) {
        double best = -std::numeric_limits<double>::infinity();
        std::int64_t best_i = 0;
        for (int dy = 0; dy < 2; ++dy) {
          for (int dx = 0; dx < 2; ++dx) {
            const std::int64_t i =
                (static_cast<std::int64_t>(c) * H + oy * 2 + dy) * W + ox * 2 + dx;
            if (x->data[i] > best) {
              best = x->data[i];
              best_i = i;
            }
          }
        }
        const std::int64_t o = (static_cast<std::int64_t>(c) * Ho + oy) * Wo + ox;
        out->data[o] = best;
        (*argmax)[o] = best_i;
      }
    }
  }
  if (out->requires_grad) {
    record([x, out, argmax]() {
      for (std::size_t o = 0; o < out->data.size(); ++o) x->grad[(*argmax)[o]] += out->grad[o];
    });
  }
  return out;
}

TensorPtr Graph::upsample2_bilinear(const TensorPtr& x) {
  check_rank(x, 3, "upsample2_bilinear", "input");
  const int C = x->shape[0], H = x->shape[1], W = x->shape[2];
  const int Ho = H * 2, Wo = W * 2;
  auto out = result({C, Ho, Wo}, x->requires_grad);
  std::vector<BilinearTap> ty(Ho), tx(Wo);
  for (int oy = 0; oy < Ho; ++oy) ty[oy] = upsample_tap(oy, H);
  for (int ox = 0; ox < Wo; ++ox) tx[ox] = upsample_tap(ox, W);
  for (int c = 0; c < C; ++c) {
    const double* src = x->data.data() + static_cast<std::int64_t>(c) * H * W;
    double* dst = out->data.data() + static_cast<std::int64_t>(c) * Ho * Wo;
    for (int oy = 0; oy < Ho; ++oy) {
      const auto& a = ty[oy];
      for (int ox = 0; ox < Wo; ++ox) {
        const auto& b = tx[ox];
        const double top = src[a.i0 * W + b.i0] * (1 - b.f) + src[a.i0 * W + b.i1] * b.f;
        const double bot = src[a.i1 * W + b.i0] * (1 - b.f) + src[a.i1 * W + b.i1] * b.f;
        dst[oy * Wo + ox] = top * (1 - a.f) + bot * a.f;
      }
    }
  }
  if (out->requires_grad) {
    record([x, out, C, H, W, Ho, Wo]() {
      std::vector<BilinearTap> ty(Ho), tx(Wo);
      for (int oy = 0; oy < Ho; ++oy) ty[oy] = upsample_tap(oy, H);
      for (int ox = 0; ox < Wo; ++ox) tx[ox] = upsample_tap(ox, W);
      for (int c = 0; c < C; ++c) {
        double* g = x->grad.data() + static_cast<std::int64_t>(c) * H * W;
        const double* go = out->grad.data() + static_cast<std::int64_t>(c) * Ho * Wo;
        for (int oy = 0; oy < Ho; ++oy) {
          const auto& a = ty[oy];
          for (int ox = 0; ox < Wo; ++ox) {
            const auto& b = tx[ox];
            const double d = go[oy * Wo + ox];
            g[a.i0 * W + b.i0] += d * (1 - a.f) * (1 - b.f);
            g[a.i0 * W + b.i1] += d * (1 - a.f) * b.f;
            g[a.i1 * W + b.i0] += d * a.f * (1 - b.f);
            g[a.i1 * W + b.i1] += d * a.f * b.f;
          }
        }
      }
    });
  }
  return out;
}

TensorPtr Graph::dense(const TensorPtr& x, const TensorPtr& weights, const TensorPtr& bias) {
  check_rank(x, 1, "dense", "input");
  check_rank(weights, 2, "dense", "weights");
  check_rank(bias, 1, "dense", "bias");
  const int n = x->shape[0], m = weights->shape[0];
  if (weights->shape[1] != n || bias->shape[0] != m) {
    fail("dense: weights " + shape_str(weights->shape) + " bias " + shape_str(bias->shape) +
         " incompatible with input " + shape_str(x->shape));
  }
  auto out = result({m}, x->requires_grad || weights->requires_grad || bias->requires_grad);
  for (int i = 0; i < m; ++i) {
    double acc = bias->data[i];
    const double* w = weights->data.data() + static_cast<std::int64_t>(i) * n;
    for (int j = 0; j < n; ++j) acc += w[j] * x->data[j];
    out->data[i] = acc;
  }
  if (out->requires_grad) {
    record([x, weights, bias, out, n, m]() {
      for (int i = 0; i < m; ++i) {
        const double d = out->grad[i];
        if (d == 0.0) continue;
        const double* w = weights->data.data() + static_cast<std::int64_t>(i) * n;
        if (x->requires_grad) {
          for (int j = 0; j < n; ++j) x->grad[j] += w[j] * d;
        }
        if (weights->requires_grad) {
          double* gw = weights->grad.data() + static_cast<std::int64_t>(i) * n;
          for (int j = 0; j < n; ++j) gw[j] += x->data[j] * d;
        }
        if (bias->requires_grad) bias->grad[i] += d;
      }
    });
  }
  return out;
}

TensorPtr Graph::dense_rows(const TensorPtr& x, const TensorPtr& weights, const TensorPtr& bias) {
  check_rank(x, 2, "dense_rows", "input");
  check_rank(weights, 2, "dense_rows", "weights");
  check_rank(bias, 1, "dense_rows", "bias");
  const int N = x->shape[0], n = x->shape[1], m = weights->shape[0];
  if (weights->shape[1] != n || bias->shape[0] != m) {
    fail("dense_rows: weights " + shape_str(weights->shape) + " bias " + shape_str(bias->shape) +
         " incompatible with input " + shape_str(x->shape));
  }
  auto out = result({N, m}, x->requires_grad || weights->requires_grad || bias->requires_grad);
  {
    ConstMatMap X(x->data.data(), N, n);
    ConstMatMap Wm(weights->data.data(), m, n);
    MatMap O(out->data.data(), N, m);
    O.noalias() = X * Wm.transpose();
    for (int i = 0; i < N; ++i)
      for (int j = 0; j < m; ++j) O(i, j) += bias->data[j];
  }
  if (out->requires_grad) {
    record([x, weights, bias, out, N, n, m]() {
      ConstMatMap dO(out->grad.data(), N, m);
      if (x->requires_grad) {
        ConstMatMap Wm(weights->data.data(), m, n);
        MatMap dX(x->grad.data(), N, n);
        dX.noalias() += dO * Wm;
      }
      if (weights->requires_grad) {
        ConstMatMap X(x->data.data(), N, n);
        MatMap dW(weights->grad.data(), m, n);
        dW.noalias() += dO.transpose() * X;
      }
      if (bias->requires_grad) {
        for (int j = 0; j < m; ++j) bias->grad[j] += dO.col(j).sum();
      }
    });
  }
  return out;
}

TensorPtr Graph::correlate(const TensorPtr& f1, const TensorPtr& f2, int max_disp) {
  check_rank(f1, 3, "correlate", "f1");
  check_rank(f2, 3, "correlate", "f2");
  check_same_shape(f1, f2, "correlate");
  if (max_disp < 0) fail("correlate: max_disp must be >= 0");
  const int C = f1->shape[0], H = f1->shape[1], W = f1->shape[2];
  const int D = 2 * max_disp + 1;
  auto out = result({D * D, H, W}, f1->requires_grad || f2->requires_grad);
  const double inv_c = 1.0 / static_cast<double>(C);
  for (int dy = -max_disp; dy <= max_disp; ++dy) {
    for (int dx = -max_disp; dx <= max_disp; ++dx) {
      const int q = (dy + max_disp) * D + (dx + max_disp);
      double* dst = out->data.data() + static_cast<std::int64_t>(q) * H * W;
      for (int y = 0; y < H; ++y) {
        const int y2 = y + dy;
        if (y2 < 0 || y2 >= H) continue;  // stays zero
        for (int x = 0; x < W; ++x) {
          const int x2 = x + dx;
          if (x2 < 0 || x2 >= W) continue;
          double acc = 0.0;
          for (int c = 0; c < C; ++c) {
            acc += f1->data[(static_cast<std::int64_t>(c) * H + y) * W + x] *
                   f2->data[(static_cast<std::int64_t>(c) * H + y2) * W + x2];
          }
          dst[y * W + x] = acc * inv_c;
        }
      }
    }
  }
  if (out->requires_grad) {
    record([f1, f2, out, max_disp, C, H, W, D, inv_c]() {
      for (int dy = -max_disp; dy <= max_disp; ++dy) {
        for (int dx = -max_disp; dx <= max_disp; ++dx) {
          const int q = (dy + max_disp) * D + (dx + max_disp);
          const double* go = out->grad.data() + static_cast<std::int64_t>(q) * H * W;
          for (int y = 0; y < H; ++y) {
            const int y2 = y + dy;
            if (y2 < 0 || y2 >= H) continue;
            for (int x = 0; x < W; ++x) {
              const int x2 = x + dx;
              if (x2 < 0 || x2 >= W) continue;
              const double d = go[y * W + x] * inv_c;
              if (d == 0.0) continue;
              for (int c = 0; c < C; ++c) {
                const std::int64_t i1 = (static_cast<std::int64_t>(c) * H + y) * W + x;
                const std::int64_t i2 = (static_cast<std::int64_t>(c) * H + y2) * W + x2;
                if (f1->requires_grad) f1->grad[i1] += f2->data[i2] * d;
                if (f2->requires_grad) f2->grad[i2] += f1->data[i1] * d;
              }
            }
          }
        }
      }
    });
  }
  return out;
}

TensorPtr Graph::sum(const TensorPtr& x) {
  auto out = result({1}, x->requires_grad);
  out->data[0] = std::accumulate(x->data.begin(), x->data.end(), 0.0);
  if (out->requires_grad) {
    record([x, out]() {
      const double d = out->grad[0];
      for (std::size_t i = 0; i < x->data.size(); ++i) x->grad[i] += d;
    });
  }
  return out;
}

TensorPtr Graph::square(const TensorPtr& x) {
  auto out = result(x->shape, x->requires_grad);
  for (std::size_t i = 0; i < x->data.size(); ++i) out->data[i] = x->data[i] * x->data[i];
  if (out->requires_grad) {
    record([x, out]() {
      for (std::size_t i = 0; i < x->data.size(); ++i) x->grad[i] += 2.0 * x->data[i] * out->grad[i];
    });
  }
  return out;
}

TensorPtr Graph::reshape(const TensorPtr& x, Shape shape) {
  if (shape_numel(shape) != x->numel()) {
    fail("reshape: cannot view " + shape_str(x->shape) + " as " + shape_str(shape));
  }
  auto out = result(std::move(shape), x->requires_grad);
  out->data = x->data;
  if (out->requires_grad) {
    record([x, out]() {
      for (std::size_t i = 0; i < x->data.size(); ++i) x->grad[i] += out->grad[i];
    });
  }
  return out;
}

TensorPtr Graph::scale_channels(const TensorPtr& x, const TensorPtr& gate) {
  check_rank(x, 3, "scale_channels", "input");
  check_rank(gate, 1, "scale_channels", "gate");
  const int C = x->shape[0], H = x->shape[1], W = x->shape[2];
  if (gate->shape[0] != C) {
    fail("scale_channels: gate " + shape_str(gate->shape) + " vs input " + shape_str(x->shape));
  }
  auto out = result(x->shape, x->requires_grad || gate->requires_grad);
  for (int c = 0; c < C; ++c) {
    const double g = gate->data[c];
    const std::int64_t off = static_cast<std::int64_t>(c) * H * W;
    for (int i = 0; i < H * W; ++i) out->data[off + i] = x->data[off + i] * g;
  }
  if (out->requires_grad) {
    record([x, gate, out, C, H, W]() {
      for (int c = 0; c < C; ++c) {
        const std::int64_t off = static_cast<std::int64_t>(c) * H * W;
        if (x->requires_grad) {
          const double g = gate->data[c];
          for (int i = 0; i < H * W; ++i) x->grad[off + i] += g * out->grad[off + i];
        }
        if (gate->requires_grad) {
          double acc = 0.0;
          for (int i = 0; i < H * W; ++i) acc += x->data[off + i] * out->grad[off + i];
          gate->grad[c] += acc;
        }
      }
    });
  }
  return out;
}

TensorPtr Graph::scale_spatial(const TensorPtr& x, const TensorPtr& gate) {
  check_rank(x, 3, "scale_spatial", "input");
  const int C = x->shape[0], H = x->shape[1], W = x->shape[2];
  const bool gate_hw = gate->shape == Shape{H, W} || gate->shape == Shape{1, H, W};
  if (!gate_hw) {
    fail("scale_spatial: gate " + shape_str(gate->shape) + " vs input " + shape_str(x->shape));
  }
  auto out = result(x->shape, x->requires_grad || gate->requires_grad);
  for (int c = 0; c < C; ++c) {
    const std::int64_t off = static_cast<std::int64_t>(c) * H * W;
    for (int i = 0; i < H * W; ++i) out->data[off + i] = x->data[off + i] * gate->data[i];
  }
  if (out->requires_grad) {
    record([x, gate, out, C, H, W]() {
      for (int c = 0; c < C; ++c) {
        const std::int64_t off = static_cast<std::int64_t>(c) * H * W;
        for (int i = 0; i < H * W; ++i) {
          if (x->requires_grad) x->grad[off + i] += gate->data[i] * out->grad[off + i];
          if (gate->requires_grad) gate->grad[i] += x->data[off + i] * out->grad[off + i];
        }
      }
    });
  }
  return out;
}

TensorPtr Graph::channel_avg_pool(const TensorPtr& x) {
  check_rank(x, 3, "channel_avg_pool", "input");
  const int C = x->shape[0], HW = x->shape[1] * x->shape[2];
  auto out = result({C}, x->requires_grad);
  for (int c = 0; c < C; ++c) {
    const std::int64_t off = static_cast<std::int64_t>(c) * HW;
    double acc = 0.0;
    for (int i = 0; i < HW; ++i) acc += x->data[off + i];
    out->data[c] = acc / HW;
  }
  if (out->requires_grad) {
    record([x, out, C, HW]() {
      for (int c = 0; c < C; ++c) {
        const double d = out->grad[c] / HW;
        const std::int64_t off = static_cast<std::int64_t>(c) * HW;
        for (int i = 0; i < HW; ++i) x->grad[off + i] += d;
      }
    });
  }
  return out;
}

TensorPtr Graph::channel_max_pool(const TensorPtr& x) {
  check_rank(x, 3, "channel_max_pool", "input");
  const int C = x->shape[0], HW = x->shape[1] * x->shape[2];
  auto out = result({C}, x->requires_grad);
  auto argmax = std::make_shared<std::vector<std::int64_t>>(C);
  for (int c = 0; c < C; ++c) {
    const std::int64_t off = static_cast<std::int64_t>(c) * HW;
    std::int64_t best = off;
    for (int i = 1; i < HW; ++i) {
      if (x->data[off + i] > x->data[best]) best = off + i;
    }
    out->data[c] = x->data[best];
    (*argmax)[c] = best;
  }
  if (out->requires_grad) {
    record([x, out, argmax, C]() {
      for (int c = 0; c < C; ++c) x->grad[(*argmax)[c]] += out->grad[c];
    });
  }
  return out;
}

TensorPtr Graph::mean_over_channels(const TensorPtr& x) {
  check_rank(x, 3, "mean_over_channels", "input");
  const int C = x->shape[0], H = x->shape[1], W = x->shape[2];
  auto out = result({1, H, W}, x->requires_grad);
  for (int c = 0; c < C; ++c) {
    const std::int64_t off = static_cast<std::int64_t>(c) * H * W;
    for (int i = 0; i < H * W; ++i) out->data[i] += x->data[off + i];
  }
  for (int i = 0; i < H * W; ++i) out->data[i] /= C;
  if (out->requires_grad) {
    record([x, out, C, H, W]() {
      for (int c = 0; c < C; ++c) {
        const std::int64_t off = static_cast<std::int64_t>(c) * H * W;
        for (int i = 0; i < H * W; ++i) x->grad[off + i] += out->grad[i] / C;
      }
    });
  }
  return out;
}

TensorPtr Graph::max_over_channels(const TensorPtr& x) {
  check_rank(x, 3, "max_over_channels", "input");
  const int C = x->shape[0], H = x->shape[1], W = x->shape[2];
  auto out = result({1, H, W}, x->requires_grad);
  auto argmax = std::make_shared<std::vector<int>>(H * W, 0);
  for (int i = 0; i < H * W; ++i) {
    double best = x->data[i];
    int bc = 0;
    for (int c = 1; c < C; ++c) {
      const double v = x->data[static_cast<std::int64_t>(c) * H * W + i];
      if (v > best) {
        best = v;
        bc = c;
      }
    }
    out->data[i] = best;
    (*argmax)[i] = bc;
  }
  if (out->requires_grad) {
    record([x, out, argmax, H, W]() {
      for (int i = 0; i < H * W; ++i) {
        x->grad[static_cast<std::int64_t>((*argmax)[i]) * H * W + i] += out->grad[i];
      }
    });
  }
  return out;
}

TensorPtr Graph::sample_points_bilinear(const TensorPtr& fmap, const std::vector<Vec2>& pts) {
  check_rank(fmap, 3, "sample_points_bilinear", "feature map");
  const int C = fmap->shape[0], H = fmap->shape[1], W = fmap->shape[2];
  const int N = static_cast<int>(pts.size());
  if (N == 0) fail("sample_points_bilinear: empty point list");
  auto out = result({N, C}, fmap->requires_grad);
  struct Tap {
    int x0, x1, y0, y1;
    double fx, fy;
  };
  auto taps = std::make_shared<std::vector<Tap>>(N);
  for (int i = 0; i < N; ++i) {
    const double sx = std::clamp(pts[i].x, 0.0, static_cast<double>(W - 1));
    const double sy = std::clamp(pts[i].y, 0.0, static_cast<double>(H - 1));
    Tap t;
    t.x0 = static_cast<int>(std::floor(sx));
    t.y0 = static_cast<int>(std::floor(sy));
    t.x1 = std::min(t.x0 + 1, W - 1);
    t.y1 = std::min(t.y0 + 1, H - 1);
    t.fx = sx - t.x0;
    t.fy = sy - t.y0;
    (*taps)[i] = t;
    for (int c = 0; c < C; ++c) {
      const double* src = fmap->data.data() + static_cast<std::int64_t>(c) * H * W;
      const double top = src[t.y0 * W + t.x0] * (1 - t.fx) + src[t.y0 * W + t.x1] * t.fx;
      const double bot = src[t.y1 * W + t.x0] * (1 - t.fx) + src[t.y1 * W + t.x1] * t.fx;
      out->at2(i, c) = top * (1 - t.fy) + bot * t.fy;
    }
  }
  if (out->requires_grad) {
    record([fmap, out, taps, C, H, W, N]() {
      for (int i = 0; i < N; ++i) {
        const auto& t = (*taps)[i];
        for (int c = 0; c < C; ++c) {
          double* g = fmap->grad.data() + static_cast<std::int64_t>(c) * H * W;
          const double d = out->grad[static_cast<std::size_t>(i) * C + c];
          g[t.y0 * W + t.x0] += d * (1 - t.fy) * (1 - t.fx);
          g[t.y0 * W + t.x1] += d * (1 - t.fy) * t.fx;
          g[t.y1 * W + t.x0] += d * t.fy * (1 - t.fx);
          g[t.y1 * W + t.x1] += d * t.fy * t.fx;
        }
      }
    });
  }
  return out;
}

TensorPtr Graph::gather_rows(const TensorPtr& x, const std::vector<int>& idx) {
  check_rank(x, 2, "gather_rows", "input");
  const int N = x->shape[0], C = x->shape[1];
  const int K = static_cast<int>(idx.size());
  if (K == 0) fail("gather_rows: empty index list");
  for (int i : idx) {
    if (i < 0 || i >= N) fail("gather_rows: index " + std::to_string(i) + " out of range");
  }
  auto out = result({K, C}, x->requires_grad);
  for (int k = 0; k < K; ++k) {
    std::copy_n(x->data.begin() + static_cast<std::int64_t>(idx[k]) * C, C,
                out->data.begin() + static_cast<std::int64_t>(k) * C);
  }
  if (out->requires_grad) {
    auto ic = std::make_shared<std::vector<int>>(idx);
    record([x, out, ic, C, K]() {
      for (int k = 0; k < K; ++k) {
        const std::int64_t src = static_cast<std::int64_t>(k) * C;
        const std::int64_t dst = static_cast<std::int64_t>((*ic)[k]) * C;
        for (int c = 0; c < C; ++c) x->grad[dst + c] += out->grad[src + c];
      }
    });
  }
  return out;
}

TensorPtr Graph::segment_sum_rows(const TensorPtr& x, const std::vector<int>& seg,
                                  int num_segments) {
  check_rank(x, 2, "segment_sum_rows", "input");
  const int K = x->shape[0], C = x->shape[1];
  if (static_cast<int>(seg.size()) != K) fail("segment_sum_rows: segment list length mismatch");
  if (num_segments <= 0) fail("segment_sum_rows: num_segments must be positive");
  for (int s : seg) {
    if (s < 0 || s >= num_segments) fail("segment_sum_rows: segment id out of range");
  }
  auto out = result({num_segments, C}, x->requires_grad);
  for (int k = 0; k < K; ++k) {
    const std::int64_t src = static_cast<std::int64_t>(k) * C;
    const std::int64_t dst = static_cast<std::int64_t>(seg[k]) * C;
    for (int c = 0; c < C; ++c) out->data[dst + c] += x->data[src + c];
  }
  if (out->requires_grad) {
    auto sc = std::make_shared<std::vector<int>>(seg);
    record([x, out, sc, C, K]() {
      for (int k = 0; k < K; ++k) {
        const std::int64_t src = static_cast<std::int64_t>((*sc)[k]) * C;
        const std::int64_t dst = static_cast<std::int64_t>(k) * C;
        for (int c = 0; c < C; ++c) x->grad[dst + c] += out->grad[src + c];
      }
    });
  }
  return out;
}

TensorPtr Graph::concat_cols(const TensorPtr& a, const TensorPtr& b) {
  check_rank(a, 2, "concat_cols", "a");
  check_rank(b, 2, "concat_cols", "b");
  if (a->shape[0] != b->shape[0]) {
    fail("concat_cols: row mismatch " + shape_str(a->shape) + " vs " + shape_str(b->shape));
  }
  const int N = a->shape[0], ca = a->shape[1], cb = b->shape[1];
  auto out = result({N, ca + cb}, a->requires_grad || b->requires_grad);
  for (int i = 0; i < N; ++i) {
    std::copy_n(a->data.begin() + static_cast<std::int64_t>(i) * ca, ca,
                out->data.begin() + static_cast<std::int64_t>(i) * (ca + cb));
    std::copy_n(b->data.begin() + static_cast<std::int64_t>(i) * cb, cb,
                out->data.begin() + static_cast<std::int64_t>(i) * (ca + cb) + ca);
  }
  if (out->requires_grad) {
    record([a, b, out, N, ca, cb]() {
      for (int i = 0; i < N; ++i) {
        const std::int64_t o = static_cast<std::int64_t>(i) * (ca + cb);
        if (a->requires_grad) {
          for (int j = 0; j < ca; ++j) a->grad[static_cast<std::int64_t>(i) * ca + j] += out->grad[o + j];
        }
        if (b->requires_grad) {
          for (int j = 0; j < cb; ++j)
            b->grad[static_cast<std::int64_t>(i) * cb + j] += out->grad[o + ca + j];
        }
      }
    });
  }
  return out;
}

TensorPtr Graph::bce_sum(const TensorPtr& pred, const std::vector<double>& targets) {
  if (pred->data.size() != targets.size()) {
    fail("bce_sum: prediction count " + std::to_string(pred->data.size()) +
         " does not match target count " + std::to_string(targets.size()));
  }
  constexpr double eps = 1e-7;
  auto out = result({1}, pred->requires_grad);
  double acc = 0.0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const double p = std::clamp(pred->data[i], eps, 1.0 - eps);
    acc -= targets[i] * std::log(p) + (1.0 - targets[i]) * std::log(1.0 - p);
  }
  out->data[0] = acc;
  if (out->requires_grad) {
    auto tc = std::make_shared<std::vector<double>>(targets);
    record([pred, out, tc]() {
      constexpr double eps = 1e-7;
      const double d = out->grad[0];
      for (std::size_t i = 0; i < tc->size(); ++i) {
        const double raw = pred->data[i];
        if (raw <= eps || raw >= 1.0 - eps) continue;  // clamped region is flat
        pred->grad[i] += d * (raw - (*tc)[i]) / (raw * (1.0 - raw));
      }
    });
  }
  return out;
}

TensorPtr Graph::l1_sum(const TensorPtr& a, const TensorPtr& b) {
  check_same_shape(a, b, "l1_sum");
  auto out = result({1}, a->requires_grad || b->requires_grad);
  double acc = 0.0;
  for (std::size_t i = 0; i < a->data.size(); ++i) acc += std::abs(a->data[i] - b->data[i]);
  out->data[0] = acc;
  if (out->requires_grad) {
    record([a, b, out]() {
      const double d = out->grad[0];
      for (std::size_t i = 0; i < a->data.size(); ++i) {
        const double diff = a->data[i] - b->data[i];
        const double s = diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0);
        if (a->requires_grad) a->grad[i] += s * d;
        if (b->requires_grad) b->grad[i] -= s * d;
      }
    });
  }
  return out;
}

TensorPtr Graph::masked_sq_sum(const TensorPtr& pred, const std::vector<double>& target,
                               const std::vector<double>& mask) {
  if (pred->data.size() != target.size() || pred->data.size() != mask.size()) {
    fail("masked_sq_sum: size mismatch (pred " + std::to_string(pred->data.size()) + ", target " +
         std::to_string(target.size()) + ", mask " + std::to_string(mask.size()) + ")");
  }
  auto out = result({1}, pred->requires_grad);
  double acc = 0.0;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    const double e = pred->data[i] - target[i];
    acc += mask[i] * e * e;
  }
  out->data[0] = acc;
  if (out->requires_grad) {
    auto tc = std::make_shared<std::vector<double>>(target);
    auto mc = std::make_shared<std::vector<double>>(mask);
    record([pred, out, tc, mc]() {
      const double d = out->grad[0];
      for (std::size_t i = 0; i < mc->size(); ++i) {
        pred->grad[i] += d * 2.0 * (*mc)[i] * (pred->data[i] - (*tc)[i]);
      }
    });
  }
  return out;
}

}  // namespace stn
