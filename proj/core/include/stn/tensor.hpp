#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <vector>

namespace stn {

// Extents of a dense row-major tensor. Scalars use shape {1}.
using Shape = std::vector<int>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense 64-bit real tensor with an optional gradient accumulator.
// Data is row-major; grad, when allocated, always mirrors data's length.
struct Tensor {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty unless requires_grad
  bool requires_grad = false;

  Tensor() = default;
  Tensor(Shape s, bool rg);

  std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
  bool is_scalar() const { return numel() == 1; }
  double value() const;  // scalar read, throws on non-scalar

  // index helpers for rank-2/3 tensors (row-major)
  double& at2(int i, int j);
  double at2(int i, int j) const;
  double& at3(int c, int y, int x);
  double at3(int c, int y, int x) const;

  void zero_grad();
};

using TensorPtr = std::shared_ptr<Tensor>;

TensorPtr make_tensor(Shape shape, bool requires_grad = false);
TensorPtr make_tensor(Shape shape, std::vector<double> values, bool requires_grad = false);
TensorPtr make_tensor(Shape shape, std::initializer_list<double> values,
                      bool requires_grad = false);
TensorPtr make_scalar(double v, bool requires_grad = false);

// 2-d point in pixel-center image coordinates.
struct Vec2 {
  double x = 0.0;
  double y = 0.0;
};

// Reverse-mode tape over tensor operations.
//
// Every op runs its forward immediately and, when any input carries
// requires_grad, records a backward closure. backward(loss) replays the tape
// in exact reverse construction order, accumulating into the grad buffers of
// every reachable requires_grad tensor. One graph instance is single-threaded;
// distinct graphs are independent.
class Graph {
 public:
  Graph() = default;
  // recording=false skips the tape: forward-only inference
  explicit Graph(bool recording) : recording_(recording) {}

  // convolution, stride/pad semantics of standard cross-correlation
  TensorPtr conv2d(const TensorPtr& input, const TensorPtr& kernel, const TensorPtr& bias,
                   int stride = 1, int pad = 0);

  TensorPtr relu(const TensorPtr& x);
  TensorPtr sigmoid(const TensorPtr& x);
  TensorPtr add(const TensorPtr& a, const TensorPtr& b);
  TensorPtr sub(const TensorPtr& a, const TensorPtr& b);
  TensorPtr mul_scalar(const TensorPtr& x, double s);
  TensorPtr concat_channels(const std::vector<TensorPtr>& xs);
  TensorPtr maxpool2(const TensorPtr& x);
  TensorPtr upsample2_bilinear(const TensorPtr& x);

  // affine maps
  TensorPtr dense(const TensorPtr& x, const TensorPtr& weights, const TensorPtr& bias);
  // row-wise affine: [N,n] x [m,n]^T + [m] -> [N,m]
  TensorPtr dense_rows(const TensorPtr& x, const TensorPtr& weights, const TensorPtr& bias);

  // per-displacement channel-mean inner products between two feature maps;
  // output channel (dy+d)*(2d+1)+(dx+d) holds (1/C) sum_c f1(c,y,x)*f2(c,y+dy,x+dx),
  // zero outside the valid range
  TensorPtr correlate(const TensorPtr& f1, const TensorPtr& f2, int max_disp);

  // reductions / elementwise
  TensorPtr sum(const TensorPtr& x);
  TensorPtr square(const TensorPtr& x);
  TensorPtr reshape(const TensorPtr& x, Shape shape);  // same element count

  // attention gating helpers
  TensorPtr scale_channels(const TensorPtr& x, const TensorPtr& gate);  // gate [C]
  TensorPtr scale_spatial(const TensorPtr& x, const TensorPtr& gate);   // gate [H,W]
  TensorPtr channel_avg_pool(const TensorPtr& x);        // [C,H,W] -> [C]
  TensorPtr channel_max_pool(const TensorPtr& x);        // [C,H,W] -> [C]
  TensorPtr mean_over_channels(const TensorPtr& x);      // [C,H,W] -> [1,H,W]
  TensorPtr max_over_channels(const TensorPtr& x);       // [C,H,W] -> [1,H,W]

  // point-set plumbing
  TensorPtr sample_points_bilinear(const TensorPtr& fmap, const std::vector<Vec2>& pts);
  TensorPtr gather_rows(const TensorPtr& x, const std::vector<int>& idx);
  TensorPtr segment_sum_rows(const TensorPtr& x, const std::vector<int>& seg, int num_segments);
  TensorPtr concat_cols(const TensorPtr& a, const TensorPtr& b);

  // loss kernels
  // sum of -(t*log(p) + (1-t)*log(1-p)) with p clamped to [1e-7, 1-1e-7]
  TensorPtr bce_sum(const TensorPtr& pred, const std::vector<double>& targets);
  TensorPtr l1_sum(const TensorPtr& a, const TensorPtr& b);
  TensorPtr masked_sq_sum(const TensorPtr& pred, const std::vector<double>& target,
                          const std::vector<double>& mask);

  // Seeds d(loss)/d(loss)=1 and replays the tape in reverse. loss must be scalar.
  void backward(const TensorPtr& loss);

  std::size_t num_nodes() const { return tape_.size(); }

 private:
  struct Node {
    std::function<void()> back;
  };
  std::vector<Node> tape_;
  bool recording_ = true;

  TensorPtr result(Shape shape, bool requires_grad);
  void record(std::function<void()> back);
};

}  // namespace stn
