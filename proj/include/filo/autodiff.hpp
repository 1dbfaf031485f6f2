#pragma once

// Minimal reverse-mode automatic differentiation over dense double matrices.
//
// Every value is a 2-D Eigen matrix. Operations build a graph of shared nodes;
// nodes whose inputs do not require gradients record nothing, so the same code
// serves frozen inference and training. backward() must be called on a 1x1
// node and accumulates into Node::grad of every reachable node.

#include <Eigen/Dense>

#include <functional>
#include <memory>
#include <span>
#include <utility>
#include <vector>

namespace filo::ad {

using Mat = Eigen::MatrixXd;

struct Node {
  Mat value;
  Mat grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  void accumulate(const Mat& g);
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  const Mat& value() const { return node_->value; }
  // Zero matrix of matching shape when no gradient has been accumulated.
  Mat grad() const;
  Eigen::Index rows() const { return node_->value.rows(); }
  Eigen::Index cols() const { return node_->value.cols(); }
  bool requires_grad() const { return node_->requires_grad; }
  bool valid() const { return static_cast<bool>(node_); }
  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& ptr() const { return node_; }

  // Leaf-only mutation used by optimizers and finite-difference probes.
  Mat& mutable_value() { return node_->value; }
  void zero_grad() { node_->grad.resize(0, 0); }

 private:
  std::shared_ptr<Node> node_;
};

Var constant(Mat value);
Var leaf(Mat value);

void backward(const Var& root);

// Elementwise / linear algebra
Var matmul(const Var& a, const Var& b);
// Fixed operator applied from the left without copying it into the graph.
Var left_multiply(std::shared_ptr<const Mat> op, const Var& x);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var add_row(const Var& a, const Var& row);  // broadcast 1xM over NxM
Var transpose(const Var& a);

Var sum(const Var& a);
Var mean(const Var& a);
Var col_mean(const Var& a);  // NxM -> 1xM

Var relu(const Var& a);
Var silu(const Var& a);
Var quick_gelu(const Var& a);
Var exp(const Var& a);
Var log(const Var& a);
Var clamp(const Var& a, double lo, double hi);
Var pow(const Var& a, double p);  // requires a >= 0

Var softmax_rows(const Var& a);
Var layer_norm_rows(const Var& a, const Var& gamma, const Var& beta, double eps = 1e-5);
Var l2_normalize_rows(const Var& a, double eps = 1e-12);
// Whole-matrix min-max scaling to [0,1]; a constant input maps to zeros.
Var minmax_normalize(const Var& a, double tie_eps = 1e-12);

Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index count);
Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count);
Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::span<const Var> parts);
Var gather_rows(const Var& a, std::span<const Eigen::Index> rows);

struct Tap {
  int dy = 0;
  int dx = 0;
};

// (H*W)xC grid, row-major spatial order -> (H*W)x(T*C) with zero padding.
Var im2col(const Var& grid, int height, int width, std::span<const Tap> taps);

// out(p) = sum_k w_k * bilinear(grid, p + tap_k + offset_k(p)); zero outside the grid.
// offsets is (H*W)x(2K) with columns (dy_k, dx_k); weights is 1xK.
Var deform_sum(const Var& grid, const Var& offsets, const Var& weights, int height, int width,
               std::span<const Tap> taps);

}  // namespace filo::ad
