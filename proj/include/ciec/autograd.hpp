#pragma once

// Minimal reverse-mode automatic differentiation over dense 2-D double
// matrices. Every model-side computation in this project is expressed with
// these ops so that losses can be differentiated w.r.t. parameters and inputs.

#include <Eigen/Dense>

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <vector>

namespace ciec::ag {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Index = Eigen::Index;

struct Node {
  Mat value;
  Mat grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  void accumulate(const Mat& g);
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Mat value, bool requires_grad = false);

  static Tensor from_node(std::shared_ptr<Node> node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Mat& value() const { return node_->value; }
  Mat& mutable_value() { return node_->value; }
  const Mat& grad() const { return node_->grad; }
  bool has_grad() const { return node_->grad.size() != 0; }
  bool requires_grad() const { return node_->requires_grad; }

  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }
  Index size() const { return node_->value.size(); }
  double item() const;

  /// Seeds d(self)/d(self) = 1 and propagates gradients to every leaf that
  /// requires them. Gradients accumulate until zero_grad().
  void backward() const;
  void zero_grad() { node_->grad.resize(0, 0); }

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// RAII guard that disables graph construction on the current thread.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

Tensor constant(Mat value);
Tensor scalar(double v);
Tensor zeros(Index rows, Index cols);
Tensor detach(const Tensor& a);

// Elementwise binary ops. Operands broadcast when a dimension is 1.
Tensor operator+(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a, const Tensor& b);
Tensor operator*(const Tensor& a, const Tensor& b);
Tensor operator/(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a);
Tensor operator*(const Tensor& a, double s);
Tensor operator*(double s, const Tensor& a);
Tensor operator+(const Tensor& a, double s);
Tensor operator+(double s, const Tensor& a);
Tensor operator-(const Tensor& a, double s);
Tensor operator-(double s, const Tensor& a);

Tensor expand(const Tensor& a, Index rows, Index cols);
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor sigmoid(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor square(const Tensor& a);
Tensor abs(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor gelu(const Tensor& a);  // exact erf form
Tensor clamp(const Tensor& a, double lo, double hi);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor row_sum(const Tensor& a);  // r x 1

/// Row-wise softmax. When key_valid is given, columns with key_valid[c]==0
/// receive zero probability and zero gradient.
Tensor softmax_rows(const Tensor& a, std::span<const char> key_valid = {});

Tensor layer_norm_rows(const Tensor& x, const Tensor& gain, const Tensor& bias,
                       double eps = 1e-5);

Tensor slice_rows(const Tensor& a, Index start, Index count);
Tensor slice_cols(const Tensor& a, Index start, Index count);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor concat_cols(std::span<const Tensor> parts);
Tensor reshape(const Tensor& a, Index rows, Index cols);

/// Selects elements by row-major flat index; result is k x 1.
Tensor gather(const Tensor& a, std::span<const Index> flat_indices);
/// Selects whole rows (e.g. embedding lookup).
Tensor gather_rows(const Tensor& table, std::span<const Index> rows);
/// out[r] = a[r - offset], zero where out of range.
Tensor shift_rows(const Tensor& a, Index offset);
/// Row-wise maximum; gradient flows to the first maximal column of each row.
Tensor row_max(const Tensor& a);

/// Each row divided by max(||row||, eps).
Tensor l2_normalize_rows(const Tensor& a, double eps = 1e-12);

/// -[y log p + (1-y) log(1-p)] elementwise, p clamped to [1e-12, 1-1e-12].
Tensor binary_cross_entropy(const Tensor& p, double target);

}  // namespace ciec::ag
