#include "ciec/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <unordered_set>

namespace ciec::ag {

namespace {

thread_local bool g_grad_enabled = true;

bool any_requires_grad(std::initializer_list<const Tensor*> inputs) {
  if (!g_grad_enabled) return false;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

// Builds a result node. The backward closure is attached only when at least
// one parent participates in differentiation.
Tensor make_result(Mat value, std::initializer_list<const Tensor*> parents,
                   std::function<void(Node&)> fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (any_requires_grad(parents)) {
    node->requires_grad = true;
    node->parents.reserve(parents.size());
    for (const Tensor* p : parents) node->parents.push_back(p->node());
    node->backward_fn = std::move(fn);
  }
  return Tensor::from_node(std::move(node));
}

Tensor make_result_many(Mat value, std::span<const Tensor> parents,
                        std::function<void(Node&)> fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  bool needs = false;
  if (g_grad_enabled) {
    for (const Tensor& p : parents) needs = needs || p.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    for (const Tensor& p : parents) node->parents.push_back(p.node());
    node->backward_fn = std::move(fn);
  }
  return Tensor::from_node(std::move(node));
}

void accumulate_if(Node& parent, const Mat& g) {
  if (parent.requires_grad) parent.accumulate(g);
}

Index broadcast_dim(Index a, Index b, const char* op) {
  if (a == b) return a;
  if (a == 1) return b;
  if (b == 1) return a;
  throw std::invalid_argument(std::string(op) + ": incompatible broadcast");
}

std::pair<Tensor, Tensor> broadcast_pair(const Tensor& a, const Tensor& b, const char* op) {
  if (a.rows() == b.rows() && a.cols() == b.cols()) return {a, b};
  Index r = broadcast_dim(a.rows(), b.rows(), op);
  Index c = broadcast_dim(a.cols(), b.cols(), op);
  return {expand(a, r, c), expand(b, r, c)};
}

template <typename F, typename D>
Tensor unary(const Tensor& a, F forward, D derivative) {
  Mat out = a.value().unaryExpr(forward);
  return make_result(std::move(out), {&a}, [derivative](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    Mat local = p.value.binaryExpr(self.value, derivative);
    p.accumulate(self.grad.cwiseProduct(local));
  });
}

}  // namespace

void Node::accumulate(const Mat& g) {
  if (grad.size() == 0) {
    grad = g;
  } else {
    grad += g;
  }
}

Tensor::Tensor(Mat value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

double Tensor::item() const {
  if (size() != 1) throw std::logic_error("item() on non-scalar tensor");
  return node_->value(0, 0);
}

void Tensor::backward() const {
  if (!node_->requires_grad) return;
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node* p = n->parents[next++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  node_->accumulate(Mat::Ones(node_->value.rows(), node_->value.cols()));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && n->grad.size() != 0) n->backward_fn(*n);
  }
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

Tensor constant(Mat value) { return Tensor(std::move(value), false); }
Tensor scalar(double v) { return Tensor(Mat::Constant(1, 1, v), false); }
Tensor zeros(Index rows, Index cols) { return Tensor(Mat::Zero(rows, cols), false); }
Tensor detach(const Tensor& a) { return Tensor(a.value(), false); }

Tensor expand(const Tensor& a, Index rows, Index cols) {
  if (a.rows() == rows && a.cols() == cols) return a;
  if ((a.rows() != 1 && a.rows() != rows) || (a.cols() != 1 && a.cols() != cols)) {
    throw std::invalid_argument("expand: incompatible shape");
  }
  Mat out = a.value().replicate(rows / a.rows(), cols / a.cols());
  return make_result(std::move(out), {&a}, [](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    Mat g = self.grad;
    if (p.value.rows() == 1 && g.rows() != 1) g = g.colwise().sum().eval();
    if (p.value.cols() == 1 && g.cols() != 1) g = g.rowwise().sum().eval();
    p.accumulate(g);
  });
}

Tensor operator+(const Tensor& a0, const Tensor& b0) {
  auto [a, b] = broadcast_pair(a0, b0, "add");
  return make_result(a.value() + b.value(), {&a, &b}, [](Node& self) {
    accumulate_if(*self.parents[0], self.grad);
    accumulate_if(*self.parents[1], self.grad);
  });
}

Tensor operator-(const Tensor& a0, const Tensor& b0) {
  auto [a, b] = broadcast_pair(a0, b0, "sub");
  return make_result(a.value() - b.value(), {&a, &b}, [](Node& self) {
    accumulate_if(*self.parents[0], self.grad);
    accumulate_if(*self.parents[1], -self.grad);
  });
}

Tensor operator*(const Tensor& a0, const Tensor& b0) {
  auto [a, b] = broadcast_pair(a0, b0, "mul");
  return make_result(a.value().cwiseProduct(b.value()), {&a, &b}, [](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    if (pa.requires_grad) pa.accumulate(self.grad.cwiseProduct(pb.value));
    if (pb.requires_grad) pb.accumulate(self.grad.cwiseProduct(pa.value));
  });
}

Tensor operator/(const Tensor& a0, const Tensor& b0) {
  auto [a, b] = broadcast_pair(a0, b0, "div");
  return make_result(a.value().cwiseQuotient(b.value()), {&a, &b}, [](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    if (pa.requires_grad) pa.accumulate(self.grad.cwiseQuotient(pb.value));
    if (pb.requires_grad) {
      Mat g = -self.grad.cwiseProduct(self.value).cwiseQuotient(pb.value);
      pb.accumulate(g);
    }
  });
}

Tensor operator-(const Tensor& a) {
  return make_result(-a.value(), {&a}, [](Node& self) {
    accumulate_if(*self.parents[0], -self.grad);
  });
}

Tensor operator*(const Tensor& a, double s) {
  return make_result(a.value() * s, {&a}, [s](Node& self) {
    accumulate_if(*self.parents[0], self.grad * s);
  });
}
Tensor operator*(double s, const Tensor& a) { return a * s; }

Tensor operator+(const Tensor& a, double s) {
  return make_result(a.value().array() + s, {&a}, [](Node& self) {
    accumulate_if(*self.parents[0], self.grad);
  });
}
Tensor operator+(double s, const Tensor& a) { return a + s; }
Tensor operator-(const Tensor& a, double s) { return a + (-s); }
Tensor operator-(double s, const Tensor& a) { return (-a) + s; }

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dimension mismatch");
  Mat out = a.value() * b.value();
  return make_result(std::move(out), {&a, &b}, [](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    if (pa.requires_grad) pa.accumulate(self.grad * pb.value.transpose());
    if (pb.requires_grad) pb.accumulate(pa.value.transpose() * self.grad);
  });
}

Tensor transpose(const Tensor& a) {
  Mat out = a.value().transpose();
  return make_result(std::move(out), {&a}, [](Node& self) {
    Node& p = *self.parents[0];
    if (p.requires_grad) p.accumulate(self.grad.transpose());
  });
}

Tensor sigmoid(const Tensor& a) {
  return unary(
      a,
      [](double x) {
        if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
        double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor exp(const Tensor& a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor sqrt(const Tensor& a) {
  return unary(a, [](double x) { return std::sqrt(x); },
               [](double, double y) { return 0.5 / y; });
}

Tensor square(const Tensor& a) {
  return unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor abs(const Tensor& a) {
  return unary(a, [](double x) { return std::abs(x); },
               [](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

Tensor relu(const Tensor& a) {
  return unary(a, [](double x) { return x > 0 ? x : 0.0; },
               [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& a) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
  return unary(
      a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); },
      [inv_sqrt_2pi](double x, double) {
        double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
        double pdf = inv_sqrt_2pi * std::exp(-0.5 * x * x);
        return cdf + x * pdf;
      });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  return unary(a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
               [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

Tensor sum(const Tensor& a) {
  return make_result(Mat::Constant(1, 1, a.value().sum()), {&a}, [](Node& self) {
    Node& p = *self.parents[0];
    if (p.requires_grad) p.accumulate(Mat::Constant(p.value.rows(), p.value.cols(), self.grad(0, 0)));
  });
}

Tensor mean(const Tensor& a) {
  if (a.size() == 0) throw std::invalid_argument("mean of empty tensor");
  return sum(a) * (1.0 / static_cast<double>(a.size()));
}

Tensor row_sum(const Tensor& a) {
  Mat out = a.value().rowwise().sum();
  return make_result(std::move(out), {&a}, [](Node& self) {
    Node& p = *self.parents[0];
    if (p.requires_grad) p.accumulate(self.grad.replicate(1, p.value.cols()));
  });
}

Tensor softmax_rows(const Tensor& a, std::span<const char> key_valid) {
  const Index r = a.rows();
  const Index c = a.cols();
  if (!key_valid.empty() && static_cast<Index>(key_valid.size()) != c) {
    throw std::invalid_argument("softmax_rows: key mask length mismatch");
  }
  Mat out(r, c);
  for (Index i = 0; i < r; ++i) {
    double m = -std::numeric_limits<double>::infinity();
    for (Index j = 0; j < c; ++j) {
      if (key_valid.empty() || key_valid[j]) m = std::max(m, a.value()(i, j));
    }
    double z = 0.0;
    for (Index j = 0; j < c; ++j) {
      double e = (key_valid.empty() || key_valid[j]) ? std::exp(a.value()(i, j) - m) : 0.0;
      out(i, j) = e;
      z += e;
    }
    out.row(i) /= z;
  }
  return make_result(std::move(out), {&a}, [](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    const Mat& y = self.value;
    Mat dot = self.grad.cwiseProduct(y).rowwise().sum();
    Mat g = y.cwiseProduct(self.grad - dot.replicate(1, y.cols()));
    p.accumulate(g);
  });
}

Tensor layer_norm_rows(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const Index r = x.rows();
  const Index c = x.cols();
  if (gain.rows() != 1 || gain.cols() != c || bias.rows() != 1 || bias.cols() != c) {
    throw std::invalid_argument("layer_norm_rows: parameter shape mismatch");
  }
  Mat xhat(r, c);
  Eigen::VectorXd inv_std(r);
  for (Index i = 0; i < r; ++i) {
    double mu = x.value().row(i).mean();
    double var = (x.value().row(i).array() - mu).square().mean();
    inv_std(i) = 1.0 / std::sqrt(var + eps);
    xhat.row(i) = (x.value().row(i).array() - mu) * inv_std(i);
  }
  Mat out = (xhat.array().rowwise() * gain.value().row(0).array()).rowwise() +
            bias.value().row(0).array();
  return make_result(std::move(out), {&x, &gain, &bias},
                     [xhat, inv_std](Node& self) {
                       Node& px = *self.parents[0];
                       Node& pg = *self.parents[1];
                       Node& pb = *self.parents[2];
                       const Mat& g = self.grad;
                       if (pg.requires_grad) pg.accumulate(g.cwiseProduct(xhat).colwise().sum());
                       if (pb.requires_grad) pb.accumulate(g.colwise().sum());
                       if (px.requires_grad) {
                         const double n = static_cast<double>(g.cols());
                         Mat gx = g.array().rowwise() * pg.value.row(0).array();
                         Mat dx(g.rows(), g.cols());
                         for (Index i = 0; i < g.rows(); ++i) {
                           double s1 = gx.row(i).sum();
                           double s2 = gx.row(i).dot(xhat.row(i));
                           dx.row(i) = (gx.row(i).array() * n - s1 - xhat.row(i).array() * s2) *
                                       (inv_std(i) / n);
                         }
                         px.accumulate(dx);
                       }
                     });
}

Tensor slice_rows(const Tensor& a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) {
    throw std::out_of_range("slice_rows: range out of bounds");
  }
  Mat out = a.value().middleRows(start, count);
  return make_result(std::move(out), {&a}, [start, count](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    Mat g = Mat::Zero(p.value.rows(), p.value.cols());
    g.middleRows(start, count) = self.grad;
    p.accumulate(g);
  });
}

Tensor slice_cols(const Tensor& a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) {
    throw std::out_of_range("slice_cols: range out of bounds");
  }
  Mat out = a.value().middleCols(start, count);
  return make_result(std::move(out), {&a}, [start, count](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    Mat g = Mat::Zero(p.value.rows(), p.value.cols());
    g.middleCols(start, count) = self.grad;
    p.accumulate(g);
  });
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  Index rows = 0;
  const Index cols = parts[0].cols();
  for (const Tensor& t : parts) {
    if (t.cols() != cols) throw std::invalid_argument("concat_rows: column mismatch");
    rows += t.rows();
  }
  Mat out(rows, cols);
  Index offset = 0;
  for (const Tensor& t : parts) {
    out.middleRows(offset, t.rows()) = t.value();
    offset += t.rows();
  }
  return make_result_many(std::move(out), parts, [](Node& self) {
    Index off = 0;
    for (auto& p : self.parents) {
      Index n = p->value.rows();
      if (p->requires_grad) p->accumulate(self.grad.middleRows(off, n));
      off += n;
    }
  });
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  Index cols = 0;
  const Index rows = parts[0].rows();
  for (const Tensor& t : parts) {
    if (t.rows() != rows) throw std::invalid_argument("concat_cols: row mismatch");
    cols += t.cols();
  }
  Mat out(rows, cols);
  Index offset = 0;
  for (const Tensor& t : parts) {
    out.middleCols(offset, t.cols()) = t.value();
    offset += t.cols();
  }
  return make_result_many(std::move(out), parts, [](Node& self) {
    Index off = 0;
    for (auto& p : self.parents) {
      Index n = p->value.cols();
      if (p->requires_grad) p->accumulate(self.grad.middleCols(off, n));
      off += n;
    }
  });
}

Tensor reshape(const Tensor& a, Index rows, Index cols) {
  if (rows * cols != a.size()) throw std::invalid_argument("reshape: size mismatch");
  Mat out = Eigen::Map<const Mat>(a.value().data(), rows, cols);
  return make_result(std::move(out), {&a}, [](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.accumulate(Eigen::Map<const Mat>(self.grad.data(), p.value.rows(), p.value.cols()));
  });
}

Tensor gather(const Tensor& a, std::span<const Index> flat_indices) {
  const Index k = static_cast<Index>(flat_indices.size());
  Mat out(k, 1);
  for (Index i = 0; i < k; ++i) {
    Index f = flat_indices[i];
    if (f < 0 || f >= a.size()) throw std::out_of_range("gather: index out of bounds");
    out(i, 0) = a.value().data()[f];
  }
  std::vector<Index> idx(flat_indices.begin(), flat_indices.end());
  return make_result(std::move(out), {&a}, [idx = std::move(idx)](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    Mat g = Mat::Zero(p.value.rows(), p.value.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) g.data()[idx[i]] += self.grad(static_cast<Index>(i), 0);
    p.accumulate(g);
  });
}

Tensor gather_rows(const Tensor& table, std::span<const Index> rows) {
  const Index k = static_cast<Index>(rows.size());
  Mat out(k, table.cols());
  for (Index i = 0; i < k; ++i) {
    if (rows[i] < 0 || rows[i] >= table.rows()) throw std::out_of_range("gather_rows: row out of bounds");
    out.row(i) = table.value().row(rows[i]);
  }
  std::vector<Index> idx(rows.begin(), rows.end());
  return make_result(std::move(out), {&table}, [idx = std::move(idx)](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    Mat g = Mat::Zero(p.value.rows(), p.value.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) g.row(idx[i]) += self.grad.row(static_cast<Index>(i));
    p.accumulate(g);
  });
}

Tensor shift_rows(const Tensor& a, Index offset) {
  const Index r = a.rows();
  Mat out = Mat::Zero(r, a.cols());
  for (Index i = 0; i < r; ++i) {
    Index src = i - offset;
    if (src >= 0 && src < r) out.row(i) = a.value().row(src);
  }
  return make_result(std::move(out), {&a}, [offset](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    const Index rows = self.grad.rows();
    Mat g = Mat::Zero(rows, self.grad.cols());
    for (Index i = 0; i < rows; ++i) {
      Index src = i - offset;
      if (src >= 0 && src < rows) g.row(src) += self.grad.row(i);
    }
    p.accumulate(g);
  });
}

Tensor row_max(const Tensor& a) {
  if (a.cols() == 0) throw std::invalid_argument("row_max: no columns");
  std::vector<Index> flat(static_cast<std::size_t>(a.rows()));
  for (Index i = 0; i < a.rows(); ++i) {
    Index best = 0;
    for (Index j = 1; j < a.cols(); ++j) {
      if (a.value()(i, j) > a.value()(i, best)) best = j;
    }
    flat[static_cast<std::size_t>(i)] = i * a.cols() + best;
  }
  return gather(a, flat);
}

Tensor l2_normalize_rows(const Tensor& a, double eps) {
  Mat norms = a.value().rowwise().norm();
  Mat denom = norms.cwiseMax(eps);
  Mat out = a.value().array().colwise() / denom.col(0).array();
  return make_result(std::move(out), {&a}, [norms, eps](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    const Mat& y = self.value;
    Mat g(y.rows(), y.cols());
    for (Index i = 0; i < y.rows(); ++i) {
      double n = norms(i, 0);
      if (n > eps) {
        double d = self.grad.row(i).dot(y.row(i));
        g.row(i) = (self.grad.row(i) - y.row(i) * d) / n;
      } else {
        g.row(i) = self.grad.row(i) / eps;
      }
    }
    p.accumulate(g);
  });
}

Tensor binary_cross_entropy(const Tensor& p, double target) {
  Tensor q = clamp(p, 1e-12, 1.0 - 1e-12);
  if (target == 1.0) return -log(q);
  if (target == 0.0) return -log(1.0 - q);
  return -(log(q) * target + log(1.0 - q) * (1.0 - target));
}

}  // namespace ciec::ag
