#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace fdmix {

using Shape = std::vector<int>;

std::int64_t numel(const Shape& s);
std::string shape_str(const Shape& s);

struct Node;
using NodePtr = std::shared_ptr<Node>;

// One value in a define-by-run computation graph. The graph is rebuilt on
// every forward pass; leaves (parameters, inputs) survive across graphs.
struct Node {
  Shape shape;
  std::vector<double> value;
  bool requires_grad = false;
  std::vector<double> grad;  // empty until backward reaches this node
  std::vector<NodePtr> parents;
  // Pushes this node's grad into its parents' grads. Null for leaves.
  std::function<void(Node&)> backprop;
  bool backward_done = false;  // set on the root after backward ran

  std::int64_t size() const { return static_cast<std::int64_t>(value.size()); }
  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
  }
};

// Value-semantics handle to a graph node.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(NodePtr n) : node_(std::move(n)) {}

  static Tensor zeros(Shape s, bool requires_grad = false);
  static Tensor full(Shape s, double v, bool requires_grad = false);
  static Tensor from(Shape s, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::int64_t size() const { return node_->size(); }
  const std::vector<double>& data() const { return node_->value; }
  std::vector<double>& mutable_data() { return node_->value; }
  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  const std::vector<double>& grad() const;
  void zero_grad();
  double item() const;

  // Reverse-mode sweep from a scalar root. Accumulates into leaf grads.
  // A second call on the same root without zeroing is rejected.
  void backward();

  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

// ---- primitive ops ----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor exp(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor sum(const Tensor& a);  // scalar

Tensor matmul(const Tensor& a, const Tensor& b);  // (m x k)(k x n)
Tensor transpose(const Tensor& a);                // 2-D
Tensor add_rowvec(const Tensor& x, const Tensor& b);  // broadcast bias over rows
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

// x: B x C x H x W, w: O x C x 3 x 3, bias: O. Zero padding.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad);

// 2x2 average pooling, stride 2.
Tensor mean_pool2(const Tensor& x);

Tensor reshape(const Tensor& x, Shape s);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor slice_rows(const Tensor& x, int start, int count);  // 2-D

// Running statistics of one batch-norm layer; owned by the model, mutated
// only in training mode.
struct BnStats {
  std::vector<double> mean;
  std::vector<double> var;
};

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  BnStats& stats, bool training, double momentum = 0.1,
                  double eps = 1e-5);

Tensor softmax_rows(const Tensor& x);
Tensor log_softmax_rows(const Tensor& x);

// Mean over rows of -log softmax(logits)[label].
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels);

// Mean over rows of sum_c p ln(p/q); p and q are row-stochastic.
Tensor kl_divergence(const Tensor& p, const Tensor& q);

// mean + exp(0.5 * log_var) * noise, composed from primitives.
Tensor gaussian_reparam(const Tensor& mean, const Tensor& log_var, const Tensor& noise);

// Per-class mean of feature rows: feats NK x D with labels in 0..n_way-1 -> n_way x D.
Tensor class_means(const Tensor& feats, const std::vector<int>& labels, int n_way);

// logits[b][n] = -||q_b - p_n||^2.
Tensor neg_sqdist(const Tensor& queries, const Tensor& protos);

Tensor row_l2_normalize(const Tensor& x);
// Divide each row by its sum; rows must have a positive sum.
Tensor row_normalize_sum(const Tensor& x);

// ---- non-graph helpers ------------------------------------------------------

std::vector<int> argmax_rows(const Tensor& logits);
void check_finite(const char* op, const Tensor& t);

}  // namespace fdmix
