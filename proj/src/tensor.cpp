#include "fdmix/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace fdmix {

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<MatRM>;
using CMapM = Eigen::Map<const MatRM>;

std::int64_t numel(const Shape& s) {
  std::int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

namespace {

[[noreturn]] void shape_error(const char* op, const Shape& a, const Shape& b) {
  throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a) +
                              " vs " + shape_str(b));
}

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

NodePtr make_node(Shape shape, std::vector<NodePtr> parents) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value.resize(static_cast<std::size_t>(numel(n->shape)));
  n->parents = std::move(parents);
  for (const auto& p : n->parents) {
    if (p->requires_grad) n->requires_grad = true;
  }
  return n;
}

}  // namespace

void check_finite(const char* op, const Tensor& t) {
  for (double v : t.data()) {
    if (!std::isfinite(v)) {
      throw std::invalid_argument(std::string(op) + ": non-finite input value");
    }
  }
}

// ---- Tensor basics ----------------------------------------------------------

Tensor Tensor::zeros(Shape s, bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(s);
  n->value.assign(static_cast<std::size_t>(numel(n->shape)), 0.0);
  n->requires_grad = requires_grad;
  return Tensor(n);
}

Tensor Tensor::full(Shape s, double v, bool requires_grad) {
  Tensor t = zeros(std::move(s), requires_grad);
  std::fill(t.node_->value.begin(), t.node_->value.end(), v);
  return t;
}

Tensor Tensor::from(Shape s, std::vector<double> data, bool requires_grad) {
  if (numel(s) != static_cast<std::int64_t>(data.size())) {
    throw std::invalid_argument("Tensor::from: data length " + std::to_string(data.size()) +
                                " does not match shape " + shape_str(s));
  }
  auto n = std::make_shared<Node>();
  n->shape = std::move(s);
  n->value = std::move(data);
  n->requires_grad = requires_grad;
  return Tensor(n);
}

Tensor Tensor::scalar(double v, bool requires_grad) {
  return from({}, {v}, requires_grad);
}

const std::vector<double>& Tensor::grad() const {
  if (node_->grad.empty()) {
    throw std::runtime_error("Tensor::grad: no gradient present");
  }
  return node_->grad;
}

void Tensor::zero_grad() {
  node_->grad.clear();
  node_->backward_done = false;
}

double Tensor::item() const {
  if (size() != 1) {
    throw std::invalid_argument("Tensor::item: tensor is not scalar, shape " + shape_str(shape()));
  }
  return node_->value[0];
}

void Tensor::backward() {
  require(node_ != nullptr, "backward: undefined tensor");
  if (size() != 1) {
    throw std::invalid_argument("backward: loss must be scalar, got shape " + shape_str(shape()));
  }
  if (!std::isfinite(node_->value[0])) {
    throw std::invalid_argument("backward: loss is non-finite");
  }
  if (node_->backward_done) {
    throw std::runtime_error("backward: already run on this graph; reset gradients first");
  }
  node_->backward_done = true;

  // topological order by iterative DFS
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, idx] = stack.back();
    if (idx < n->parents.size()) {
      Node* p = n->parents[idx++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  node_->ensure_grad();
  node_->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backprop && !n->grad.empty()) n->backprop(*n);
  }
}

// ---- elementwise ------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_error("add", a.shape(), b.shape());
  check_finite("add", a);
  check_finite("add", b);
  auto n = make_node(a.shape(), {a.node(), b.node()});
  const auto& av = a.data();
  const auto& bv = b.data();
  for (std::size_t i = 0; i < av.size(); ++i) n->value[i] = av[i] + bv[i];
  n->backprop = [](Node& self) {
    for (const auto& p : self.parents) {
      if (!p->requires_grad) continue;
      p->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
    }
  };
  return Tensor(n);
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return add(a, scale(b, -1.0));
}

Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_error("mul", a.shape(), b.shape());
  check_finite("mul", a);
  check_finite("mul", b);
  auto n = make_node(a.shape(), {a.node(), b.node()});
  const auto& av = a.data();
  const auto& bv = b.data();
  for (std::size_t i = 0; i < av.size(); ++i) n->value[i] = av[i] * bv[i];
  n->backprop = [](Node& self) {
    Node* pa = self.parents[0].get();
    Node* pb = self.parents[1].get();
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i] * pb->value[i];
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) pb->grad[i] += self.grad[i] * pa->value[i];
    }
  };
  return Tensor(n);
}

Tensor scale(const Tensor& a, double c) {
  check_finite("scale", a);
  require(std::isfinite(c), "scale: non-finite factor");
  auto n = make_node(a.shape(), {a.node()});
  const auto& av = a.data();
  for (std::size_t i = 0; i < av.size(); ++i) n->value[i] = av[i] * c;
  n->backprop = [c](Node& self) {
    Node* p = self.parents[0].get();
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i] * c;
  };
  return Tensor(n);
}

Tensor exp(const Tensor& a) {
  check_finite("exp", a);
  auto n = make_node(a.shape(), {a.node()});
  const auto& av = a.data();
  for (std::size_t i = 0; i < av.size(); ++i) n->value[i] = std::exp(av[i]);
  n->backprop = [](Node& self) {
    Node* p = self.parents[0].get();
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i] * self.value[i];
  };
  return Tensor(n);
}

Tensor relu(const Tensor& a) {
  check_finite("relu", a);
  auto n = make_node(a.shape(), {a.node()});
  const auto& av = a.data();
  for (std::size_t i = 0; i < av.size(); ++i) n->value[i] = av[i] > 0.0 ? av[i] : 0.0;
  n->backprop = [](Node& self) {
    Node* p = self.parents[0].get();
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (p->value[i] > 0.0) p->grad[i] += self.grad[i];
    }
  };
  return Tensor(n);
}

Tensor sum(const Tensor& a) {
  check_finite("sum", a);
  auto n = make_node({}, {a.node()});
  double s = 0.0;
  for (double v : a.data()) s += v;
  n->value[0] = s;
  n->backprop = [](Node& self) {
    Node* p = self.parents[0].get();
    if (!p->requires_grad) return;
    p->ensure_grad();
    const double g = self.grad[0];
    for (double& gv : p->grad) gv += g;
  };
  return Tensor(n);
}

// ---- linear algebra ---------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.shape().size() == 2 && b.shape().size() == 2,
          "matmul: both inputs must be 2-D, got " + shape_str(a.shape()) + " and " +
              shape_str(b.shape()));
  if (a.shape()[1] != b.shape()[0]) shape_error("matmul", a.shape(), b.shape());
  check_finite("matmul", a);
  check_finite("matmul", b);
  const int m = a.shape()[0], k = a.shape()[1], nn = b.shape()[1];
  auto n = make_node({m, nn}, {a.node(), b.node()});
  // Operands are staged into Eigen-owned (always identically aligned) storage
  // so the product's summation order never depends on heap addresses; results
  // must be bitwise reproducible across runs and across save/load.
  MatRM A = CMapM(a.data().data(), m, k);
  MatRM B = CMapM(b.data().data(), k, nn);
  MapM C(n->value.data(), m, nn);
  C = A * B;
  n->backprop = [m, k, nn](Node& self) {
    Node* pa = self.parents[0].get();
    Node* pb = self.parents[1].get();
    MatRM G = CMapM(self.grad.data(), m, nn);
    MatRM A = CMapM(pa->value.data(), m, k);
    MatRM B = CMapM(pb->value.data(), k, nn);
    if (pa->requires_grad) {
      pa->ensure_grad();
      MatRM GA = G * B.transpose();
      MapM(pa->grad.data(), m, k) += GA;
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      MatRM GB = A.transpose() * G;
      MapM(pb->grad.data(), k, nn) += GB;
    }
  };
  return Tensor(n);
}

Tensor transpose(const Tensor& a) {
  require(a.shape().size() == 2, "transpose: input must be 2-D, got " + shape_str(a.shape()));
  const int r = a.shape()[0], c = a.shape()[1];
  auto n = make_node({c, r}, {a.node()});
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) n->value[static_cast<std::size_t>(j) * r + i] = a.data()[static_cast<std::size_t>(i) * c + j];
  n->backprop = [r, c](Node& self) {
    Node* p = self.parents[0].get();
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j)
        p->grad[static_cast<std::size_t>(i) * c + j] += self.grad[static_cast<std::size_t>(j) * r + i];
  };
  return Tensor(n);
}

Tensor add_rowvec(const Tensor& x, const Tensor& b) {
  require(x.shape().size() == 2 && b.shape().size() == 1,
          "add_rowvec: expected 2-D input and 1-D bias, got " + shape_str(x.shape()) + " and " +
              shape_str(b.shape()));
  if (x.shape()[1] != b.shape()[0]) shape_error("add_rowvec", x.shape(), b.shape());
  check_finite("add_rowvec", x);
  check_finite("add_rowvec", b);
  const int rows = x.shape()[0], cols = x.shape()[1];
  auto n = make_node(x.shape(), {x.node(), b.node()});
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j)
      n->value[static_cast<std::size_t>(i) * cols + j] = x.data()[static_cast<std::size_t>(i) * cols + j] + b.data()[j];
  n->backprop = [rows, cols](Node& self) {
    Node* px = self.parents[0].get();
    Node* pb = self.parents[1].get();
    if (px->requires_grad) {
      px->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) px->grad[i] += self.grad[i];
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j) pb->grad[j] += self.grad[static_cast<std::size_t>(i) * cols + j];
    }
  };
  return Tensor(n);
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  return add_rowvec(matmul(x, w), b);
}

// ---- conv / pool ------------------------------------------------------------

namespace {

// Column matrix of one image: (C*kh*kw) x (Ho*Wo), zero padding.
void im2col(const double* img, int C, int H, int W, int stride, int pad, int Ho,
            int Wo, double* col) {
  const int K = 3;
  for (int c = 0; c < C; ++c) {
    for (int ky = 0; ky < K; ++ky) {
      for (int kx = 0; kx < K; ++kx) {
        double* dst = col + (static_cast<std::size_t>(c) * K * K + ky * K + kx) * Ho * Wo;
        for (int oy = 0; oy < Ho; ++oy) {
          const int iy = oy * stride + ky - pad;
          for (int ox = 0; ox < Wo; ++ox) {
            const int ix = ox * stride + kx - pad;
            *dst++ = (iy >= 0 && iy < H && ix >= 0 && ix < W)
                         ? img[(static_cast<std::size_t>(c) * H + iy) * W + ix]
                         : 0.0;
          }
        }
      }
    }
  }
}

void col2im_add(const double* col, int C, int H, int W, int stride, int pad,
                int Ho, int Wo, double* img) {
  const int K = 3;
  for (int c = 0; c < C; ++c) {
    for (int ky = 0; ky < K; ++ky) {
      for (int kx = 0; kx < K; ++kx) {
        const double* src = col + (static_cast<std::size_t>(c) * K * K + ky * K + kx) * Ho * Wo;
        for (int oy = 0; oy < Ho; ++oy) {
          const int iy = oy * stride + ky - pad;
          for (int ox = 0; ox < Wo; ++ox) {
            const int ix = ox * stride + kx - pad;
            if (iy >= 0 && iy < H && ix >= 0 && ix < W) {
              img[(static_cast<std::size_t>(c) * H + iy) * W + ix] += src[ox];
            }
          }
          src += Wo;
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
  require(x.shape().size() == 4, "conv2d: input must be B x C x H x W, got " + shape_str(x.shape()));
  require(w.shape().size() == 4 && w.shape()[2] == 3 && w.shape()[3] == 3,
          "conv2d: weight must be O x C x 3 x 3, got " + shape_str(w.shape()));
  require(stride == 1 || stride == 2, "conv2d: stride must be 1 or 2");
  if (x.shape()[1] != w.shape()[1]) shape_error("conv2d", x.shape(), w.shape());
  require(b.shape().size() == 1 && b.shape()[0] == w.shape()[0],
          "conv2d: bias must match output channels, got " + shape_str(b.shape()));
  check_finite("conv2d", x);
  check_finite("conv2d", w);
  check_finite("conv2d", b);

  const int B = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  const int O = w.shape()[0];
  const int Ho = (H + 2 * pad - 3) / stride + 1;
  const int Wo = (W + 2 * pad - 3) / stride + 1;
  require(Ho > 0 && Wo > 0, "conv2d: output would be empty for input " + shape_str(x.shape()));

  auto n = make_node({B, O, Ho, Wo}, {x.node(), w.node(), b.node()});
  const int ck = C * 9;
  // As in matmul: all GEMM operands live in Eigen-owned storage so summation
  // order is a function of shapes only, keeping results bitwise reproducible.
  MatRM Col(ck, Ho * Wo);
  MatRM Wm = CMapM(w.data().data(), O, ck);
  for (int i = 0; i < B; ++i) {
    im2col(x.data().data() + static_cast<std::size_t>(i) * C * H * W, C, H, W, stride, pad, Ho, Wo, Col.data());
    MatRM Out = Wm * Col;
    for (int o = 0; o < O; ++o) Out.row(o).array() += b.data()[o];
    MapM(n->value.data() + static_cast<std::size_t>(i) * O * Ho * Wo, O, Ho * Wo) = Out;
  }

  n->backprop = [B, C, H, W, O, Ho, Wo, stride, pad, ck](Node& self) {
    Node* px = self.parents[0].get();
    Node* pw = self.parents[1].get();
    Node* pb = self.parents[2].get();
    MatRM Col(ck, Ho * Wo);
    if (px->requires_grad) px->ensure_grad();
    if (pw->requires_grad) pw->ensure_grad();
    if (pb->requires_grad) pb->ensure_grad();
    MatRM Wm = CMapM(pw->value.data(), O, ck);
    for (int i = 0; i < B; ++i) {
      MatRM G = CMapM(self.grad.data() + static_cast<std::size_t>(i) * O * Ho * Wo, O, Ho * Wo);
      if (pw->requires_grad || px->requires_grad) {
        im2col(px->value.data() + static_cast<std::size_t>(i) * C * H * W, C, H, W, stride, pad, Ho, Wo, Col.data());
      }
      if (pw->requires_grad) {
        MatRM GW = G * Col.transpose();
        MapM(pw->grad.data(), O, ck) += GW;
      }
      if (px->requires_grad) {
        MatRM GCol = Wm.transpose() * G;
        col2im_add(GCol.data(), C, H, W, stride, pad, Ho, Wo,
                   px->grad.data() + static_cast<std::size_t>(i) * C * H * W);
      }
      if (pb->requires_grad) {
        for (int o = 0; o < O; ++o) {
          double s = 0.0;  // sequential sum: reduction order must not vary
          for (int j = 0; j < Ho * Wo; ++j) s += G(o, j);
          pb->grad[o] += s;
        }
      }
    }
  };
  return Tensor(n);
}

Tensor mean_pool2(const Tensor& x) {
  require(x.shape().size() == 4, "mean_pool2: input must be B x C x H x W, got " + shape_str(x.shape()));
  const int B = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  require(H % 2 == 0 && W % 2 == 0, "mean_pool2: spatial dims must be even, got " + shape_str(x.shape()));
  check_finite("mean_pool2", x);
  const int Ho = H / 2, Wo = W / 2;
  auto n = make_node({B, C, Ho, Wo}, {x.node()});
  for (int bc = 0; bc < B * C; ++bc) {
    const double* in = x.data().data() + static_cast<std::size_t>(bc) * H * W;
    double* out = n->value.data() + static_cast<std::size_t>(bc) * Ho * Wo;
    for (int y = 0; y < Ho; ++y)
      for (int xk = 0; xk < Wo; ++xk)
        out[y * Wo + xk] = 0.25 * (in[(2 * y) * W + 2 * xk] + in[(2 * y) * W + 2 * xk + 1] +
                                   in[(2 * y + 1) * W + 2 * xk] + in[(2 * y + 1) * W + 2 * xk + 1]);
  }
  n->backprop = [B, C, H, W, Ho, Wo](Node& self) {
    Node* p = self.parents[0].get();
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (int bc = 0; bc < B * C; ++bc) {
      const double* g = self.grad.data() + static_cast<std::size_t>(bc) * Ho * Wo;
      double* gi = p->grad.data() + static_cast<std::size_t>(bc) * H * W;
      for (int y = 0; y < Ho; ++y)
        for (int xk = 0; xk < Wo; ++xk) {
          const double v = 0.25 * g[y * Wo + xk];
          gi[(2 * y) * W + 2 * xk] += v;
          gi[(2 * y) * W + 2 * xk + 1] += v;
          gi[(2 * y + 1) * W + 2 * xk] += v;
          gi[(2 * y + 1) * W + 2 * xk + 1] += v;
        }
    }
  };
  return Tensor(n);
}

Tensor reshape(const Tensor& x, Shape s) {
  if (numel(s) != x.size()) shape_error("reshape", x.shape(), s);
  auto n = make_node(std::move(s), {x.node()});
  n->value = x.data();
  n->backprop = [](Node& self) {
    Node* p = self.parents[0].get();
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
  };
  return Tensor(n);
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  require(!parts.empty(), "concat_rows: no inputs");
  const int cols = parts[0].shape().size() == 2 ? parts[0].shape()[1] : -1;
  require(cols > 0, "concat_rows: inputs must be 2-D, got " + shape_str(parts[0].shape()));
  int rows = 0;
  std::vector<NodePtr> parents;
  for (const auto& p : parts) {
    require(p.shape().size() == 2, "concat_rows: inputs must be 2-D, got " + shape_str(p.shape()));
    if (p.shape()[1] != cols) shape_error("concat_rows", parts[0].shape(), p.shape());
    check_finite("concat_rows", p);
    rows += p.shape()[0];
    parents.push_back(p.node());
  }
  auto n = make_node({rows, cols}, std::move(parents));
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.data().begin(), p.data().end(), n->value.begin() + off);
    off += p.data().size();
  }
  n->backprop = [](Node& self) {
    std::size_t off = 0;
    for (const auto& p : self.parents) {
      const std::size_t cnt = p->value.size();
      if (p->requires_grad) {
        p->ensure_grad();
        for (std::size_t i = 0; i < cnt; ++i) p->grad[i] += self.grad[off + i];
      }
      off += cnt;
    }
  };
  return Tensor(n);
}

Tensor slice_rows(const Tensor& x, int start, int count) {
  require(x.shape().size() == 2, "slice_rows: input must be 2-D, got " + shape_str(x.shape()));
  const int rows = x.shape()[0], cols = x.shape()[1];
  require(start >= 0 && count >= 1 && start + count <= rows,
          "slice_rows: range [" + std::to_string(start) + ", " + std::to_string(start + count) +
              ") out of " + std::to_string(rows) + " rows");
  auto n = make_node({count, cols}, {x.node()});
  std::copy(x.data().begin() + static_cast<std::size_t>(start) * cols,
            x.data().begin() + static_cast<std::size_t>(start + count) * cols, n->value.begin());
  n->backprop = [start, cols](Node& self) {
    Node* p = self.parents[0].get();
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      p->grad[static_cast<std::size_t>(start) * cols + i] += self.grad[i];
    }
  };
  return Tensor(n);
}

// ---- batch norm -------------------------------------------------------------

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  BnStats& stats, bool training, double momentum, double eps) {
  const auto& xs = x.shape();
  require(xs.size() == 2 || xs.size() == 4,
          "batch_norm: input must be 2-D or 4-D, got " + shape_str(xs));
  const int C = xs[1];
  require(gamma.shape() == Shape{C} && beta.shape() == Shape{C},
          "batch_norm: gamma/beta must have " + std::to_string(C) + " channels");
  require(static_cast<int>(stats.mean.size()) == C && static_cast<int>(stats.var.size()) == C,
          "batch_norm: running stats size mismatch");
  check_finite("batch_norm", x);
  check_finite("batch_norm", gamma);
  check_finite("batch_norm", beta);

  const int B = xs[0];
  const int spatial = xs.size() == 4 ? xs[2] * xs[3] : 1;
  const std::int64_t cnt = static_cast<std::int64_t>(B) * spatial;

  auto n = make_node(xs, {x.node(), gamma.node(), beta.node()});

  auto at = [&](const std::vector<double>& buf, int b, int c, int s) -> double {
    return buf[(static_cast<std::size_t>(b) * C + c) * spatial + s];
  };

  std::vector<double> mean(C), var(C);
  if (training) {
    for (int c = 0; c < C; ++c) {
      double m = 0.0;
      for (int b = 0; b < B; ++b)
        for (int s = 0; s < spatial; ++s) m += at(x.data(), b, c, s);
      m /= static_cast<double>(cnt);
      double v = 0.0;
      for (int b = 0; b < B; ++b)
        for (int s = 0; s < spatial; ++s) {
          const double d = at(x.data(), b, c, s) - m;
          v += d * d;
        }
      v /= static_cast<double>(cnt);
      mean[c] = m;
      var[c] = v;
      stats.mean[c] = (1.0 - momentum) * stats.mean[c] + momentum * m;
      stats.var[c] = (1.0 - momentum) * stats.var[c] + momentum * v;
    }
  } else {
    mean = stats.mean;
    var = stats.var;
  }

  std::vector<double> inv_std(C);
  for (int c = 0; c < C; ++c) inv_std[c] = 1.0 / std::sqrt(var[c] + eps);

  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c)
      for (int s = 0; s < spatial; ++s) {
        const std::size_t i = (static_cast<std::size_t>(b) * C + c) * spatial + s;
        n->value[i] = gamma.data()[c] * (x.data()[i] - mean[c]) * inv_std[c] + beta.data()[c];
      }

  n->backprop = [B, C, spatial, cnt, mean, inv_std, training](Node& self) {
    Node* px = self.parents[0].get();
    Node* pg = self.parents[1].get();
    Node* pb = self.parents[2].get();
    if (px->requires_grad) px->ensure_grad();
    if (pg->requires_grad) pg->ensure_grad();
    if (pb->requires_grad) pb->ensure_grad();

    for (int c = 0; c < C; ++c) {
      const double g = pg->value[c];
      double sum_dy = 0.0, sum_dy_xhat = 0.0;
      for (int b = 0; b < B; ++b)
        for (int s = 0; s < spatial; ++s) {
          const std::size_t i = (static_cast<std::size_t>(b) * C + c) * spatial + s;
          const double xhat = (px->value[i] - mean[c]) * inv_std[c];
          sum_dy += self.grad[i];
          sum_dy_xhat += self.grad[i] * xhat;
        }
      if (pg->requires_grad) pg->grad[c] += sum_dy_xhat;
      if (pb->requires_grad) pb->grad[c] += sum_dy;
      if (px->requires_grad) {
        for (int b = 0; b < B; ++b)
          for (int s = 0; s < spatial; ++s) {
            const std::size_t i = (static_cast<std::size_t>(b) * C + c) * spatial + s;
            if (training) {
              const double xhat = (px->value[i] - mean[c]) * inv_std[c];
              px->grad[i] += g * inv_std[c] *
                             (self.grad[i] - sum_dy / static_cast<double>(cnt) -
                              xhat * sum_dy_xhat / static_cast<double>(cnt));
            } else {
              // eval mode is a fixed affine map
              px->grad[i] += g * inv_std[c] * self.grad[i];
            }
          }
      }
    }
  };
  return Tensor(n);
}

// ---- softmax family ---------------------------------------------------------

namespace {

void softmax_inplace(const double* in, double* out, int cols) {
  double mx = in[0];
  for (int j = 1; j < cols; ++j) mx = std::max(mx, in[j]);
  double s = 0.0;
  for (int j = 0; j < cols; ++j) {
    out[j] = std::exp(in[j] - mx);
    s += out[j];
  }
  for (int j = 0; j < cols; ++j) out[j] /= s;
}

}  // namespace

Tensor softmax_rows(const Tensor& x) {
  require(x.shape().size() == 2, "softmax_rows: input must be 2-D, got " + shape_str(x.shape()));
  check_finite("softmax_rows", x);
  const int rows = x.shape()[0], cols = x.shape()[1];
  auto n = make_node(x.shape(), {x.node()});
  for (int i = 0; i < rows; ++i)
    softmax_inplace(x.data().data() + static_cast<std::size_t>(i) * cols,
                    n->value.data() + static_cast<std::size_t>(i) * cols, cols);
  n->backprop = [rows, cols](Node& self) {
    Node* p = self.parents[0].get();
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (int i = 0; i < rows; ++i) {
      const double* y = self.value.data() + static_cast<std::size_t>(i) * cols;
      const double* g = self.grad.data() + static_cast<std::size_t>(i) * cols;
      double dot = 0.0;
      for (int j = 0; j < cols; ++j) dot += y[j] * g[j];
      double* gi = p->grad.data() + static_cast<std::size_t>(i) * cols;
      for (int j = 0; j < cols; ++j) gi[j] += y[j] * (g[j] - dot);
    }
  };
  return Tensor(n);
}

Tensor log_softmax_rows(const Tensor& x) {
  require(x.shape().size() == 2, "log_softmax_rows: input must be 2-D, got " + shape_str(x.shape()));
  check_finite("log_softmax_rows", x);
  const int rows = x.shape()[0], cols = x.shape()[1];
  auto n = make_node(x.shape(), {x.node()});
  for (int i = 0; i < rows; ++i) {
    const double* in = x.data().data() + static_cast<std::size_t>(i) * cols;
    double* out = n->value.data() + static_cast<std::size_t>(i) * cols;
    double mx = in[0];
    for (int j = 1; j < cols; ++j) mx = std::max(mx, in[j]);
    double s = 0.0;
    for (int j = 0; j < cols; ++j) s += std::exp(in[j] - mx);
    const double lse = mx + std::log(s);
    for (int j = 0; j < cols; ++j) out[j] = in[j] - lse;
  }
  n->backprop = [rows, cols](Node& self) {
    Node* p = self.parents[0].get();
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (int i = 0; i < rows; ++i) {
      const double* y = self.value.data() + static_cast<std::size_t>(i) * cols;
      const double* g = self.grad.data() + static_cast<std::size_t>(i) * cols;
      double gsum = 0.0;
      for (int j = 0; j < cols; ++j) gsum += g[j];
      double* gi = p->grad.data() + static_cast<std::size_t>(i) * cols;
      for (int j = 0; j < cols; ++j) gi[j] += g[j] - std::exp(y[j]) * gsum;
    }
  };
  return Tensor(n);
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  require(logits.shape().size() == 2,
          "cross_entropy: logits must be 2-D, got " + shape_str(logits.shape()));
  const int rows = logits.shape()[0], cols = logits.shape()[1];
  require(static_cast<int>(labels.size()) == rows,
          "cross_entropy: " + std::to_string(labels.size()) + " labels for " +
              std::to_string(rows) + " rows");
  for (int y : labels) {
    require(y >= 0 && y < cols,
            "cross_entropy: label " + std::to_string(y) + " out of range [0, " +
                std::to_string(cols) + ")");
  }
  check_finite("cross_entropy", logits);

  auto n = make_node({}, {logits.node()});
  std::vector<double> probs(static_cast<std::size_t>(rows) * cols);
  double loss = 0.0;
  for (int i = 0; i < rows; ++i) {
    const double* in = logits.data().data() + static_cast<std::size_t>(i) * cols;
    double* pr = probs.data() + static_cast<std::size_t>(i) * cols;
    softmax_inplace(in, pr, cols);
    loss -= std::log(std::max(pr[labels[i]], 1e-300));
  }
  n->value[0] = loss / rows;
  n->backprop = [rows, cols, labels, probs = std::move(probs)](Node& self) {
    Node* p = self.parents[0].get();
    if (!p->requires_grad) return;
    p->ensure_grad();
    const double g = self.grad[0] / rows;
    for (int i = 0; i < rows; ++i) {
      const double* pr = probs.data() + static_cast<std::size_t>(i) * cols;
      double* gi = p->grad.data() + static_cast<std::size_t>(i) * cols;
      for (int j = 0; j < cols; ++j) gi[j] += g * (pr[j] - (j == labels[i] ? 1.0 : 0.0));
    }
  };
  return Tensor(n);
}

Tensor kl_divergence(const Tensor& p, const Tensor& q) {
  if (p.shape() != q.shape()) shape_error("kl_divergence", p.shape(), q.shape());
  require(p.shape().size() == 2, "kl_divergence: inputs must be 2-D, got " + shape_str(p.shape()));
  check_finite("kl_divergence", p);
  check_finite("kl_divergence", q);
  const int rows = p.shape()[0], cols = p.shape()[1];
  auto n = make_node({}, {p.node(), q.node()});
  double total = 0.0;
  for (std::size_t i = 0; i < p.data().size(); ++i) {
    const double pi = p.data()[i];
    const double qi = q.data()[i];
    if (pi > 0.0) total += pi * (std::log(pi) - std::log(std::max(qi, 1e-300)));
  }
  n->value[0] = total / rows;
  n->backprop = [rows, cols](Node& self) {
    Node* pp = self.parents[0].get();
    Node* pq = self.parents[1].get();
    const double g = self.grad[0] / rows;
    if (pp->requires_grad) {
      pp->ensure_grad();
      for (std::size_t i = 0; i < pp->value.size(); ++i) {
        const double pi = pp->value[i];
        const double qi = std::max(pq->value[i], 1e-300);
        if (pi > 0.0) pp->grad[i] += g * (std::log(pi) - std::log(qi) + 1.0);
      }
    }
    if (pq->requires_grad) {
      pq->ensure_grad();
      for (std::size_t i = 0; i < pq->value.size(); ++i) {
        const double pi = pp->value[i];
        const double qi = std::max(pq->value[i], 1e-300);
        pq->grad[i] += -g * pi / qi;
      }
    }
    (void)cols;
  };
  return Tensor(n);
}

Tensor gaussian_reparam(const Tensor& mean, const Tensor& log_var, const Tensor& noise) {
  if (mean.shape() != log_var.shape()) shape_error("gaussian_reparam", mean.shape(), log_var.shape());
  if (mean.shape() != noise.shape()) shape_error("gaussian_reparam", mean.shape(), noise.shape());
  return add(mean, mul(exp(scale(log_var, 0.5)), noise));
}

// ---- few-shot head primitives -----------------------------------------------

Tensor class_means(const Tensor& feats, const std::vector<int>& labels, int n_way) {
  require(feats.shape().size() == 2, "class_means: feats must be 2-D, got " + shape_str(feats.shape()));
  const int rows = feats.shape()[0], dim = feats.shape()[1];
  require(static_cast<int>(labels.size()) == rows,
          "class_means: label count does not match feature rows");
  std::vector<int> counts(n_way, 0);
  for (int y : labels) {
    require(y >= 0 && y < n_way, "class_means: label " + std::to_string(y) + " out of range");
    ++counts[y];
  }
  for (int c = 0; c < n_way; ++c) {
    require(counts[c] > 0, "class_means: class " + std::to_string(c) + " has no support examples");
  }
  check_finite("class_means", feats);
  auto n = make_node({n_way, dim}, {feats.node()});
  std::fill(n->value.begin(), n->value.end(), 0.0);
  for (int i = 0; i < rows; ++i) {
    const double* f = feats.data().data() + static_cast<std::size_t>(i) * dim;
    double* out = n->value.data() + static_cast<std::size_t>(labels[i]) * dim;
    const double inv = 1.0 / counts[labels[i]];
    for (int d = 0; d < dim; ++d) out[d] += f[d] * inv;
  }
  n->backprop = [rows, dim, labels, counts](Node& self) {
    Node* p = self.parents[0].get();
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (int i = 0; i < rows; ++i) {
      const double* g = self.grad.data() + static_cast<std::size_t>(labels[i]) * dim;
      double* gi = p->grad.data() + static_cast<std::size_t>(i) * dim;
      const double inv = 1.0 / counts[labels[i]];
      for (int d = 0; d < dim; ++d) gi[d] += g[d] * inv;
    }
  };
  return Tensor(n);
}

Tensor neg_sqdist(const Tensor& queries, const Tensor& protos) {
  require(queries.shape().size() == 2 && protos.shape().size() == 2,
          "neg_sqdist: inputs must be 2-D");
  if (queries.shape()[1] != protos.shape()[1]) shape_error("neg_sqdist", queries.shape(), protos.shape());
  check_finite("neg_sqdist", queries);
  check_finite("neg_sqdist", protos);
  const int B = queries.shape()[0], N = protos.shape()[0], D = queries.shape()[1];
  auto n = make_node({B, N}, {queries.node(), protos.node()});
  for (int b = 0; b < B; ++b) {
    const double* q = queries.data().data() + static_cast<std::size_t>(b) * D;
    for (int c = 0; c < N; ++c) {
      const double* p = protos.data().data() + static_cast<std::size_t>(c) * D;
      double s = 0.0;
      for (int d = 0; d < D; ++d) {
        const double diff = q[d] - p[d];
        s += diff * diff;
      }
      n->value[static_cast<std::size_t>(b) * N + c] = -s;
    }
  }
  n->backprop = [B, N, D](Node& self) {
    Node* pq = self.parents[0].get();
    Node* pp = self.parents[1].get();
    if (pq->requires_grad) pq->ensure_grad();
    if (pp->requires_grad) pp->ensure_grad();
    for (int b = 0; b < B; ++b) {
      const double* q = pq->value.data() + static_cast<std::size_t>(b) * D;
      for (int c = 0; c < N; ++c) {
        const double g = self.grad[static_cast<std::size_t>(b) * N + c];
        if (g == 0.0) continue;
        const double* p = pp->value.data() + static_cast<std::size_t>(c) * D;
        for (int d = 0; d < D; ++d) {
          const double diff = q[d] - p[d];
          if (pq->requires_grad) pq->grad[static_cast<std::size_t>(b) * D + d] += -2.0 * g * diff;
          if (pp->requires_grad) pp->grad[static_cast<std::size_t>(c) * D + d] += 2.0 * g * diff;
        }
      }
    }
  };
  return Tensor(n);
}

Tensor row_l2_normalize(const Tensor& x) {
  require(x.shape().size() == 2, "row_l2_normalize: input must be 2-D, got " + shape_str(x.shape()));
  check_finite("row_l2_normalize", x);
  const int rows = x.shape()[0], cols = x.shape()[1];
  const double eps = 1e-12;
  auto n = make_node(x.shape(), {x.node()});
  std::vector<double> norms(rows);
  for (int i = 0; i < rows; ++i) {
    const double* in = x.data().data() + static_cast<std::size_t>(i) * cols;
    double s = 0.0;
    for (int j = 0; j < cols; ++j) s += in[j] * in[j];
    norms[i] = std::sqrt(s) + eps;
    double* out = n->value.data() + static_cast<std::size_t>(i) * cols;
    for (int j = 0; j < cols; ++j) out[j] = in[j] / norms[i];
  }
  n->backprop = [rows, cols, norms = std::move(norms)](Node& self) {
    Node* p = self.parents[0].get();
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (int i = 0; i < rows; ++i) {
      const double* y = self.value.data() + static_cast<std::size_t>(i) * cols;
      const double* g = self.grad.data() + static_cast<std::size_t>(i) * cols;
      double dot = 0.0;
      for (int j = 0; j < cols; ++j) dot += y[j] * g[j];
      double* gi = p->grad.data() + static_cast<std::size_t>(i) * cols;
      for (int j = 0; j < cols; ++j) gi[j] += (g[j] - y[j] * dot) / norms[i];
    }
  };
  return Tensor(n);
}

Tensor row_normalize_sum(const Tensor& x) {
  require(x.shape().size() == 2, "row_normalize_sum: input must be 2-D, got " + shape_str(x.shape()));
  check_finite("row_normalize_sum", x);
  const int rows = x.shape()[0], cols = x.shape()[1];
  auto n = make_node(x.shape(), {x.node()});
  std::vector<double> sums(rows);
  for (int i = 0; i < rows; ++i) {
    const double* in = x.data().data() + static_cast<std::size_t>(i) * cols;
    double s = 0.0;
    for (int j = 0; j < cols; ++j) s += in[j];
    require(s > 0.0, "row_normalize_sum: row " + std::to_string(i) + " has non-positive sum");
    sums[i] = s;
    double* out = n->value.data() + static_cast<std::size_t>(i) * cols;
    for (int j = 0; j < cols; ++j) out[j] = in[j] / s;
  }
  n->backprop = [rows, cols, sums = std::move(sums)](Node& self) {
    Node* p = self.parents[0].get();
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (int i = 0; i < rows; ++i) {
      const double* y = self.value.data() + static_cast<std::size_t>(i) * cols;
      const double* g = self.grad.data() + static_cast<std::size_t>(i) * cols;
      double dot = 0.0;
      for (int j = 0; j < cols; ++j) dot += y[j] * g[j];
      double* gi = p->grad.data() + static_cast<std::size_t>(i) * cols;
      for (int j = 0; j < cols; ++j) gi[j] += (g[j] - dot) / sums[i];
    }
  };
  return Tensor(n);
}

std::vector<int> argmax_rows(const Tensor& logits) {
  require(logits.shape().size() == 2, "argmax_rows: input must be 2-D");
  const int rows = logits.shape()[0], cols = logits.shape()[1];
  std::vector<int> out(rows);
  for (int i = 0; i < rows; ++i) {
    const double* in = logits.data().data() + static_cast<std::size_t>(i) * cols;
    int best = 0;
    for (int j = 1; j < cols; ++j)
      if (in[j] > in[best]) best = j;
    out[i] = best;
  }
  return out;
}

}  // namespace fdmix
