#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "mdprune/rng.hpp"

namespace mdprune {

using Shape = std::vector<int>;

// Thrown for errors caused by user-supplied configuration or data files.
// Everything else surfaces as std::invalid_argument / std::runtime_error.
struct config_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) {
    if (d < 0) throw std::invalid_argument("negative dimension in shape " + shape_str(s));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // allocated iff requires_grad
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and scatters into the parents' grads.
  std::function<void(Node&)> backprop;

  std::size_t numel() const { return value.size(); }
};

}  // namespace detail

// Handle to a node of the recorded computation DAG. Copies share the node.
class Tensor {
 public:
  Tensor() = default;

  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false) {
    if (shape_numel(shape) != data.size()) {
      throw std::invalid_argument("tensor data size " + std::to_string(data.size()) +
                                  " does not match shape " + shape_str(shape));
    }
    auto n = std::make_shared<detail::Node>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    n->requires_grad = requires_grad;
    if (requires_grad) n->grad.assign(n->value.size(), 0.0);
    return Tensor(std::move(n));
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::vector<double> d(shape_numel(shape), 0.0);
    return from_data(std::move(shape), std::move(d), requires_grad);
  }

  static Tensor full(Shape shape, double v, bool requires_grad = false) {
    std::vector<double> d(shape_numel(shape), v);
    return from_data(std::move(shape), std::move(d), requires_grad);
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return from_data({}, {v}, requires_grad);
  }

  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0, bool requires_grad = false) {
    std::vector<double> d(shape_numel(shape));
    for (double& x : d) x = rng.normal(0.0, stddev);
    return from_data(std::move(shape), std::move(d), requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t numel() const { return node_->numel(); }
  int dim(int i) const { return node_->shape.at(static_cast<std::size_t>(i)); }
  bool requires_grad() const { return node_->requires_grad; }

  std::vector<double>& values() { return node_->value; }
  const std::vector<double>& values() const { return node_->value; }

  double item() const {
    if (numel() != 1) {
      throw std::invalid_argument("item() on non-scalar tensor of shape " + shape_str(shape()));
    }
    return node_->value[0];
  }

  bool has_grad() const { return node_ && !node_->grad.empty(); }

  std::vector<double>& grad() {
    if (node_->grad.empty()) throw std::runtime_error("tensor has no grad buffer");
    return node_->grad;
  }
  const std::vector<double>& grad() const {
    if (node_->grad.empty()) throw std::runtime_error("tensor has no grad buffer");
    return node_->grad;
  }

  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
  }

  // Leaf-only toggle; freezing drops the grad buffer.
  void set_requires_grad(bool on) {
    if (!node_->parents.empty())
      throw std::runtime_error("set_requires_grad on a non-leaf tensor");
    node_->requires_grad = on;
    if (on && node_->grad.empty()) node_->grad.assign(node_->value.size(), 0.0);
    if (!on) node_->grad.clear();
  }

  // Reverse-mode sweep from a scalar. Gradients accumulate into every
  // reachable requires_grad node; repeated calls keep accumulating.
  void backward() const {
    detail::Node* root = node_.get();
    if (root->numel() != 1) {
      throw std::invalid_argument("backward() requires a scalar loss, got shape " +
                                  shape_str(root->shape));
    }
    if (!root->requires_grad) return;

    // Iterative post-order DFS; reversed it yields each node before its
    // parents, i.e. after all of its consumers.
    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> seen;
    std::vector<std::pair<detail::Node*, std::size_t>> stack;
    stack.emplace_back(root, 0);
    seen.insert(root);
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        detail::Node* p = node->parents[next++].get();
        if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }

    // Interior grads are scratch space for this sweep; only leaves accumulate
    // across calls.
    for (detail::Node* n : order)
      if (!n->parents.empty()) std::fill(n->grad.begin(), n->grad.end(), 0.0);

    root->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      detail::Node* n = *it;
      if (n->backprop) n->backprop(*n);
    }
  }

  std::shared_ptr<detail::Node> node() const { return node_; }
  detail::Node* raw() const { return node_.get(); }

  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

namespace detail {

inline Tensor make_op(Shape shape, std::vector<double> value,
                      std::vector<std::shared_ptr<Node>> parents,
                      std::function<void(Node&)> backprop) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  for (const auto& p : parents) {
    if (p->requires_grad) {
      n->requires_grad = true;
      break;
    }
  }
  if (n->requires_grad) {
    n->grad.assign(n->value.size(), 0.0);
    n->parents = std::move(parents);
    n->backprop = std::move(backprop);
  }
  return Tensor(std::move(n));
}

inline void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and reduction ops
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::check_same_shape("add", a, b);
  std::vector<double> out(a.numel());
  const auto &av = a.values(), &bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return detail::make_op(a.shape(), std::move(out), {a.node(), b.node()}, [](detail::Node& n) {
    for (int k = 0; k < 2; ++k) {
      auto& p = *n.parents[k];
      if (!p.requires_grad) continue;
      for (std::size_t i = 0; i < n.grad.size(); ++i) p.grad[i] += n.grad[i];
    }
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::check_same_shape("sub", a, b);
  std::vector<double> out(a.numel());
  const auto &av = a.values(), &bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return detail::make_op(a.shape(), std::move(out), {a.node(), b.node()}, [](detail::Node& n) {
    auto& pa = *n.parents[0];
    auto& pb = *n.parents[1];
    if (pa.requires_grad)
      for (std::size_t i = 0; i < n.grad.size(); ++i) pa.grad[i] += n.grad[i];
    if (pb.requires_grad)
      for (std::size_t i = 0; i < n.grad.size(); ++i) pb.grad[i] -= n.grad[i];
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::check_same_shape("mul", a, b);
  std::vector<double> out(a.numel());
  const auto &av = a.values(), &bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return detail::make_op(a.shape(), std::move(out), {a.node(), b.node()}, [](detail::Node& n) {
    auto& pa = *n.parents[0];
    auto& pb = *n.parents[1];
    if (pa.requires_grad)
      for (std::size_t i = 0; i < n.grad.size(); ++i) pa.grad[i] += n.grad[i] * pb.value[i];
    if (pb.requires_grad)
      for (std::size_t i = 0; i < n.grad.size(); ++i) pb.grad[i] += n.grad[i] * pa.value[i];
  });
}

inline Tensor neg(const Tensor& a) {
  std::vector<double> out(a.numel());
  const auto& av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = -av[i];
  return detail::make_op(a.shape(), std::move(out), {a.node()}, [](detail::Node& n) {
    auto& p = *n.parents[0];
    for (std::size_t i = 0; i < n.grad.size(); ++i) p.grad[i] -= n.grad[i];
  });
}

// Scalar-tensor broadcasting is the only implicit broadcast in the library.
inline Tensor mul_scalar(const Tensor& a, double c) {
  std::vector<double> out(a.numel());
  const auto& av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * c;
  return detail::make_op(a.shape(), std::move(out), {a.node()}, [c](detail::Node& n) {
    auto& p = *n.parents[0];
    for (std::size_t i = 0; i < n.grad.size(); ++i) p.grad[i] += n.grad[i] * c;
  });
}

inline Tensor add_scalar(const Tensor& a, double c) {
  std::vector<double> out(a.numel());
  const auto& av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + c;
  return detail::make_op(a.shape(), std::move(out), {a.node()}, [](detail::Node& n) {
    auto& p = *n.parents[0];
    for (std::size_t i = 0; i < n.grad.size(); ++i) p.grad[i] += n.grad[i];
  });
}

inline Tensor relu(const Tensor& a) {
  std::vector<double> out(a.numel());
  const auto& av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] > 0.0 ? av[i] : 0.0;
  return detail::make_op(a.shape(), std::move(out), {a.node()}, [](detail::Node& n) {
    auto& p = *n.parents[0];
    for (std::size_t i = 0; i < n.grad.size(); ++i)
      if (p.value[i] > 0.0) p.grad[i] += n.grad[i];
  });
}

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.values()) s += v;
  return detail::make_op({}, {s}, {a.node()}, [](detail::Node& n) {
    auto& p = *n.parents[0];
    for (std::size_t i = 0; i < p.grad.size(); ++i) p.grad[i] += n.grad[0];
  });
}

inline Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw std::invalid_argument("mean of empty tensor");
  double s = 0.0;
  for (double v : a.values()) s += v;
  const double inv = 1.0 / static_cast<double>(a.numel());
  return detail::make_op({}, {s * inv}, {a.node()}, [inv](detail::Node& n) {
    auto& p = *n.parents[0];
    for (std::size_t i = 0; i < p.grad.size(); ++i) p.grad[i] += n.grad[0] * inv;
  });
}

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw std::invalid_argument("reshape: cannot view " + shape_str(a.shape()) + " as " +
                                shape_str(shape));
  }
  return detail::make_op(std::move(shape), a.values(), {a.node()}, [](detail::Node& n) {
    auto& p = *n.parents[0];
    for (std::size_t i = 0; i < n.grad.size(); ++i) p.grad[i] += n.grad[i];
  });
}

// Hard threshold with straight-through gradient: forward emits 1 where
// v > tau, 0 elsewhere; backward passes the incoming gradient unchanged
// where |v| <= clip and blocks it outside.
inline Tensor ste_binarize(const Tensor& a, double tau, double clip) {
  std::vector<double> out(a.numel());
  const auto& av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] > tau ? 1.0 : 0.0;
  return detail::make_op(a.shape(), std::move(out), {a.node()}, [clip](detail::Node& n) {
    auto& p = *n.parents[0];
    for (std::size_t i = 0; i < n.grad.size(); ++i)
      if (std::abs(p.value[i]) <= clip) p.grad[i] += n.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.dim(1) != b.dim(0)) {
    throw std::invalid_argument("matmul: shape mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  }
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(static_cast<std::size_t>(m) * n, 0.0);
  const auto &av = a.values(), &bv = b.values();
  for (int i = 0; i < m; ++i)
    for (int p = 0; p < k; ++p) {
      const double aip = av[static_cast<std::size_t>(i) * k + p];
      const double* brow = &bv[static_cast<std::size_t>(p) * n];
      double* orow = &out[static_cast<std::size_t>(i) * n];
      for (int j = 0; j < n; ++j) orow[j] += aip * brow[j];
    }
  return detail::make_op({m, n}, std::move(out), {a.node(), b.node()},
                         [m, k, n](detail::Node& node) {
                           auto& pa = *node.parents[0];
                           auto& pb = *node.parents[1];
                           if (pa.requires_grad) {
                             // dA = G * B^T
                             for (int i = 0; i < m; ++i)
                               for (int p = 0; p < k; ++p) {
                                 double acc = 0.0;
                                 for (int j = 0; j < n; ++j)
                                   acc += node.grad[static_cast<std::size_t>(i) * n + j] *
                                          pb.value[static_cast<std::size_t>(p) * n + j];
                                 pa.grad[static_cast<std::size_t>(i) * k + p] += acc;
                               }
                           }
                           if (pb.requires_grad) {
                             // dB = A^T * G
                             for (int p = 0; p < k; ++p)
                               for (int j = 0; j < n; ++j) {
                                 double acc = 0.0;
                                 for (int i = 0; i < m; ++i)
                                   acc += pa.value[static_cast<std::size_t>(i) * k + p] *
                                          node.grad[static_cast<std::size_t>(i) * n + j];
                                 pb.grad[static_cast<std::size_t>(p) * n + j] += acc;
                               }
                           }
                         });
}

// x[m,k] * w[k,n] + bias[n] broadcast over rows.
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  if (x.shape().size() != 2 || w.shape().size() != 2 || x.dim(1) != w.dim(0)) {
    throw std::invalid_argument("linear: shape mismatch " + shape_str(x.shape()) + " vs " +
                                shape_str(w.shape()));
  }
  if (bias.shape().size() != 1 || bias.dim(0) != w.dim(1)) {
    throw std::invalid_argument("linear: bias shape " + shape_str(bias.shape()) +
                                " does not match weight " + shape_str(w.shape()));
  }
  const int m = x.dim(0), k = x.dim(1), n = w.dim(1);
  std::vector<double> out(static_cast<std::size_t>(m) * n);
  const auto &xv = x.values(), &wv = w.values(), &bv = bias.values();
  for (int i = 0; i < m; ++i) {
    double* orow = &out[static_cast<std::size_t>(i) * n];
    for (int j = 0; j < n; ++j) orow[j] = bv[j];
    for (int p = 0; p < k; ++p) {
      const double xip = xv[static_cast<std::size_t>(i) * k + p];
      const double* wrow = &wv[static_cast<std::size_t>(p) * n];
      for (int j = 0; j < n; ++j) orow[j] += xip * wrow[j];
    }
  }
  return detail::make_op({m, n}, std::move(out), {x.node(), w.node(), bias.node()},
                         [m, k, n](detail::Node& node) {
                           auto& px = *node.parents[0];
                           auto& pw = *node.parents[1];
                           auto& pb = *node.parents[2];
                           if (px.requires_grad) {
                             for (int i = 0; i < m; ++i)
                               for (int p = 0; p < k; ++p) {
                                 double acc = 0.0;
                                 for (int j = 0; j < n; ++j)
                                   acc += node.grad[static_cast<std::size_t>(i) * n + j] *
                                          pw.value[static_cast<std::size_t>(p) * n + j];
                                 px.grad[static_cast<std::size_t>(i) * k + p] += acc;
                               }
                           }
                           if (pw.requires_grad) {
                             for (int p = 0; p < k; ++p)
                               for (int j = 0; j < n; ++j) {
                                 double acc = 0.0;
                                 for (int i = 0; i < m; ++i)
                                   acc += px.value[static_cast<std::size_t>(i) * k + p] *
                                          node.grad[static_cast<std::size_t>(i) * n + j];
                                 pw.grad[static_cast<std::size_t>(p) * n + j] += acc;
                               }
                           }
                           if (pb.requires_grad) {
                             for (int i = 0; i < m; ++i)
                               for (int j = 0; j < n; ++j)
                                 pb.grad[j] += node.grad[static_cast<std::size_t>(i) * n + j];
                           }
                         });
}

}  // namespace mdprune
