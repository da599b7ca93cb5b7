#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "seqdvc/rng.hpp"

// Dense numerics substrate: 2-D row-major tensors with reverse-mode autodiff,
// a bias-corrected Adam step, and bit-exact checkpoint IO. Everything is
// single-threaded per graph; graphs built by independent model instances do
// not share state.

namespace seqdvc::nn {

template <class S>
using DenseMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using BoolMask = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class S>
struct Node {
  DenseMat<S> value;
  DenseMat<S> grad;  // sized lazily during backward
  bool requires_grad = false;
  bool leaf = false;
  std::vector<std::shared_ptr<Node<S>>> parents;
  std::function<void(Node<S>&)> backprop;
};

// Value-semantic handle to a graph node. Copies alias the same node, which is
// what parameter tying relies on.
template <class S>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<S>> n) : node_(std::move(n)) {}

  static Var constant(DenseMat<S> v) {
    auto n = std::make_shared<Node<S>>();
    n->value = std::move(v);
    return Var(std::move(n));
  }

  static Var parameter(DenseMat<S> v) {
    auto n = std::make_shared<Node<S>>();
    n->value = std::move(v);
    n->requires_grad = true;
    n->leaf = true;
    return Var(std::move(n));
  }

  bool valid() const { return node_ != nullptr; }
  const DenseMat<S>& value() const { return node_->value; }
  DenseMat<S>& value() { return node_->value; }
  const DenseMat<S>& grad() const { return node_->grad; }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  Eigen::Index rows() const { return node_->value.rows(); }
  Eigen::Index cols() const { return node_->value.cols(); }
  std::shared_ptr<Node<S>> node() const { return node_; }
  bool same_node(const Var& o) const { return node_.get() == o.node_.get(); }

  void reset_grad() {
    node_->grad.setZero(node_->value.rows(), node_->value.cols());
  }

  // Reverse pass from this scalar node. Grads of every node reachable from
  // here are zeroed first, so repeated calls are deterministic.
  void backward() const {
    if (rows() != 1 || cols() != 1) {
      throw std::invalid_argument("backward: loss must be a 1x1 scalar");
    }
    std::vector<Node<S>*> order = topo_order();
    for (Node<S>* n : order) {
      n->grad.setZero(n->value.rows(), n->value.cols());
    }
    node_->grad(0, 0) = S(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      if ((*it)->backprop) (*it)->backprop(**it);
    }
  }

 private:
  // Iterative post-order DFS; order depends only on graph construction order.
  std::vector<Node<S>*> topo_order() const {
    std::vector<Node<S>*> order;
    std::unordered_set<Node<S>*> visited;
    std::vector<std::pair<Node<S>*, std::size_t>> stack;
    stack.emplace_back(node_.get(), 0);
    visited.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, idx] = stack.back();
      if (idx < n->parents.size()) {
        Node<S>* p = n->parents[idx].get();
        ++idx;
        if (p->requires_grad && !visited.count(p)) {
          visited.insert(p);
          stack.emplace_back(p, 0);
        }
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
    return order;
  }

  std::shared_ptr<Node<S>> node_;
};

namespace detail {

template <class S>
Var<S> make_op(DenseMat<S> value, std::vector<Var<S>> parents,
               std::function<void(Node<S>&)> backprop) {
  auto n = std::make_shared<Node<S>>();
  n->value = std::move(value);
  bool needs = false;
  for (const auto& p : parents) needs = needs || p.requires_grad();
  n->requires_grad = needs;
  if (needs) {
    for (auto& p : parents) n->parents.push_back(p.node());
    n->backprop = std::move(backprop);
  }
  return Var<S>(std::move(n));
}

template <class S>
void check_same_shape(const Var<S>& a, const Var<S>& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch");
  }
}

}  // namespace detail

template <class S>
Var<S> add(const Var<S>& a, const Var<S>& b) {
  detail::check_same_shape(a, b, "add");
  auto pa = a.node().get();
  auto pb = b.node().get();
  return detail::make_op<S>(a.value() + b.value(), {a, b}, [pa, pb](Node<S>& self) {
    if (pa->requires_grad) pa->grad += self.grad;
    if (pb->requires_grad) pb->grad += self.grad;
  });
}

template <class S>
Var<S> sub(const Var<S>& a, const Var<S>& b) {
  detail::check_same_shape(a, b, "sub");
  auto pa = a.node().get();
  auto pb = b.node().get();
  return detail::make_op<S>(a.value() - b.value(), {a, b}, [pa, pb](Node<S>& self) {
    if (pa->requires_grad) pa->grad += self.grad;
    if (pb->requires_grad) pb->grad -= self.grad;
  });
}

// Elementwise product.
template <class S>
Var<S> cmul(const Var<S>& a, const Var<S>& b) {
  detail::check_same_shape(a, b, "cmul");
  auto pa = a.node().get();
  auto pb = b.node().get();
  DenseMat<S> av = a.value();
  DenseMat<S> bv = b.value();
  return detail::make_op<S>((av.array() * bv.array()).matrix(), {a, b},
                            [pa, pb, av, bv](Node<S>& self) {
                              if (pa->requires_grad)
                                pa->grad.array() += self.grad.array() * bv.array();
                              if (pb->requires_grad)
                                pb->grad.array() += self.grad.array() * av.array();
                            });
}

template <class S>
Var<S> scale(const Var<S>& a, S factor) {
  auto pa = a.node().get();
  return detail::make_op<S>(a.value() * factor, {a}, [pa, factor](Node<S>& self) {
    if (pa->requires_grad) pa->grad += self.grad * factor;
  });
}

template <class S>
Var<S> matmul(const Var<S>& a, const Var<S>& b) {
  if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dims differ");
  auto pa = a.node().get();
  auto pb = b.node().get();
  DenseMat<S> av = a.value();
  DenseMat<S> bv = b.value();
  return detail::make_op<S>(av * bv, {a, b}, [pa, pb, av, bv](Node<S>& self) {
    if (pa->requires_grad) pa->grad.noalias() += self.grad * bv.transpose();
    if (pb->requires_grad) pb->grad.noalias() += av.transpose() * self.grad;
  });
}

// a * b^T; used for weight-tied output heads.
template <class S>
Var<S> matmul_nt(const Var<S>& a, const Var<S>& b) {
  if (a.cols() != b.cols()) throw std::invalid_argument("matmul_nt: inner dims differ");
  auto pa = a.node().get();
  auto pb = b.node().get();
  DenseMat<S> av = a.value();
  DenseMat<S> bv = b.value();
  return detail::make_op<S>(av * bv.transpose(), {a, b}, [pa, pb, av, bv](Node<S>& self) {
    if (pa->requires_grad) pa->grad.noalias() += self.grad * bv;
    if (pb->requires_grad) pb->grad.noalias() += self.grad.transpose() * av;
  });
}

// Broadcast a 1xC row vector over every row of a.
template <class S>
Var<S> add_row(const Var<S>& a, const Var<S>& v) {
  if (v.rows() != 1 || v.cols() != a.cols()) {
    throw std::invalid_argument("add_row: v must be 1 x cols(a)");
  }
  auto pa = a.node().get();
  auto pv = v.node().get();
  DenseMat<S> out = a.value();
  out.rowwise() += v.value().row(0);
  return detail::make_op<S>(std::move(out), {a, v}, [pa, pv](Node<S>& self) {
    if (pa->requires_grad) pa->grad += self.grad;
    if (pv->requires_grad) pv->grad.row(0) += self.grad.colwise().sum();
  });
}

template <class S>
Var<S> mul_row(const Var<S>& a, const Var<S>& v) {
  if (v.rows() != 1 || v.cols() != a.cols()) {
    throw std::invalid_argument("mul_row: v must be 1 x cols(a)");
  }
  auto pa = a.node().get();
  auto pv = v.node().get();
  DenseMat<S> av = a.value();
  DenseMat<S> vv = v.value();
  DenseMat<S> out = av.array().rowwise() * vv.row(0).array();
  return detail::make_op<S>(std::move(out), {a, v}, [pa, pv, av, vv](Node<S>& self) {
    if (pa->requires_grad)
      pa->grad.array() += self.grad.array().rowwise() * vv.row(0).array();
    if (pv->requires_grad)
      pv->grad.row(0) += (self.grad.array() * av.array()).colwise().sum().matrix();
  });
}

template <class S>
Var<S> concat_rows(const std::vector<Var<S>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: empty input");
  Eigen::Index cols = parts[0].cols();
  Eigen::Index rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != cols) throw std::invalid_argument("concat_rows: column mismatch");
    rows += p.rows();
  }
  DenseMat<S> out(rows, cols);
  Eigen::Index r = 0;
  std::vector<Eigen::Index> offsets;
  for (const auto& p : parts) {
    offsets.push_back(r);
    out.middleRows(r, p.rows()) = p.value();
    r += p.rows();
  }
  std::vector<Node<S>*> raw;
  for (const auto& p : parts) raw.push_back(p.node().get());
  return detail::make_op<S>(std::move(out), parts, [raw, offsets](Node<S>& self) {
    for (std::size_t i = 0; i < raw.size(); ++i) {
      if (raw[i]->requires_grad) {
        raw[i]->grad += self.grad.middleRows(offsets[i], raw[i]->value.rows());
      }
    }
  });
}

template <class S>
Var<S> concat_cols(const std::vector<Var<S>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: empty input");
  Eigen::Index rows = parts[0].rows();
  Eigen::Index cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw std::invalid_argument("concat_cols: row mismatch");
    cols += p.cols();
  }
  DenseMat<S> out(rows, cols);
  Eigen::Index c = 0;
  std::vector<Eigen::Index> offsets;
  for (const auto& p : parts) {
    offsets.push_back(c);
    out.middleCols(c, p.cols()) = p.value();
    c += p.cols();
  }
  std::vector<Node<S>*> raw;
  for (const auto& p : parts) raw.push_back(p.node().get());
  return detail::make_op<S>(std::move(out), parts, [raw, offsets](Node<S>& self) {
    for (std::size_t i = 0; i < raw.size(); ++i) {
      if (raw[i]->requires_grad) {
        raw[i]->grad += self.grad.middleCols(offsets[i], raw[i]->value.cols());
      }
    }
  });
}

template <class S>
Var<S> slice_rows(const Var<S>& a, Eigen::Index start, Eigen::Index n) {
  if (start < 0 || n < 0 || start + n > a.rows()) {
    throw std::invalid_argument("slice_rows: range out of bounds");
  }
  auto pa = a.node().get();
  return detail::make_op<S>(a.value().middleRows(start, n), {a},
                            [pa, start, n](Node<S>& self) {
                              if (pa->requires_grad)
                                pa->grad.middleRows(start, n) += self.grad;
                            });
}

template <class S>
Var<S> slice_cols(const Var<S>& a, Eigen::Index start, Eigen::Index n) {
  if (start < 0 || n < 0 || start + n > a.cols()) {
    throw std::invalid_argument("slice_cols: range out of bounds");
  }
  auto pa = a.node().get();
  return detail::make_op<S>(a.value().middleCols(start, n), {a},
                            [pa, start, n](Node<S>& self) {
                              if (pa->requires_grad)
                                pa->grad.middleCols(start, n) += self.grad;
                            });
}

// Row gather; duplicate indices accumulate gradient, which is what embedding
// lookups need.
template <class S>
Var<S> gather_rows(const Var<S>& a, std::vector<Eigen::Index> idx) {
  for (Eigen::Index i : idx) {
    if (i < 0 || i >= a.rows()) throw std::invalid_argument("gather_rows: index out of range");
  }
  DenseMat<S> out(static_cast<Eigen::Index>(idx.size()), a.cols());
  for (std::size_t r = 0; r < idx.size(); ++r) out.row(r) = a.value().row(idx[r]);
  auto pa = a.node().get();
  return detail::make_op<S>(std::move(out), {a}, [pa, idx](Node<S>& self) {
    if (!pa->requires_grad) return;
    for (std::size_t r = 0; r < idx.size(); ++r) {
      pa->grad.row(idx[r]) += self.grad.row(r);
    }
  });
}

template <class S>
Var<S> sigmoid(const Var<S>& a) {
  DenseMat<S> out = a.value().unaryExpr([](S x) {
    return x >= S(0) ? S(1) / (S(1) + std::exp(-x)) : std::exp(x) / (S(1) + std::exp(x));
  });
  auto pa = a.node().get();
  return detail::make_op<S>(out, {a}, [pa, out](Node<S>& self) {
    if (pa->requires_grad)
      pa->grad.array() += self.grad.array() * out.array() * (S(1) - out.array());
  });
}

template <class S>
Var<S> tanh_act(const Var<S>& a) {
  DenseMat<S> out = a.value().unaryExpr([](S x) { return std::tanh(x); });
  auto pa = a.node().get();
  return detail::make_op<S>(out, {a}, [pa, out](Node<S>& self) {
    if (pa->requires_grad)
      pa->grad.array() += self.grad.array() * (S(1) - out.array().square());
  });
}

// Exact GELU: x * Phi(x).
template <class S>
Var<S> gelu(const Var<S>& a) {
  DenseMat<S> av = a.value();
  DenseMat<S> out = av.unaryExpr([](S x) {
    return x * S(0.5) * (S(1) + std::erf(x * S(0.70710678118654752440)));
  });
  auto pa = a.node().get();
  return detail::make_op<S>(std::move(out), {a}, [pa, av](Node<S>& self) {
    if (!pa->requires_grad) return;
    pa->grad.array() +=
        self.grad.array() * av.unaryExpr([](S x) {
                              const S phi = S(0.5) * (S(1) + std::erf(x * S(0.70710678118654752440)));
                              const S pdf = std::exp(-x * x / S(2)) * S(0.39894228040143267794);
                              return phi + x * pdf;
                            }).array();
  });
}

template <class S>
Var<S> row_softmax(const Var<S>& a) {
  DenseMat<S> out(a.rows(), a.cols());
  for (Eigen::Index r = 0; r < a.rows(); ++r) {
    const S m = a.value().row(r).maxCoeff();
    Eigen::Array<S, 1, Eigen::Dynamic> e = (a.value().row(r).array() - m).exp();
    out.row(r) = (e / e.sum()).matrix();
  }
  auto pa = a.node().get();
  return detail::make_op<S>(out, {a}, [pa, out](Node<S>& self) {
    if (!pa->requires_grad) return;
    for (Eigen::Index r = 0; r < out.rows(); ++r) {
      const S dot = self.grad.row(r).cwiseProduct(out.row(r)).sum();
      pa->grad.row(r).array() +=
          out.row(r).array() * (self.grad.row(r).array() - dot);
    }
  });
}

// Softmax over allowed entries only. Disallowed entries get exactly zero
// weight; a fully-disallowed row yields an all-zero row instead of NaN.
template <class S>
Var<S> masked_row_softmax(const Var<S>& a, const BoolMask& allow) {
  if (allow.rows() != a.rows() || allow.cols() != a.cols()) {
    throw std::invalid_argument("masked_row_softmax: mask shape mismatch");
  }
  DenseMat<S> out = DenseMat<S>::Zero(a.rows(), a.cols());
  for (Eigen::Index r = 0; r < a.rows(); ++r) {
    S m = std::numeric_limits<S>::lowest();
    bool any = false;
    for (Eigen::Index c = 0; c < a.cols(); ++c) {
      if (allow(r, c)) {
        any = true;
        m = std::max(m, a.value()(r, c));
      }
    }
    if (!any) continue;
    S sum = S(0);
    for (Eigen::Index c = 0; c < a.cols(); ++c) {
      if (allow(r, c)) {
        out(r, c) = std::exp(a.value()(r, c) - m);
        sum += out(r, c);
      }
    }
    out.row(r) /= sum;
  }
  auto pa = a.node().get();
  return detail::make_op<S>(out, {a}, [pa, out](Node<S>& self) {
    if (!pa->requires_grad) return;
    for (Eigen::Index r = 0; r < out.rows(); ++r) {
      const S dot = self.grad.row(r).cwiseProduct(out.row(r)).sum();
      pa->grad.row(r).array() +=
          out.row(r).array() * (self.grad.row(r).array() - dot);
    }
  });
}

// Per-row normalization to mean 0, variance 1 (before any affine).
template <class S>
Var<S> layer_norm_rows(const Var<S>& a, S eps = S(1e-5)) {
  const Eigen::Index C = a.cols();
  DenseMat<S> out(a.rows(), C);
  DenseMat<S> inv_std(a.rows(), 1);
  for (Eigen::Index r = 0; r < a.rows(); ++r) {
    const S mean = a.value().row(r).mean();
    Eigen::Array<S, 1, Eigen::Dynamic> centered = a.value().row(r).array() - mean;
    const S var = centered.square().sum() / S(C);
    const S is = S(1) / std::sqrt(var + eps);
    inv_std(r, 0) = is;
    out.row(r) = (centered * is).matrix();
  }
  auto pa = a.node().get();
  return detail::make_op<S>(out, {a}, [pa, out, inv_std, C](Node<S>& self) {
    if (!pa->requires_grad) return;
    for (Eigen::Index r = 0; r < out.rows(); ++r) {
      const S gmean = self.grad.row(r).mean();
      const S gydot = self.grad.row(r).cwiseProduct(out.row(r)).sum() / S(C);
      pa->grad.row(r).array() +=
          inv_std(r, 0) *
          (self.grad.row(r).array() - gmean - out.row(r).array() * gydot);
    }
  });
}

template <class S>
Var<S> sum_all(const Var<S>& a) {
  DenseMat<S> out(1, 1);
  out(0, 0) = a.value().sum();
  auto pa = a.node().get();
  return detail::make_op<S>(out, {a}, [pa](Node<S>& self) {
    if (pa->requires_grad)
      pa->grad.array() += self.grad(0, 0);
  });
}

template <class S>
Var<S> mean_all(const Var<S>& a) {
  const S n = static_cast<S>(a.rows() * a.cols());
  DenseMat<S> out(1, 1);
  out(0, 0) = a.value().sum() / n;
  auto pa = a.node().get();
  return detail::make_op<S>(out, {a}, [pa, n](Node<S>& self) {
    if (pa->requires_grad)
      pa->grad.array() += self.grad(0, 0) / n;
  });
}

// Mean over rows of the negative log-likelihood of each row's target class.
template <class S>
Var<S> cross_entropy_rows(const Var<S>& logits, const std::vector<int>& targets) {
  if (static_cast<Eigen::Index>(targets.size()) != logits.rows()) {
    throw std::invalid_argument("cross_entropy_rows: one target per row required");
  }
  const Eigen::Index R = logits.rows();
  DenseMat<S> probs(R, logits.cols());
  S total = S(0);
  for (Eigen::Index r = 0; r < R; ++r) {
    if (targets[r] < 0 || targets[r] >= logits.cols()) {
      throw std::invalid_argument("cross_entropy_rows: target out of range");
    }
    const S m = logits.value().row(r).maxCoeff();
    Eigen::Array<S, 1, Eigen::Dynamic> e = (logits.value().row(r).array() - m).exp();
    const S z = e.sum();
    probs.row(r) = (e / z).matrix();
    total += std::log(z) + m - logits.value()(r, targets[r]);
  }
  DenseMat<S> out(1, 1);
  out(0, 0) = total / static_cast<S>(R);
  auto pl = logits.node().get();
  return detail::make_op<S>(out, {logits}, [pl, probs, targets, R](Node<S>& self) {
    if (!pl->requires_grad) return;
    const S g = self.grad(0, 0) / static_cast<S>(R);
    for (Eigen::Index r = 0; r < R; ++r) {
      pl->grad.row(r) += probs.row(r) * g;
      pl->grad(r, targets[r]) -= g;
    }
  });
}

// Binary cross-entropy on logits, summed across each row, averaged over rows.
template <class S>
Var<S> bce_logits_rowsum_mean(const Var<S>& logits, const DenseMat<S>& targets) {
  if (targets.rows() != logits.rows() || targets.cols() != logits.cols()) {
    throw std::invalid_argument("bce_logits_rowsum_mean: target shape mismatch");
  }
  const Eigen::Index R = logits.rows();
  S total = S(0);
  for (Eigen::Index r = 0; r < R; ++r) {
    for (Eigen::Index c = 0; c < logits.cols(); ++c) {
      const S z = logits.value()(r, c);
      const S t = targets(r, c);
      total += std::max(z, S(0)) - z * t + std::log1p(std::exp(-std::abs(z)));
    }
  }
  DenseMat<S> out(1, 1);
  out(0, 0) = total / static_cast<S>(R);
  auto pl = logits.node().get();
  DenseMat<S> lv = logits.value();
  return detail::make_op<S>(out, {logits}, [pl, lv, targets, R](Node<S>& self) {
    if (!pl->requires_grad) return;
    const S g = self.grad(0, 0) / static_cast<S>(R);
    pl->grad.array() += (lv.unaryExpr([](S z) {
                           return z >= S(0) ? S(1) / (S(1) + std::exp(-z))
                                            : std::exp(z) / (S(1) + std::exp(z));
                         }).array() -
                        targets.array()) *
                        g;
  });
}

// Squared L2 distance summed across each row, averaged over rows.
template <class S>
Var<S> l2_rowsum_mean(const Var<S>& pred, const DenseMat<S>& target) {
  if (target.rows() != pred.rows() || target.cols() != pred.cols()) {
    throw std::invalid_argument("l2_rowsum_mean: target shape mismatch");
  }
  const Eigen::Index R = pred.rows();
  DenseMat<S> diff = pred.value() - target;
  DenseMat<S> out(1, 1);
  out(0, 0) = diff.array().square().sum() / static_cast<S>(R);
  auto pp = pred.node().get();
  return detail::make_op<S>(out, {pred}, [pp, diff, R](Node<S>& self) {
    if (pp->requires_grad)
      pp->grad += diff * (S(2) * self.grad(0, 0) / static_cast<S>(R));
  });
}

// Inverted dropout. p = 0 is the identity; the mask comes from the caller's
// RNG stream so runs stay reproducible.
template <class S>
Var<S> dropout(const Var<S>& a, double p, Rng& rng) {
  if (p <= 0.0) return a;
  if (p >= 1.0) throw std::invalid_argument("dropout: p must be < 1");
  DenseMat<S> mask(a.rows(), a.cols());
  const S keep = S(1) - static_cast<S>(p);
  for (Eigen::Index r = 0; r < a.rows(); ++r) {
    for (Eigen::Index c = 0; c < a.cols(); ++c) {
      mask(r, c) = rng.uniform() < p ? S(0) : S(1) / keep;
    }
  }
  auto pa = a.node().get();
  return detail::make_op<S>((a.value().array() * mask.array()).matrix(), {a},
                            [pa, mask](Node<S>& self) {
                              if (pa->requires_grad)
                                pa->grad.array() += self.grad.array() * mask.array();
                            });
}

// Scaled dot-product attention over A head slices of pre-projected Q/K/V.
// allow(q, k) == false forces weight exactly 0; a fully-disallowed query row
// produces a zero output row.
template <class S>
Var<S> multi_head_attention(const Var<S>& q, const Var<S>& k, const Var<S>& v,
                            const BoolMask& allow, int heads) {
  if (q.cols() != k.cols() || k.cols() != v.cols()) {
    throw std::invalid_argument("multi_head_attention: width mismatch");
  }
  if (k.rows() != v.rows()) {
    throw std::invalid_argument("multi_head_attention: key/value length mismatch");
  }
  if (heads < 1 || q.cols() % heads != 0) {
    throw std::invalid_argument("multi_head_attention: width not divisible by heads");
  }
  if (allow.rows() != q.rows() || allow.cols() != k.rows()) {
    throw std::invalid_argument("multi_head_attention: mask shape mismatch");
  }
  const Eigen::Index hd = q.cols() / heads;
  const S inv_sqrt = S(1) / std::sqrt(static_cast<S>(hd));
  std::vector<Var<S>> outs;
  outs.reserve(heads);
  for (int h = 0; h < heads; ++h) {
    Var<S> qh = slice_cols(q, h * hd, hd);
    Var<S> kh = slice_cols(k, h * hd, hd);
    Var<S> vh = slice_cols(v, h * hd, hd);
    Var<S> scores = scale(matmul_nt(qh, kh), inv_sqrt);
    Var<S> w = masked_row_softmax(scores, allow);
    outs.push_back(matmul(w, vh));
  }
  return heads == 1 ? outs[0] : concat_cols(outs);
}

// ---------------------------------------------------------------------------
// grad(): gradients of a scalar loss w.r.t. an explicit parameter list.

template <class S>
struct GradResult {
  std::vector<DenseMat<S>> grads;   // aligned with the params argument
  std::vector<bool> in_graph;       // false -> param unreachable, grad is zero
  bool all_in_graph = true;
};

template <class S>
GradResult<S> grad(const Var<S>& loss, const std::vector<Var<S>>& params) {
  for (const auto& p : params) p.node()->grad.setZero(p.rows(), p.cols());
  loss.backward();
  GradResult<S> out;
  for (const auto& p : params) {
    out.grads.push_back(p.grad());
    out.in_graph.push_back(true);
  }
  // Reachability is reported structurally, not by grad magnitude.
  std::unordered_set<const Node<S>*> reachable;
  std::vector<const Node<S>*> stack{loss.node().get()};
  reachable.insert(loss.node().get());
  while (!stack.empty()) {
    const Node<S>* n = stack.back();
    stack.pop_back();
    for (const auto& p : n->parents) {
      if (!reachable.count(p.get())) {
        reachable.insert(p.get());
        stack.push_back(p.get());
      }
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    out.in_graph[i] = reachable.count(params[i].node().get()) > 0;
    out.all_in_graph = out.all_in_graph && out.in_graph[i];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Adam

template <class S>
struct AdamState {
  long step = 0;
  std::vector<DenseMat<S>> m, v;
  S lr = S(1e-3);
  S beta1 = S(0.9);
  S beta2 = S(0.999);
  S eps = S(1e-8);
};

template <class S>
void adam_init(AdamState<S>& state, const std::vector<Var<S>>& params) {
  state.step = 0;
  state.m.clear();
  state.v.clear();
  for (const auto& p : params) {
    state.m.push_back(DenseMat<S>::Zero(p.rows(), p.cols()));
    state.v.push_back(DenseMat<S>::Zero(p.rows(), p.cols()));
  }
}

// One bias-corrected Adam update; grads[i] pairs with params[i].
template <class S>
void adam_step(std::vector<Var<S>>& params, const std::vector<DenseMat<S>>& grads,
               AdamState<S>& state) {
  if (params.size() != grads.size() || params.size() != state.m.size()) {
    throw std::invalid_argument("adam_step: params/grads/state size mismatch");
  }
  if (state.lr <= S(0)) throw std::invalid_argument("adam_step: lr must be positive");
  state.step += 1;
  const S bc1 = S(1) - std::pow(state.beta1, static_cast<S>(state.step));
  const S bc2 = S(1) - std::pow(state.beta2, static_cast<S>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    const auto& g = grads[i];
    if (g.rows() != p.rows() || g.cols() != p.cols()) {
      throw std::invalid_argument("adam_step: gradient shape mismatch");
    }
    state.m[i] = state.beta1 * state.m[i] + (S(1) - state.beta1) * g;
    state.v[i] = (state.beta2 * state.v[i]).array() +
                 (S(1) - state.beta2) * g.array().square();
    DenseMat<S> mhat = state.m[i] / bc1;
    DenseMat<S> vhat = state.v[i] / bc2;
    p.value().array() -= state.lr * mhat.array() / (vhat.array().sqrt() + state.eps);
  }
}

// Convenience: reads grads straight from the parameter nodes.
template <class S>
void adam_step(std::vector<Var<S>>& params, AdamState<S>& state) {
  std::vector<DenseMat<S>> grads;
  grads.reserve(params.size());
  for (const auto& p : params) {
    if (p.grad().rows() != p.rows() || p.grad().cols() != p.cols()) {
      throw std::invalid_argument("adam_step: parameter has no gradient of matching shape");
    }
    grads.push_back(p.grad());
  }
  adam_step(params, grads, state);
}

// ---------------------------------------------------------------------------
// Checkpoint IO: versioned binary, name -> shape -> row-major payload.
// Entries are written sorted by name so files are canonical; round-trips are
// bit-exact.

inline constexpr char kCheckpointMagic[8] = {'S', 'D', 'V', 'C', 'K', 'P', 'T', '1'};

template <class S>
void save_checkpoint(const std::string& path,
                     const std::map<std::string, DenseMat<S>>& tensors) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("save_checkpoint: cannot open " + path);
  f.write(kCheckpointMagic, 8);
  const std::uint32_t version = 1;
  const std::uint32_t scalar_bytes = sizeof(S);
  const std::uint64_t count = tensors.size();
  f.write(reinterpret_cast<const char*>(&version), sizeof(version));
  f.write(reinterpret_cast<const char*>(&scalar_bytes), sizeof(scalar_bytes));
  f.write(reinterpret_cast<const char*>(&count), sizeof(count));
  for (const auto& [name, mat] : tensors) {
    const std::uint32_t len = static_cast<std::uint32_t>(name.size());
    const std::uint32_t rows = static_cast<std::uint32_t>(mat.rows());
    const std::uint32_t cols = static_cast<std::uint32_t>(mat.cols());
    f.write(reinterpret_cast<const char*>(&len), sizeof(len));
    f.write(name.data(), len);
    f.write(reinterpret_cast<const char*>(&rows), sizeof(rows));
    f.write(reinterpret_cast<const char*>(&cols), sizeof(cols));
    f.write(reinterpret_cast<const char*>(mat.data()),
            static_cast<std::streamsize>(sizeof(S) * mat.size()));
  }
  if (!f) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

template <class S>
std::map<std::string, DenseMat<S>> load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("load_checkpoint: cannot open " + path);
  char magic[8];
  f.read(magic, 8);
  if (!f || std::memcmp(magic, kCheckpointMagic, 8) != 0) {
    throw std::runtime_error("load_checkpoint: bad magic in " + path);
  }
  std::uint32_t version = 0, scalar_bytes = 0;
  std::uint64_t count = 0;
  f.read(reinterpret_cast<char*>(&version), sizeof(version));
  f.read(reinterpret_cast<char*>(&scalar_bytes), sizeof(scalar_bytes));
  f.read(reinterpret_cast<char*>(&count), sizeof(count));
  if (!f || version != 1) throw std::runtime_error("load_checkpoint: unsupported version");
  if (scalar_bytes != sizeof(S)) {
    throw std::runtime_error("load_checkpoint: scalar width mismatch");
  }
  std::map<std::string, DenseMat<S>> out;
  for (std::uint64_t i = 0; i < count; ++i) {
    std::uint32_t len = 0, rows = 0, cols = 0;
    f.read(reinterpret_cast<char*>(&len), sizeof(len));
    std::string name(len, '\0');
    f.read(name.data(), len);
    f.read(reinterpret_cast<char*>(&rows), sizeof(rows));
    f.read(reinterpret_cast<char*>(&cols), sizeof(cols));
    DenseMat<S> mat(rows, cols);
    f.read(reinterpret_cast<char*>(mat.data()),
           static_cast<std::streamsize>(sizeof(S) * mat.size()));
    if (!f) throw std::runtime_error("load_checkpoint: truncated file " + path);
    out.emplace(std::move(name), std::move(mat));
  }
  return out;
}

}  // namespace seqdvc::nn

namespace seqdvc {
using Scalar = double;
using Mat = nn::DenseMat<Scalar>;
using Var = nn::Var<Scalar>;
using AdamState = nn::AdamState<Scalar>;
using nn::BoolMask;
}  // namespace seqdvc
