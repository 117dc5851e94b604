#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "gaam/array.hpp"
#include "gaam/errors.hpp"

namespace gaam {

template <typename T>
struct Node;

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

// One vertex of the dynamically recorded graph. A node without a backward
// function is a leaf; leaves accumulate gradients across backward() calls,
// interior nodes are re-zeroed at the start of every call.
template <typename T>
struct Node {
  using BackwardFn = std::function<void(const Array<T>& grad_out, std::vector<NodePtr<T>>& parents)>;

  Array<T> value;
  Array<T> grad;
  bool requires_grad = false;
  std::vector<NodePtr<T>> parents;
  BackwardFn backward;
  const char* op = "leaf";

  bool has_grad() const noexcept { return grad.shape() == value.shape() && grad.size() == value.size(); }

  Array<T>& ensure_grad() {
    if (!has_grad()) grad = Array<T>(value.shape(), T(0));
    return grad;
  }
};

// Handle to a graph node; copies alias the same node. This is the library's
// differentiable tensor: a value, an optional same-shape gradient, and the
// requires_grad flag.
template <typename T>
class Var {
 public:
  Var() = default;

  explicit Var(Array<T> value, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
    if (!value.all_finite()) throw NumericError("Var: non-finite value in leaf");
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  static Var parameter(Array<T> value) { return Var(std::move(value), true); }

  explicit Var(NodePtr<T> node) : node_(std::move(node)) {}

  bool defined() const noexcept { return static_cast<bool>(node_); }

  const Array<T>& value() const { return node_->value; }
  // Direct write access for optimizers and finite-difference probes.
  Array<T>& mutable_value() { return node_->value; }

  const Shape& shape() const { return node_->value.shape(); }
  std::size_t size() const { return node_->value.size(); }
  T item() const { return node_->value.item(); }

  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return !node_->backward; }
  bool has_grad() const { return node_->has_grad(); }

  const Array<T>& grad() const {
    if (!node_->has_grad()) throw ContractError("Var::grad: no gradient has been populated");
    return node_->grad;
  }
  Array<T>& mutable_grad() { return node_->ensure_grad(); }

  void zero_grad() {
    if (node_->has_grad()) node_->grad.fill(T(0));
  }

  Var detach() const { return Var(node_->value, false); }

  const NodePtr<T>& node() const noexcept { return node_; }

 private:
  NodePtr<T> node_;
};

// Builds an interior node. Every completed operation is checked for
// non-finite output; gradient edges are only recorded when some input needs them.
template <typename T>
Var<T> make_op(const char* op, Array<T> value, std::vector<Var<T>> inputs, typename Node<T>::BackwardFn backward) {
  if (!value.all_finite()) throw NumericError(std::string("non-finite value produced by ") + op);
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  node->op = op;
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (any) {
    node->requires_grad = true;
    node->parents.reserve(inputs.size());
    for (const auto& in : inputs) node->parents.push_back(in.node());
    node->backward = std::move(backward);
  }
  return Var<T>(std::move(node));
}

// Reverse sweep from a scalar loss. Leaf gradients accumulate.
template <typename T>
void backward(const Var<T>& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw ContractError("backward: loss must be a scalar, got shape " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) return;

  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{loss.node().get(), 0}};
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (Node<T>* n : order) {
    if (n->backward) n->grad = Array<T>(n->value.shape(), T(0));
  }
  loss.node()->ensure_grad()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward) n->backward(n->grad, n->parents);
  }
}

namespace detail {

template <typename T>
inline Array<T>* grad_slot(std::vector<NodePtr<T>>& parents, std::size_t i) {
  return parents[i]->requires_grad ? &parents[i]->ensure_grad() : nullptr;
}

// Sum `g` (shaped like the broadcast output) back down to `target` shape.
template <typename T>
void accumulate_reduced(Array<T>& dst, const Array<T>& g, const Shape& out_shape) {
  if (dst.shape() == out_shape) {
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
    return;
  }
  const auto sd = broadcast_strides(dst.shape(), out_shape);
  const std::vector<std::size_t> none(out_shape.size(), 0);
  for_each_broadcast(out_shape, sd, none, [&](std::size_t i, std::size_t id, std::size_t) { dst[id] += g[i]; });
}

template <typename T, typename F, typename DF>
Var<T> unary(const char* op, const Var<T>& x, F f, DF df) {
  const Array<T>& xv = x.value();
  Array<T> out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  return make_op<T>(op, std::move(out), {x}, [df](const Array<T>& g, std::vector<NodePtr<T>>& ps) {
    Array<T>& gx = ps[0]->ensure_grad();
    const Array<T>& xv = ps[0]->value;
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * df(xv[i]);
  });
}

enum class BinOp { kAdd, kSub, kMul, kDiv };

template <typename T>
Var<T> binary(BinOp kind, const Var<T>& a, const Var<T>& b) {
  static constexpr const char* names[] = {"add", "sub", "mul", "div"};
  const Array<T>& av = a.value();
  const Array<T>& bv = b.value();
  const Shape out_shape = broadcast_shapes(av.shape(), bv.shape());
  Array<T> out(out_shape);
  auto apply = [kind](T x, T y) {
    switch (kind) {
      case BinOp::kAdd: return x + y;
      case BinOp::kSub: return x - y;
      case BinOp::kMul: return x * y;
      default: return x / y;
    }
  };
  const bool same = av.shape() == bv.shape();
  if (same) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = apply(av[i], bv[i]);
  } else {
    for_each_broadcast(out_shape, broadcast_strides(av.shape(), out_shape), broadcast_strides(bv.shape(), out_shape),
                       [&](std::size_t i, std::size_t ia, std::size_t ib) { out[i] = apply(av[ia], bv[ib]); });
  }
  return make_op<T>(names[static_cast<int>(kind)], std::move(out), {a, b},
                    [kind, out_shape, same](const Array<T>& g, std::vector<NodePtr<T>>& ps) {
                      const Array<T>& av = ps[0]->value;
                      const Array<T>& bv = ps[1]->value;
                      Array<T>* ga = grad_slot(ps, 0);
                      Array<T>* gb = grad_slot(ps, 1);
                      if (kind == BinOp::kAdd || kind == BinOp::kSub) {
                        if (ga) accumulate_reduced(*ga, g, out_shape);
                        if (gb) {
                          if (kind == BinOp::kAdd) {
                            accumulate_reduced(*gb, g, out_shape);
                          } else {
                            Array<T> neg = g;
                            for (auto& v : neg.storage()) v = -v;
                            accumulate_reduced(*gb, neg, out_shape);
                          }
                        }
                        return;
                      }
                      auto body = [&](std::size_t i, std::size_t ia, std::size_t ib) {
                        if (kind == BinOp::kMul) {
                          if (ga) (*ga)[ia] += g[i] * bv[ib];
                          if (gb) (*gb)[ib] += g[i] * av[ia];
                        } else {
                          if (ga) (*ga)[ia] += g[i] / bv[ib];
                          if (gb) (*gb)[ib] -= g[i] * av[ia] / (bv[ib] * bv[ib]);
                        }
                      };
                      if (same) {
                        for (std::size_t i = 0; i < g.size(); ++i) body(i, i, i);
                      } else {
                        for_each_broadcast(out_shape, broadcast_strides(av.shape(), out_shape),
                                           broadcast_strides(bv.shape(), out_shape), body);
                      }
                    });
}

}  // namespace detail

// ---- elementwise -------------------------------------------------------------

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  return detail::binary(detail::BinOp::kAdd, a, b);
}
template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  return detail::binary(detail::BinOp::kSub, a, b);
}
template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  return detail::binary(detail::BinOp::kMul, a, b);
}
template <typename T>
Var<T> div(const Var<T>& a, const Var<T>& b) {
  return detail::binary(detail::BinOp::kDiv, a, b);
}

template <typename T>
Var<T> operator+(const Var<T>& a, const Var<T>& b) { return add(a, b); }
template <typename T>
Var<T> operator-(const Var<T>& a, const Var<T>& b) { return sub(a, b); }
template <typename T>
Var<T> operator*(const Var<T>& a, const Var<T>& b) { return mul(a, b); }
template <typename T>
Var<T> operator/(const Var<T>& a, const Var<T>& b) { return div(a, b); }

template <typename T>
Var<T> scale(const Var<T>& x, T c) {
  return detail::unary("scale", x, [c](T v) { return v * c; }, [c](T) { return c; });
}

template <typename T>
Var<T> add_scalar(const Var<T>& x, T c) {
  return detail::unary("add_scalar", x, [c](T v) { return v + c; }, [](T) { return T(1); });
}

template <typename T>
Var<T> neg(const Var<T>& x) {
  return scale(x, T(-1));
}
template <typename T>
Var<T> operator-(const Var<T>& x) { return neg(x); }

template <typename T>
Var<T> exp(const Var<T>& x) {
  return detail::unary("exp", x, [](T v) { return std::exp(v); }, [](T v) { return std::exp(v); });
}

template <typename T>
Var<T> log(const Var<T>& x) {
  return detail::unary("log", x, [](T v) { return std::log(v); }, [](T v) { return T(1) / v; });
}

template <typename T>
Var<T> sqrt(const Var<T>& x) {
  return detail::unary("sqrt", x, [](T v) { return std::sqrt(v); }, [](T v) { return T(0.5) / std::sqrt(v); });
}

template <typename T>
Var<T> square(const Var<T>& x) {
  return detail::unary("square", x, [](T v) { return v * v; }, [](T v) { return T(2) * v; });
}

template <typename T>
Var<T> abs(const Var<T>& x) {
  return detail::unary("abs", x, [](T v) { return std::abs(v); },
                       [](T v) { return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)); });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  return detail::unary("relu", x, [](T v) { return v > T(0) ? v : T(0); }, [](T v) { return v > T(0) ? T(1) : T(0); });
}

// x^p for a constant exponent, x > 0 expected when p is fractional.
template <typename T>
Var<T> pow(const Var<T>& x, T p) {
  return detail::unary("pow", x, [p](T v) { return std::pow(v, p); },
                       [p](T v) { return p == T(0) ? T(0) : p * std::pow(v, p - T(1)); });
}

// ---- shape ops ---------------------------------------------------------------

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  Array<T> out = x.value().reshaped(std::move(shape));
  return make_op<T>("reshape", std::move(out), {x}, [](const Array<T>& g, std::vector<NodePtr<T>>& ps) {
    Array<T>& gx = ps[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

template <typename T>
Var<T> transpose(const Var<T>& x) {
  if (x.value().rank() != 2) throw DimensionError("transpose: expected 2-D, got " + shape_str(x.shape()));
  const std::size_t r = x.shape()[0], c = x.shape()[1];
  Array<T> out({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = x.value()[i * c + j];
  return make_op<T>("transpose", std::move(out), {x}, [r, c](const Array<T>& g, std::vector<NodePtr<T>>& ps) {
    Array<T>& gx = ps[0]->ensure_grad();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += g[j * r + i];
  });
}

template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ContractError("concat: no inputs");
  Shape out_shape = parts[0].shape();
  if (axis >= out_shape.size()) throw DimensionError("concat: axis out of range for " + shape_str(out_shape));
  std::vector<std::size_t> extents;
  std::size_t total = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != out_shape.size()) throw DimensionError("concat: rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != axis && s[i] != out_shape[i]) {
        throw DimensionError("concat: " + shape_str(s) + " incompatible with " + shape_str(out_shape));
      }
    }
    extents.push_back(s[axis]);
    total += s[axis];
  }
  out_shape[axis] = total;
  const AxisSplit sp = split_axis(out_shape, axis);
  Array<T> out(out_shape);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Array<T>& pv = parts[k].value();
    const std::size_t run = extents[k] * sp.inner;
    for (std::size_t o = 0; o < sp.outer; ++o) {
      std::copy_n(pv.data().begin() + o * run, run, out.data().begin() + o * sp.extent * sp.inner + offset * sp.inner);
    }
    offset += extents[k];
  }
  return make_op<T>("concat", std::move(out), parts, [sp, extents](const Array<T>& g, std::vector<NodePtr<T>>& ps) {
    std::size_t offset = 0;
    for (std::size_t k = 0; k < ps.size(); ++k) {
      const std::size_t run = extents[k] * sp.inner;
      if (ps[k]->requires_grad) {
        Array<T>& gk = ps[k]->ensure_grad();
        for (std::size_t o = 0; o < sp.outer; ++o) {
          const std::size_t src = o * sp.extent * sp.inner + offset * sp.inner;
          for (std::size_t i = 0; i < run; ++i) gk[o * run + i] += g[src + i];
        }
      }
      offset += extents[k];
    }
  });
}

// Half-open range [begin, end) along `axis`.
template <typename T>
Var<T> slice(const Var<T>& x, std::size_t axis, std::size_t begin, std::size_t end) {
  const AxisSplit sp = split_axis(x.shape(), axis);
  if (begin > end || end > sp.extent) {
    throw DimensionError("slice: [" + std::to_string(begin) + "," + std::to_string(end) + ") outside extent " +
                         std::to_string(sp.extent));
  }
  Shape out_shape = x.shape();
  out_shape[axis] = end - begin;
  const std::size_t run = (end - begin) * sp.inner;
  Array<T> out(out_shape);
  for (std::size_t o = 0; o < sp.outer; ++o) {
    std::copy_n(x.value().data().begin() + (o * sp.extent + begin) * sp.inner, run, out.data().begin() + o * run);
  }
  return make_op<T>("slice", std::move(out), {x}, [sp, begin, run](const Array<T>& g, std::vector<NodePtr<T>>& ps) {
    Array<T>& gx = ps[0]->ensure_grad();
    for (std::size_t o = 0; o < sp.outer; ++o) {
      const std::size_t dst = (o * sp.extent + begin) * sp.inner;
      for (std::size_t i = 0; i < run; ++i) gx[dst + i] += g[o * run + i];
    }
  });
}

// ---- reductions --------------------------------------------------------------

template <typename T>
Var<T> sum(const Var<T>& x) {
  T s = T(0);
  for (T v : x.value().data()) s += v;
  return make_op<T>("sum", Array<T>::scalar(s), {x}, [](const Array<T>& g, std::vector<NodePtr<T>>& ps) {
    Array<T>& gx = ps[0]->ensure_grad();
    for (auto& v : gx.storage()) v += g[0];
  });
}

template <typename T>
Var<T> mean(const Var<T>& x) {
  if (x.size() == 0) throw DimensionError("mean: empty tensor");
  return scale(sum(x), T(1) / static_cast<T>(x.size()));
}

namespace detail {

template <typename T>
Var<T> reduce_axis(const char* op, const Var<T>& x, std::size_t axis, bool keepdim, bool average) {
  const AxisSplit sp = split_axis(x.shape(), axis);
  if (sp.extent == 0) throw DimensionError(std::string(op) + ": zero-extent axis " + std::to_string(axis));
  Shape out_shape = x.shape();
  if (keepdim) {
    out_shape[axis] = 1;
  } else {
    out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  }
  const T factor = average ? T(1) / static_cast<T>(sp.extent) : T(1);
  Array<T> out(out_shape);
  const Array<T>& xv = x.value();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t k = 0; k < sp.extent; ++k) {
      const std::size_t base = (o * sp.extent + k) * sp.inner;
      for (std::size_t i = 0; i < sp.inner; ++i) out[o * sp.inner + i] += xv[base + i];
    }
  }
  if (average) {
    for (auto& v : out.storage()) v *= factor;
  }
  return make_op<T>(op, std::move(out), {x}, [sp, factor](const Array<T>& g, std::vector<NodePtr<T>>& ps) {
    Array<T>& gx = ps[0]->ensure_grad();
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t k = 0; k < sp.extent; ++k) {
        const std::size_t base = (o * sp.extent + k) * sp.inner;
        for (std::size_t i = 0; i < sp.inner; ++i) gx[base + i] += g[o * sp.inner + i] * factor;
      }
    }
  });
}

}  // namespace detail

template <typename T>
Var<T> reduce_sum(const Var<T>& x, std::size_t axis, bool keepdim = false) {
  return detail::reduce_axis("reduce_sum", x, axis, keepdim, false);
}

template <typename T>
Var<T> reduce_mean(const Var<T>& x, std::size_t axis, bool keepdim = false) {
  return detail::reduce_axis("reduce_mean", x, axis, keepdim, true);
}

// Max-subtracted softmax along `axis`.
template <typename T>
Var<T> softmax(const Var<T>& x, std::size_t axis) {
  const AxisSplit sp = split_axis(x.shape(), axis);
  if (sp.extent == 0) throw DimensionError("softmax: empty axis");
  const Array<T>& xv = x.value();
  Array<T> out(x.shape());
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.extent * sp.inner + i;
      T m = xv[base];
      for (std::size_t k = 1; k < sp.extent; ++k) m = std::max(m, xv[base + k * sp.inner]);
      T z = T(0);
      for (std::size_t k = 0; k < sp.extent; ++k) {
        const T e = std::exp(xv[base + k * sp.inner] - m);
        out[base + k * sp.inner] = e;
        z += e;
      }
      for (std::size_t k = 0; k < sp.extent; ++k) out[base + k * sp.inner] /= z;
    }
  }
  Array<T> y = out;
  return make_op<T>("softmax", std::move(out), {x}, [sp, y](const Array<T>& g, std::vector<NodePtr<T>>& ps) {
    Array<T>& gx = ps[0]->ensure_grad();
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t i = 0; i < sp.inner; ++i) {
        const std::size_t base = o * sp.extent * sp.inner + i;
        T dot = T(0);
        for (std::size_t k = 0; k < sp.extent; ++k) dot += g[base + k * sp.inner] * y[base + k * sp.inner];
        for (std::size_t k = 0; k < sp.extent; ++k) {
          const std::size_t idx = base + k * sp.inner;
          gx[idx] += y[idx] * (g[idx] - dot);
        }
      }
    }
  });
}

// ---- linear algebra ----------------------------------------------------------

namespace detail {

// c (m x n) += a (m x k) * b (k x n), with optional transposes of the stored operands.
template <typename T>
void gemm_acc(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n, bool ta, bool tb) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const T av = ta ? a[p * m + i] : a[i * k + p];
      if (av == T(0)) continue;
      T* crow = c + i * n;
      if (tb) {
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * b[j * k + p];
      } else {
        const T* brow = b + p * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  }
}

}  // namespace detail

// 2-D product, or a batched product when both operands are 3-D with equal leading extent.
template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  const bool batched = sa.size() == 3 && sb.size() == 3;
  if (!batched && (sa.size() != 2 || sb.size() != 2)) {
    throw DimensionError("matmul: expected 2-D or batched 3-D operands, got " + shape_str(sa) + " x " + shape_str(sb));
  }
  const std::size_t batch = batched ? sa[0] : 1;
  if (batched && sb[0] != batch) throw DimensionError("matmul: batch extents differ");
  const std::size_t m = sa[sa.size() - 2], k = sa.back(), k2 = sb[sb.size() - 2], n = sb.back();
  if (k != k2) throw DimensionError("matmul: inner extents " + shape_str(sa) + " x " + shape_str(sb));
  Shape out_shape = batched ? Shape{batch, m, n} : Shape{m, n};
  Array<T> out(out_shape);
  for (std::size_t bi = 0; bi < batch; ++bi) {
    detail::gemm_acc(a.value().data().data() + bi * m * k, b.value().data().data() + bi * k * n,
                     out.data().data() + bi * m * n, m, k, n, false, false);
  }
  return make_op<T>("matmul", std::move(out), {a, b}, [batch, m, k, n](const Array<T>& g, std::vector<NodePtr<T>>& ps) {
    const Array<T>& av = ps[0]->value;
    const Array<T>& bv = ps[1]->value;
    Array<T>* ga = detail::grad_slot(ps, 0);
    Array<T>* gb = detail::grad_slot(ps, 1);
    for (std::size_t bi = 0; bi < batch; ++bi) {
      const T* gp = g.data().data() + bi * m * n;
      // dA = dC * B^T ; dB = A^T * dC
      if (ga) detail::gemm_acc(gp, bv.data().data() + bi * k * n, ga->data().data() + bi * m * k, m, n, k, false, true);
      if (gb) detail::gemm_acc(av.data().data() + bi * m * k, gp, gb->data().data() + bi * k * n, k, m, n, true, false);
    }
  });
}

// Stride-1 2-D convolution with zero padding.
// input (C_in, H, W), weight (C_out, C_in, K, K), bias (C_out) -> (C_out, H + 2P - K + 1, W + 2P - K + 1).
template <typename T>
Var<T> conv2d(const Var<T>& input, const Var<T>& weight, const Var<T>& bias, std::size_t padding) {
  const Shape& si = input.shape();
  const Shape& sw = weight.shape();
  if (si.size() != 3 || sw.size() != 4 || sw[2] != sw[3]) {
    throw DimensionError("conv2d: expected input (C,H,W) and square weight (O,C,K,K), got " + shape_str(si) + ", " +
                         shape_str(sw));
  }
  if (sw[1] != si[0]) throw DimensionError("conv2d: weight expects " + std::to_string(sw[1]) + " input channels");
  if (bias.shape() != Shape{sw[0]}) throw DimensionError("conv2d: bias must have shape (" + std::to_string(sw[0]) + ")");
  const std::size_t cin = si[0], h = si[1], w = si[2], cout = sw[0], ks = sw[2];
  if (h == 0 || w == 0) throw DimensionError("conv2d: empty input map");
  if (h + 2 * padding < ks || w + 2 * padding < ks) throw DimensionError("conv2d: kernel larger than padded input");
  const std::size_t oh = h + 2 * padding - ks + 1, ow = w + 2 * padding - ks + 1;

  const std::size_t hp = h + 2 * padding, wp = w + 2 * padding;

  // Zero-padded copy of the input so the inner loops need no border checks.
  auto padded = std::make_shared<std::vector<T>>(cin * hp * wp, T(0));
  {
    const T* in = input.value().data().data();
    for (std::size_t c = 0; c < cin; ++c) {
      for (std::size_t y = 0; y < h; ++y) {
        std::copy_n(in + (c * h + y) * w, w, padded->data() + (c * hp + y + padding) * wp + padding);
      }
    }
  }

  Array<T> out({cout, oh, ow});
  const T* wt = weight.value().data().data();
  const T* bs = bias.value().data().data();
  T* op = out.data().data();
  for (std::size_t o = 0; o < cout; ++o) {
    T* oplane = op + o * oh * ow;
    std::fill(oplane, oplane + oh * ow, bs[o]);
    for (std::size_t c = 0; c < cin; ++c) {
      const T* pplane = padded->data() + c * hp * wp;
      const T* wk = wt + (o * cin + c) * ks * ks;
      for (std::size_t y = 0; y < oh; ++y) {
        T* orow = oplane + y * ow;
        for (std::size_t ky = 0; ky < ks; ++ky) {
          const T* prow = pplane + (y + ky) * wp;
          if (ks == 3) {
            const T w0 = wk[ky * 3], w1 = wk[ky * 3 + 1], w2 = wk[ky * 3 + 2];
            for (std::size_t x = 0; x < ow; ++x) orow[x] += w0 * prow[x] + w1 * prow[x + 1] + w2 * prow[x + 2];
          } else {
            for (std::size_t kx = 0; kx < ks; ++kx) {
              const T wv = wk[ky * ks + kx];
              for (std::size_t x = 0; x < ow; ++x) orow[x] += wv * prow[x + kx];
            }
          }
        }
      }
    }
  }

  return make_op<T>("conv2d", std::move(out), {input, weight, bias},
                    [=](const Array<T>& g, std::vector<NodePtr<T>>& ps) {
                      const T* wt = ps[1]->value.data().data();
                      Array<T>* gi = detail::grad_slot(ps, 0);
                      Array<T>* gw = detail::grad_slot(ps, 1);
                      Array<T>* gb = detail::grad_slot(ps, 2);
                      const std::size_t plane = oh * ow;
                      std::vector<T> gpad(gi ? cin * hp * wp : 0, T(0));
                      // Output gradient rows with ks - 1 zeros on both sides.
                      const std::size_t gw_pad = ow + 2 * (ks - 1);
                      std::vector<T> grow_pad(gi ? gw_pad : 0, T(0));
                      for (std::size_t o = 0; o < cout; ++o) {
                        const T* gplane = g.data().data() + o * plane;
                        if (gb) {
                          T s = T(0);
                          for (std::size_t i = 0; i < plane; ++i) s += gplane[i];
                          (*gb)[o] += s;
                        }
                        for (std::size_t c = 0; c < cin; ++c) {
                          const T* wk = wt + (o * cin + c) * ks * ks;
                          const T* pplane = padded->data() + c * hp * wp;
                          if (gw) {
                            T* gwk = gw->data().data() + (o * cin + c) * ks * ks;
                            for (std::size_t ky = 0; ky < ks; ++ky) {
                              if (ks == 3) {
                                T a0 = T(0), a1 = T(0), a2 = T(0);
                                for (std::size_t y = 0; y < oh; ++y) {
                                  const T* grow = gplane + y * ow;
                                  const T* prow = pplane + (y + ky) * wp;
#pragma omp simd reduction(+ : a0, a1, a2)
                                  for (std::size_t x = 0; x < ow; ++x) {
                                    a0 += grow[x] * prow[x];
                                    a1 += grow[x] * prow[x + 1];
                                    a2 += grow[x] * prow[x + 2];
                                  }
                                }
                                gwk[ky * 3] += a0;
                                gwk[ky * 3 + 1] += a1;
                                gwk[ky * 3 + 2] += a2;
                              } else {
                                for (std::size_t kx = 0; kx < ks; ++kx) {
                                  T acc = T(0);
                                  for (std::size_t y = 0; y < oh; ++y) {
                                    const T* grow = gplane + y * ow;
                                    const T* prow = pplane + (y + ky) * wp + kx;
#pragma omp simd reduction(+ : acc)
                                    for (std::size_t x = 0; x < ow; ++x) acc += grow[x] * prow[x];
                                  }
                                  gwk[ky * ks + kx] += acc;
                                }
                              }
                            }
                          }
                          if (gi) {
                            T* gpplane = gpad.data() + c * hp * wp;
                            for (std::size_t y = 0; y < oh; ++y) {
                              std::copy_n(gplane + y * ow, ow, grow_pad.data() + (ks - 1));
                              const T* gg = grow_pad.data();
                              for (std::size_t ky = 0; ky < ks; ++ky) {
                                T* gprow = gpplane + (y + ky) * wp;
                                // Full correlation: padded column i receives w[kx] * g[i - kx].
                                if (ks == 3) {
                                  const T w0 = wk[ky * 3], w1 = wk[ky * 3 + 1], w2 = wk[ky * 3 + 2];
                                  for (std::size_t i = 0; i < wp; ++i) gprow[i] += w0 * gg[i + 2] + w1 * gg[i + 1] + w2 * gg[i];
                                } else {
                                  for (std::size_t kx = 0; kx < ks; ++kx) {
                                    const T wv = wk[ky * ks + kx];
                                    for (std::size_t i = 0; i < wp; ++i) gprow[i] += wv * gg[i + ks - 1 - kx];
                                  }
                                }
                              }
                            }
                          }
                        }
                      }
                      if (gi) {
                        for (std::size_t c = 0; c < cin; ++c) {
                          for (std::size_t y = 0; y < h; ++y) {
                            const T* src = gpad.data() + (c * hp + y + padding) * wp + padding;
                            T* dst = gi->data().data() + (c * h + y) * w;
                            for (std::size_t x = 0; x < w; ++x) dst[x] += src[x];
                          }
                        }
                      }
                    });
}

}  // namespace gaam
