#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "u2u/tensor.hpp"

namespace u2u {

// One node of a reverse-mode differentiation graph. Nodes are created by the
// op constructors below and owned via shared_ptr; parents are kept alive by
// the child, so holding the root keeps the whole graph.
template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // allocated lazily during backward, same shape as value
  bool requires_grad = false;
  std::string name;  // set for named leaves only
  std::vector<std::shared_ptr<Node<T>>> parents;
  std::function<void(Node<T>&)> backward_fn;

  bool has_grad() const { return grad.size() != 0; }
  Tensor<T>& ensure_grad() {
    if (!has_grad()) grad = Tensor<T>(value.shape);
    return grad;
  }
};

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

template <typename T>
NodePtr<T> make_leaf(Tensor<T> value, bool requires_grad, std::string name = "") {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  n->name = std::move(name);
  return n;
}

template <typename T>
NodePtr<T> make_constant(Tensor<T> value) {
  return make_leaf<T>(std::move(value), false);
}

namespace detail {

template <typename T>
NodePtr<T> make_op_node(Tensor<T> value, std::vector<NodePtr<T>> parents) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->parents = std::move(parents);
  for (const auto& p : n->parents) {
    if (p->requires_grad) {
      n->requires_grad = true;
      break;
    }
  }
  return n;
}

[[noreturn]] inline void shape_error(const std::string& op, const Shape& a, const Shape& b) {
  throw std::invalid_argument(op + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

// Broadcast classification for elementwise binary ops: identical shapes,
// scalar on either side, or rhs shape a suffix of lhs shape (bias add).
enum class Bcast { same, lhs_scalar, rhs_scalar, rhs_suffix };

inline Bcast classify_bcast(const std::string& op, const Shape& a, const Shape& b) {
  if (a == b) return Bcast::same;
  if (shape_numel(b) == 1) return Bcast::rhs_scalar;
  if (shape_numel(a) == 1) return Bcast::lhs_scalar;
  if (b.size() <= a.size() &&
      std::equal(b.rbegin(), b.rend(), a.rbegin())) {
    return Bcast::rhs_suffix;
  }
  shape_error(op, a, b);
}

// Iteration geometry for a reduction / softmax along one axis:
// flat index = (outer * extent + k) * inner + j.
struct AxisGeom {
  std::int64_t outer = 1, extent = 1, inner = 1;
};

inline AxisGeom axis_geom(const std::string& op, const Shape& shape, int axis) {
  if (axis < 0 || axis >= static_cast<int>(shape.size())) {
    throw std::invalid_argument(op + ": axis " + std::to_string(axis) + " out of range for " +
                                shape_str(shape));
  }
  AxisGeom g;
  for (int i = 0; i < axis; ++i) g.outer *= shape[static_cast<std::size_t>(i)];
  g.extent = shape[static_cast<std::size_t>(axis)];
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < shape.size(); ++i) g.inner *= shape[i];
  return g;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary ops

template <typename T>
NodePtr<T> add(const NodePtr<T>& a, const NodePtr<T>& b) {
  using detail::Bcast;
  Bcast bc = detail::classify_bcast("add", a->value.shape, b->value.shape);
  if (bc == Bcast::lhs_scalar) return add(b, a);  // addition commutes

  Tensor<T> out(a->value.shape);
  const std::int64_t n = a->value.size();
  const std::int64_t bn = b->value.size();
  for (std::int64_t i = 0; i < n; ++i) out[i] = a->value[i] + b->value[i % bn];

  auto node = detail::make_op_node<T>(std::move(out), {a, b});
  node->backward_fn = [a, b, bn](Node<T>& self) {
    const std::int64_t n2 = self.grad.size();
    if (a->requires_grad) {
      auto& ga = a->ensure_grad();
      for (std::int64_t i = 0; i < n2; ++i) ga[i] += self.grad[i];
    }
    if (b->requires_grad) {
      auto& gb = b->ensure_grad();
      for (std::int64_t i = 0; i < n2; ++i) gb[i % bn] += self.grad[i];
    }
  };
  return node;
}

template <typename T>
NodePtr<T> sub(const NodePtr<T>& a, const NodePtr<T>& b) {
  using detail::Bcast;
  Bcast bc = detail::classify_bcast("sub", a->value.shape, b->value.shape);

  const std::int64_t an = a->value.size();
  const std::int64_t bn = b->value.size();
  Shape out_shape = (bc == Bcast::lhs_scalar) ? b->value.shape : a->value.shape;
  Tensor<T> out(out_shape);
  const std::int64_t n = out.size();
  for (std::int64_t i = 0; i < n; ++i) out[i] = a->value[i % an] - b->value[i % bn];

  auto node = detail::make_op_node<T>(std::move(out), {a, b});
  node->backward_fn = [a, b, an, bn](Node<T>& self) {
    const std::int64_t n2 = self.grad.size();
    if (a->requires_grad) {
      auto& ga = a->ensure_grad();
      for (std::int64_t i = 0; i < n2; ++i) ga[i % an] += self.grad[i];
    }
    if (b->requires_grad) {
      auto& gb = b->ensure_grad();
      for (std::int64_t i = 0; i < n2; ++i) gb[i % bn] -= self.grad[i];
    }
  };
  return node;
}

template <typename T>
NodePtr<T> mul(const NodePtr<T>& a, const NodePtr<T>& b) {
  using detail::Bcast;
  Bcast bc = detail::classify_bcast("mul", a->value.shape, b->value.shape);
  if (bc == Bcast::lhs_scalar) return mul(b, a);

  Tensor<T> out(a->value.shape);
  const std::int64_t n = a->value.size();
  const std::int64_t bn = b->value.size();
  for (std::int64_t i = 0; i < n; ++i) out[i] = a->value[i] * b->value[i % bn];

  auto node = detail::make_op_node<T>(std::move(out), {a, b});
  node->backward_fn = [a, b, bn](Node<T>& self) {
    const std::int64_t n2 = self.grad.size();
    if (a->requires_grad) {
      auto& ga = a->ensure_grad();
      for (std::int64_t i = 0; i < n2; ++i) ga[i] += self.grad[i] * b->value[i % bn];
    }
    if (b->requires_grad) {
      auto& gb = b->ensure_grad();
      for (std::int64_t i = 0; i < n2; ++i) gb[i % bn] += self.grad[i] * a->value[i];
    }
  };
  return node;
}

template <typename T>
NodePtr<T> mul_scalar(const NodePtr<T>& a, double c) {
  Tensor<T> out(a->value.shape);
  for (std::int64_t i = 0; i < a->value.size(); ++i) out[i] = static_cast<T>(c) * a->value[i];
  auto node = detail::make_op_node<T>(std::move(out), {a});
  node->backward_fn = [a, c](Node<T>& self) {
    if (!a->requires_grad) return;
    auto& ga = a->ensure_grad();
    for (std::int64_t i = 0; i < self.grad.size(); ++i) ga[i] += static_cast<T>(c) * self.grad[i];
  };
  return node;
}

// ---------------------------------------------------------------------------
// Elementwise unary ops

namespace detail {

template <typename T, typename FwdFn, typename BwdFn>
NodePtr<T> unary_op(const NodePtr<T>& a, FwdFn fwd, BwdFn bwd_factor_from_xy) {
  Tensor<T> out(a->value.shape);
  for (std::int64_t i = 0; i < a->value.size(); ++i) out[i] = fwd(a->value[i]);
  auto node = make_op_node<T>(std::move(out), {a});
  node->backward_fn = [a, bwd_factor_from_xy](Node<T>& self) {
    if (!a->requires_grad) return;
    auto& ga = a->ensure_grad();
    for (std::int64_t i = 0; i < self.grad.size(); ++i) {
      ga[i] += self.grad[i] * bwd_factor_from_xy(a->value[i], self.value[i]);
    }
  };
  return node;
}

}  // namespace detail

template <typename T>
NodePtr<T> exp(const NodePtr<T>& a) {
  return detail::unary_op(
      a, [](T x) { return static_cast<T>(std::exp(static_cast<double>(x))); },
      [](T, T y) { return y; });
}

template <typename T>
NodePtr<T> log(const NodePtr<T>& a) {
  for (std::int64_t i = 0; i < a->value.size(); ++i) {
    if (!(a->value[i] > T(0))) {
      throw std::domain_error("log: non-positive input " + std::to_string(a->value[i]));
    }
  }
  return detail::unary_op(
      a, [](T x) { return static_cast<T>(std::log(static_cast<double>(x))); },
      [](T x, T) { return T(1) / x; });
}

template <typename T>
NodePtr<T> tanh(const NodePtr<T>& a) {
  return detail::unary_op(
      a, [](T x) { return static_cast<T>(std::tanh(static_cast<double>(x))); },
      [](T, T y) { return T(1) - y * y; });
}

template <typename T>
NodePtr<T> sigmoid(const NodePtr<T>& a) {
  auto sig = [](T x) {
    double xd = static_cast<double>(x);
    double y = xd >= 0.0 ? 1.0 / (1.0 + std::exp(-xd)) : std::exp(xd) / (1.0 + std::exp(xd));
    return static_cast<T>(y);
  };
  return detail::unary_op(a, sig, [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
NodePtr<T> relu(const NodePtr<T>& a) {
  return detail::unary_op(
      a, [](T x) { return x > T(0) ? x : T(0); },
      [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

// sign(0) is taken as +1 so parameters initialized to exactly zero inside an
// |.| still receive gradient.
template <typename T>
NodePtr<T> abs(const NodePtr<T>& a) {
  return detail::unary_op(
      a, [](T x) { return x < T(0) ? -x : x; },
      [](T x, T) { return x < T(0) ? T(-1) : T(1); });
}

// ---------------------------------------------------------------------------
// Matrix ops

template <typename T>
NodePtr<T> matmul(const NodePtr<T>& a, const NodePtr<T>& b) {
  const Tensor<T>& A = a->value;
  const Tensor<T>& B = b->value;
  if (A.rank() != 2 || B.rank() != 2 || A.shape[1] != B.shape[0]) {
    detail::shape_error("matmul", A.shape, B.shape);
  }
  const std::int64_t m = A.shape[0], k = A.shape[1], n = B.shape[1];
  Tensor<T> out(Shape{m, n});
  for (std::int64_t i = 0; i < m; ++i) {
    for (std::int64_t p = 0; p < k; ++p) {
      const T av = A.at2(i, p);
      if (av == T(0)) continue;
      for (std::int64_t j = 0; j < n; ++j) out.at2(i, j) += av * B.at2(p, j);
    }
  }
  auto node = detail::make_op_node<T>(std::move(out), {a, b});
  node->backward_fn = [a, b, m, k, n](Node<T>& self) {
    const Tensor<T>& G = self.grad;
    if (a->requires_grad) {
      auto& ga = a->ensure_grad();  // dA = G * B^T
      for (std::int64_t i = 0; i < m; ++i) {
        for (std::int64_t j = 0; j < n; ++j) {
          const T gv = G.at2(i, j);
          if (gv == T(0)) continue;
          for (std::int64_t p = 0; p < k; ++p) ga.at2(i, p) += gv * b->value.at2(p, j);
        }
      }
    }
    if (b->requires_grad) {
      auto& gb = b->ensure_grad();  // dB = A^T * G
      for (std::int64_t p = 0; p < k; ++p) {
        for (std::int64_t i = 0; i < m; ++i) {
          const T av = a->value.at2(i, p);
          if (av == T(0)) continue;
          for (std::int64_t j = 0; j < n; ++j) gb.at2(p, j) += av * G.at2(i, j);
        }
      }
    }
  };
  return node;
}

template <typename T>
NodePtr<T> transpose(const NodePtr<T>& a) {
  const Tensor<T>& A = a->value;
  if (A.rank() != 2) {
    throw std::invalid_argument("transpose: expected rank-2 tensor, got " + shape_str(A.shape));
  }
  const std::int64_t m = A.shape[0], n = A.shape[1];
  Tensor<T> out(Shape{n, m});
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t j = 0; j < n; ++j) out.at2(j, i) = A.at2(i, j);
  auto node = detail::make_op_node<T>(std::move(out), {a});
  node->backward_fn = [a, m, n](Node<T>& self) {
    if (!a->requires_grad) return;
    auto& ga = a->ensure_grad();
    for (std::int64_t j = 0; j < n; ++j)
      for (std::int64_t i = 0; i < m; ++i) ga.at2(i, j) += self.grad.at2(j, i);
  };
  return node;
}

// ---------------------------------------------------------------------------
// Shape ops

template <typename T>
NodePtr<T> reshape(const NodePtr<T>& a, Shape new_shape) {
  if (shape_numel(new_shape) != a->value.size()) {
    detail::shape_error("reshape", a->value.shape, new_shape);
  }
  Tensor<T> out(std::move(new_shape), a->value.data);
  auto node = detail::make_op_node<T>(std::move(out), {a});
  node->backward_fn = [a](Node<T>& self) {
    if (!a->requires_grad) return;
    auto& ga = a->ensure_grad();
    for (std::int64_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i];
  };
  return node;
}

template <typename T>
NodePtr<T> concat(const std::vector<NodePtr<T>>& inputs, int axis) {
  if (inputs.empty()) throw std::invalid_argument("concat: no inputs");
  const Shape& s0 = inputs[0]->value.shape;
  auto geom0 = detail::axis_geom("concat", s0, axis);
  std::int64_t total_extent = 0;
  for (const auto& in : inputs) {
    const Shape& s = in->value.shape;
    if (s.size() != s0.size()) detail::shape_error("concat", s0, s);
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (static_cast<int>(i) != axis && s[i] != s0[i]) detail::shape_error("concat", s0, s);
    }
    total_extent += s[static_cast<std::size_t>(axis)];
  }
  Shape out_shape = s0;
  out_shape[static_cast<std::size_t>(axis)] = total_extent;
  Tensor<T> out(out_shape);

  std::int64_t offset = 0;
  for (const auto& in : inputs) {
    const std::int64_t ext = in->value.shape[static_cast<std::size_t>(axis)];
    for (std::int64_t o = 0; o < geom0.outer; ++o) {
      const T* src = in->value.data.data() + o * ext * geom0.inner;
      T* dst = out.data.data() + (o * total_extent + offset) * geom0.inner;
      std::copy(src, src + ext * geom0.inner, dst);
    }
    offset += ext;
  }

  auto node = detail::make_op_node<T>(std::move(out), inputs);
  const auto geom = geom0;
  node->backward_fn = [inputs, geom, total_extent, axis](Node<T>& self) {
    std::int64_t off = 0;
    for (const auto& in : inputs) {
      const std::int64_t ext = in->value.shape[static_cast<std::size_t>(axis)];
      if (in->requires_grad) {
        auto& gi = in->ensure_grad();
        for (std::int64_t o = 0; o < geom.outer; ++o) {
          const T* src = self.grad.data.data() + (o * total_extent + off) * geom.inner;
          T* dst = gi.data.data() + o * ext * geom.inner;
          for (std::int64_t i = 0; i < ext * geom.inner; ++i) dst[i] += src[i];
        }
      }
      off += ext;
    }
  };
  return node;
}

template <typename T>
NodePtr<T> slice(const NodePtr<T>& a, int axis, std::int64_t start, std::int64_t len) {
  auto geom = detail::axis_geom("slice", a->value.shape, axis);
  if (start < 0 || len < 0 || start + len > geom.extent) {
    throw std::invalid_argument("slice: range [" + std::to_string(start) + "," +
                                std::to_string(start + len) + ") out of bounds for " +
                                shape_str(a->value.shape));
  }
  Shape out_shape = a->value.shape;
  out_shape[static_cast<std::size_t>(axis)] = len;
  Tensor<T> out(out_shape);
  for (std::int64_t o = 0; o < geom.outer; ++o) {
    const T* src = a->value.data.data() + (o * geom.extent + start) * geom.inner;
    T* dst = out.data.data() + o * len * geom.inner;
    std::copy(src, src + len * geom.inner, dst);
  }
  auto node = detail::make_op_node<T>(std::move(out), {a});
  node->backward_fn = [a, geom, start, len](Node<T>& self) {
    if (!a->requires_grad) return;
    auto& ga = a->ensure_grad();
    for (std::int64_t o = 0; o < geom.outer; ++o) {
      const T* src = self.grad.data.data() + o * len * geom.inner;
      T* dst = ga.data.data() + (o * geom.extent + start) * geom.inner;
      for (std::int64_t i = 0; i < len * geom.inner; ++i) dst[i] += src[i];
    }
  };
  return node;
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
NodePtr<T> sum_reduce(const NodePtr<T>& a, int axis) {
  auto geom = detail::axis_geom("sum_reduce", a->value.shape, axis);
  Shape out_shape;
  for (std::size_t i = 0; i < a->value.shape.size(); ++i) {
    if (static_cast<int>(i) != axis) out_shape.push_back(a->value.shape[i]);
  }
  if (out_shape.empty()) out_shape = {1};
  Tensor<T> out(out_shape);
  for (std::int64_t o = 0; o < geom.outer; ++o) {
    for (std::int64_t k = 0; k < geom.extent; ++k) {
      for (std::int64_t j = 0; j < geom.inner; ++j) {
        out[o * geom.inner + j] += a->value[(o * geom.extent + k) * geom.inner + j];
      }
    }
  }
  auto node = detail::make_op_node<T>(std::move(out), {a});
  node->backward_fn = [a, geom](Node<T>& self) {
    if (!a->requires_grad) return;
    auto& ga = a->ensure_grad();
    for (std::int64_t o = 0; o < geom.outer; ++o)
      for (std::int64_t k = 0; k < geom.extent; ++k)
        for (std::int64_t j = 0; j < geom.inner; ++j)
          ga[(o * geom.extent + k) * geom.inner + j] += self.grad[o * geom.inner + j];
  };
  return node;
}

template <typename T>
NodePtr<T> max_reduce(const NodePtr<T>& a, int axis) {
  auto geom = detail::axis_geom("max_reduce", a->value.shape, axis);
  if (geom.extent == 0) throw std::invalid_argument("max_reduce: empty axis");
  Shape out_shape;
  for (std::size_t i = 0; i < a->value.shape.size(); ++i) {
    if (static_cast<int>(i) != axis) out_shape.push_back(a->value.shape[i]);
  }
  if (out_shape.empty()) out_shape = {1};
  Tensor<T> out(out_shape);
  std::vector<std::int64_t> argmax(static_cast<std::size_t>(out.size()), 0);
  for (std::int64_t o = 0; o < geom.outer; ++o) {
    for (std::int64_t j = 0; j < geom.inner; ++j) {
      std::int64_t best = 0;
      T bestv = a->value[(o * geom.extent) * geom.inner + j];
      for (std::int64_t k = 1; k < geom.extent; ++k) {
        T v = a->value[(o * geom.extent + k) * geom.inner + j];
        if (v > bestv) {  // first max wins on ties
          bestv = v;
          best = k;
        }
      }
      out[o * geom.inner + j] = bestv;
      argmax[static_cast<std::size_t>(o * geom.inner + j)] = best;
    }
  }
  auto node = detail::make_op_node<T>(std::move(out), {a});
  node->backward_fn = [a, geom, argmax](Node<T>& self) {
    if (!a->requires_grad) return;
    auto& ga = a->ensure_grad();
    for (std::int64_t o = 0; o < geom.outer; ++o) {
      for (std::int64_t j = 0; j < geom.inner; ++j) {
        const std::int64_t k = argmax[static_cast<std::size_t>(o * geom.inner + j)];
        ga[(o * geom.extent + k) * geom.inner + j] += self.grad[o * geom.inner + j];
      }
    }
  };
  return node;
}

template <typename T>
NodePtr<T> sum_all(const NodePtr<T>& a) {
  T s = 0;
  for (std::int64_t i = 0; i < a->value.size(); ++i) s += a->value[i];
  auto node = detail::make_op_node<T>(Tensor<T>::scalar(s), {a});
  node->backward_fn = [a](Node<T>& self) {
    if (!a->requires_grad) return;
    auto& ga = a->ensure_grad();
    const T g = self.grad[0];
    for (std::int64_t i = 0; i < ga.size(); ++i) ga[i] += g;
  };
  return node;
}

// ---------------------------------------------------------------------------
// Softmax with optional 0/1 validity mask. Masked positions get exactly zero
// probability; a slice with no valid position is rejected.

template <typename T>
NodePtr<T> softmax(const NodePtr<T>& a, int axis, const Tensor<T>* mask = nullptr) {
  auto geom = detail::axis_geom("softmax", a->value.shape, axis);
  if (mask && mask->shape != a->value.shape) {
    detail::shape_error("softmax mask", a->value.shape, mask->shape);
  }
  Tensor<T> out(a->value.shape);
  for (std::int64_t o = 0; o < geom.outer; ++o) {
    for (std::int64_t j = 0; j < geom.inner; ++j) {
      auto idx = [&](std::int64_t k) { return (o * geom.extent + k) * geom.inner + j; };
      double mx = -std::numeric_limits<double>::infinity();
      for (std::int64_t k = 0; k < geom.extent; ++k) {
        if (mask && (*mask)[idx(k)] == T(0)) continue;
        mx = std::max(mx, static_cast<double>(a->value[idx(k)]));
      }
      if (!std::isfinite(mx)) {
        throw std::invalid_argument("softmax: all positions masked along axis " +
                                    std::to_string(axis));
      }
      double denom = 0;
      for (std::int64_t k = 0; k < geom.extent; ++k) {
        if (mask && (*mask)[idx(k)] == T(0)) continue;
        denom += std::exp(static_cast<double>(a->value[idx(k)]) - mx);
      }
      for (std::int64_t k = 0; k < geom.extent; ++k) {
        if (mask && (*mask)[idx(k)] == T(0)) {
          out[idx(k)] = T(0);
        } else {
          out[idx(k)] = static_cast<T>(std::exp(static_cast<double>(a->value[idx(k)]) - mx) / denom);
        }
      }
    }
  }
  auto node = detail::make_op_node<T>(std::move(out), {a});
  node->backward_fn = [a, geom](Node<T>& self) {
    if (!a->requires_grad) return;
    auto& ga = a->ensure_grad();
    for (std::int64_t o = 0; o < geom.outer; ++o) {
      for (std::int64_t j = 0; j < geom.inner; ++j) {
        auto idx = [&](std::int64_t k) { return (o * geom.extent + k) * geom.inner + j; };
        T dot = 0;  // sum_k g_k y_k; masked outputs are exactly 0 so they drop out
        for (std::int64_t k = 0; k < geom.extent; ++k) dot += self.grad[idx(k)] * self.value[idx(k)];
        for (std::int64_t k = 0; k < geom.extent; ++k) {
          ga[idx(k)] += self.value[idx(k)] * (self.grad[idx(k)] - dot);
        }
      }
    }
  };
  return node;
}

// ---------------------------------------------------------------------------
// Embedding lookup: rows of `table` indexed by `ids`.

template <typename T>
NodePtr<T> embedding_lookup(const NodePtr<T>& table, const std::vector<std::int64_t>& ids) {
  const Tensor<T>& W = table->value;
  if (W.rank() != 2) {
    throw std::invalid_argument("embedding_lookup: table must be rank 2, got " + shape_str(W.shape));
  }
  const std::int64_t V = W.shape[0], D = W.shape[1];
  Tensor<T> out(Shape{static_cast<std::int64_t>(ids.size()), D});
  for (std::size_t r = 0; r < ids.size(); ++r) {
    const std::int64_t id = ids[r];
    if (id < 0 || id >= V) {
      throw std::out_of_range("embedding_lookup: id " + std::to_string(id) + " outside table " +
                              shape_str(W.shape));
    }
    std::copy(W.data.begin() + id * D, W.data.begin() + (id + 1) * D,
              out.data.begin() + static_cast<std::int64_t>(r) * D);
  }
  auto node = detail::make_op_node<T>(std::move(out), {table});
  node->backward_fn = [table, ids, D](Node<T>& self) {
    if (!table->requires_grad) return;
    auto& gt = table->ensure_grad();
    for (std::size_t r = 0; r < ids.size(); ++r) {
      const std::int64_t id = ids[r];
      for (std::int64_t c = 0; c < D; ++c) {
        gt[id * D + c] += self.grad[static_cast<std::int64_t>(r) * D + c];
      }
    }
  };
  return node;
}

// ---------------------------------------------------------------------------
// Inverted dropout: kept activations are scaled by 1/keep so inference needs
// no rescaling. rate == 0 returns the input unchanged.

template <typename T>
NodePtr<T> dropout(const NodePtr<T>& a, double rate, std::mt19937_64& rng) {
  if (rate < 0.0 || rate >= 1.0) {
    throw std::invalid_argument("dropout: rate must be in [0,1), got " + std::to_string(rate));
  }
  if (rate == 0.0) return a;
  const double keep = 1.0 - rate;
  std::uniform_real_distribution<double> dist(0.0, 1.0);
  std::vector<T> mask(static_cast<std::size_t>(a->value.size()));
  for (auto& m : mask) m = dist(rng) < keep ? static_cast<T>(1.0 / keep) : T(0);

  Tensor<T> out(a->value.shape);
  for (std::int64_t i = 0; i < a->value.size(); ++i) out[i] = a->value[i] * mask[static_cast<std::size_t>(i)];
  auto node = detail::make_op_node<T>(std::move(out), {a});
  node->backward_fn = [a, mask = std::move(mask)](Node<T>& self) {
    if (!a->requires_grad) return;
    auto& ga = a->ensure_grad();
    for (std::int64_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i] * mask[static_cast<std::size_t>(i)];
  };
  return node;
}

// ---------------------------------------------------------------------------
// Valid 1-D convolution over the time axis of x [L, C]. Filters are stored as
// a [win*C, F] matrix (window rows flattened), bias [F]. Output [L-win+1, F].

template <typename T>
NodePtr<T> conv1d_valid(const NodePtr<T>& x, const NodePtr<T>& w, const NodePtr<T>& b, int win) {
  const Tensor<T>& X = x->value;
  const Tensor<T>& W = w->value;
  if (X.rank() != 2 || W.rank() != 2) detail::shape_error("conv1d_valid", X.shape, W.shape);
  const std::int64_t L = X.shape[0], C = X.shape[1], F = W.shape[1];
  if (W.shape[0] != win * C) detail::shape_error("conv1d_valid", X.shape, W.shape);
  if (b->value.size() != F) detail::shape_error("conv1d_valid bias", W.shape, b->value.shape);
  if (L < win) {
    throw std::invalid_argument("conv1d_valid: window " + std::to_string(win) +
                                " longer than sequence " + std::to_string(L));
  }
  const std::int64_t To = L - win + 1;
  Tensor<T> out(Shape{To, F});
  for (std::int64_t t = 0; t < To; ++t) {
    for (std::int64_t f = 0; f < F; ++f) out.at2(t, f) = b->value[f];
    for (std::int64_t u = 0; u < win * C; ++u) {
      const T xv = X[t * C + u];  // window rows are contiguous in row-major x
      if (xv == T(0)) continue;
      for (std::int64_t f = 0; f < F; ++f) out.at2(t, f) += xv * W.at2(u, f);
    }
  }
  auto node = detail::make_op_node<T>(std::move(out), {x, w, b});
  node->backward_fn = [x, w, b, win, To, C, F](Node<T>& self) {
    for (std::int64_t t = 0; t < To; ++t) {
      if (x->requires_grad) {
        auto& gx = x->ensure_grad();
        for (std::int64_t u = 0; u < win * C; ++u) {
          T acc = 0;
          for (std::int64_t f = 0; f < F; ++f) acc += self.grad.at2(t, f) * w->value.at2(u, f);
          gx[t * C + u] += acc;
        }
      }
      if (w->requires_grad) {
        auto& gw = w->ensure_grad();
        for (std::int64_t u = 0; u < win * C; ++u) {
          const T xv = x->value[t * C + u];
          if (xv == T(0)) continue;
          for (std::int64_t f = 0; f < F; ++f) gw.at2(u, f) += xv * self.grad.at2(t, f);
        }
      }
      if (b->requires_grad) {
        auto& gb = b->ensure_grad();
        for (std::int64_t f = 0; f < F; ++f) gb[f] += self.grad.at2(t, f);
      }
    }
  };
  return node;
}

// ---------------------------------------------------------------------------
// Fused LSTM step. Gate blocks in wx [Din,4H], wh [H,4H], b [4H] are ordered
// [input | forget | candidate | output]. Returns [2H]: h in [0,H), c in [H,2H).
// If gate_sink is non-null the input-gate activations are copied out.

inline constexpr int kLstmGateInput = 0;
inline constexpr int kLstmGateForget = 1;
inline constexpr int kLstmGateCandidate = 2;
inline constexpr int kLstmGateOutput = 3;

template <typename T>
NodePtr<T> lstm_step(const NodePtr<T>& x, const NodePtr<T>& h_prev, const NodePtr<T>& c_prev,
                     const NodePtr<T>& wx, const NodePtr<T>& wh, const NodePtr<T>& b,
                     Tensor<T>* gate_sink = nullptr) {
  const std::int64_t din = x->value.size();
  const std::int64_t H = h_prev->value.size();
  if (wx->value.rank() != 2 || wx->value.shape[0] != din || wx->value.shape[1] != 4 * H) {
    detail::shape_error("lstm_step wx", x->value.shape, wx->value.shape);
  }
  if (wh->value.rank() != 2 || wh->value.shape[0] != H || wh->value.shape[1] != 4 * H) {
    detail::shape_error("lstm_step wh", h_prev->value.shape, wh->value.shape);
  }
  if (b->value.size() != 4 * H || c_prev->value.size() != H) {
    detail::shape_error("lstm_step bias", b->value.shape, c_prev->value.shape);
  }

  std::vector<T> pre(static_cast<std::size_t>(4 * H));
  for (std::int64_t j = 0; j < 4 * H; ++j) pre[static_cast<std::size_t>(j)] = b->value[j];
  for (std::int64_t k = 0; k < din; ++k) {
    const T xv = x->value[k];
    if (xv == T(0)) continue;
    for (std::int64_t j = 0; j < 4 * H; ++j) pre[static_cast<std::size_t>(j)] += xv * wx->value.at2(k, j);
  }
  for (std::int64_t k = 0; k < H; ++k) {
    const T hv = h_prev->value[k];
    if (hv == T(0)) continue;
    for (std::int64_t j = 0; j < 4 * H; ++j) pre[static_cast<std::size_t>(j)] += hv * wh->value.at2(k, j);
  }

  auto sigd = [](T v) {
    double xd = static_cast<double>(v);
    return static_cast<T>(xd >= 0.0 ? 1.0 / (1.0 + std::exp(-xd)) : std::exp(xd) / (1.0 + std::exp(xd)));
  };
  std::vector<T> gi(static_cast<std::size_t>(H)), gf(static_cast<std::size_t>(H)),
      gu(static_cast<std::size_t>(H)), go(static_cast<std::size_t>(H)), tc(static_cast<std::size_t>(H));
  Tensor<T> out(Shape{2 * H});
  for (std::int64_t k = 0; k < H; ++k) {
    gi[static_cast<std::size_t>(k)] = sigd(pre[static_cast<std::size_t>(kLstmGateInput * H + k)]);
    gf[static_cast<std::size_t>(k)] = sigd(pre[static_cast<std::size_t>(kLstmGateForget * H + k)]);
    gu[static_cast<std::size_t>(k)] =
        static_cast<T>(std::tanh(static_cast<double>(pre[static_cast<std::size_t>(kLstmGateCandidate * H + k)])));
    go[static_cast<std::size_t>(k)] = sigd(pre[static_cast<std::size_t>(kLstmGateOutput * H + k)]);
    const T c = gf[static_cast<std::size_t>(k)] * c_prev->value[k] +
                gi[static_cast<std::size_t>(k)] * gu[static_cast<std::size_t>(k)];
    tc[static_cast<std::size_t>(k)] = static_cast<T>(std::tanh(static_cast<double>(c)));
    out[H + k] = c;
    out[k] = go[static_cast<std::size_t>(k)] * tc[static_cast<std::size_t>(k)];
  }
  if (gate_sink) *gate_sink = Tensor<T>(Shape{H}, std::vector<T>(gi.begin(), gi.end()));

  auto node = detail::make_op_node<T>(std::move(out), {x, h_prev, c_prev, wx, wh, b});
  node->backward_fn = [x, h_prev, c_prev, wx, wh, b, H, din, gi = std::move(gi), gf = std::move(gf),
                       gu = std::move(gu), go = std::move(go), tc = std::move(tc)](Node<T>& self) {
    std::vector<T> dpre(static_cast<std::size_t>(4 * H));
    for (std::int64_t k = 0; k < H; ++k) {
      const std::size_t ks = static_cast<std::size_t>(k);
      const T gh = self.grad[k];
      T dc = self.grad[H + k] + gh * go[ks] * (T(1) - tc[ks] * tc[ks]);
      const T dgo = gh * tc[ks];
      const T dgi = dc * gu[ks];
      const T dgf = dc * c_prev->value[k];
      const T dgu = dc * gi[ks];
      dpre[static_cast<std::size_t>(kLstmGateInput * H + k)] = dgi * gi[ks] * (T(1) - gi[ks]);
      dpre[static_cast<std::size_t>(kLstmGateForget * H + k)] = dgf * gf[ks] * (T(1) - gf[ks]);
      dpre[static_cast<std::size_t>(kLstmGateCandidate * H + k)] = dgu * (T(1) - gu[ks] * gu[ks]);
      dpre[static_cast<std::size_t>(kLstmGateOutput * H + k)] = dgo * go[ks] * (T(1) - go[ks]);
      if (c_prev->requires_grad) c_prev->ensure_grad()[k] += dc * gf[ks];
    }
    if (x->requires_grad) {
      auto& gx = x->ensure_grad();
      for (std::int64_t k = 0; k < din; ++k) {
        T acc = 0;
        for (std::int64_t j = 0; j < 4 * H; ++j) acc += wx->value.at2(k, j) * dpre[static_cast<std::size_t>(j)];
        gx[k] += acc;
      }
    }
    if (h_prev->requires_grad) {
      auto& ghp = h_prev->ensure_grad();
      for (std::int64_t k = 0; k < H; ++k) {
        T acc = 0;
        for (std::int64_t j = 0; j < 4 * H; ++j) acc += wh->value.at2(k, j) * dpre[static_cast<std::size_t>(j)];
        ghp[k] += acc;
      }
    }
    if (wx->requires_grad) {
      auto& gwx = wx->ensure_grad();
      for (std::int64_t k = 0; k < din; ++k) {
        const T xv = x->value[k];
        if (xv == T(0)) continue;
        for (std::int64_t j = 0; j < 4 * H; ++j) gwx.at2(k, j) += xv * dpre[static_cast<std::size_t>(j)];
      }
    }
    if (wh->requires_grad) {
      auto& gwh = wh->ensure_grad();
      for (std::int64_t k = 0; k < H; ++k) {
        const T hv = h_prev->value[k];
        if (hv == T(0)) continue;
        for (std::int64_t j = 0; j < 4 * H; ++j) gwh.at2(k, j) += hv * dpre[static_cast<std::size_t>(j)];
      }
    }
    if (b->requires_grad) {
      auto& gb = b->ensure_grad();
      for (std::int64_t j = 0; j < 4 * H; ++j) gb[j] += dpre[static_cast<std::size_t>(j)];
    }
  };
  return node;
}

// ---------------------------------------------------------------------------
// Numerically stable sigmoid cross-entropy from the logit:
//   loss = max(z,0) - z*y + log(1 + exp(-|z|)),  dloss/dz = sigmoid(z) - y.

template <typename T>
NodePtr<T> sigmoid_ce_with_logit(const NodePtr<T>& z, double y) {
  if (z->value.size() != 1) {
    throw std::invalid_argument("sigmoid_ce_with_logit: logit must be scalar, got " +
                                shape_str(z->value.shape));
  }
  const double zv = static_cast<double>(z->value[0]);
  const double loss = std::max(zv, 0.0) - zv * y + std::log1p(std::exp(-std::fabs(zv)));
  auto node = detail::make_op_node<T>(Tensor<T>::scalar(static_cast<T>(loss)), {z});
  node->backward_fn = [z, y, zv](Node<T>& self) {
    if (!z->requires_grad) return;
    const double sig = zv >= 0.0 ? 1.0 / (1.0 + std::exp(-zv)) : std::exp(zv) / (1.0 + std::exp(zv));
    z->ensure_grad()[0] += self.grad[0] * static_cast<T>(sig - y);
  };
  return node;
}

// ---------------------------------------------------------------------------
// Reverse pass. The output must be scalar; gradients accumulate into the
// .grad of every reachable node that requires them.

template <typename T>
void backward(const NodePtr<T>& root) {
  if (root->value.size() != 1) {
    throw std::invalid_argument("backward: output must be scalar, got shape " +
                                shape_str(root->value.shape));
  }
  if (!root->requires_grad) return;

  // Iterative post-order DFS; subgraphs without trainable leaves are pruned.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> visited;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(root.get(), 0);
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* p = node->parents[next++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->ensure_grad()[0] = T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* node = *it;
    if (node->backward_fn && node->has_grad()) node->backward_fn(*node);
  }
}

}  // namespace u2u
