#pragma once

// Minimal reverse-mode automatic differentiation on dense Eigen tensors.
//
// Nodes are recorded at tensor granularity: a scalar is a 1x1 matrix, a
// vector is an n x 1 matrix. Each node stores its value, an adjoint of the
// same shape (allocated lazily during backward) and a closure that pushes its
// adjoint into its parents. Node ids are creation order, so the reverse of
// creation order is a valid reverse topological order.

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "graphgrad/errors.hpp"

namespace graphgrad::ad {

using Tensor = Eigen::MatrixXd;
using Index = Eigen::Index;

class Tape;

/// Lightweight handle to a node recorded on a Tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  std::size_t id() const { return id_; }
  Tape& tape() const { return *tape_; }
  bool valid() const { return tape_ != nullptr; }

  const Tensor& value() const;
  double scalar() const;
  bool requires_grad() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Gradients of the root with respect to every leaf that requires grad.
class Gradients {
 public:
  const Tensor& operator[](const Var& leaf) const { return at(leaf.id()); }
  const Tensor& at(std::size_t id) const {
    auto it = grads_.find(id);
    if (it == grads_.end()) throw UsageError("no gradient recorded for node " + std::to_string(id));
    return it->second;
  }
  bool contains(std::size_t id) const { return grads_.count(id) != 0; }
  std::size_t size() const { return grads_.size(); }

 private:
  friend class Tape;
  std::unordered_map<std::size_t, Tensor> grads_;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  void reserve(std::size_t n) { nodes_.reserve(n); }

  Var leaf(Tensor value, bool requires_grad = true) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.is_leaf = true;
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }
  Var leaf(double value, bool requires_grad = true) {
    return leaf(Tensor::Constant(1, 1, value), requires_grad);
  }
  Var constant(Tensor value) { return leaf(std::move(value), false); }
  Var constant(double value) { return leaf(value, false); }

  /// Records a derived node. The backward closure runs only if at least one
  /// parent requires grad; it must add into parents through `accumulate`.
  Var record(Tensor value, std::vector<std::size_t> parents, Backward backward) {
    Node n;
    n.value = std::move(value);
    for (auto p : parents) {
      if (p >= nodes_.size()) throw UsageError("parent id out of range");
      n.requires_grad = n.requires_grad || nodes_[p].requires_grad;
    }
    n.parents = std::move(parents);
    if (n.requires_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

  /// Identity on values; blocks all adjoint flow to `x`.
  Var stop_gradient(Var x) {
    check_owner(x);
    Node n;
    n.value = nodes_[x.id()].value;
    n.parents = {x.id()};
    n.stopped = true;
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  bool is_stopped(std::size_t id) const { return nodes_.at(id).stopped; }
  const std::vector<std::size_t>& parents(std::size_t id) const { return nodes_.at(id).parents; }

  /// Adjoint of a node; zero-shaped like the value if never touched.
  Tensor adjoint(std::size_t id) const {
    const auto& n = nodes_.at(id);
    if (n.adjoint.size() == 0) return Tensor::Zero(n.value.rows(), n.value.cols());
    return n.adjoint;
  }

  /// Mutable adjoint slot of a parent, allocated as zeros on first use.
  Tensor& accumulate(std::size_t id) {
    auto& n = nodes_[id];
    if (n.adjoint.size() == 0) n.adjoint = Tensor::Zero(n.value.rows(), n.value.cols());
    return n.adjoint;
  }

  /// Reverse sweep from a scalar root. A second call without `reset()` is an error.
  Gradients backward(Var root) {
    check_owner(root);
    if (nodes_[root.id()].value.size() != 1) throw UsageError("backward requires a scalar root");
    if (swept_) throw UsageError("backward called twice without reset()");
    swept_ = true;
    visits_ = 0;
    if (nodes_[root.id()].requires_grad) accumulate(root.id()).setConstant(1.0);
    for (std::size_t i = root.id() + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (!n.requires_grad || n.adjoint.size() == 0 || !n.backward) continue;
      ++visits_;
      n.backward(*this, i);
    }
    Gradients out;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      const auto& n = nodes_[i];
      if (n.is_leaf && n.requires_grad) out.grads_.emplace(i, adjoint(i));
    }
    return out;
  }

  /// Clears adjoints so that backward may run again.
  void reset() {
    for (auto& n : nodes_) n.adjoint.resize(0, 0);
    swept_ = false;
  }

  void clear() {
    nodes_.clear();
    swept_ = false;
    visits_ = 0;
  }

  std::size_t size() const { return nodes_.size(); }
  /// Nodes whose backward closure ran in the last sweep.
  std::size_t backward_visits() const { return visits_; }

  void check_owner(const Var& v) const {
    if (!v.valid() || &v.tape() != this || v.id() >= nodes_.size())
      throw UsageError("variable does not belong to this tape");
  }

 private:
  struct Node {
    Tensor value;
    Tensor adjoint;
    std::vector<std::size_t> parents;
    Backward backward;
    bool requires_grad = false;
    bool stopped = false;
    bool is_leaf = false;
  };

  std::vector<Node> nodes_;
  bool swept_ = false;
  std::size_t visits_ = 0;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }
inline double Var::scalar() const {
  const auto& v = value();
  if (v.size() != 1) throw UsageError("scalar() on a non-scalar node");
  return v(0, 0);
}
inline bool Var::requires_grad() const { return tape_->requires_grad(id_); }

inline Var stop_gradient(Var x) { return x.tape().stop_gradient(x); }

namespace detail {

inline Tape& same_tape(const Var& a, const Var& b) {
  if (!a.valid() || !b.valid() || &a.tape() != &b.tape())
    throw UsageError("operands live on different tapes");
  return a.tape();
}

inline bool is_scalar(const Tensor& t) { return t.size() == 1; }

inline void check_broadcast(const Tensor& a, const Tensor& b, const char* op) {
  if (a.rows() == b.rows() && a.cols() == b.cols()) return;
  if (is_scalar(a) || is_scalar(b)) return;
  throw UsageError(std::string(op) + ": shape mismatch");
}

/// Applies f to array views of a and b with scalar broadcasting.
template <class F>
Tensor broadcast(const Tensor& a, const Tensor& b, F f) {
  if (a.rows() == b.rows() && a.cols() == b.cols()) return f(a.array(), b.array()).matrix();
  if (is_scalar(a)) {
    Eigen::ArrayXXd ab = Eigen::ArrayXXd::Constant(b.rows(), b.cols(), a(0, 0));
    return f(ab, b.array()).matrix();
  }
  Eigen::ArrayXXd bb = Eigen::ArrayXXd::Constant(a.rows(), a.cols(), b(0, 0));
  return f(a.array(), bb).matrix();
}

/// Sums an adjoint back down to the shape of a broadcast operand.
inline void add_reduced(Tensor& slot, const Tensor& g) {
  if (slot.rows() == g.rows() && slot.cols() == g.cols())
    slot += g;
  else
    slot(0, 0) += g.sum();
}

inline Tensor pow_int(const Tensor& x, int n) {
  Tensor out = Tensor::Ones(x.rows(), x.cols());
  Tensor base = x;
  unsigned e = static_cast<unsigned>(n < 0 ? -n : n);
  while (e != 0) {
    if (e & 1u) out.array() *= base.array();
    e >>= 1u;
    if (e != 0) base.array() *= base.array();
  }
  if (n < 0) out = out.array().inverse().matrix();
  return out;
}

}  // namespace detail

inline Var add(Var a, Var b) {
  auto& tape = detail::same_tape(a, b);
  detail::check_broadcast(a.value(), b.value(), "add");
  Tensor v = detail::broadcast(a.value(), b.value(), [](const auto& x, const auto& y) { return x + y; });
  const auto ia = a.id(), ib = b.id();
  return tape.record(std::move(v), {ia, ib}, [ia, ib](Tape& t, std::size_t self) {
    const Tensor& g = t.accumulate(self);
    if (t.requires_grad(ia)) detail::add_reduced(t.accumulate(ia), g);
    if (t.requires_grad(ib)) detail::add_reduced(t.accumulate(ib), g);
  });
}

inline Var sub(Var a, Var b) {
  auto& tape = detail::same_tape(a, b);
  detail::check_broadcast(a.value(), b.value(), "sub");
  Tensor v = detail::broadcast(a.value(), b.value(), [](const auto& x, const auto& y) { return x - y; });
  const auto ia = a.id(), ib = b.id();
  return tape.record(std::move(v), {ia, ib}, [ia, ib](Tape& t, std::size_t self) {
    const Tensor& g = t.accumulate(self);
    if (t.requires_grad(ia)) detail::add_reduced(t.accumulate(ia), g);
    if (t.requires_grad(ib)) detail::add_reduced(t.accumulate(ib), -g);
  });
}

inline Var mul(Var a, Var b) {
  auto& tape = detail::same_tape(a, b);
  detail::check_broadcast(a.value(), b.value(), "mul");
  Tensor v = detail::broadcast(a.value(), b.value(), [](const auto& x, const auto& y) { return x * y; });
  const auto ia = a.id(), ib = b.id();
  return tape.record(std::move(v), {ia, ib}, [ia, ib](Tape& t, std::size_t self) {
    const Tensor g = t.accumulate(self);
    const Tensor& av = t.value(ia);
    const Tensor& bv = t.value(ib);
    auto times = [](const auto& x, const auto& y) { return x * y; };
    if (t.requires_grad(ia)) detail::add_reduced(t.accumulate(ia), detail::broadcast(g, bv, times));
    if (t.requires_grad(ib)) detail::add_reduced(t.accumulate(ib), detail::broadcast(g, av, times));
  });
}

/// Elementwise a / b. A stop-gradient divisor is a literal constant in backward.
inline Var div(Var a, Var b) {
  auto& tape = detail::same_tape(a, b);
  detail::check_broadcast(a.value(), b.value(), "div");
  if ((b.value().array() == 0.0).any()) throw DomainError("div: division by zero");
  Tensor v = detail::broadcast(a.value(), b.value(), [](const auto& x, const auto& y) { return x / y; });
  const auto ia = a.id(), ib = b.id();
  return tape.record(std::move(v), {ia, ib}, [ia, ib](Tape& t, std::size_t self) {
    const Tensor g = t.accumulate(self);
    const Tensor& av = t.value(ia);
    const Tensor& bv = t.value(ib);
    if (t.requires_grad(ia))
      detail::add_reduced(t.accumulate(ia),
                          detail::broadcast(g, bv, [](const auto& x, const auto& y) { return x / y; }));
    if (t.requires_grad(ib)) {
      Tensor q = detail::broadcast(av, bv, [](const auto& x, const auto& y) { return x / (y * y); });
      detail::add_reduced(t.accumulate(ib),
                          detail::broadcast(g, q, [](const auto& x, const auto& y) { return -x * y; }));
    }
  });
}

inline Var neg(Var a) {
  const auto ia = a.id();
  return a.tape().record(-a.value(), {ia}, [ia](Tape& t, std::size_t self) {
    t.accumulate(ia) -= t.accumulate(self);
  });
}

inline Var pow_int(Var a, int n) {
  const auto& x = a.value();
  if (n < 0 && (x.array() == 0.0).any()) throw DomainError("pow_int: zero to a negative power");
  const auto ia = a.id();
  return a.tape().record(detail::pow_int(x, n), {ia}, [ia, n](Tape& t, std::size_t self) {
    if (n == 0) return;
    const Tensor& g = t.accumulate(self);
    Tensor d = detail::pow_int(t.value(ia), n - 1) * static_cast<double>(n);
    t.accumulate(ia).array() += g.array() * d.array();
  });
}

inline Var exp(Var a) {
  const auto ia = a.id();
  return a.tape().record(a.value().array().exp().matrix(), {ia}, [ia](Tape& t, std::size_t self) {
    const Tensor& g = t.accumulate(self);
    Tensor e = t.value(self);
    t.accumulate(ia).array() += g.array() * e.array();
  });
}

inline Var log(Var a) {
  if ((a.value().array() <= 0.0).any()) throw DomainError("log: nonpositive argument");
  const auto ia = a.id();
  return a.tape().record(a.value().array().log().matrix(), {ia}, [ia](Tape& t, std::size_t self) {
    const Tensor g = t.accumulate(self);
    t.accumulate(ia).array() += g.array() / t.value(ia).array();
  });
}

inline Var sum(Var a) {
  const auto ia = a.id();
  return a.tape().record(Tensor::Constant(1, 1, a.value().sum()), {ia}, [ia](Tape& t, std::size_t self) {
    const double g = t.accumulate(self)(0, 0);
    t.accumulate(ia).array() += g;
  });
}

inline Var dot(Var a, Var b) {
  auto& tape = detail::same_tape(a, b);
  if (a.value().rows() != b.value().rows() || a.value().cols() != b.value().cols())
    throw UsageError("dot: shape mismatch");
  const double v = (a.value().array() * b.value().array()).sum();
  const auto ia = a.id(), ib = b.id();
  return tape.record(Tensor::Constant(1, 1, v), {ia, ib}, [ia, ib](Tape& t, std::size_t self) {
    const double g = t.accumulate(self)(0, 0);
    if (t.requires_grad(ia)) t.accumulate(ia) += g * t.value(ib);
    if (t.requires_grad(ib)) t.accumulate(ib) += g * t.value(ia);
  });
}

/// Matrix product A * B (B may be a vector).
inline Var matvec(Var a, Var b) {
  auto& tape = detail::same_tape(a, b);
  if (a.value().cols() != b.value().rows()) throw UsageError("matvec: inner dimensions differ");
  Tensor v = a.value() * b.value();
  const auto ia = a.id(), ib = b.id();
  return tape.record(std::move(v), {ia, ib}, [ia, ib](Tape& t, std::size_t self) {
    const Tensor g = t.accumulate(self);
    if (t.requires_grad(ia)) t.accumulate(ia).noalias() += g * t.value(ib).transpose();
    if (t.requires_grad(ib)) t.accumulate(ib).noalias() += t.value(ia).transpose() * g;
  });
}
inline Var matmul(Var a, Var b) { return matvec(a, b); }

/// Elementwise maximum; ties route the gradient to `a`.
inline Var maximum(Var a, Var b) {
  auto& tape = detail::same_tape(a, b);
  detail::check_broadcast(a.value(), b.value(), "maximum");
  Tensor v = detail::broadcast(a.value(), b.value(),
                               [](const auto& x, const auto& y) { return x.max(y); });
  const auto ia = a.id(), ib = b.id();
  return tape.record(std::move(v), {ia, ib}, [ia, ib](Tape& t, std::size_t self) {
    const Tensor g = t.accumulate(self);
    Tensor mask = detail::broadcast(t.value(ia), t.value(ib), [](const auto& x, const auto& y) {
      return (x >= y).template cast<double>();
    });
    if (t.requires_grad(ia)) detail::add_reduced(t.accumulate(ia), (g.array() * mask.array()).matrix());
    if (t.requires_grad(ib))
      detail::add_reduced(t.accumulate(ib), (g.array() * (1.0 - mask.array())).matrix());
  });
}

/// Max-shifted log(sum(exp(x))) over all entries. Throws DegeneracyError
/// when every entry is -inf.
inline double logsumexp_value(const Tensor& x) {
  if (x.size() == 0) throw UsageError("logsumexp of an empty tensor");
  const double m = x.maxCoeff();
  if (m == -std::numeric_limits<double>::infinity())
    throw DegeneracyError("logsumexp: all entries are -inf", 0);
  return m + std::log((x.array() - m).exp().sum());
}

inline Var logsumexp(Var x) {
  const double v = logsumexp_value(x.value());
  const auto ix = x.id();
  return x.tape().record(Tensor::Constant(1, 1, v), {ix}, [ix](Tape& t, std::size_t self) {
    const double g = t.accumulate(self)(0, 0);
    const double lse = t.value(self)(0, 0);
    t.accumulate(ix).array() += g * (t.value(ix).array() - lse).exp();
  });
}

/// out[k] = x[idx[k]] for a vector x.
inline Var gather(Var x, const std::vector<int>& idx) {
  const auto& xv = x.value();
  if (xv.cols() != 1) throw UsageError("gather expects a column vector");
  Tensor v(static_cast<Index>(idx.size()), 1);
  for (std::size_t k = 0; k < idx.size(); ++k) v(static_cast<Index>(k), 0) = xv(idx[k], 0);
  const auto ix = x.id();
  return x.tape().record(std::move(v), {ix}, [ix, idx](Tape& t, std::size_t self) {
    const Tensor g = t.accumulate(self);
    auto& slot = t.accumulate(ix);
    for (std::size_t k = 0; k < idx.size(); ++k) slot(idx[k], 0) += g(static_cast<Index>(k), 0);
  });
}

/// out[:, k] = X[:, idx[k]].
inline Var gather_columns(Var x, const std::vector<int>& idx) {
  const auto& xv = x.value();
  Tensor v(xv.rows(), static_cast<Index>(idx.size()));
  for (std::size_t k = 0; k < idx.size(); ++k) v.col(static_cast<Index>(k)) = xv.col(idx[k]);
  const auto ix = x.id();
  return x.tape().record(std::move(v), {ix}, [ix, idx](Tape& t, std::size_t self) {
    const Tensor g = t.accumulate(self);
    auto& slot = t.accumulate(ix);
    for (std::size_t k = 0; k < idx.size(); ++k) slot.col(idx[k]) += g.col(static_cast<Index>(k));
  });
}

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator/(Var a, Var b) { return div(a, b); }
inline Var operator-(Var a) { return neg(a); }

}  // namespace graphgrad::ad
