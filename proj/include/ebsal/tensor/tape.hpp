#pragma once

#include <deque>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "ebsal/tensor/tensor.hpp"

namespace ebsal {

template <typename T>
class Tape;

// Handle to a value recorded on a Tape. Cheap to copy; only valid while the
// owning tape is alive.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape<T>& tape() const {
    if (!tape_) throw std::logic_error("use of an unbound Var");
    return *tape_;
  }
  std::size_t id() const noexcept { return id_; }
  bool bound() const noexcept { return tape_ != nullptr; }

  const Tensor<T>& value() const { return tape().value(id_); }
  const Shape& shape() const { return value().shape(); }
  std::size_t size() const { return value().size(); }
  bool tracked() const { return tape().tracked(id_); }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Wengert list for reverse-mode differentiation.
//
// Nodes are appended in evaluation order, so the record is topologically
// sorted by construction. A node is tracked when any of its parents is; only
// tracked nodes keep a backward closure and receive an adjoint. Leaves bound
// to an external Tensor with requires_grad() accumulate their adjoint into
// that tensor's grad buffer on backward(), so repeated passes accumulate until
// zero_grad() is called.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // External tensor, referenced without copying. Tracked iff requires_grad().
  Var<T> leaf(Tensor<T>& t) { return push_external(&t, t.requires_grad()); }

  // External tensor with explicit tracking. A tracked leaf whose tensor does
  // not require grad still exposes its adjoint through leaf_gradients().
  Var<T> leaf(Tensor<T>& t, bool track) { return push_external(&t, track); }

  // External tensor referenced without copying and never tracked.
  Var<T> ref(const Tensor<T>& t) { return push_external(const_cast<Tensor<T>*>(&t), false); }

  Var<T> constant(Tensor<T> t) { return push_owned(std::move(t), false, "constant"); }

  // Owned input whose gradient is read back with grad().
  Var<T> variable(Tensor<T> t) { return push_owned(std::move(t), true, "variable"); }

  // Appends the result of a primitive. `parents` determine tracking.
  Var<T> record(const char* op, Tensor<T> value, std::initializer_list<Var<T>> parents,
                BackwardFn backward) {
    return record(op, std::move(value), std::vector<Var<T>>(parents), std::move(backward));
  }

  Var<T> record(const char* op, Tensor<T> value, const std::vector<Var<T>>& parents,
                BackwardFn backward) {
    if (!all_finite<T>(value.data())) {
      throw NumericError(std::string("non-finite output in forward pass of ") + op);
    }
    bool tracked = false;
    for (const auto& p : parents) {
      if (&p.tape() != this) throw std::logic_error(std::string(op) + ": operands on different tapes");
      tracked = tracked || nodes_[p.id()].tracked;
    }
    Node node;
    node.owned = std::move(value);
    node.tracked = tracked;
    node.op = op;
    if (tracked) node.backward = std::move(backward);
    nodes_.push_back(std::move(node));
    return Var<T>(this, nodes_.size() - 1);
  }

  const Tensor<T>& value(std::size_t id) const {
    const Node& n = nodes_.at(id);
    return n.external ? *n.external : n.owned;
  }
  bool tracked(std::size_t id) const { return nodes_.at(id).tracked; }
  std::size_t size() const noexcept { return nodes_.size(); }

  // Adjoint buffer of a node, allocated on first use.
  std::span<T> adjoint(std::size_t id) {
    Node& n = nodes_[id];
    if (n.adjoint.empty()) n.adjoint.assign(value(id).size(), T{0});
    return n.adjoint;
  }

  // Adds `g` into the adjoint of `parent` if that node is tracked.
  void accumulate(const Var<T>& parent, std::span<const T> g) {
    Node& n = nodes_[parent.id()];
    if (!n.tracked) return;
    auto adj = adjoint(parent.id());
    for (std::size_t i = 0; i < g.size(); ++i) adj[i] += g[i];
  }

  // Returns a writable adjoint for `parent`, or an empty span when untracked.
  std::span<T> adjoint_if_tracked(const Var<T>& parent) {
    if (!nodes_[parent.id()].tracked) return {};
    return adjoint(parent.id());
  }

  // Gradient of the last backward() loss with respect to `v`.
  std::span<const T> grad(const Var<T>& v) const {
    const Node& n = nodes_.at(v.id());
    if (!n.tracked) throw std::logic_error("grad() requested for an untracked value");
    if (n.adjoint.empty()) {
      zero_buffer_.assign(value(v.id()).size(), T{0});
      return zero_buffer_;
    }
    return n.adjoint;
  }

  Tensor<T> grad_tensor(const Var<T>& v) const {
    auto g = grad(v);
    return Tensor<T>(value(v.id()).shape(), std::vector<T>(g.begin(), g.end()));
  }

  // Reverse sweep from a scalar loss. With `write_leaves` the adjoints of
  // tracked external leaves are added into their grad buffers.
  void backward(const Var<T>& loss, bool write_leaves = true) {
    if (&loss.tape() != this) throw std::logic_error("backward: loss belongs to another tape");
    if (value(loss.id()).size() != 1) {
      throw DimensionError("backward: loss must be scalar, got " + shape_str(value(loss.id()).shape()));
    }
    if (!nodes_[loss.id()].tracked) {
      throw std::logic_error("backward: loss is detached from every tracked tensor");
    }
    for (auto& n : nodes_) std::fill(n.adjoint.begin(), n.adjoint.end(), T{0});
    adjoint(loss.id())[0] = T{1};
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.tracked || n.adjoint.empty()) continue;
      if (!all_finite<T>(n.adjoint)) {
        throw NumericError(std::string("non-finite gradient in backward pass of ") + n.op);
      }
      if (n.backward) n.backward(*this, i);
      if (write_leaves && n.external && n.external->requires_grad()) {
        auto g = n.external->grad();
        for (std::size_t k = 0; k < g.size(); ++k) g[k] += n.adjoint[k];
      }
    }
  }

  // Adjoints of tracked external leaves after backward(loss, false), in
  // recording order. Used to combine per-tape gradients deterministically.
  std::vector<std::pair<Tensor<T>*, std::span<const T>>> leaf_gradients() const {
    std::vector<std::pair<Tensor<T>*, std::span<const T>>> out;
    for (const auto& n : nodes_) {
      if (n.external && n.tracked && !n.adjoint.empty()) out.emplace_back(n.external, n.adjoint);
    }
    return out;
  }

 private:
  struct Node {
    Tensor<T> owned;
    Tensor<T>* external = nullptr;
    bool tracked = false;
    const char* op = "";
    std::vector<T> adjoint;
    BackwardFn backward;
  };

  Var<T> push_external(Tensor<T>* t, bool tracked) {
    Node node;
    node.external = t;
    node.tracked = tracked;
    node.op = "leaf";
    nodes_.push_back(std::move(node));
    return Var<T>(this, nodes_.size() - 1);
  }

  Var<T> push_owned(Tensor<T> t, bool tracked, const char* op) {
    if (!all_finite<T>(t.data())) throw NumericError(std::string("non-finite ") + op + " input");
    Node node;
    node.owned = std::move(t);
    node.tracked = tracked;
    node.op = op;
    nodes_.push_back(std::move(node));
    return Var<T>(this, nodes_.size() - 1);
  }

  std::deque<Node> nodes_;
  mutable std::vector<T> zero_buffer_;
};

}  // namespace ebsal
