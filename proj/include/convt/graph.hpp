#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "convt/tensor.hpp"

namespace convt {

/// A trainable tensor. Graphs reference parameters by address, so a parameter
/// must outlive every graph it was registered in.
struct Parameter {
  std::string name;
  Tensor value;
};

/// Handle to a node of one Graph.
class Var {
 public:
  constexpr Var() = default;
  int id() const noexcept { return id_; }
  bool valid() const noexcept { return id_ >= 0; }
  friend bool operator==(Var, Var) = default;

 private:
  friend class Graph;
  explicit constexpr Var(int id) : id_(id) {}
  int id_ = -1;
};

class Graph;

/// What a backward rule sees while it runs.
class BackwardContext {
 public:
  const Tensor& grad_output() const;
  const Tensor& output() const;
  const Tensor& input(std::size_t i) const;
  bool needs_grad(std::size_t i) const;
  /// Accumulation slot for the gradient of input `i`, zero-filled on first use.
  Tensor& grad_input(std::size_t i);

 private:
  friend class Graph;
  BackwardContext(Graph& graph, int node) : graph_(graph), node_(node) {}
  Graph& graph_;
  int node_;
};

using BackwardFn = std::function<void(BackwardContext&)>;

/// Parameter gradients gathered after a backward pass, in registration order.
class Gradients {
 public:
  const Tensor* find(const Parameter& p) const;
  const Tensor& at(const Parameter& p) const;
  std::size_t size() const noexcept { return entries_.size(); }
  const std::vector<std::pair<const Parameter*, Tensor>>& entries() const noexcept { return entries_; }

 private:
  friend class Graph;
  std::vector<std::pair<const Parameter*, Tensor>> entries_;
  std::unordered_map<const Parameter*, std::size_t> index_;
};

/// Define-by-run tape of differentiable operations.
///
/// Nodes are appended in execution order, so the node list is already a
/// topological order and backward is a single reverse sweep. A Graph is not
/// thread-safe; concurrent forward passes each need their own instance.
class Graph {
 public:
  explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) = default;
  Graph& operator=(Graph&&) = default;

  bool grad_enabled() const noexcept { return grad_enabled_; }

  Var constant(Tensor value);
  /// Differentiable leaf owned by the graph.
  Var input(Tensor value);
  /// Differentiable leaf aliasing `p.value` (no copy).
  Var parameter(const Parameter& p);

  /// Appends an operation node. `value` must be finite; the backward rule is
  /// dropped when no input requires a gradient.
  Var record(std::string_view op, std::vector<Var> inputs, Tensor value, BackwardFn backward);

  const Tensor& value(Var v) const;
  bool requires_grad(Var v) const;
  std::string_view op(Var v) const;
  const std::vector<int>& inputs(Var v) const;
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Gradient of a leaf after backward (zeros when the leaf was unreachable).
  Tensor grad(Var v) const;

  /// Reverse sweep from a single-element loss seeded with 1.
  void backward(Var loss);
  /// Reverse sweep from several outputs with caller-supplied seed gradients.
  void backward(std::span<const Var> outputs, std::span<const Tensor> seeds);

  /// Sums gradients over every leaf registered through parameter().
  Gradients parameter_gradients() const;

  /// Nodes whose backward rule ran during the last sweep.
  std::size_t nodes_visited() const noexcept { return visited_; }

 private:
  friend class BackwardContext;

  struct Node {
    std::string_view op;
    std::vector<int> inputs;
    Tensor value;
    const Tensor* external = nullptr;
    const Parameter* param = nullptr;
    Tensor grad;
    bool requires_grad = false;
    bool is_leaf = false;
    BackwardFn backward;

    const Tensor& val() const { return external ? *external : value; }
  };

  const Node& node(Var v) const;
  Var push(Node node);

  std::vector<Node> nodes_;
  bool grad_enabled_;
  bool backward_done_ = false;
  std::size_t visited_ = 0;
};

}  // namespace convt
