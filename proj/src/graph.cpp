#include "convt/graph.hpp"

#include <algorithm>

#include "convt/error.hpp"

namespace convt {

const Tensor& BackwardContext::grad_output() const { return graph_.nodes_[node_].grad; }

const Tensor& BackwardContext::output() const { return graph_.nodes_[node_].val(); }

const Tensor& BackwardContext::input(std::size_t i) const {
  return graph_.nodes_[graph_.nodes_[node_].inputs.at(i)].val();
}

bool BackwardContext::needs_grad(std::size_t i) const {
  return graph_.nodes_[graph_.nodes_[node_].inputs.at(i)].requires_grad;
}

Tensor& BackwardContext::grad_input(std::size_t i) {
  auto& target = graph_.nodes_[graph_.nodes_[node_].inputs.at(i)];
  if (target.grad.empty()) target.grad = Tensor(target.val().shape(), 0.0);
  return target.grad;
}

const Tensor* Gradients::find(const Parameter& p) const {
  auto it = index_.find(&p);
  return it == index_.end() ? nullptr : &entries_[it->second].second;
}

const Tensor& Gradients::at(const Parameter& p) const {
  if (const Tensor* g = find(p)) return *g;
  throw ContractError("no gradient recorded for parameter '" + p.name + "'");
}

Var Graph::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var(static_cast<int>(nodes_.size()) - 1);
}

Var Graph::constant(Tensor value) {
  Node n;
  n.op = "constant";
  n.value = std::move(value);
  n.is_leaf = true;
  return push(std::move(n));
}

Var Graph::input(Tensor value) {
  Node n;
  n.op = "input";
  n.value = std::move(value);
  n.is_leaf = true;
  n.requires_grad = grad_enabled_;
  return push(std::move(n));
}

Var Graph::parameter(const Parameter& p) {
  Node n;
  n.op = "parameter";
  n.external = &p.value;
  n.param = &p;
  n.is_leaf = true;
  n.requires_grad = grad_enabled_;
  return push(std::move(n));
}

Var Graph::record(std::string_view op, std::vector<Var> inputs, Tensor value, BackwardFn backward) {
  if (!value.all_finite()) {
    throw NumericError("operation '" + std::string(op) + "' produced non-finite values");
  }
  Node n;
  n.op = op;
  n.value = std::move(value);
  n.inputs.reserve(inputs.size());
  for (Var v : inputs) {
    const auto& in = node(v);
    n.inputs.push_back(v.id());
    n.requires_grad = n.requires_grad || in.requires_grad;
  }
  if (n.requires_grad) n.backward = std::move(backward);
  return push(std::move(n));
}

const Graph::Node& Graph::node(Var v) const {
  if (!v.valid() || static_cast<std::size_t>(v.id()) >= nodes_.size()) {
    throw ContractError("variable does not belong to this graph");
  }
  return nodes_[v.id()];
}

const Tensor& Graph::value(Var v) const { return node(v).val(); }
bool Graph::requires_grad(Var v) const { return node(v).requires_grad; }
std::string_view Graph::op(Var v) const { return node(v).op; }
const std::vector<int>& Graph::inputs(Var v) const { return node(v).inputs; }

Tensor Graph::grad(Var v) const {
  const auto& n = node(v);
  if (!backward_done_) throw ContractError("grad() requested before backward()");
  if (!n.is_leaf) throw ContractError("gradients of intermediate nodes are not retained");
  if (n.grad.empty()) return Tensor(n.val().shape(), 0.0);
  return n.grad;
}

void Graph::backward(Var loss) {
  if (value(loss).size() != 1) {
    throw ContractError("backward() needs a single-element loss, got shape " + to_string(value(loss).shape()));
  }
  Tensor seed(value(loss).shape(), 1.0);
  backward(std::span<const Var>(&loss, 1), std::span<const Tensor>(&seed, 1));
}

void Graph::backward(std::span<const Var> outputs, std::span<const Tensor> seeds) {
  if (outputs.size() != seeds.size()) throw ContractError("backward(): one seed per output required");
  if (backward_done_) throw ContractError("backward() already ran on this graph");
  backward_done_ = true;
  visited_ = 0;
  int last = -1;
  for (std::size_t i = 0; i < outputs.size(); ++i) {
    node(outputs[i]);
    auto& n = nodes_[outputs[i].id()];
    if (seeds[i].shape() != n.val().shape()) {
      throw DimensionError("seed shape " + to_string(seeds[i].shape()) + " does not match output " +
                           to_string(n.val().shape()));
    }
    if (n.grad.empty()) n.grad = Tensor(n.val().shape(), 0.0);
    for (std::size_t k = 0; k < n.grad.size(); ++k) n.grad[k] += seeds[i][k];
    last = std::max(last, outputs[i].id());
  }
  for (int id = last; id >= 0; --id) {
    auto& n = nodes_[id];
    if (n.is_leaf || !n.requires_grad || n.grad.empty()) continue;
    BackwardContext ctx(*this, id);
    n.backward(ctx);
    ++visited_;
    n.grad = Tensor();  // intermediate gradients are released once consumed
  }
}

Gradients Graph::parameter_gradients() const {
  if (!backward_done_) throw ContractError("parameter_gradients() requested before backward()");
  Gradients out;
  for (const auto& n : nodes_) {
    if (!n.param) continue;
    auto it = out.index_.find(n.param);
    if (it == out.index_.end()) {
      out.index_.emplace(n.param, out.entries_.size());
      out.entries_.emplace_back(n.param, n.grad.empty() ? Tensor(n.val().shape(), 0.0) : n.grad);
    } else if (!n.grad.empty()) {
      auto& acc = out.entries_[it->second].second;
      for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += n.grad[k];
    }
  }
  return out;
}

}  // namespace convt
