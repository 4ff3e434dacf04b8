#pragma once

#include <functional>
#include <unordered_map>
#include <utility>
#include <vector>

#include "metaseg/tensor.hpp"

namespace metaseg {

template <class S>
class Graph;

/// Handle into a Graph's tape. Cheap to copy; valid while the graph lives.
template <class S>
struct Var {
  Graph<S>* g = nullptr;
  int id = -1;

  const Tensor<S>& value() const { return g->val(id); }
  const std::vector<int>& shape() const { return g->val(id).shape; }
  Eigen::Index numel() const { return g->val(id).numel(); }
};

template <class S>
struct Gradients {
  std::unordered_map<int, Tensor<S>> by_id;

  const Tensor<S>& at(const Var<S>& v) const {
    auto it = by_id.find(v.id);
    require<StructureError>(it != by_id.end(), "no gradient recorded for this var");
    return it->second;
  }
  bool has(const Var<S>& v) const { return by_id.count(v.id) != 0; }
  size_t size() const { return by_id.size(); }
};

/// Reverse-mode tape. Nodes are appended in execution order, so walking ids
/// backwards is a valid reverse-topological order. One graph per thread.
template <class S>
class Graph {
 public:
  using Array = typename Tensor<S>::Array;
  /// (graph, gradient of this node's output, this node's id)
  using Vjp = std::function<void(Graph&, const Array& gout, int self)>;

  Var<S> leaf(Tensor<S> v, bool needs_grad = true) {
    return Var<S>{this, push("leaf", std::move(v), {}, nullptr, needs_grad, true)};
  }
  Var<S> constant(Tensor<S> v) { return leaf(std::move(v), false); }
  Var<S> constant_scalar(S v) { return leaf(Tensor<S>::scalar(v), false); }

  /// Appends an op node. `vjp` reads the node's output gradient and calls
  /// accum() on the input ids it captured. Output must be finite.
  Var<S> op(const char* name, Tensor<S> value, const std::vector<int>& inputs, Vjp vjp) {
    bool req = false;
    if (grad_enabled_) {
      for (int i : inputs) req = req || nodes_[static_cast<size_t>(i)].needs;
    }
    return Var<S>{this, push(name, std::move(value), inputs, req ? std::move(vjp) : nullptr, req, false)};
  }

  const Tensor<S>& val(int id) const { return nodes_[static_cast<size_t>(id)].value; }
  bool requires_grad(int id) const { return nodes_[static_cast<size_t>(id)].needs; }
  size_t num_nodes() const { return nodes_.size(); }

  void set_grad_enabled(bool on) { grad_enabled_ = on; }
  bool grad_enabled() const { return grad_enabled_; }

  /// Accumulates a gradient contribution into node `id` during backward.
  void accum(int id, const Array& g) {
    auto& n = nodes_[static_cast<size_t>(id)];
    if (!n.needs) return;
    require<SizeError>(g.size() == n.value.numel(), "gradient size mismatch in vjp");
    if (!touched_[static_cast<size_t>(id)]) {
      gbuf_[static_cast<size_t>(id)] = g;
      touched_[static_cast<size_t>(id)] = true;
    } else {
      gbuf_[static_cast<size_t>(id)] += g;
    }
  }

  /// Backpropagates from a scalar seed. Returns gradients for every
  /// requires-grad leaf; leaves the seed does not reach get zeros.
  Gradients<S> backward(const Var<S>& seed) {
    require<ShapeError>(seed.g == this, "seed var belongs to another graph");
    const auto& sv = val(seed.id);
    require<ShapeError>(sv.is_scalar(), "backward seed must be a scalar");

    gbuf_.assign(nodes_.size(), Array());
    touched_.assign(nodes_.size(), 0);
    if (nodes_[static_cast<size_t>(seed.id)].needs) {
      gbuf_[static_cast<size_t>(seed.id)] = Array::Ones(1);
      touched_[static_cast<size_t>(seed.id)] = true;
    }

    for (int id = seed.id; id >= 0; --id) {
      auto& n = nodes_[static_cast<size_t>(id)];
      if (!n.needs || !touched_[static_cast<size_t>(id)] || !n.vjp) continue;
      n.vjp(*this, gbuf_[static_cast<size_t>(id)], id);
    }

    Gradients<S> out;
    for (size_t id = 0; id < nodes_.size(); ++id) {
      auto& n = nodes_[id];
      if (!n.is_leaf || !n.needs) continue;
      if (touched_[id]) {
        Tensor<S> t(n.value.shape, std::move(gbuf_[id]));
        require<NumericError>(t.all_finite(), std::string("non-finite gradient for leaf ") +
                                                  std::to_string(id));
        out.by_id.emplace(static_cast<int>(id), std::move(t));
      } else {
        out.by_id.emplace(static_cast<int>(id), Tensor<S>::zeros(n.value.shape));
      }
    }
    gbuf_.clear();
    touched_.clear();
    return out;
  }

 private:
  struct Node {
    const char* op;
    Tensor<S> value;
    std::vector<int> inputs;
    Vjp vjp;
    bool needs = false;
    bool is_leaf = false;
  };

  int push(const char* name, Tensor<S> value, std::vector<int> inputs, Vjp vjp, bool needs,
           bool is_leaf) {
    require<NumericError>(value.all_finite(),
                          std::string(name) + ": non-finite values in tensor");
    nodes_.push_back(Node{name, std::move(value), std::move(inputs), std::move(vjp), needs,
                          is_leaf});
    return static_cast<int>(nodes_.size()) - 1;
  }

  std::vector<Node> nodes_;
  std::vector<Array> gbuf_;
  std::vector<char> touched_;
  bool grad_enabled_ = true;
};

}  // namespace metaseg
