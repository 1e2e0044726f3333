#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "prefrank/tensor.hpp"

namespace prefrank::nk {

class Graph;

/// Handle to a node recorded on a Graph.
struct Var {
  Graph* graph = nullptr;
  int id = -1;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  bool valid() const { return graph != nullptr && id >= 0; }
};

enum class Op : std::uint8_t {
  Leaf,
  MatMul,
  Add,
  Mul,
  AddScalar,
  MulScalar,
  Concat,
  Slice,
  Embedding,
  Softmax,
  LogSoftmax,
  Sigmoid,
  Tanh,
  Relu,
  LayerNorm,
  Log,
  Sum,
  Mean,
};

const char* op_name(Op op);

/// Tape of rank-2 tensor operations with reverse-mode differentiation.
///
/// Nodes are appended in creation order, which is a topological order, so
/// backward is a single reverse sweep. With grad disabled the graph still
/// computes values but keeps no backward state.
class Graph {
 public:
  explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor t);
  /// Leaf bound to `set[name]`; repeated calls return the same node.
  Var param(const ParamSet& set, const std::string& name);

  const Tensor& value(Var v) const { return nodes_.at(static_cast<std::size_t>(v.id)).value; }
  std::size_t size() const { return nodes_.size(); }
  bool grad_enabled() const { return grad_enabled_; }

  /// Reverse sweep from a scalar loss. Returns a gradient for every tensor in
  /// `params` that requires grad; tensors not reached get zeros.
  ParamSet backward(Var loss, const ParamSet& params);

  // Gradient of the last backward() with respect to an arbitrary node.
  const Tensor& grad(Var v) const { return nodes_.at(static_cast<std::size_t>(v.id)).grad; }

  /// One tape record: op kind, inputs, output and locals cached for backward.
  struct Node {
    Op op = Op::Leaf;
    std::vector<int> inputs;
    Tensor value;
    Tensor grad;
    bool needs_grad = false;
    // cached locals for backward
    int axis = 0;
    std::size_t start = 0;
    double scalar = 0.0;
    bool flag = false;
    std::vector<std::size_t> ids;
    Tensor cache;
  };

 private:
  friend struct OpBuilder;

  Var push(Node node);
  void backprop_node(std::size_t i);
  void accumulate(int id, const Tensor& g);

  bool grad_enabled_;
  std::vector<Node> nodes_;
  std::map<std::pair<const ParamSet*, std::string>, int> param_ids_;
};

// Primitive operations. All operands are rank-2; rank-1 inputs to
// Graph::constant are promoted to a single row.

Var matmul(Var a, Var b, bool transpose_b = false);
/// Elementwise with broadcasting of unit dimensions on either side.
Var add(Var a, Var b);
Var mul(Var a, Var b);
Var add(Var a, double c);
Var mul(Var a, double c);
Var sub(Var a, Var b);
Var concat(const std::vector<Var>& parts, int axis);
Var slice(Var a, int axis, std::size_t start, std::size_t len);
/// Gathers rows of `table` for each id.
Var embedding(Var table, const std::vector<std::size_t>& ids);
Var softmax(Var a, int axis = 1);
Var log_softmax(Var a, int axis = 1);
Var sigmoid(Var a);
Var tanh(Var a);
Var relu(Var a);
/// Row-wise normalisation to zero mean and unit variance, no affine.
Var layer_norm(Var a, double eps = 1e-5);
Var log(Var a);
/// axis = -1 reduces everything to a 1x1 scalar.
Var sum(Var a, int axis = -1);
Var mean(Var a, int axis = -1);

}  // namespace prefrank::nk
