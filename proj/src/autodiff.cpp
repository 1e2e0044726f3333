#include "prefrank/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace prefrank::nk {

const char* op_name(Op op) {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::MatMul: return "matmul";
    case Op::Add: return "add";
    case Op::Mul: return "mul";
    case Op::AddScalar: return "add_scalar";
    case Op::MulScalar: return "mul_scalar";
    case Op::Concat: return "concat";
    case Op::Slice: return "slice";
    case Op::Embedding: return "embedding";
    case Op::Softmax: return "softmax";
    case Op::LogSoftmax: return "log_softmax";
    case Op::Sigmoid: return "sigmoid";
    case Op::Tanh: return "tanh";
    case Op::Relu: return "relu";
    case Op::LayerNorm: return "layer_norm";
    case Op::Log: return "log";
    case Op::Sum: return "sum";
    case Op::Mean: return "mean";
  }
  return "?";
}

const Tensor& Var::value() const { return graph->value(*this); }

namespace {

Tensor as_matrix(Tensor t) {
  if (t.rank() == 2) return t;
  if (t.rank() == 1) {
    const std::size_t n = t.size();
    return Tensor({1, n}, std::move(t.vec()));
  }
  throw ShapeError("graph: only rank-1/2 tensors are supported, got " + shape_str(t.shape()));
}

void check_finite(const Tensor& t, Op op) {
  if (!t.all_finite()) throw NumericError(std::string(op_name(op)) + ": non-finite output");
}

Graph* same_graph(Var a, Var b, const char* op) {
  if (a.graph == nullptr || a.graph != b.graph) {
    throw std::invalid_argument(std::string(op) + ": operands belong to different graphs");
  }
  return a.graph;
}

// Sum `g` down to `shape` along broadcast dimensions.
Tensor reduce_to(const Tensor& g, const Shape& shape) {
  if (g.shape() == shape) return g;
  Tensor out(shape, 0.0);
  const std::size_t R = g.rows(), C = g.cols();
  const bool br = shape[0] == 1, bc = shape[1] == 1;
  for (std::size_t r = 0; r < R; ++r) {
    for (std::size_t c = 0; c < C; ++c) {
      out.at(br ? 0 : r, bc ? 0 : c) += g.at(r, c);
    }
  }
  return out;
}

Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  Shape out(2);
  for (int d = 0; d < 2; ++d) {
    if (a[d] == b[d] || b[d] == 1) {
      out[d] = a[d];
    } else if (a[d] == 1) {
      out[d] = b[d];
    } else {
      throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
  }
  return out;
}

}  // namespace

struct OpBuilder {
  static Var push(Graph* g, Graph::Node node) { return g->push(std::move(node)); }
  static Graph::Node& node(Var v) { return v.graph->nodes_[static_cast<std::size_t>(v.id)]; }
  static bool needs(Var v) { return node(v).needs_grad; }
};

Var Graph::push(Node node) {
  check_finite(node.value, node.op);
  if (node.op != Op::Leaf) {
    node.needs_grad = false;
    for (int in : node.inputs) node.needs_grad = node.needs_grad || nodes_[static_cast<std::size_t>(in)].needs_grad;
    if (!grad_enabled_) {
      node.needs_grad = false;
    }
    if (!node.needs_grad) {
      node.cache = Tensor();
      node.ids.clear();
    }
  }
  nodes_.push_back(std::move(node));
  return Var{this, static_cast<int>(nodes_.size() - 1)};
}

Var Graph::constant(Tensor t) {
  Node n;
  n.op = Op::Leaf;
  n.value = as_matrix(std::move(t));
  n.value.requires_grad = false;
  n.needs_grad = false;
  return push(std::move(n));
}

Var Graph::param(const ParamSet& set, const std::string& name) {
  auto key = std::make_pair(&set, name);
  if (auto it = param_ids_.find(key); it != param_ids_.end()) return Var{this, it->second};
  const Tensor& t = set.get(name);
  Node n;
  n.op = Op::Leaf;
  n.value = as_matrix(t);
  n.needs_grad = grad_enabled_ && t.requires_grad;
  Var v = push(std::move(n));
  param_ids_.emplace(std::move(key), v.id);
  return v;
}

void Graph::accumulate(int id, const Tensor& g) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (!n.needs_grad) return;
  if (n.grad.empty()) {
    n.grad = g;
  } else {
    auto dst = n.grad.data();
    auto src = g.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  }
}

ParamSet Graph::backward(Var loss, const ParamSet& params) {
  if (loss.graph != this) throw std::invalid_argument("backward: loss does not belong to this graph");
  if (!grad_enabled_) throw std::logic_error("backward: graph was built with grad disabled");
  const Tensor& lv = value(loss);
  if (lv.size() != 1) throw ShapeError("backward: loss must be scalar, got " + shape_str(lv.shape()));
  for (auto& n : nodes_) n.grad = Tensor();
  Node& root = nodes_[static_cast<std::size_t>(loss.id)];
  if (root.needs_grad) root.grad = Tensor(lv.shape(), 1.0);
  for (std::size_t i = static_cast<std::size_t>(loss.id) + 1; i-- > 0;) {
    if (nodes_[i].op == Op::Leaf || nodes_[i].grad.empty()) continue;
    backprop_node(i);
  }
  ParamSet grads = params.zeros_like();
  for (auto& [name, g] : grads.tensors()) {
    auto it = param_ids_.find({&params, name});
    if (it == param_ids_.end()) continue;
    const Node& n = nodes_[static_cast<std::size_t>(it->second)];
    if (n.grad.empty()) continue;
    g = Tensor(g.shape(), n.grad.vec());
    g.requires_grad = params.get(name).requires_grad;
  }
  return grads;
}

void Graph::backprop_node(std::size_t i) {
  // Copy what we need: accumulate() may reference other nodes but never
  // reallocates nodes_, so references stay valid.
  const Node& n = nodes_[i];
  const Tensor& dy = n.grad;
  const Tensor& y = n.value;
  auto in_node = [&](std::size_t k) -> const Node& { return nodes_[static_cast<std::size_t>(n.inputs[k])]; };
  auto in_needs = [&](std::size_t k) { return in_node(k).needs_grad; };

  switch (n.op) {
    case Op::Leaf:
      break;
    case Op::MatMul: {
      const Tensor& a = in_node(0).value;
      const Tensor& b = in_node(1).value;
      const bool tb = n.flag;
      const std::size_t m = a.rows(), k = a.cols(), cols = y.cols();
      if (in_needs(0)) {
        Tensor da(a.shape(), 0.0);
        // da = dy * b^T  (or dy * b when b was used transposed)
        gemm(dy.data(), b.data(), da.data(), m, cols, k, false, !tb, false);
        accumulate(n.inputs[0], da);
      }
      if (in_needs(1)) {
        Tensor db(b.shape(), 0.0);
        if (!tb) {
          gemm(a.data(), dy.data(), db.data(), k, m, cols, true, false, false);
        } else {
          gemm(dy.data(), a.data(), db.data(), cols, m, k, true, false, false);
        }
        accumulate(n.inputs[1], db);
      }
      break;
    }
    case Op::Add: {
      for (std::size_t k = 0; k < 2; ++k) {
        if (in_needs(k)) accumulate(n.inputs[k], reduce_to(dy, in_node(k).value.shape()));
      }
      break;
    }
    case Op::Mul: {
      const Tensor& a = in_node(0).value;
      const Tensor& b = in_node(1).value;
      const std::size_t R = y.rows(), C = y.cols();
      auto at_b = [](const Tensor& t, std::size_t r, std::size_t c) {
        return t.at(t.rows() == 1 ? 0 : r, t.cols() == 1 ? 0 : c);
      };
      if (in_needs(0)) {
        Tensor g(y.shape(), 0.0);
        for (std::size_t r = 0; r < R; ++r)
          for (std::size_t c = 0; c < C; ++c) g.at(r, c) = dy.at(r, c) * at_b(b, r, c);
        accumulate(n.inputs[0], reduce_to(g, a.shape()));
      }
      if (in_needs(1)) {
        Tensor g(y.shape(), 0.0);
        for (std::size_t r = 0; r < R; ++r)
          for (std::size_t c = 0; c < C; ++c) g.at(r, c) = dy.at(r, c) * at_b(a, r, c);
        accumulate(n.inputs[1], reduce_to(g, b.shape()));
      }
      break;
    }
    case Op::AddScalar:
      accumulate(n.inputs[0], dy);
      break;
    case Op::MulScalar: {
      Tensor g = dy;
      for (auto& v : g.data()) v *= n.scalar;
      accumulate(n.inputs[0], g);
      break;
    }
    case Op::Concat: {
      std::size_t offset = 0;
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        const Tensor& part = in_node(k).value;
        const std::size_t pr = part.rows(), pc = part.cols();
        if (in_needs(k)) {
          Tensor g(part.shape(), 0.0);
          for (std::size_t r = 0; r < pr; ++r)
            for (std::size_t c = 0; c < pc; ++c)
              g.at(r, c) = n.axis == 0 ? dy.at(offset + r, c) : dy.at(r, offset + c);
          accumulate(n.inputs[k], g);
        }
        offset += n.axis == 0 ? pr : pc;
      }
      break;
    }
    case Op::Slice: {
      // scatter straight into the parent's gradient buffer
      Node& parent = nodes_[static_cast<std::size_t>(n.inputs[0])];
      if (!parent.needs_grad) break;
      if (parent.grad.empty()) parent.grad = Tensor(parent.value.shape(), 0.0);
      Tensor& g = parent.grad;
      for (std::size_t r = 0; r < y.rows(); ++r)
        for (std::size_t c = 0; c < y.cols(); ++c) {
          if (n.axis == 0) {
            g.at(n.start + r, c) += dy.at(r, c);
          } else {
            g.at(r, n.start + c) += dy.at(r, c);
          }
        }
      break;
    }
    case Op::Embedding: {
      const Tensor& table = in_node(0).value;
      Tensor g(table.shape(), 0.0);
      const std::size_t d = table.cols();
      for (std::size_t r = 0; r < n.ids.size(); ++r) {
        double* dst = g.data().data() + n.ids[r] * d;
        const double* src = dy.data().data() + r * d;
        for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
      }
      accumulate(n.inputs[0], g);
      break;
    }
    case Op::Softmax:
    case Op::LogSoftmax: {
      const bool logsm = n.op == Op::LogSoftmax;
      Tensor g(y.shape(), 0.0);
      const std::size_t R = y.rows(), C = y.cols();
      const std::size_t outer = n.axis == 1 ? R : C;
      const std::size_t inner = n.axis == 1 ? C : R;
      auto idx = [&](std::size_t o, std::size_t j) { return n.axis == 1 ? o * C + j : j * C + o; };
      for (std::size_t o = 0; o < outer; ++o) {
        double s = 0.0;
        if (logsm) {
          for (std::size_t j = 0; j < inner; ++j) s += dy[idx(o, j)];
          for (std::size_t j = 0; j < inner; ++j) g[idx(o, j)] = dy[idx(o, j)] - std::exp(y[idx(o, j)]) * s;
        } else {
          for (std::size_t j = 0; j < inner; ++j) s += dy[idx(o, j)] * y[idx(o, j)];
          for (std::size_t j = 0; j < inner; ++j) g[idx(o, j)] = y[idx(o, j)] * (dy[idx(o, j)] - s);
        }
      }
      accumulate(n.inputs[0], g);
      break;
    }
    case Op::Sigmoid:
    case Op::Tanh:
    case Op::Relu:
    case Op::Log: {
      const Tensor& x = in_node(0).value;
      Tensor g(y.shape(), 0.0);
      for (std::size_t j = 0; j < g.size(); ++j) {
        double d = 0.0;
        switch (n.op) {
          case Op::Sigmoid: d = y[j] * (1.0 - y[j]); break;
          case Op::Tanh: d = 1.0 - y[j] * y[j]; break;
          case Op::Relu: d = x[j] > 0.0 ? 1.0 : 0.0; break;
          default: d = 1.0 / x[j]; break;
        }
        g[j] = dy[j] * d;
      }
      accumulate(n.inputs[0], g);
      break;
    }
    case Op::LayerNorm: {
      // cache holds 1/sigma per row; y is xhat.
      const std::size_t R = y.rows(), C = y.cols();
      Tensor g(y.shape(), 0.0);
      for (std::size_t r = 0; r < R; ++r) {
        double mdy = 0.0, mdyx = 0.0;
        for (std::size_t c = 0; c < C; ++c) {
          mdy += dy.at(r, c);
          mdyx += dy.at(r, c) * y.at(r, c);
        }
        mdy /= static_cast<double>(C);
        mdyx /= static_cast<double>(C);
        const double inv = n.cache[r];
        for (std::size_t c = 0; c < C; ++c) g.at(r, c) = inv * (dy.at(r, c) - mdy - y.at(r, c) * mdyx);
      }
      accumulate(n.inputs[0], g);
      break;
    }
    case Op::Sum:
    case Op::Mean: {
      const Tensor& x = in_node(0).value;
      const std::size_t R = x.rows(), C = x.cols();
      double scale = 1.0;
      if (n.op == Op::Mean) {
        scale = n.axis == -1 ? 1.0 / static_cast<double>(R * C)
                             : 1.0 / static_cast<double>(n.axis == 0 ? R : C);
      }
      Tensor g(x.shape(), 0.0);
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = 0; c < C; ++c) {
          const double up = n.axis == -1 ? dy[0] : (n.axis == 0 ? dy.at(0, c) : dy.at(r, 0));
          g.at(r, c) = up * scale;
        }
      accumulate(n.inputs[0], g);
      break;
    }
  }
}

// ---------------------------------------------------------------------------
// forward ops

Var matmul(Var a, Var b, bool transpose_b) {
  Graph* g = same_graph(a, b, "matmul");
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  const std::size_t m = A.rows(), k = A.cols();
  const std::size_t bk = transpose_b ? B.cols() : B.rows();
  const std::size_t n = transpose_b ? B.rows() : B.cols();
  if (k != bk) {
    throw ShapeError("matmul: shape " + shape_str(A.shape()) + " x " + shape_str(B.shape()) +
                     (transpose_b ? "^T" : "") + " mismatch");
  }
  Graph::Node node;
  node.op = Op::MatMul;
  node.inputs = {a.id, b.id};
  node.flag = transpose_b;
  node.value = Tensor({m, n}, 0.0);
  gemm(A.data(), B.data(), node.value.data(), m, k, n, false, transpose_b, false);
  return OpBuilder::push(g, std::move(node));
}

namespace {
Var broadcast_binary(Var a, Var b, Op op) {
  Graph* g = same_graph(a, b, op_name(op));
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  Shape out = broadcast_shape(A.shape(), B.shape(), op_name(op));
  Graph::Node node;
  node.op = op;
  node.inputs = {a.id, b.id};
  node.value = Tensor(out, 0.0);
  const std::size_t R = out[0], C = out[1];
  const bool ar = A.rows() == 1, ac = A.cols() == 1, brr = B.rows() == 1, bc = B.cols() == 1;
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t c = 0; c < C; ++c) {
      const double x = A.at(ar ? 0 : r, ac ? 0 : c);
      const double w = B.at(brr ? 0 : r, bc ? 0 : c);
      node.value.at(r, c) = op == Op::Add ? x + w : x * w;
    }
  return OpBuilder::push(g, std::move(node));
}

template <typename F>
Var unary(Var a, Op op, F f) {
  Graph::Node node;
  node.op = op;
  node.inputs = {a.id};
  node.value = a.value();
  node.value.requires_grad = false;
  for (auto& v : node.value.data()) v = f(v);
  return OpBuilder::push(a.graph, std::move(node));
}
}  // namespace

Var add(Var a, Var b) { return broadcast_binary(a, b, Op::Add); }
Var mul(Var a, Var b) { return broadcast_binary(a, b, Op::Mul); }

Var add(Var a, double c) {
  Var v = unary(a, Op::AddScalar, [c](double x) { return x + c; });
  OpBuilder::node(v).scalar = c;
  return v;
}

Var mul(Var a, double c) {
  Var v = unary(a, Op::MulScalar, [c](double x) { return x * c; });
  OpBuilder::node(v).scalar = c;
  return v;
}

Var sub(Var a, Var b) { return add(a, mul(b, -1.0)); }

Var concat(const std::vector<Var>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  if (axis != 0 && axis != 1) throw ShapeError("concat: axis must be 0 or 1");
  Graph* g = parts.front().graph;
  std::size_t R = 0, C = 0;
  for (const Var& p : parts) {
    same_graph(parts.front(), p, "concat");
    const Tensor& t = p.value();
    if (axis == 0) {
      if (C == 0) C = t.cols();
      if (t.cols() != C)
        throw ShapeError("concat: column mismatch " + shape_str(parts.front().shape()) + " vs " + shape_str(t.shape()));
      R += t.rows();
    } else {
      if (R == 0) R = t.rows();
      if (t.rows() != R)
        throw ShapeError("concat: row mismatch " + shape_str(parts.front().shape()) + " vs " + shape_str(t.shape()));
      C += t.cols();
    }
  }
  Graph::Node node;
  node.op = Op::Concat;
  node.axis = axis;
  node.value = Tensor({R, C}, 0.0);
  std::size_t offset = 0;
  for (const Var& p : parts) {
    node.inputs.push_back(p.id);
    const Tensor& t = p.value();
    for (std::size_t r = 0; r < t.rows(); ++r)
      for (std::size_t c = 0; c < t.cols(); ++c) {
        if (axis == 0) {
          node.value.at(offset + r, c) = t.at(r, c);
        } else {
          node.value.at(r, offset + c) = t.at(r, c);
        }
      }
    offset += axis == 0 ? t.rows() : t.cols();
  }
  return OpBuilder::push(g, std::move(node));
}

Var slice(Var a, int axis, std::size_t start, std::size_t len) {
  const Tensor& A = a.value();
  if (axis != 0 && axis != 1) throw ShapeError("slice: axis must be 0 or 1");
  const std::size_t extent = axis == 0 ? A.rows() : A.cols();
  if (len == 0 || start + len > extent) {
    throw ShapeError("slice: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                     ") out of bounds for " + shape_str(A.shape()) + " axis " + std::to_string(axis));
  }
  Graph::Node node;
  node.op = Op::Slice;
  node.inputs = {a.id};
  node.axis = axis;
  node.start = start;
  const std::size_t R = axis == 0 ? len : A.rows();
  const std::size_t C = axis == 1 ? len : A.cols();
  node.value = Tensor({R, C}, 0.0);
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t c = 0; c < C; ++c)
      node.value.at(r, c) = axis == 0 ? A.at(start + r, c) : A.at(r, start + c);
  return OpBuilder::push(a.graph, std::move(node));
}

Var embedding(Var table, const std::vector<std::size_t>& ids) {
  const Tensor& T = table.value();
  if (ids.empty()) throw ShapeError("embedding: empty id list");
  const std::size_t d = T.cols();
  Graph::Node node;
  node.op = Op::Embedding;
  node.inputs = {table.id};
  node.ids = ids;
  node.value = Tensor({ids.size(), d}, 0.0);
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] >= T.rows()) {
      throw ShapeError("embedding: id " + std::to_string(ids[r]) + " out of range for table " + shape_str(T.shape()));
    }
    std::copy_n(T.data().data() + ids[r] * d, d, node.value.data().data() + r * d);
  }
  return OpBuilder::push(table.graph, std::move(node));
}

namespace {
Var softmax_impl(Var a, int axis, bool logsm) {
  if (axis != 0 && axis != 1) throw ShapeError(std::string(logsm ? "log_softmax" : "softmax") + ": axis must be 0 or 1");
  const Tensor& A = a.value();
  Graph::Node node;
  node.op = logsm ? Op::LogSoftmax : Op::Softmax;
  node.inputs = {a.id};
  node.axis = axis;
  node.value = Tensor(A.shape(), 0.0);
  const std::size_t R = A.rows(), C = A.cols();
  const std::size_t outer = axis == 1 ? R : C;
  const std::size_t inner = axis == 1 ? C : R;
  auto idx = [&](std::size_t o, std::size_t j) { return axis == 1 ? o * C + j : j * C + o; };
  for (std::size_t o = 0; o < outer; ++o) {
    double mx = A[idx(o, 0)];
    for (std::size_t j = 1; j < inner; ++j) mx = std::max(mx, A[idx(o, j)]);
    double s = 0.0;
    for (std::size_t j = 0; j < inner; ++j) s += std::exp(A[idx(o, j)] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < inner; ++j) {
      node.value[idx(o, j)] = logsm ? A[idx(o, j)] - lse : std::exp(A[idx(o, j)] - mx) / s;
    }
  }
  return OpBuilder::push(a.graph, std::move(node));
}
}  // namespace

Var softmax(Var a, int axis) { return softmax_impl(a, axis, false); }
Var log_softmax(Var a, int axis) { return softmax_impl(a, axis, true); }

Var sigmoid(Var a) {
  return unary(a, Op::Sigmoid, [](double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
  });
}

Var tanh(Var a) { return unary(a, Op::Tanh, [](double x) { return std::tanh(x); }); }
Var relu(Var a) { return unary(a, Op::Relu, [](double x) { return x > 0.0 ? x : 0.0; }); }
Var log(Var a) { return unary(a, Op::Log, [](double x) { return std::log(x); }); }

Var layer_norm(Var a, double eps) {
  const Tensor& A = a.value();
  const std::size_t R = A.rows(), C = A.cols();
  Graph::Node node;
  node.op = Op::LayerNorm;
  node.inputs = {a.id};
  node.value = Tensor(A.shape(), 0.0);
  node.cache = Tensor({R, 1}, 0.0);
  for (std::size_t r = 0; r < R; ++r) {
    double mu = 0.0;
    for (std::size_t c = 0; c < C; ++c) mu += A.at(r, c);
    mu /= static_cast<double>(C);
    double var = 0.0;
    for (std::size_t c = 0; c < C; ++c) var += (A.at(r, c) - mu) * (A.at(r, c) - mu);
    var /= static_cast<double>(C);
    const double inv = 1.0 / std::sqrt(var + eps);
    node.cache[r] = inv;
    for (std::size_t c = 0; c < C; ++c) node.value.at(r, c) = (A.at(r, c) - mu) * inv;
  }
  return OpBuilder::push(a.graph, std::move(node));
}

namespace {
Var reduce_impl(Var a, int axis, bool is_mean) {
  if (axis < -1 || axis > 1) throw ShapeError("sum/mean: axis must be -1, 0 or 1");
  const Tensor& A = a.value();
  const std::size_t R = A.rows(), C = A.cols();
  Graph::Node node;
  node.op = is_mean ? Op::Mean : Op::Sum;
  node.inputs = {a.id};
  node.axis = axis;
  if (axis == -1) {
    double s = 0.0;
    for (double v : A.data()) s += v;
    node.value = Tensor::scalar(is_mean ? s / static_cast<double>(A.size()) : s);
  } else if (axis == 0) {
    node.value = Tensor({1, C}, 0.0);
    for (std::size_t r = 0; r < R; ++r)
      for (std::size_t c = 0; c < C; ++c) node.value.at(0, c) += A.at(r, c);
    if (is_mean)
      for (auto& v : node.value.data()) v /= static_cast<double>(R);
  } else {
    node.value = Tensor({R, 1}, 0.0);
    for (std::size_t r = 0; r < R; ++r)
      for (std::size_t c = 0; c < C; ++c) node.value.at(r, 0) += A.at(r, c);
    if (is_mean)
      for (auto& v : node.value.data()) v /= static_cast<double>(C);
  }
  return OpBuilder::push(a.graph, std::move(node));
}
}  // namespace

Var sum(Var a, int axis) { return reduce_impl(a, axis, false); }
Var mean(Var a, int axis) { return reduce_impl(a, axis, true); }

}  // namespace prefrank::nk
