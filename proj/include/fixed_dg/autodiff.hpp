#pragma once

// Tape-based reverse-mode autodiff. A Graph is built fresh for every forward
// pass; nodes are appended in evaluation order so parents always precede
// children and a reverse sweep over ids is a valid topological order.

#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "fixed_dg/tensor.hpp"

namespace fixed_dg {

enum class OpKind {
  Leaf,
  Matmul,
  Transpose,
  Add,
  Sub,
  Mul,
  Scale,
  AddScalar,
  Relu,
  Sum,
  Mean,
  MeanRows,
  Reshape,
  GatherRows,
  Pick,
  Norm,
  Conv1d,
  MaxPool1d,
  BatchNormTrain,
  BatchNormEval,
  SoftmaxCrossEntropy,
  GradReverse,
  MarginHinge,
};

inline const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::Leaf: return "leaf";
    case OpKind::Matmul: return "matmul";
    case OpKind::Transpose: return "transpose";
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::Mul: return "mul";
    case OpKind::Scale: return "scale";
    case OpKind::AddScalar: return "add_scalar";
    case OpKind::Relu: return "relu";
    case OpKind::Sum: return "sum";
    case OpKind::Mean: return "mean";
    case OpKind::MeanRows: return "mean_rows";
    case OpKind::Reshape: return "reshape";
    case OpKind::GatherRows: return "gather_rows";
    case OpKind::Pick: return "pick";
    case OpKind::Norm: return "norm";
    case OpKind::Conv1d: return "conv1d";
    case OpKind::MaxPool1d: return "max_pool1d";
    case OpKind::BatchNormTrain: return "batch_norm_train";
    case OpKind::BatchNormEval: return "batch_norm_eval";
    case OpKind::SoftmaxCrossEntropy: return "softmax_cross_entropy";
    case OpKind::GradReverse: return "grad_reverse";
    case OpKind::MarginHinge: return "margin_hinge";
  }
  return "?";
}

/// Named tensor owned by a model. Buffers (running statistics) set
/// `trainable = false` and never receive optimizer updates.
struct Parameter {
  std::string name;
  Tensor value;
  bool trainable = true;
};

using NodeId = std::size_t;

class Graph;

/// Handle to a node recorded in a Graph.
struct Var {
  Graph* graph = nullptr;
  NodeId id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

/// Accumulates `grad_out` of a node into the gradients of its parents.
/// Entries of `parent_grads` are null for parents that need no gradient.
using BackwardFn = std::function<void(const Tensor& grad_out, std::span<Tensor* const> parent_grads)>;

class Gradients {
 public:
  Gradients(std::vector<Tensor> grads, std::vector<char> present, std::vector<Shape> shapes,
            std::unordered_map<const Parameter*, NodeId> params)
      : grads_(std::move(grads)),
        present_(std::move(present)),
        shapes_(std::move(shapes)),
        params_(std::move(params)) {}

  /// Gradient of the loss w.r.t. a node; zeros if the node was unreachable.
  Tensor of(NodeId id) const {
    if (id >= grads_.size()) throw std::out_of_range("Gradients::of: unknown node");
    return present_[id] ? grads_[id] : Tensor(shapes_[id]);
  }
  Tensor of(const Var& v) const { return of(v.id); }

  /// Gradient w.r.t. a parameter bound in the graph; zeros if never bound.
  Tensor of(const Parameter& p) const {
    auto it = params_.find(&p);
    if (it == params_.end()) return Tensor(p.value.shape());
    return of(it->second);
  }

  bool reached(NodeId id) const { return id < present_.size() && present_[id]; }

 private:
  std::vector<Tensor> grads_;
  std::vector<char> present_;
  std::vector<Shape> shapes_;
  std::unordered_map<const Parameter*, NodeId> params_;
};

class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor t) { return push(OpKind::Leaf, {}, std::move(t), nullptr, false); }

  /// Leaf whose gradient is reported by backward.
  Var input(Tensor t, bool requires_grad = true) {
    return push(OpKind::Leaf, {}, std::move(t), nullptr, requires_grad);
  }

  /// Binds a parameter as a leaf. Repeated binds in one graph return the
  /// same node so gradients from every use accumulate in one place.
  Var param(const Parameter& p) {
    auto it = params_.find(&p);
    if (it != params_.end()) return Var{this, it->second};
    Var v = push(OpKind::Leaf, {}, p.value, nullptr, p.trainable);
    params_.emplace(&p, v.id);
    return v;
  }

  /// Appends an op node. The output must be finite.
  Var record(OpKind kind, std::vector<NodeId> parents, Tensor value, BackwardFn backward) {
    bool rg = false;
    for (NodeId p : parents) {
      if (p >= nodes_.size()) throw std::out_of_range("Graph::record: unknown parent");
      rg = rg || nodes_[p].requires_grad;
    }
    if (!value.all_finite())
      throw NumericError(std::string("non-finite output from ") + op_name(kind) + " at node " +
                         std::to_string(nodes_.size()));
    return push(kind, std::move(parents), std::move(value), std::move(backward), rg);
  }

  const Tensor& value(NodeId id) const { return nodes_.at(id).value; }
  OpKind kind(NodeId id) const { return nodes_.at(id).kind; }
  const std::vector<NodeId>& parents(NodeId id) const { return nodes_.at(id).parents; }
  bool requires_grad(NodeId id) const { return nodes_.at(id).requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// True when `ancestor` is reachable from `node` by following parent links
  /// (a node counts as its own ancestor).
  bool depends_on(NodeId node, NodeId ancestor) const {
    if (ancestor > node) return false;
    std::vector<char> seen(node + 1, 0);
    std::vector<NodeId> stack{node};
    while (!stack.empty()) {
      NodeId n = stack.back();
      stack.pop_back();
      if (n == ancestor) return true;
      if (seen[n]) continue;
      seen[n] = 1;
      for (NodeId p : nodes_[n].parents)
        if (p >= ancestor && !seen[p]) stack.push_back(p);
    }
    return false;
  }

  /// Reverse sweep from a scalar loss. Each reachable node is visited once.
  Gradients backward(const Var& loss) const {
    if (loss.graph != this) throw std::invalid_argument("backward: loss belongs to another graph");
    const Tensor& lv = nodes_.at(loss.id).value;
    if (!lv.shape().empty()) throw DimensionError("backward: loss must be scalar, got " + shape_str(lv.shape()));

    const std::size_t n = nodes_.size();
    std::vector<Tensor> grads(n);
    std::vector<char> present(n, 0);
    grads[loss.id] = Tensor::scalar(1.0);
    present[loss.id] = 1;

    std::vector<Tensor*> pg;
    for (std::size_t k = loss.id + 1; k-- > 0;) {
      if (!present[k]) continue;
      const Node& node = nodes_[k];
      if (!grads[k].all_finite())
        throw NumericError(std::string("non-finite gradient at node ") + std::to_string(k) + " (" +
                           op_name(node.kind) + ")");
      if (!node.backward || !node.requires_grad) continue;
      pg.assign(node.parents.size(), nullptr);
      for (std::size_t i = 0; i < node.parents.size(); ++i) {
        NodeId p = node.parents[i];
        if (!nodes_[p].requires_grad) continue;
        if (!present[p]) {
          grads[p] = Tensor(nodes_[p].value.shape());
          present[p] = 1;
        }
        pg[i] = &grads[p];
      }
      node.backward(grads[k], pg);
    }

    std::vector<Shape> shapes;
    shapes.reserve(n);
    for (const auto& nd : nodes_) shapes.push_back(nd.value.shape());
    return Gradients(std::move(grads), std::move(present), std::move(shapes), params_);
  }

 private:
  struct Node {
    OpKind kind;
    std::vector<NodeId> parents;
    Tensor value;
    BackwardFn backward;
    bool requires_grad;
  };

  Var push(OpKind kind, std::vector<NodeId> parents, Tensor value, BackwardFn fn, bool rg) {
    nodes_.push_back(Node{kind, std::move(parents), std::move(value), std::move(fn), rg});
    return Var{this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
  std::unordered_map<const Parameter*, NodeId> params_;
};

inline const Tensor& Var::value() const { return graph->value(id); }

namespace detail {

inline void same_graph(const Var& a, const Var& b, const char* op) {
  if (a.graph != b.graph) throw std::invalid_argument(std::string(op) + ": operands from different graphs");
}

inline void require_rank(const Var& a, std::size_t r, const char* op) {
  if (a.shape().size() != r)
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " + shape_str(a.shape()));
}

enum class Broadcast { Same, Rows };

// b either matches a exactly or matches a without its leading axis.
inline Broadcast broadcast_kind(const Shape& a, const Shape& b, const char* op) {
  if (a == b) return Broadcast::Same;
  if (!a.empty() && Shape(a.begin() + 1, a.end()) == b) return Broadcast::Rows;
  throw DimensionError(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) + " are not compatible");
}

}  // namespace detail

inline Var matmul(const Var& a, const Var& b) {
  detail::same_graph(a, b, "matmul");
  detail::require_rank(a, 2, "matmul");
  detail::require_rank(b, 2, "matmul");
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  const std::size_t m = A.dim(0), n = A.dim(1), p = B.dim(1);
  if (B.dim(0) != n)
    throw DimensionError("matmul: inner dimensions disagree " + shape_str(A.shape()) + " x " + shape_str(B.shape()));
  Tensor out(Shape{m, p});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t k = 0; k < n; ++k) {
      const double av = A[i * n + k];
      if (av == 0.0) continue;
      for (std::size_t j = 0; j < p; ++j) out[i * p + j] += av * B[k * p + j];
    }
  Graph* g = a.graph;
  NodeId ia = a.id, ib = b.id;
  return g->record(OpKind::Matmul, {ia, ib}, std::move(out), [g, ia, ib, m, n, p](const Tensor& go, std::span<Tensor* const> pg) {
    const Tensor& A = g->value(ia);
    const Tensor& B = g->value(ib);
    if (pg[0]) {
      Tensor& ga = *pg[0];
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t k = 0; k < n; ++k) {
          double s = 0.0;
          for (std::size_t j = 0; j < p; ++j) s += go[i * p + j] * B[k * p + j];
          ga[i * n + k] += s;
        }
    }
    if (pg[1]) {
      Tensor& gb = *pg[1];
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t k = 0; k < n; ++k) {
          const double av = A[i * n + k];
          if (av == 0.0) continue;
          for (std::size_t j = 0; j < p; ++j) gb[k * p + j] += av * go[i * p + j];
        }
    }
  });
}

inline Var transpose(const Var& a) {
  detail::require_rank(a, 2, "transpose");
  const Tensor& A = a.value();
  const std::size_t m = A.dim(0), n = A.dim(1);
  Tensor out(Shape{n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = A[i * n + j];
  return a.graph->record(OpKind::Transpose, {a.id}, std::move(out), [m, n](const Tensor& go, std::span<Tensor* const> pg) {
    if (!pg[0]) return;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) (*pg[0])[i * n + j] += go[j * m + i];
  });
}

namespace detail {

// Shared body of add/sub: out = a + sign * b with b possibly row-broadcast.
inline Var add_signed(const Var& a, const Var& b, double sign, OpKind kind, const char* op) {
  same_graph(a, b, op);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  const Broadcast bc = broadcast_kind(A.shape(), B.shape(), op);
  Tensor out = A;
  const std::size_t inner = B.size();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += sign * B[bc == Broadcast::Same ? i : i % inner];
  return a.graph->record(kind, {a.id, b.id}, std::move(out), [bc, inner, sign](const Tensor& go, std::span<Tensor* const> pg) {
    if (pg[0]) *pg[0] += go;
    if (pg[1]) {
      Tensor& gb = *pg[1];
      for (std::size_t i = 0; i < go.size(); ++i) gb[bc == Broadcast::Same ? i : i % inner] += sign * go[i];
    }
  });
}

}  // namespace detail

/// Elementwise sum; `b` may omit the leading (batch) axis of `a`.
inline Var add(const Var& a, const Var& b) { return detail::add_signed(a, b, 1.0, OpKind::Add, "add"); }
inline Var sub(const Var& a, const Var& b) { return detail::add_signed(a, b, -1.0, OpKind::Sub, "sub"); }

inline Var mul(const Var& a, const Var& b) {
  detail::same_graph(a, b, "mul");
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  const auto bc = detail::broadcast_kind(A.shape(), B.shape(), "mul");
  const std::size_t inner = B.size();
  Tensor out = A;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= B[bc == detail::Broadcast::Same ? i : i % inner];
  Graph* g = a.graph;
  NodeId ia = a.id, ib = b.id;
  return g->record(OpKind::Mul, {ia, ib}, std::move(out), [g, ia, ib, bc, inner](const Tensor& go, std::span<Tensor* const> pg) {
    const Tensor& A = g->value(ia);
    const Tensor& B = g->value(ib);
    for (std::size_t i = 0; i < go.size(); ++i) {
      const std::size_t j = bc == detail::Broadcast::Same ? i : i % inner;
      if (pg[0]) (*pg[0])[i] += go[i] * B[j];
      if (pg[1]) (*pg[1])[j] += go[i] * A[i];
    }
  });
}

inline Var scale(const Var& a, double c) {
  Tensor out = a.value();
  out *= c;
  return a.graph->record(OpKind::Scale, {a.id}, std::move(out), [c](const Tensor& go, std::span<Tensor* const> pg) {
    if (!pg[0]) return;
    for (std::size_t i = 0; i < go.size(); ++i) (*pg[0])[i] += c * go[i];
  });
}

inline Var add_scalar(const Var& a, double c) {
  Tensor out = a.value();
  for (auto& v : out.data()) v += c;
  return a.graph->record(OpKind::AddScalar, {a.id}, std::move(out), [](const Tensor& go, std::span<Tensor* const> pg) {
    if (pg[0]) *pg[0] += go;
  });
}

/// max(0, x); the subgradient at 0 is 0.
inline Var relu(const Var& a) {
  Tensor out = a.value();
  for (auto& v : out.data()) v = v > 0.0 ? v : 0.0;
  Graph* g = a.graph;
  NodeId ia = a.id;
  return g->record(OpKind::Relu, {ia}, std::move(out), [g, ia](const Tensor& go, std::span<Tensor* const> pg) {
    if (!pg[0]) return;
    const Tensor& A = g->value(ia);
    for (std::size_t i = 0; i < go.size(); ++i)
      if (A[i] > 0.0) (*pg[0])[i] += go[i];
  });
}

inline Var sum(const Var& a) {
  const auto& d = a.value().data();
  double s = 0.0;
  for (double v : d) s += v;
  return a.graph->record(OpKind::Sum, {a.id}, Tensor::scalar(s), [](const Tensor& go, std::span<Tensor* const> pg) {
    if (!pg[0]) return;
    for (auto& v : pg[0]->data()) v += go[0];
  });
}

inline Var mean(const Var& a) {
  const auto& d = a.value().data();
  if (d.empty()) throw DimensionError("mean: empty tensor");
  double s = 0.0;
  for (double v : d) s += v;
  const double inv = 1.0 / static_cast<double>(d.size());
  return a.graph->record(OpKind::Mean, {a.id}, Tensor::scalar(s * inv), [inv](const Tensor& go, std::span<Tensor* const> pg) {
    if (!pg[0]) return;
    for (auto& v : pg[0]->data()) v += go[0] * inv;
  });
}

/// Mean over the leading axis: [B, ...] -> [...].
inline Var mean_rows(const Var& a) {
  const Tensor& A = a.value();
  if (A.rank() < 1 || A.dim(0) == 0) throw DimensionError("mean_rows: need a nonempty leading axis, got " + shape_str(A.shape()));
  const std::size_t rows = A.dim(0), inner = A.size() / rows;
  Tensor out(Shape(A.shape().begin() + 1, A.shape().end()));
  for (std::size_t i = 0; i < A.size(); ++i) out[i % inner] += A[i];
  const double inv = 1.0 / static_cast<double>(rows);
  out *= inv;
  return a.graph->record(OpKind::MeanRows, {a.id}, std::move(out), [inner, inv](const Tensor& go, std::span<Tensor* const> pg) {
    if (!pg[0]) return;
    for (std::size_t i = 0; i < pg[0]->size(); ++i) (*pg[0])[i] += go[i % inner] * inv;
  });
}

inline Var reshape(const Var& a, Shape s) {
  Tensor out = a.value().reshaped(std::move(s));
  return a.graph->record(OpKind::Reshape, {a.id}, std::move(out), [](const Tensor& go, std::span<Tensor* const> pg) {
    if (!pg[0]) return;
    for (std::size_t i = 0; i < go.size(); ++i) (*pg[0])[i] += go[i];
  });
}

/// Rows of `a` selected by `idx` (repeats allowed); gradient scatter-adds.
inline Var gather_rows(const Var& a, std::vector<std::size_t> idx) {
  const Tensor& A = a.value();
  if (A.rank() < 1) throw DimensionError("gather_rows: scalar input");
  const std::size_t rows = A.dim(0), inner = A.row_size();
  Shape s = A.shape();
  s[0] = idx.size();
  Tensor out(s);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= rows)
      throw DimensionError("gather_rows: index " + std::to_string(idx[r]) + " out of range for " + shape_str(A.shape()));
    std::copy_n(A.data().begin() + idx[r] * inner, inner, out.data().begin() + r * inner);
  }
  return a.graph->record(OpKind::GatherRows, {a.id}, std::move(out),
                         [idx = std::move(idx), inner](const Tensor& go, std::span<Tensor* const> pg) {
                           if (!pg[0]) return;
                           for (std::size_t r = 0; r < idx.size(); ++r)
                             for (std::size_t j = 0; j < inner; ++j) (*pg[0])[idx[r] * inner + j] += go[r * inner + j];
                         });
}

inline Var slice_rows(const Var& a, std::size_t begin, std::size_t end) {
  if (begin > end || end > a.value().dim(0)) throw DimensionError("slice_rows: bad range");
  std::vector<std::size_t> idx(end - begin);
  std::iota(idx.begin(), idx.end(), begin);
  return gather_rows(a, std::move(idx));
}

/// out[i] = a[i, cols[i]] for a of shape [B, K].
inline Var pick(const Var& a, std::vector<std::size_t> cols) {
  detail::require_rank(a, 2, "pick");
  const Tensor& A = a.value();
  const std::size_t b = A.dim(0), k = A.dim(1);
  if (cols.size() != b) throw DimensionError("pick: " + std::to_string(cols.size()) + " indices for " + shape_str(A.shape()));
  Tensor out(Shape{b});
  for (std::size_t i = 0; i < b; ++i) {
    if (cols[i] >= k) throw DimensionError("pick: column out of range");
    out[i] = A[i * k + cols[i]];
  }
  return a.graph->record(OpKind::Pick, {a.id}, std::move(out), [cols = std::move(cols), k](const Tensor& go, std::span<Tensor* const> pg) {
    if (!pg[0]) return;
    for (std::size_t i = 0; i < cols.size(); ++i) (*pg[0])[i * k + cols[i]] += go[i];
  });
}

/// Row-wise Euclidean norm of a [B, F] tensor.
inline Var l2_norm_rows(const Var& a) {
  detail::require_rank(a, 2, "norm");
  const Tensor& A = a.value();
  const std::size_t b = A.dim(0), f = A.dim(1);
  Tensor out(Shape{b});
  for (std::size_t i = 0; i < b; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < f; ++j) s += A[i * f + j] * A[i * f + j];
    out[i] = std::sqrt(s);
  }
  Graph* g = a.graph;
  NodeId ia = a.id;
  NodeId self = g->size();
  return g->record(OpKind::Norm, {ia}, std::move(out), [g, ia, self, b, f](const Tensor& go, std::span<Tensor* const> pg) {
    if (!pg[0]) return;
    const Tensor& A = g->value(ia);
    const Tensor& N = g->value(self);
    for (std::size_t i = 0; i < b; ++i) {
      if (N[i] == 0.0) continue;
      for (std::size_t j = 0; j < f; ++j) (*pg[0])[i * f + j] += go[i] * A[i * f + j] / N[i];
    }
  });
}

struct Conv1dParams {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

inline std::size_t conv1d_out_len(std::size_t len, std::size_t kernel, Conv1dParams p) {
  if (len + 2 * p.padding < kernel || p.stride == 0) return 0;
  return (len + 2 * p.padding - kernel) / p.stride + 1;
}

/// x [B, C, L], w [O, C, K], bias [O] -> [B, O, L'] with zero padding.
inline Var conv1d(const Var& x, const Var& w, const Var& bias, Conv1dParams cp = {}) {
  detail::same_graph(x, w, "conv1d");
  detail::same_graph(x, bias, "conv1d");
  detail::require_rank(x, 3, "conv1d");
  detail::require_rank(w, 3, "conv1d");
  const Tensor& X = x.value();
  const Tensor& W = w.value();
  const Tensor& Bv = bias.value();
  const std::size_t nb = X.dim(0), c = X.dim(1), len = X.dim(2);
  const std::size_t o = W.dim(0), kk = W.dim(2);
  if (W.dim(1) != c || Bv.shape() != Shape{o})
    throw DimensionError("conv1d: input " + shape_str(X.shape()) + " weight " + shape_str(W.shape()) + " bias " +
                         shape_str(Bv.shape()));
  if (cp.stride == 0) throw DimensionError("conv1d: stride must be positive");
  const std::size_t lo = conv1d_out_len(len, kk, cp);
  if (lo == 0) throw DimensionError("conv1d: kernel " + std::to_string(kk) + " longer than input " + shape_str(X.shape()));
  Tensor out(Shape{nb, o, lo});
  const std::size_t st = cp.stride, pad = cp.padding;
  // Output positions t whose tap q lands inside the input: [t0, t1).
  std::vector<std::size_t> t0(kk), t1(kk);
  for (std::size_t q = 0; q < kk; ++q) {
    t0[q] = q >= pad ? 0 : (pad - q + st - 1) / st;
    t1[q] = len + pad > q ? std::min(lo, (len + pad - q - 1) / st + 1) : 0;
    t1[q] = std::max(t1[q], t0[q]);
  }
  for (std::size_t n = 0; n < nb; ++n)
    for (std::size_t oc = 0; oc < o; ++oc) {
      double* orow = &out[(n * o + oc) * lo];
      for (std::size_t t = 0; t < lo; ++t) orow[t] = Bv[oc];
      for (std::size_t ic = 0; ic < c; ++ic) {
        const double* xrow = &X[(n * c + ic) * len];
        const double* wk = &W[(oc * c + ic) * kk];
        for (std::size_t q = 0; q < kk; ++q) {
          const double wq = wk[q];
          for (std::size_t t = t0[q]; t < t1[q]; ++t) orow[t] += wq * xrow[t * st + q - pad];
        }
      }
    }
  Graph* g = x.graph;
  NodeId ix = x.id, iw = w.id;
  return g->record(OpKind::Conv1d, {x.id, w.id, bias.id}, std::move(out),
                   [g, ix, iw, nb, c, len, o, kk, lo, st, pad, t0, t1](const Tensor& go, std::span<Tensor* const> pg) {
                     const Tensor& X = g->value(ix);
                     const Tensor& W = g->value(iw);
                     for (std::size_t n = 0; n < nb; ++n)
                       for (std::size_t oc = 0; oc < o; ++oc) {
                         const double* grow = &go[(n * o + oc) * lo];
                         if (pg[2])
                           for (std::size_t t = 0; t < lo; ++t) (*pg[2])[oc] += grow[t];
                         for (std::size_t ic = 0; ic < c; ++ic) {
                           const double* xrow = &X[(n * c + ic) * len];
                           const double* wk = &W[(oc * c + ic) * kk];
                           for (std::size_t q = 0; q < kk; ++q) {
                             if (pg[0]) {
                               double* gx = &(*pg[0])[(n * c + ic) * len];
                               const double wq = wk[q];
                               for (std::size_t t = t0[q]; t < t1[q]; ++t) gx[t * st + q - pad] += grow[t] * wq;
                             }
                             if (pg[1]) {
                               double acc = 0.0;
                               for (std::size_t t = t0[q]; t < t1[q]; ++t) acc += grow[t] * xrow[t * st + q - pad];
                               (*pg[1])[(oc * c + ic) * kk + q] += acc;
                             }
                           }
                         }
                       }
                   });
}

/// Non-overlapping max pooling over the last axis of [B, C, L]; a trailing
/// partial window is dropped.
inline Var max_pool1d(const Var& x, std::size_t size) {
  detail::require_rank(x, 3, "max_pool1d");
  const Tensor& X = x.value();
  if (size == 0) throw DimensionError("max_pool1d: size must be positive");
  const std::size_t rows = X.dim(0) * X.dim(1), len = X.dim(2), lo = len / size;
  if (lo == 0) throw DimensionError("max_pool1d: window " + std::to_string(size) + " longer than " + shape_str(X.shape()));
  Tensor out(Shape{X.dim(0), X.dim(1), lo});
  std::vector<std::size_t> argmax(rows * lo);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t t = 0; t < lo; ++t) {
      std::size_t best = r * len + t * size;
      for (std::size_t q = 1; q < size; ++q)
        if (X[r * len + t * size + q] > X[best]) best = r * len + t * size + q;
      argmax[r * lo + t] = best;
      out[r * lo + t] = X[best];
    }
  return x.graph->record(OpKind::MaxPool1d, {x.id}, std::move(out),
                         [argmax = std::move(argmax)](const Tensor& go, std::span<Tensor* const> pg) {
                           if (!pg[0]) return;
                           for (std::size_t i = 0; i < argmax.size(); ++i) (*pg[0])[argmax[i]] += go[i];
                         });
}

namespace detail {

// Per-channel layout for batch norm over axis 1 of [B, C] or [B, C, L].
struct ChannelLayout {
  std::size_t batch, channels, inner;
  std::size_t channel(std::size_t flat) const { return (flat / inner) % channels; }
  std::size_t count() const { return batch * inner; }
};

inline ChannelLayout channel_layout(const Shape& s, const char* op) {
  if (s.size() != 2 && s.size() != 3)
    throw DimensionError(std::string(op) + ": expected [B,C] or [B,C,L], got " + shape_str(s));
  return ChannelLayout{s[0], s[1], s.size() == 3 ? s[2] : 1};
}

}  // namespace detail

struct BatchStats {
  std::vector<double> mean;
  std::vector<double> var;  // biased
};

/// Batch normalization with batch statistics. The statistics used are
/// written to `stats` so the caller can update running averages.
inline Var batch_norm_train(const Var& x, const Var& gamma, const Var& beta, double eps, BatchStats* stats = nullptr) {
  const Tensor& X = x.value();
  const auto lay = detail::channel_layout(X.shape(), "batch_norm_train");
  if (gamma.shape() != Shape{lay.channels} || beta.shape() != Shape{lay.channels})
    throw DimensionError("batch_norm_train: affine params must be [" + std::to_string(lay.channels) + "]");
  const std::size_t cnt = lay.count();
  if (cnt < 2) throw DimensionError("batch_norm_train: need at least 2 values per channel, got " + shape_str(X.shape()));
  std::vector<double> mu(lay.channels, 0.0), var(lay.channels, 0.0);
  for (std::size_t i = 0; i < X.size(); ++i) mu[lay.channel(i)] += X[i];
  for (auto& m : mu) m /= static_cast<double>(cnt);
  for (std::size_t i = 0; i < X.size(); ++i) {
    const double d = X[i] - mu[lay.channel(i)];
    var[lay.channel(i)] += d * d;
  }
  for (auto& v : var) v /= static_cast<double>(cnt);
  std::vector<double> inv_std(lay.channels);
  for (std::size_t ch = 0; ch < lay.channels; ++ch) inv_std[ch] = 1.0 / std::sqrt(var[ch] + eps);
  Tensor xhat(X.shape());
  Tensor out(X.shape());
  const Tensor& G = gamma.value();
  const Tensor& Bt = beta.value();
  for (std::size_t i = 0; i < X.size(); ++i) {
    const std::size_t ch = lay.channel(i);
    xhat[i] = (X[i] - mu[ch]) * inv_std[ch];
    out[i] = G[ch] * xhat[i] + Bt[ch];
  }
  if (stats) *stats = BatchStats{mu, var};
  Graph* g = x.graph;
  NodeId ig = gamma.id;
  return g->record(OpKind::BatchNormTrain, {x.id, gamma.id, beta.id}, std::move(out),
                   [g, ig, lay, cnt, xhat = std::move(xhat), inv_std = std::move(inv_std)](const Tensor& go,
                                                                                           std::span<Tensor* const> pg) {
                     const Tensor& G = g->value(ig);
                     std::vector<double> sum_g(lay.channels, 0.0), sum_gx(lay.channels, 0.0);
                     for (std::size_t i = 0; i < go.size(); ++i) {
                       const std::size_t ch = lay.channel(i);
                       sum_g[ch] += go[i];
                       sum_gx[ch] += go[i] * xhat[i];
                     }
                     if (pg[1])
                       for (std::size_t ch = 0; ch < lay.channels; ++ch) (*pg[1])[ch] += sum_gx[ch];
                     if (pg[2])
                       for (std::size_t ch = 0; ch < lay.channels; ++ch) (*pg[2])[ch] += sum_g[ch];
                     if (pg[0]) {
                       const double n = static_cast<double>(cnt);
                       for (std::size_t i = 0; i < go.size(); ++i) {
                         const std::size_t ch = lay.channel(i);
                         (*pg[0])[i] += G[ch] * inv_std[ch] / n * (n * go[i] - sum_g[ch] - xhat[i] * sum_gx[ch]);
                       }
                     }
                   });
}

/// Batch normalization with fixed statistics: a per-channel affine map.
inline Var batch_norm_eval(const Var& x, const Var& gamma, const Var& beta, std::span<const double> mean,
                           std::span<const double> var, double eps) {
  const Tensor& X = x.value();
  const auto lay = detail::channel_layout(X.shape(), "batch_norm_eval");
  if (gamma.shape() != Shape{lay.channels} || beta.shape() != Shape{lay.channels} || mean.size() != lay.channels ||
      var.size() != lay.channels)
    throw DimensionError("batch_norm_eval: per-channel arrays must have " + std::to_string(lay.channels) + " entries");
  std::vector<double> inv_std(lay.channels);
  for (std::size_t ch = 0; ch < lay.channels; ++ch) inv_std[ch] = 1.0 / std::sqrt(var[ch] + eps);
  std::vector<double> mu(mean.begin(), mean.end());
  const Tensor& G = gamma.value();
  const Tensor& Bt = beta.value();
  Tensor out(X.shape());
  for (std::size_t i = 0; i < X.size(); ++i) {
    const std::size_t ch = lay.channel(i);
    out[i] = G[ch] * (X[i] - mu[ch]) * inv_std[ch] + Bt[ch];
  }
  Graph* g = x.graph;
  NodeId ix = x.id, ig = gamma.id;
  return g->record(OpKind::BatchNormEval, {x.id, gamma.id, beta.id}, std::move(out),
                   [g, ix, ig, lay, mu = std::move(mu), inv_std = std::move(inv_std)](const Tensor& go,
                                                                                     std::span<Tensor* const> pg) {
                     const Tensor& X = g->value(ix);
                     const Tensor& G = g->value(ig);
                     for (std::size_t i = 0; i < go.size(); ++i) {
                       const std::size_t ch = lay.channel(i);
                       const double xh = (X[i] - mu[ch]) * inv_std[ch];
                       if (pg[0]) (*pg[0])[i] += go[i] * G[ch] * inv_std[ch];
                       if (pg[1]) (*pg[1])[ch] += go[i] * xh;
                       if (pg[2]) (*pg[2])[ch] += go[i];
                     }
                   });
}

/// Mean over rows of -sum_k target[i,k] * log softmax(logits)[i,k].
/// `target` rows are probability vectors.
inline Var softmax_cross_entropy(const Var& logits, const Tensor& target) {
  detail::require_rank(logits, 2, "softmax_cross_entropy");
  const Tensor& L = logits.value();
  if (target.shape() != L.shape())
    throw DimensionError("softmax_cross_entropy: logits " + shape_str(L.shape()) + " vs target " + shape_str(target.shape()));
  const std::size_t b = L.dim(0), k = L.dim(1);
  if (b == 0) throw DimensionError("softmax_cross_entropy: empty batch");
  Tensor probs(L.shape());
  double loss = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    double mx = -std::numeric_limits<double>::infinity(), row_mass = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      mx = std::max(mx, L[i * k + j]);
      row_mass += target[i * k + j];
    }
    if (std::abs(row_mass - 1.0) > 1e-9)
      throw std::invalid_argument("softmax_cross_entropy: target row " + std::to_string(i) + " sums to " +
                                  std::to_string(row_mass));
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(L[i * k + j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < k; ++j) {
      probs[i * k + j] = std::exp(L[i * k + j] - lse);
      if (target[i * k + j] != 0.0) loss -= target[i * k + j] * (L[i * k + j] - lse);
    }
  }
  const double inv_b = 1.0 / static_cast<double>(b);
  return logits.graph->record(OpKind::SoftmaxCrossEntropy, {logits.id}, Tensor::scalar(loss * inv_b),
                              [probs = std::move(probs), target, inv_b](const Tensor& go, std::span<Tensor* const> pg) {
                                if (!pg[0]) return;
                                for (std::size_t i = 0; i < probs.size(); ++i)
                                  (*pg[0])[i] += go[0] * inv_b * (probs[i] - target[i]);
                              });
}

/// One-hot rows for class indices.
inline Tensor one_hot(std::span<const int> labels, std::size_t classes) {
  Tensor t(Shape{labels.size(), classes});
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes)
      throw DimensionError("one_hot: label " + std::to_string(labels[i]) + " outside [0," + std::to_string(classes) + ")");
    t[i * classes + static_cast<std::size_t>(labels[i])] = 1.0;
  }
  return t;
}

/// Identity forward; backward multiplies the incoming gradient by -eta.
inline Var grad_reverse(const Var& z, double eta) {
  if (!(eta >= 0.0)) throw ConfigError("grad_reverse: eta must be >= 0, got " + std::to_string(eta));
  return z.graph->record(OpKind::GradReverse, {z.id}, z.value(), [eta](const Tensor& go, std::span<Tensor* const> pg) {
    if (!pg[0]) return;
    for (std::size_t i = 0; i < go.size(); ++i) (*pg[0])[i] -= eta * go[i];
  });
}

}  // namespace fixed_dg
