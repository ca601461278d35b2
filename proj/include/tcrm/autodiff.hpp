#pragma once

// Tape-based reverse-mode differentiation over dense row-major matrices.
//
// A Graph is rebuilt for every step: each primitive computes its value
// eagerly, appends a node and (when recording) a backward closure. Node ids
// are issued in creation order, so the tape is already topologically sorted
// and backward() is a single reverse sweep.

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "tcrm/errors.hpp"
#include "tcrm/parameters.hpp"

namespace tcrm {

using NodeId = std::uint32_t;

class Graph;

/// Handle to a node on a Graph. Cheap to copy; only valid while the Graph lives.
class Var {
 public:
  Var() = default;
  Var(Graph* graph, NodeId id) : graph_(graph), id_(id) {}

  [[nodiscard]] NodeId id() const { return id_; }
  [[nodiscard]] Graph& graph() const { return *graph_; }
  [[nodiscard]] const Matrix& value() const;
  [[nodiscard]] Eigen::Index rows() const { return value().rows(); }
  [[nodiscard]] Eigen::Index cols() const { return value().cols(); }
  /// Value of a 1x1 node.
  [[nodiscard]] double item() const;
  [[nodiscard]] bool requires_grad() const;

 private:
  Graph* graph_ = nullptr;
  NodeId id_ = 0;
};

class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, NodeId)>;

  /// With record=false no backward closures are stored; values only.
  explicit Graph(bool record = true) : record_(record) {}

  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  [[nodiscard]] bool recording() const { return record_; }

  Var constant(Matrix value) { return push(std::move(value), false, {}); }

  Var constant(double value) {
    Matrix m(1, 1);
    m(0, 0) = value;
    return constant(std::move(m));
  }

  /// A differentiable leaf that is not tied to a ParameterStore.
  Var variable(Matrix value) { return push(std::move(value), true, {}); }

  /// Leaf bound to a named parameter. backward() accumulates into the store's
  /// gradient slot. Repeated calls return the same node.
  Var parameter(ParameterStore& store, const std::string& name) {
    const std::size_t index = store.index_of(name);
    const auto key = std::make_pair(&store, index);
    if (auto it = param_nodes_.find(key); it != param_nodes_.end()) {
      return {this, it->second};
    }
    Var v = push(store.value(index), record_, {});
    param_nodes_.emplace(key, v.id());
    bindings_.push_back({v.id(), &store, index});
    return v;
  }

  /// Same as parameter() but never propagates gradient; the store is read only.
  Var frozen_parameter(const ParameterStore& store, const std::string& name) {
    return constant(store.value(store.index_of(name)));
  }

  /// Records an op result. `backward` receives (graph, id of the new node).
  Var push(Matrix value, bool requires_grad, BackwardFn backward) {
    check_finite(value);
    const bool rg = record_ && requires_grad;
    nodes_.push_back(Node{std::move(value), Matrix(), rg, false, rg ? std::move(backward) : BackwardFn{}});
    return {this, static_cast<NodeId>(nodes_.size() - 1)};
  }

  [[nodiscard]] const Matrix& value(NodeId id) const { return nodes_[id].value; }
  [[nodiscard]] bool requires_grad(NodeId id) const { return nodes_[id].requires_grad; }

  /// Gradient accumulated into a node; zeros if nothing reached it.
  [[nodiscard]] Matrix grad(NodeId id) const {
    const Node& n = nodes_[id];
    if (!n.has_grad) {
      return Matrix::Zero(n.value.rows(), n.value.cols());
    }
    return n.grad;
  }

  [[nodiscard]] std::size_t size() const { return nodes_.size(); }

  template <class Expr>
  void accumulate(NodeId id, const Expr& g) {
    Node& n = nodes_[id];
    if (!n.requires_grad) {
      return;
    }
    if (!n.has_grad) {
      n.grad = g;
      n.has_grad = true;
    } else {
      n.grad += g;
    }
  }

  /// Gradient slot of `id`, zero-initialized on first use, for ops that
  /// scatter into part of their input. Null when `id` takes no gradient.
  [[nodiscard]] Matrix* grad_slot(NodeId id) {
    Node& n = nodes_[id];
    if (!n.requires_grad) {
      return nullptr;
    }
    if (!n.has_grad) {
      n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
      n.has_grad = true;
    }
    return &n.grad;
  }

  /// Gradient flowing into the output of `id` during backward.
  [[nodiscard]] const Matrix& upstream(NodeId id) const { return nodes_[id].grad; }

  /// Reverse sweep from a 1x1 root, then adds leaf gradients into the bound
  /// ParameterStores. Can be called once per graph.
  void backward(Var root) {
    detail::require(root.rows() == 1 && root.cols() == 1, "backward: root must be a 1x1 scalar");
    detail::require(record_, "backward: graph was built with record=false");
    detail::require(!backward_done_, "backward: already run on this graph");
    backward_done_ = true;
    if (!nodes_[root.id()].requires_grad) {
      return;
    }
    accumulate(root.id(), Matrix::Ones(1, 1));
    for (NodeId id = root.id() + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (n.has_grad && n.backward) {
        n.backward(*this, id);
      }
    }
    for (const Binding& b : bindings_) {
      const Node& n = nodes_[b.node];
      if (n.has_grad) {
        b.store->grad(b.index) += n.grad;
      }
    }
  }

  // Stop-gradient replay. In capture mode every stop_gradient() records the
  // value it passes through; in replay mode the i-th stop_gradient() emits the
  // i-th captured value instead. Finite-difference checks use replay so the
  // detached targets stay fixed while parameters are perturbed.
  void capture_stop_gradients() { sg_mode_ = SgMode::capture; }
  void replay_stop_gradients(std::vector<Matrix> values) {
    sg_values_ = std::move(values);
    sg_cursor_ = 0;
    sg_mode_ = SgMode::replay;
  }
  [[nodiscard]] const std::vector<Matrix>& captured_stop_gradients() const { return sg_values_; }

  Matrix next_stop_gradient_value(const Matrix& live) {
    switch (sg_mode_) {
      case SgMode::capture:
        sg_values_.push_back(live);
        return live;
      case SgMode::replay:
        detail::require(sg_cursor_ < sg_values_.size(), "stop_gradient replay exhausted");
        return sg_values_[sg_cursor_++];
      case SgMode::off:
        break;
    }
    return live;
  }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad;
    bool has_grad;
    BackwardFn backward;
  };
  struct Binding {
    NodeId node;
    ParameterStore* store;
    std::size_t index;
  };
  enum class SgMode { off, capture, replay };

  static void check_finite(const Matrix& m) {
    if (!m.allFinite()) {
      throw NumericError("non-finite value produced on graph");
    }
  }

  bool record_;
  bool backward_done_ = false;
  std::vector<Node> nodes_;
  std::vector<Binding> bindings_;
  std::map<std::pair<const ParameterStore*, std::size_t>, NodeId> param_nodes_;
  SgMode sg_mode_ = SgMode::off;
  std::vector<Matrix> sg_values_;
  std::size_t sg_cursor_ = 0;
};

inline const Matrix& Var::value() const { return graph_->value(id_); }
inline bool Var::requires_grad() const { return graph_->requires_grad(id_); }
inline double Var::item() const {
  detail::require(rows() == 1 && cols() == 1, "item: node is not 1x1");
  return value()(0, 0);
}

namespace detail {

inline void same_graph(const Var& a, const Var& b) {
  require(&a.graph() == &b.graph(), "operands live on different graphs");
}

inline void same_shape(const Var& a, const Var& b, const char* op) {
  same_graph(a, b);
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    fail(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
         " vs " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  }
}

inline bool any_grad(std::initializer_list<Var> vs) {
  for (const Var& v : vs) {
    if (v.requires_grad()) {
      return true;
    }
  }
  return false;
}

// Elementwise unary op with derivative expressed through (x, y).
template <class F, class DF>
Var unary(const Var& a, F f, DF df) {
  Graph& g = a.graph();
  Matrix y = a.value().unaryExpr(f);
  const NodeId ai = a.id();
  return g.push(std::move(y), a.requires_grad(), [ai, df](Graph& gr, NodeId self) {
    const Matrix& x = gr.value(ai);
    const Matrix& yv = gr.value(self);
    Matrix d = x.binaryExpr(yv, df);
    gr.accumulate(ai, gr.upstream(self).cwiseProduct(d));
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

inline Var matmul(const Var& a, const Var& b) {
  detail::same_graph(a, b);
  if (a.cols() != b.rows()) {
    detail::fail("matmul: inner dimensions differ (" + std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) +
                 ")");
  }
  Graph& g = a.graph();
  const NodeId ai = a.id();
  const NodeId bi = b.id();
  return g.push(a.value() * b.value(), detail::any_grad({a, b}), [ai, bi](Graph& gr, NodeId self) {
    const Matrix& up = gr.upstream(self);
    if (gr.requires_grad(ai)) {
      gr.accumulate(ai, up * gr.value(bi).transpose());
    }
    if (gr.requires_grad(bi)) {
      gr.accumulate(bi, gr.value(ai).transpose() * up);
    }
  });
}

/// a * b^T
inline Var matmul_nt(const Var& a, const Var& b) {
  detail::same_graph(a, b);
  if (a.cols() != b.cols()) {
    detail::fail("matmul_nt: column counts differ");
  }
  Graph& g = a.graph();
  const NodeId ai = a.id();
  const NodeId bi = b.id();
  return g.push(a.value() * b.value().transpose(), detail::any_grad({a, b}), [ai, bi](Graph& gr, NodeId self) {
    const Matrix& up = gr.upstream(self);
    if (gr.requires_grad(ai)) {
      gr.accumulate(ai, up * gr.value(bi));
    }
    if (gr.requires_grad(bi)) {
      gr.accumulate(bi, up.transpose() * gr.value(ai));
    }
  });
}

inline Var transpose(const Var& a) {
  const NodeId ai = a.id();
  return a.graph().push(a.value().transpose(), a.requires_grad(), [ai](Graph& gr, NodeId self) {
    gr.accumulate(ai, gr.upstream(self).transpose());
  });
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic

inline Var add(const Var& a, const Var& b) {
  detail::same_shape(a, b, "add");
  const NodeId ai = a.id();
  const NodeId bi = b.id();
  return a.graph().push(a.value() + b.value(), detail::any_grad({a, b}), [ai, bi](Graph& gr, NodeId self) {
    gr.accumulate(ai, gr.upstream(self));
    gr.accumulate(bi, gr.upstream(self));
  });
}

inline Var sub(const Var& a, const Var& b) {
  detail::same_shape(a, b, "sub");
  const NodeId ai = a.id();
  const NodeId bi = b.id();
  return a.graph().push(a.value() - b.value(), detail::any_grad({a, b}), [ai, bi](Graph& gr, NodeId self) {
    gr.accumulate(ai, gr.upstream(self));
    gr.accumulate(bi, -gr.upstream(self));
  });
}

inline Var mul(const Var& a, const Var& b) {
  detail::same_shape(a, b, "mul");
  const NodeId ai = a.id();
  const NodeId bi = b.id();
  return a.graph().push(a.value().cwiseProduct(b.value()), detail::any_grad({a, b}),
                        [ai, bi](Graph& gr, NodeId self) {
                          const Matrix& up = gr.upstream(self);
                          if (gr.requires_grad(ai)) {
                            gr.accumulate(ai, up.cwiseProduct(gr.value(bi)));
                          }
                          if (gr.requires_grad(bi)) {
                            gr.accumulate(bi, up.cwiseProduct(gr.value(ai)));
                          }
                        });
}

inline Var scale(const Var& a, double c) {
  const NodeId ai = a.id();
  return a.graph().push(a.value() * c, a.requires_grad(),
                        [ai, c](Graph& gr, NodeId self) { gr.accumulate(ai, gr.upstream(self) * c); });
}

inline Var add_scalar(const Var& a, double c) {
  const NodeId ai = a.id();
  return a.graph().push((a.value().array() + c).matrix(), a.requires_grad(),
                        [ai](Graph& gr, NodeId self) { gr.accumulate(ai, gr.upstream(self)); });
}

/// Adds a 1 x cols row vector to every row of `a`.
inline Var add_row(const Var& a, const Var& row) {
  detail::same_graph(a, row);
  detail::require(row.rows() == 1 && row.cols() == a.cols(), "add_row: expected 1 x cols row vector");
  const NodeId ai = a.id();
  const NodeId ri = row.id();
  Matrix y = a.value().rowwise() + row.value().row(0);
  return a.graph().push(std::move(y), detail::any_grad({a, row}), [ai, ri](Graph& gr, NodeId self) {
    gr.accumulate(ai, gr.upstream(self));
    if (gr.requires_grad(ri)) {
      gr.accumulate(ri, gr.upstream(self).colwise().sum());
    }
  });
}

/// Expands a 1x1 node to rows x cols.
inline Var broadcast(const Var& s, Eigen::Index rows, Eigen::Index cols) {
  detail::require(s.rows() == 1 && s.cols() == 1, "broadcast: source must be 1x1");
  const NodeId si = s.id();
  return s.graph().push(Matrix::Constant(rows, cols, s.item()), s.requires_grad(), [si](Graph& gr, NodeId self) {
    gr.accumulate(si, Matrix::Constant(1, 1, gr.upstream(self).sum()));
  });
}

/// Elementwise (a - b)^2.
inline Var sq_diff(const Var& a, const Var& b) {
  detail::same_shape(a, b, "sq_diff");
  const NodeId ai = a.id();
  const NodeId bi = b.id();
  Matrix diff = a.value() - b.value();
  return a.graph().push(diff.array().square().matrix(), detail::any_grad({a, b}), [ai, bi](Graph& gr, NodeId self) {
    Matrix d = 2.0 * (gr.value(ai) - gr.value(bi)).cwiseProduct(gr.upstream(self));
    if (gr.requires_grad(bi)) {
      gr.accumulate(bi, -d);
    }
    gr.accumulate(ai, d);
  });
}

inline Var square(const Var& a) {
  return detail::unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

inline Var minimum(const Var& a, const Var& b) {
  detail::same_shape(a, b, "minimum");
  const NodeId ai = a.id();
  const NodeId bi = b.id();
  return a.graph().push(a.value().cwiseMin(b.value()), detail::any_grad({a, b}), [ai, bi](Graph& gr, NodeId self) {
    const Matrix& av = gr.value(ai);
    const Matrix& bv = gr.value(bi);
    const Matrix& up = gr.upstream(self);
    Matrix da = Matrix::Zero(av.rows(), av.cols());
    Matrix db = Matrix::Zero(av.rows(), av.cols());
    for (Eigen::Index i = 0; i < av.size(); ++i) {
      // ties go to a
      if (av.data()[i] <= bv.data()[i]) {
        da.data()[i] = up.data()[i];
      } else {
        db.data()[i] = up.data()[i];
      }
    }
    gr.accumulate(ai, da);
    gr.accumulate(bi, db);
  });
}

/// Clamp to [lo, hi]; zero gradient where the bound is active.
inline Var clamp(const Var& a, double lo, double hi) {
  detail::require(lo <= hi, "clamp: lo > hi");
  const NodeId ai = a.id();
  Matrix y = a.value().cwiseMax(lo).cwiseMin(hi);
  return a.graph().push(std::move(y), a.requires_grad(), [ai, lo, hi](Graph& gr, NodeId self) {
    const Matrix& x = gr.value(ai);
    Matrix mask = x.unaryExpr([lo, hi](double v) { return (v > lo && v < hi) ? 1.0 : 0.0; });
    gr.accumulate(ai, gr.upstream(self).cwiseProduct(mask));
  });
}

// ---------------------------------------------------------------------------
// Nonlinearities

inline Var tanh(const Var& a) {
  return detail::unary(a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

/// GELU, tanh approximation.
inline Var gelu(const Var& a) {
  static constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  static constexpr double k = 0.044715;
  const Matrix& x = a.value();
  Matrix t = x.unaryExpr([](double v) { return std::tanh(c * (v + k * v * v * v)); });
  Matrix y = (0.5 * x.array() * (1.0 + t.array())).matrix();
  const NodeId ai = a.id();
  const bool rg = a.requires_grad() && a.graph().recording();
  return a.graph().push(std::move(y), rg, [ai, t = rg ? std::move(t) : Matrix()](Graph& gr, NodeId self) {
    const auto xv = gr.value(ai).array();
    const auto tv = t.array();
    const Matrix d = (0.5 * (1.0 + tv) + 0.5 * xv * (1.0 - tv * tv) * c * (1.0 + 3.0 * k * xv * xv)).matrix();
    gr.accumulate(ai, gr.upstream(self).cwiseProduct(d));
  });
}

inline double sigmoid(double x) {
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

/// log(1 + e^x) without overflow.
inline double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

inline Var sigmoid(const Var& a) {
  return detail::unary(a, [](double x) { return sigmoid(x); }, [](double, double y) { return y * (1.0 - y); });
}

inline Var softplus(const Var& a) {
  return detail::unary(a, [](double x) { return softplus(x); }, [](double x, double) { return sigmoid(x); });
}

inline Var log(const Var& a) {
  if ((a.value().array() <= 0.0).any()) {
    throw NumericError("log: non-positive input");
  }
  return detail::unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Var exp(const Var& a) {
  return detail::unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

/// Row softmax of (a + mask). Mask entries are 0 or -inf; masked entries get
/// probability exactly 0. A row with every entry masked is rejected.
inline Var softmax_rows(const Var& a, const Matrix* mask = nullptr) {
  const Matrix& x = a.value();
  if (mask != nullptr) {
    detail::require(mask->rows() == x.rows() && mask->cols() == x.cols(), "softmax_rows: mask shape mismatch");
  }
  Matrix y(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      const double v = mask ? x(r, c) + (*mask)(r, c) : x(r, c);
      y(r, c) = v;
      mx = std::max(mx, v);
    }
    detail::require(std::isfinite(mx), "softmax_rows: fully masked row");
    double sum = 0.0;
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      const double e = std::exp(y(r, c) - mx);
      y(r, c) = e;
      sum += e;
    }
    y.row(r) /= sum;
  }
  const NodeId ai = a.id();
  return a.graph().push(std::move(y), a.requires_grad(), [ai](Graph& gr, NodeId self) {
    const Matrix& yv = gr.value(self);
    const Matrix& up = gr.upstream(self);
    Eigen::VectorXd dot = up.cwiseProduct(yv).rowwise().sum();
    Matrix dx = yv.cwiseProduct(up - dot.replicate(1, up.cols()));
    gr.accumulate(ai, dx);
  });
}

/// Row log-softmax.
inline Var log_softmax_rows(const Var& a) {
  const Matrix& x = a.value();
  Eigen::VectorXd mx = x.rowwise().maxCoeff();
  Matrix shifted = x - mx.replicate(1, x.cols());
  Eigen::VectorXd lse = shifted.array().exp().rowwise().sum().log();
  Matrix y = shifted - lse.replicate(1, x.cols());
  const NodeId ai = a.id();
  return a.graph().push(std::move(y), a.requires_grad(), [ai](Graph& gr, NodeId self) {
    const Matrix& yv = gr.value(self);
    const Matrix& up = gr.upstream(self);
    Eigen::VectorXd total = up.rowwise().sum();
    Matrix p = yv.array().exp().matrix();
    gr.accumulate(ai, up - p.cwiseProduct(total.replicate(1, up.cols())));
  });
}

/// RMS normalization of each row followed by a learned per-column gain.
inline Var rms_norm_rows(const Var& a, const Var& gain, double eps = 1e-5) {
  detail::same_graph(a, gain);
  detail::require(gain.rows() == 1 && gain.cols() == a.cols(), "rms_norm_rows: gain must be 1 x cols");
  const Matrix& x = a.value();
  Eigen::VectorXd inv = ((x.array().square().rowwise().sum() / static_cast<double>(x.cols())) + eps).rsqrt();
  Matrix n = x.array().colwise() * inv.array();
  Matrix y = n.array().rowwise() * gain.value().row(0).array();
  const NodeId ai = a.id();
  const NodeId gi = gain.id();
  return a.graph().push(std::move(y), detail::any_grad({a, gain}),
                        [ai, gi, inv = std::move(inv), n = std::move(n)](Graph& gr, NodeId self) {
                          const Matrix& up = gr.upstream(self);
                          if (gr.requires_grad(gi)) {
                            gr.accumulate(gi, up.cwiseProduct(n).colwise().sum());
                          }
                          if (gr.requires_grad(ai)) {
                            Matrix dn = up.array().rowwise() * gr.value(gi).row(0).array();
                            Eigen::VectorXd proj =
                                dn.cwiseProduct(n).rowwise().sum() / static_cast<double>(n.cols());
                            Matrix dx = (dn - n.cwiseProduct(proj.replicate(1, n.cols()))).array().colwise() *
                                        inv.array();
                            gr.accumulate(ai, dx);
                          }
                        });
}

// ---------------------------------------------------------------------------
// Indexing and reshaping

/// Rows of `table` selected by `ids` (embedding lookup).
inline Var gather_rows(const Var& table, std::span<const int> ids) {
  const Matrix& t = table.value();
  Matrix y(static_cast<Eigen::Index>(ids.size()), t.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    detail::require(ids[i] >= 0 && ids[i] < t.rows(), "gather_rows: id " + std::to_string(ids[i]) + " out of range");
    y.row(static_cast<Eigen::Index>(i)) = t.row(ids[i]);
  }
  const NodeId ti = table.id();
  return table.graph().push(std::move(y), table.requires_grad(),
                            [ti, ids = std::vector<int>(ids.begin(), ids.end())](Graph& gr, NodeId self) {
                              const Matrix& up = gr.upstream(self);
                              Matrix& d = *gr.grad_slot(ti);
                              for (std::size_t i = 0; i < ids.size(); ++i) {
                                d.row(ids[i]) += up.row(static_cast<Eigen::Index>(i));
                              }
                            });
}

inline Var slice(const Var& a, Eigen::Index row0, Eigen::Index nrows, Eigen::Index col0, Eigen::Index ncols) {
  detail::require(row0 >= 0 && col0 >= 0 && nrows >= 0 && ncols >= 0 && row0 + nrows <= a.rows() &&
                      col0 + ncols <= a.cols(),
                  "slice: out of bounds");
  const NodeId ai = a.id();
  return a.graph().push(a.value().block(row0, col0, nrows, ncols), a.requires_grad(),
                        [ai, row0, nrows, col0, ncols](Graph& gr, NodeId self) {
                          gr.grad_slot(ai)->block(row0, col0, nrows, ncols) += gr.upstream(self);
                        });
}

inline Var slice_rows(const Var& a, Eigen::Index row0, Eigen::Index nrows) { return slice(a, row0, nrows, 0, a.cols()); }

inline Var slice_cols(const Var& a, Eigen::Index col0, Eigen::Index ncols) { return slice(a, 0, a.rows(), col0, ncols); }

inline Var concat_rows(std::span<const Var> parts) {
  detail::require(!parts.empty(), "concat_rows: no inputs");
  Eigen::Index rows = 0;
  const Eigen::Index cols = parts[0].cols();
  bool rg = false;
  for (const Var& p : parts) {
    detail::same_graph(p, parts[0]);
    detail::require(p.cols() == cols, "concat_rows: column mismatch");
    rows += p.rows();
    rg = rg || p.requires_grad();
  }
  Matrix y(rows, cols);
  std::vector<std::pair<NodeId, Eigen::Index>> spans;
  Eigen::Index at = 0;
  for (const Var& p : parts) {
    y.middleRows(at, p.rows()) = p.value();
    spans.emplace_back(p.id(), at);
    at += p.rows();
  }
  return parts[0].graph().push(std::move(y), rg, [spans = std::move(spans)](Graph& gr, NodeId self) {
    const Matrix& up = gr.upstream(self);
    for (const auto& [id, offset] : spans) {
      if (gr.requires_grad(id)) {
        gr.accumulate(id, up.middleRows(offset, gr.value(id).rows()));
      }
    }
  });
}

inline Var concat_cols(std::span<const Var> parts) {
  detail::require(!parts.empty(), "concat_cols: no inputs");
  Eigen::Index cols = 0;
  const Eigen::Index rows = parts[0].rows();
  bool rg = false;
  for (const Var& p : parts) {
    detail::same_graph(p, parts[0]);
    detail::require(p.rows() == rows, "concat_cols: row mismatch");
    cols += p.cols();
    rg = rg || p.requires_grad();
  }
  Matrix y(rows, cols);
  std::vector<std::pair<NodeId, Eigen::Index>> spans;
  Eigen::Index at = 0;
  for (const Var& p : parts) {
    y.middleCols(at, p.cols()) = p.value();
    spans.emplace_back(p.id(), at);
    at += p.cols();
  }
  return parts[0].graph().push(std::move(y), rg, [spans = std::move(spans)](Graph& gr, NodeId self) {
    const Matrix& up = gr.upstream(self);
    for (const auto& [id, offset] : spans) {
      if (gr.requires_grad(id)) {
        gr.accumulate(id, up.middleCols(offset, gr.value(id).cols()));
      }
    }
  });
}

/// Gathers individual entries (row, col) into an n x 1 column.
inline Var pick(const Var& a, std::span<const std::pair<int, int>> at) {
  const Matrix& x = a.value();
  Matrix y(static_cast<Eigen::Index>(at.size()), 1);
  for (std::size_t i = 0; i < at.size(); ++i) {
    detail::require(at[i].first >= 0 && at[i].first < x.rows() && at[i].second >= 0 && at[i].second < x.cols(),
                    "pick: index out of range");
    y(static_cast<Eigen::Index>(i), 0) = x(at[i].first, at[i].second);
  }
  const NodeId ai = a.id();
  return a.graph().push(std::move(y), a.requires_grad(),
                        [ai, at = std::vector<std::pair<int, int>>(at.begin(), at.end())](Graph& gr, NodeId self) {
                          const Matrix& up = gr.upstream(self);
                          Matrix& d = *gr.grad_slot(ai);
                          for (std::size_t i = 0; i < at.size(); ++i) {
                            d(at[i].first, at[i].second) += up(static_cast<Eigen::Index>(i), 0);
                          }
                        });
}

// ---------------------------------------------------------------------------
// Reductions

inline Var sum(const Var& a) {
  const NodeId ai = a.id();
  return a.graph().push(Matrix::Constant(1, 1, a.value().sum()), a.requires_grad(), [ai](Graph& gr, NodeId self) {
    const Matrix& x = gr.value(ai);
    gr.accumulate(ai, Matrix::Constant(x.rows(), x.cols(), gr.upstream(self)(0, 0)));
  });
}

inline Var mean(const Var& a) {
  detail::require(a.value().size() > 0, "mean: empty input");
  const NodeId ai = a.id();
  const auto n = static_cast<double>(a.value().size());
  return a.graph().push(Matrix::Constant(1, 1, a.value().sum() / n), a.requires_grad(),
                        [ai, n](Graph& gr, NodeId self) {
                          const Matrix& x = gr.value(ai);
                          gr.accumulate(ai, Matrix::Constant(x.rows(), x.cols(), gr.upstream(self)(0, 0) / n));
                        });
}

// ---------------------------------------------------------------------------

/// Identity on values, blocks the backward pass into `a` entirely.
inline Var stop_gradient(const Var& a) {
  Graph& g = a.graph();
  return g.push(g.next_stop_gradient_value(a.value()), false, {});
}

}  // namespace tcrm
