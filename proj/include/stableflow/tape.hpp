#ifndef STABLEFLOW_TAPE_HPP
#define STABLEFLOW_TAPE_HPP

#include <cblas.h>

#include <functional>
#include <memory>
#include <set>
#include <unordered_map>
#include <utility>
#include <vector>

#include "stableflow/tensor.hpp"

namespace stableflow {

enum class OpKind {
  kMatmul,
  kAdd,
  kSubtract,
  kHadamard,
  kScale,
  kRowSoftmax,
  kReluSmooth,
  kReluSmoothDeriv,
  kSum,
  kSquaredFrobeniusNorm,
  kTranspose,
  kConcatRows,
  kSliceRows,
  kAttention,
  kSqrt,
  kMulScalar,
  kDivScalar,
  kAddRowVec,
  kSoftmaxXent,
};

inline const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::kMatmul: return "matmul";
    case OpKind::kAdd: return "add";
    case OpKind::kSubtract: return "subtract";
    case OpKind::kHadamard: return "hadamard";
    case OpKind::kScale: return "scale";
    case OpKind::kRowSoftmax: return "row_softmax";
    case OpKind::kReluSmooth: return "relu_smooth";
    case OpKind::kReluSmoothDeriv: return "relu_smooth_deriv";
    case OpKind::kSum: return "sum";
    case OpKind::kSquaredFrobeniusNorm: return "squared_frobenius_norm";
    case OpKind::kTranspose: return "transpose";
    case OpKind::kConcatRows: return "concat_rows";
    case OpKind::kSliceRows: return "slice_rows";
    case OpKind::kAttention: return "attention";
    case OpKind::kSqrt: return "sqrt";
    case OpKind::kMulScalar: return "mul_scalar";
    case OpKind::kDivScalar: return "div_scalar";
    case OpKind::kAddRowVec: return "add_row_vec";
    case OpKind::kSoftmaxXent: return "softmax_cross_entropy";
  }
  return "?";
}

/// A tensor value together with its id on a tape. id < 0 marks a constant
/// that takes no part in differentiation.
struct Var {
  Tensor val;
  int id = -1;
};

/// Reverse-mode record. Nodes reference only earlier nodes; confined to one
/// thread for its lifetime.
class Tape {
 public:
  struct Node {
    Node(OpKind op_, int a_, int b_, int out_) : op(op_), a(a_), b(b_), out(out_) {}
    Node(OpKind op_, int a_, int b_, int c_, int out_)
        : op(op_), a(a_), b(b_), c(c_), out(out_) {}
    OpKind op;
    int a = -1, b = -1, c = -1;
    int out = -1;
    std::vector<Tensor> saved;              // operand/output values the adjoint needs
    std::shared_ptr<const Tensor> ref;      // shared large constant (e.g. adjacency mask)
    double p0 = 0.0, p1 = 0.0;
    std::size_t r0 = 0, r1 = 0;
    std::vector<int> labels;
    std::vector<std::size_t> indices;
  };

  int fresh() { return next_id_++; }

  /// Registers a trainable leaf: gradients will be reported for it.
  Var watch(const Tensor& t) {
    Var v{t, fresh()};
    watched_.push_back(v.id);
    return v;
  }

  void push(Node n) { nodes_.push_back(std::move(n)); }
  const std::vector<Node>& nodes() const { return nodes_; }
  const std::vector<int>& watched() const { return watched_; }
  std::size_t size() const { return nodes_.size(); }

 private:
  std::vector<Node> nodes_;
  std::vector<int> watched_;
  int next_id_ = 0;
};

namespace detail {

inline void require_same(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b))
    throw ShapeError(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
}

inline bool record(Tape* tp, const Var& a) { return tp && a.id >= 0; }
inline bool record(Tape* tp, const Var& a, const Var& b) {
  return tp && (a.id >= 0 || b.id >= 0);
}

/// C = alpha * op(A) * op(B) + beta * C
inline void gemm(bool ta, bool tb, const Tensor& a, const Tensor& b, Tensor& c,
                 double alpha = 1.0, double beta = 0.0) {
  const int m = static_cast<int>(ta ? a.cols() : a.rows());
  const int k = static_cast<int>(ta ? a.rows() : a.cols());
  const int n = static_cast<int>(tb ? b.rows() : b.cols());
  cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans,
              m, n, k, alpha, a.data(), static_cast<int>(a.cols()), b.data(),
              static_cast<int>(b.cols()), beta, c.data(), static_cast<int>(c.cols()));
}

inline double kahan_sum(const double* p, std::size_t n) {
  double s = 0.0, c = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double y = p[i] - c;
    double t = s + y;
    c = (t - s) - y;
    s = t;
  }
  return s;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Primitive forwards. Each takes an optional tape; with a null tape the value
// is computed and nothing is recorded.
// ---------------------------------------------------------------------------

inline Var matmul(Tape* tp, const Var& a, const Var& b) {
  if (a.val.cols() != b.val.rows())
    throw ShapeError("matmul: " + a.val.shape_str() + " x " + b.val.shape_str());
  Var out;
  out.val = Tensor(a.val.rows(), b.val.cols());
  detail::gemm(false, false, a.val, b.val, out.val);
  if (detail::record(tp, a, b)) {
    out.id = tp->fresh();
    Tape::Node n{OpKind::kMatmul, a.id, b.id, out.id};
    n.saved = {a.val, b.val};
    tp->push(std::move(n));
  }
  return out;
}

inline Var add(Tape* tp, const Var& a, const Var& b) {
  detail::require_same(a.val, b.val, "add");
  Var out{a.val, -1};
  for (std::size_t k = 0; k < out.val.size(); ++k) out.val[k] += b.val[k];
  if (detail::record(tp, a, b)) {
    out.id = tp->fresh();
    tp->push({OpKind::kAdd, a.id, b.id, out.id});
  }
  return out;
}

inline Var subtract(Tape* tp, const Var& a, const Var& b) {
  detail::require_same(a.val, b.val, "subtract");
  Var out{a.val, -1};
  for (std::size_t k = 0; k < out.val.size(); ++k) out.val[k] -= b.val[k];
  if (detail::record(tp, a, b)) {
    out.id = tp->fresh();
    tp->push({OpKind::kSubtract, a.id, b.id, out.id});
  }
  return out;
}

inline Var hadamard(Tape* tp, const Var& a, const Var& b) {
  detail::require_same(a.val, b.val, "hadamard");
  Var out{a.val, -1};
  for (std::size_t k = 0; k < out.val.size(); ++k) out.val[k] *= b.val[k];
  if (detail::record(tp, a, b)) {
    out.id = tp->fresh();
    Tape::Node n{OpKind::kHadamard, a.id, b.id, out.id};
    n.saved = {a.val, b.val};
    tp->push(std::move(n));
  }
  return out;
}

inline Var scale(Tape* tp, const Var& a, double s) {
  Var out{a.val, -1};
  for (std::size_t k = 0; k < out.val.size(); ++k) out.val[k] *= s;
  if (detail::record(tp, a)) {
    out.id = tp->fresh();
    Tape::Node n{OpKind::kScale, a.id, -1, out.id};
    n.p0 = s;
    tp->push(std::move(n));
  }
  return out;
}

inline Var transpose(Tape* tp, const Var& a) {
  Var out;
  out.val = Tensor(a.val.cols(), a.val.rows());
  for (std::size_t i = 0; i < a.val.rows(); ++i)
    for (std::size_t j = 0; j < a.val.cols(); ++j) out.val.at(j, i) = a.val.at(i, j);
  if (detail::record(tp, a)) {
    out.id = tp->fresh();
    tp->push({OpKind::kTranspose, a.id, -1, out.id});
  }
  return out;
}

inline Var row_softmax(Tape* tp, const Var& a) {
  Var out{a.val, -1};
  for (std::size_t i = 0; i < a.val.rows(); ++i) {
    double mx = a.val.at(i, 0);
    for (std::size_t j = 1; j < a.val.cols(); ++j) mx = std::max(mx, a.val.at(i, j));
    double z = 0.0;
    for (std::size_t j = 0; j < a.val.cols(); ++j) {
      out.val.at(i, j) = std::exp(a.val.at(i, j) - mx);
      z += out.val.at(i, j);
    }
    for (std::size_t j = 0; j < a.val.cols(); ++j) out.val.at(i, j) /= z;
  }
  if (detail::record(tp, a)) {
    out.id = tp->fresh();
    Tape::Node n{OpKind::kRowSoftmax, a.id, -1, out.id};
    n.saved = {out.val};
    tp->push(std::move(n));
  }
  return out;
}

/// Smooth ReLU: 0 for x<=0, x^2/(2d) on (0,d), x-d/2 for x>=d. C1 at both joins.
inline double smooth_relu(double x, double d) {
  if (x <= 0.0) return 0.0;
  if (x < d) return x * x / (2.0 * d);
  return x - d / 2.0;
}

inline double smooth_relu_deriv(double x, double d) {
  if (x <= 0.0) return 0.0;
  if (x < d) return x / d;
  return 1.0;
}

inline Var relu_smooth(Tape* tp, const Var& a, double d) {
  if (d <= 0.0) throw ContractError("relu_smooth: width must be positive");
  Var out{a.val, -1};
  for (std::size_t k = 0; k < out.val.size(); ++k) out.val[k] = smooth_relu(a.val[k], d);
  if (detail::record(tp, a)) {
    out.id = tp->fresh();
    Tape::Node n{OpKind::kReluSmooth, a.id, -1, out.id};
    n.saved = {a.val};
    n.p0 = d;
    tp->push(std::move(n));
  }
  return out;
}

inline Var relu_smooth_deriv(Tape* tp, const Var& a, double d) {
  if (d <= 0.0) throw ContractError("relu_smooth_deriv: width must be positive");
  Var out{a.val, -1};
  for (std::size_t k = 0; k < out.val.size(); ++k) out.val[k] = smooth_relu_deriv(a.val[k], d);
  if (detail::record(tp, a)) {
    out.id = tp->fresh();
    Tape::Node n{OpKind::kReluSmoothDeriv, a.id, -1, out.id};
    n.saved = {a.val};
    n.p0 = d;
    tp->push(std::move(n));
  }
  return out;
}

inline Var sum(Tape* tp, const Var& a) {
  Var out{Tensor::scalar(detail::kahan_sum(a.val.data(), a.val.size())), -1};
  if (detail::record(tp, a)) {
    out.id = tp->fresh();
    Tape::Node n{OpKind::kSum, a.id, -1, out.id};
    n.r0 = a.val.rows();
    n.r1 = a.val.cols();
    tp->push(std::move(n));
  }
  return out;
}

inline Var squared_frobenius_norm(Tape* tp, const Var& a) {
  double s = 0.0, c = 0.0;
  for (std::size_t k = 0; k < a.val.size(); ++k) {
    double y = a.val[k] * a.val[k] - c;
    double t = s + y;
    c = (t - s) - y;
    s = t;
  }
  Var out{Tensor::scalar(s), -1};
  if (detail::record(tp, a)) {
    out.id = tp->fresh();
    Tape::Node n{OpKind::kSquaredFrobeniusNorm, a.id, -1, out.id};
    n.saved = {a.val};
    tp->push(std::move(n));
  }
  return out;
}

inline Var concat_rows(Tape* tp, const Var& a, const Var& b) {
  if (a.val.cols() != b.val.cols())
    throw ShapeError("concat_rows: " + a.val.shape_str() + " vs " + b.val.shape_str());
  Var out;
  out.val = Tensor(a.val.rows() + b.val.rows(), a.val.cols());
  std::memcpy(out.val.data(), a.val.data(), a.val.size() * sizeof(double));
  std::memcpy(out.val.data() + a.val.size(), b.val.data(), b.val.size() * sizeof(double));
  if (detail::record(tp, a, b)) {
    out.id = tp->fresh();
    Tape::Node n{OpKind::kConcatRows, a.id, b.id, out.id};
    n.r0 = a.val.rows();
    tp->push(std::move(n));
  }
  return out;
}

/// Rows [r0, r1) of a.
inline Var slice_rows(Tape* tp, const Var& a, std::size_t r0, std::size_t r1) {
  if (r1 > a.val.rows() || r0 > r1) throw ShapeError("slice_rows: bad range");
  Var out;
  out.val = Tensor(r1 - r0, a.val.cols());
  std::memcpy(out.val.data(), a.val.data() + r0 * a.val.cols(), out.val.size() * sizeof(double));
  if (detail::record(tp, a)) {
    out.id = tp->fresh();
    Tape::Node n{OpKind::kSliceRows, a.id, -1, out.id};
    n.r0 = r0;
    n.r1 = a.val.rows();
    tp->push(std::move(n));
  }
  return out;
}

inline Var sqrt_elem(Tape* tp, const Var& a) {
  Var out{a.val, -1};
  for (std::size_t k = 0; k < out.val.size(); ++k) out.val[k] = std::sqrt(a.val[k]);
  if (detail::record(tp, a)) {
    out.id = tp->fresh();
    Tape::Node n{OpKind::kSqrt, a.id, -1, out.id};
    n.saved = {out.val};
    tp->push(std::move(n));
  }
  return out;
}

/// Elementwise a * s with s a 1x1 scalar.
inline Var mul_scalar(Tape* tp, const Var& a, const Var& s) {
  double sv = s.val.value();
  Var out{a.val, -1};
  for (std::size_t k = 0; k < out.val.size(); ++k) out.val[k] *= sv;
  if (detail::record(tp, a, s)) {
    out.id = tp->fresh();
    Tape::Node n{OpKind::kMulScalar, a.id, s.id, out.id};
    n.saved = {a.val};
    n.p0 = sv;
    tp->push(std::move(n));
  }
  return out;
}

/// Elementwise a / s with s a 1x1 scalar.
inline Var div_scalar(Tape* tp, const Var& a, const Var& s) {
  double sv = s.val.value();
  Var out{a.val, -1};
  for (std::size_t k = 0; k < out.val.size(); ++k) out.val[k] /= sv;
  if (detail::record(tp, a, s)) {
    out.id = tp->fresh();
    Tape::Node n{OpKind::kDivScalar, a.id, s.id, out.id};
    n.saved = {a.val};
    n.p0 = sv;
    tp->push(std::move(n));
  }
  return out;
}

/// a + broadcast of the 1xC row vector b onto every row of a.
inline Var add_row_vec(Tape* tp, const Var& a, const Var& b) {
  if (b.val.rows() != 1 || b.val.cols() != a.val.cols())
    throw ShapeError("add_row_vec: " + a.val.shape_str() + " vs " + b.val.shape_str());
  Var out{a.val, -1};
  for (std::size_t i = 0; i < a.val.rows(); ++i)
    for (std::size_t j = 0; j < a.val.cols(); ++j) out.val.at(i, j) += b.val.at(0, j);
  if (detail::record(tp, a, b)) {
    out.id = tp->fresh();
    tp->push({OpKind::kAddRowVec, a.id, b.id, out.id});
  }
  return out;
}

/// Graph attention, fused: A_ij = softmax_j((W^K u_i)^T (W^Q u_j) / d_k) over
/// the support given by mask (nonzero entries). A node whose support row is
/// empty falls back to self-attention weight 1.
inline Var attention(Tape* tp, const Var& u, const Var& wk, const Var& wq,
                     std::shared_ptr<const Tensor> mask, double d_k) {
  if (d_k <= 0.0) throw ContractError("attention: d_k must be positive");
  const std::size_t n = u.val.rows();
  if (mask->rows() != n || mask->cols() != n)
    throw ShapeError("attention: mask " + mask->shape_str() + " vs state " + u.val.shape_str());
  Tensor key(n, wk.val.cols()), qry(n, wq.val.cols());
  detail::gemm(false, false, u.val, wk.val, key);
  detail::gemm(false, false, u.val, wq.val, qry);
  const std::size_t h = key.cols();
  Var out;
  out.val = Tensor(n, n);
  std::vector<std::size_t> sup;
  for (std::size_t i = 0; i < n; ++i) {
    sup.clear();
    for (std::size_t j = 0; j < n; ++j)
      if (mask->at(i, j) != 0.0) sup.push_back(j);
    if (sup.empty()) {
      out.val.at(i, i) = 1.0;
      continue;
    }
    double mx = -HUGE_VAL;
    std::vector<double> sc(sup.size());
    for (std::size_t t = 0; t < sup.size(); ++t) {
      double s = 0.0;
      const double* ki = key.data() + i * h;
      const double* qj = qry.data() + sup[t] * h;
      for (std::size_t m = 0; m < h; ++m) s += ki[m] * qj[m];
      sc[t] = s / d_k;
      mx = std::max(mx, sc[t]);
    }
    double z = 0.0;
    for (std::size_t t = 0; t < sup.size(); ++t) {
      sc[t] = std::exp(sc[t] - mx);
      z += sc[t];
    }
    for (std::size_t t = 0; t < sup.size(); ++t) out.val.at(i, sup[t]) = sc[t] / z;
  }
  if (tp && (u.id >= 0 || wk.id >= 0 || wq.id >= 0)) {
    out.id = tp->fresh();
    Tape::Node nd{OpKind::kAttention, u.id, wk.id, wq.id, out.id};
    nd.saved = {u.val, wk.val, wq.val, key, qry, out.val};
    nd.ref = std::move(mask);
    nd.p0 = d_k;
    tp->push(std::move(nd));
  }
  return out;
}

/// Mean cross-entropy of row-softmax(logits) against integer labels over the
/// given row indices.
inline Var softmax_cross_entropy(Tape* tp, const Var& logits, const std::vector<int>& labels,
                                 const std::vector<std::size_t>& indices) {
  if (indices.empty()) throw ContractError("softmax_cross_entropy: empty index set");
  const std::size_t c = logits.val.cols();
  Tensor probs(indices.size(), c);
  double loss = 0.0, comp = 0.0;
  for (std::size_t t = 0; t < indices.size(); ++t) {
    std::size_t i = indices[t];
    if (i >= logits.val.rows()) throw ContractError("softmax_cross_entropy: index out of range");
    int lab = labels[i];
    if (lab < 0 || static_cast<std::size_t>(lab) >= c)
      throw ContractError("softmax_cross_entropy: label out of range");
    double mx = logits.val.at(i, 0);
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, logits.val.at(i, j));
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(logits.val.at(i, j) - mx);
    double lz = std::log(z) + mx;
    for (std::size_t j = 0; j < c; ++j) probs.at(t, j) = std::exp(logits.val.at(i, j) - lz);
    double y = (lz - logits.val.at(i, static_cast<std::size_t>(lab))) - comp;
    double tt = loss + y;
    comp = (tt - loss) - y;
    loss = tt;
  }
  Var out{Tensor::scalar(loss / static_cast<double>(indices.size())), -1};
  if (detail::record(tp, logits)) {
    out.id = tp->fresh();
    Tape::Node n{OpKind::kSoftmaxXent, logits.id, -1, out.id};
    n.saved = {probs};
    n.labels = labels;
    n.indices = indices;
    n.r0 = logits.val.rows();
    n.r1 = c;
    tp->push(std::move(n));
  }
  return out;
}

/// Dispatch by op kind over the fixed primitive set. Test / introspection surface;
/// library code calls the typed functions directly.
inline Var primitive_forward(OpKind op, const std::vector<Var>& inputs, Tape* tp,
                             double param = 0.0) {
  switch (op) {
    case OpKind::kMatmul: return matmul(tp, inputs.at(0), inputs.at(1));
    case OpKind::kAdd: return add(tp, inputs.at(0), inputs.at(1));
    case OpKind::kSubtract: return subtract(tp, inputs.at(0), inputs.at(1));
    case OpKind::kHadamard: return hadamard(tp, inputs.at(0), inputs.at(1));
    case OpKind::kScale: return scale(tp, inputs.at(0), param);
    case OpKind::kRowSoftmax: return row_softmax(tp, inputs.at(0));
    case OpKind::kReluSmooth: return relu_smooth(tp, inputs.at(0), param);
    case OpKind::kSum: return sum(tp, inputs.at(0));
    case OpKind::kSquaredFrobeniusNorm: return squared_frobenius_norm(tp, inputs.at(0));
    case OpKind::kTranspose: return transpose(tp, inputs.at(0));
    case OpKind::kConcatRows: return concat_rows(tp, inputs.at(0), inputs.at(1));
    default: throw ContractError(std::string("primitive_forward: unsupported op ") + op_name(op));
  }
}

// ---------------------------------------------------------------------------
// Reverse pass
// ---------------------------------------------------------------------------

/// Gradients of a scalar loss with respect to every watched tensor.
/// Watched ids unreachable from the loss get zero gradients; shapes of those
/// zeros are taken from `shapes` when provided via watch order bookkeeping.
inline std::unordered_map<int, Tensor> backward(const Tape& tape, const Var& loss) {
  if (loss.val.size() != 1) throw ContractError("backward: loss must be a scalar");
  if (loss.id < 0) throw ContractError("backward: loss was not recorded on this tape");
  std::unordered_map<int, Tensor> adj;
  adj[loss.id] = Tensor::scalar(1.0);

  auto acc = [&adj](int id, const Tensor& g) {
    auto it = adj.find(id);
    if (it == adj.end()) {
      adj.emplace(id, g);
    } else {
      detail::require_same(it->second, g, "backward/accumulate");
      for (std::size_t k = 0; k < g.size(); ++k) it->second[k] += g[k];
    }
  };

  const auto& nodes = tape.nodes();
  std::set<int> watched(tape.watched().begin(), tape.watched().end());
  for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
    const Tape::Node& n = *it;
    auto gi = adj.find(n.out);
    if (gi == adj.end()) continue;
    Tensor g = std::move(gi->second);
    adj.erase(gi);
    switch (n.op) {
      case OpKind::kMatmul: {
        const Tensor& a = n.saved[0];
        const Tensor& b = n.saved[1];
        if (n.a >= 0) {
          Tensor da(a.rows(), a.cols());
          detail::gemm(false, true, g, b, da);
          acc(n.a, da);
        }
        if (n.b >= 0) {
          Tensor db(b.rows(), b.cols());
          detail::gemm(true, false, a, g, db);
          acc(n.b, db);
        }
        break;
      }
      case OpKind::kAdd: {
        if (n.a >= 0) acc(n.a, g);
        if (n.b >= 0) acc(n.b, g);
        break;
      }
      case OpKind::kSubtract: {
        if (n.a >= 0) acc(n.a, g);
        if (n.b >= 0) {
          Tensor db = g;
          for (std::size_t k = 0; k < db.size(); ++k) db[k] = -db[k];
          acc(n.b, db);
        }
        break;
      }
      case OpKind::kHadamard: {
        if (n.a >= 0) {
          Tensor da = g;
          for (std::size_t k = 0; k < da.size(); ++k) da[k] *= n.saved[1][k];
          acc(n.a, da);
        }
        if (n.b >= 0) {
          Tensor db = g;
          for (std::size_t k = 0; k < db.size(); ++k) db[k] *= n.saved[0][k];
          acc(n.b, db);
        }
        break;
      }
      case OpKind::kScale: {
        Tensor da = g;
        for (std::size_t k = 0; k < da.size(); ++k) da[k] *= n.p0;
        acc(n.a, da);
        break;
      }
      case OpKind::kRowSoftmax: {
        const Tensor& y = n.saved[0];
        Tensor da = g;
        for (std::size_t i = 0; i < y.rows(); ++i) {
          double dot = 0.0;
          for (std::size_t j = 0; j < y.cols(); ++j) dot += g.at(i, j) * y.at(i, j);
          for (std::size_t j = 0; j < y.cols(); ++j)
            da.at(i, j) = y.at(i, j) * (g.at(i, j) - dot);
        }
        acc(n.a, da);
        break;
      }
      case OpKind::kReluSmooth: {
        const Tensor& x = n.saved[0];
        Tensor da = g;
        for (std::size_t k = 0; k < da.size(); ++k) da[k] *= smooth_relu_deriv(x[k], n.p0);
        acc(n.a, da);
        break;
      }
      case OpKind::kReluSmoothDeriv: {
        const Tensor& x = n.saved[0];
        Tensor da = g;
        for (std::size_t k = 0; k < da.size(); ++k)
          da[k] *= (x[k] > 0.0 && x[k] < n.p0) ? 1.0 / n.p0 : 0.0;
        acc(n.a, da);
        break;
      }
      case OpKind::kSum: {
        Tensor da(n.r0, n.r1, g.value());
        acc(n.a, da);
        break;
      }
      case OpKind::kSquaredFrobeniusNorm: {
        const Tensor& x = n.saved[0];
        Tensor da = x;
        double gv = 2.0 * g.value();
        for (std::size_t k = 0; k < da.size(); ++k) da[k] *= gv;
        acc(n.a, da);
        break;
      }
      case OpKind::kTranspose: {
        Tensor da(g.cols(), g.rows());
        for (std::size_t i = 0; i < g.rows(); ++i)
          for (std::size_t j = 0; j < g.cols(); ++j) da.at(j, i) = g.at(i, j);
        acc(n.a, da);
        break;
      }
      case OpKind::kConcatRows: {
        if (n.a >= 0) {
          Tensor da(n.r0, g.cols());
          std::memcpy(da.data(), g.data(), da.size() * sizeof(double));
          acc(n.a, da);
        }
        if (n.b >= 0) {
          Tensor db(g.rows() - n.r0, g.cols());
          std::memcpy(db.data(), g.data() + n.r0 * g.cols(), db.size() * sizeof(double));
          acc(n.b, db);
        }
        break;
      }
      case OpKind::kSliceRows: {
        Tensor da(n.r1, g.cols());
        std::memcpy(da.data() + n.r0 * g.cols(), g.data(), g.size() * sizeof(double));
        acc(n.a, da);
        break;
      }
      case OpKind::kSqrt: {
        const Tensor& y = n.saved[0];
        Tensor da = g;
        for (std::size_t k = 0; k < da.size(); ++k)
          da[k] = y[k] > 1e-150 ? da[k] / (2.0 * y[k]) : 0.0;
        acc(n.a, da);
        break;
      }
      case OpKind::kMulScalar: {
        const Tensor& a = n.saved[0];
        if (n.a >= 0) {
          Tensor da = g;
          for (std::size_t k = 0; k < da.size(); ++k) da[k] *= n.p0;
          acc(n.a, da);
        }
        if (n.b >= 0) {
          double ds = 0.0;
          for (std::size_t k = 0; k < g.size(); ++k) ds += g[k] * a[k];
          acc(n.b, Tensor::scalar(ds));
        }
        break;
      }
      case OpKind::kDivScalar: {
        const Tensor& a = n.saved[0];
        if (n.a >= 0) {
          Tensor da = g;
          for (std::size_t k = 0; k < da.size(); ++k) da[k] /= n.p0;
          acc(n.a, da);
        }
        if (n.b >= 0) {
          double ds = 0.0;
          for (std::size_t k = 0; k < g.size(); ++k) ds += g[k] * a[k];
          acc(n.b, Tensor::scalar(-ds / (n.p0 * n.p0)));
        }
        break;
      }
      case OpKind::kAddRowVec: {
        if (n.a >= 0) acc(n.a, g);
        if (n.b >= 0) {
          Tensor db(1, g.cols());
          for (std::size_t i = 0; i < g.rows(); ++i)
            for (std::size_t j = 0; j < g.cols(); ++j) db.at(0, j) += g.at(i, j);
          acc(n.b, db);
        }
        break;
      }
      case OpKind::kAttention: {
        const Tensor& u = n.saved[0];
        const Tensor& wk = n.saved[1];
        const Tensor& wq = n.saved[2];
        const Tensor& key = n.saved[3];
        const Tensor& qry = n.saved[4];
        const Tensor& a = n.saved[5];
        const Tensor& mask = *n.ref;
        const std::size_t nn = u.rows(), h = key.cols();
        // Softmax adjoint restricted to each row's support, then dS -> dK, dQ.
        Tensor dkey(nn, h), dqry(nn, h);
        for (std::size_t i = 0; i < nn; ++i) {
          double dot = 0.0;
          bool any = false;
          for (std::size_t j = 0; j < nn; ++j)
            if (mask.at(i, j) != 0.0) {
              dot += g.at(i, j) * a.at(i, j);
              any = true;
            }
          if (!any) continue;  // fallback row: constant output
          for (std::size_t j = 0; j < nn; ++j) {
            if (mask.at(i, j) == 0.0) continue;
            double ds = a.at(i, j) * (g.at(i, j) - dot) / n.p0;
            if (ds == 0.0) continue;
            const double* qj = qry.data() + j * h;
            const double* ki = key.data() + i * h;
            double* dki = dkey.data() + i * h;
            double* dqj = dqry.data() + j * h;
            for (std::size_t m = 0; m < h; ++m) {
              dki[m] += ds * qj[m];
              dqj[m] += ds * ki[m];
            }
          }
        }
        int wq_id = n.c;
        if (n.a >= 0) {
          Tensor du(u.rows(), u.cols());
          detail::gemm(false, true, dkey, wk, du);
          detail::gemm(false, true, dqry, wq, du, 1.0, 1.0);
          acc(n.a, du);
        }
        if (n.b >= 0) {
          Tensor dwk(wk.rows(), wk.cols());
          detail::gemm(true, false, u, dkey, dwk);
          acc(n.b, dwk);
        }
        if (wq_id >= 0) {
          Tensor dwq(wq.rows(), wq.cols());
          detail::gemm(true, false, u, dqry, dwq);
          acc(wq_id, dwq);
        }
        break;
      }
      case OpKind::kSoftmaxXent: {
        const Tensor& probs = n.saved[0];
        Tensor da(n.r0, n.r1);
        double gv = g.value() / static_cast<double>(n.indices.size());
        for (std::size_t t = 0; t < n.indices.size(); ++t) {
          std::size_t i = n.indices[t];
          for (std::size_t j = 0; j < n.r1; ++j) da.at(i, j) += gv * probs.at(t, j);
          da.at(i, static_cast<std::size_t>(n.labels[i])) -= gv;
        }
        acc(n.a, da);
        break;
      }
    }
  }

  std::unordered_map<int, Tensor> grads;
  for (int id : watched) {
    auto it = adj.find(id);
    if (it != adj.end()) grads.emplace(id, std::move(it->second));
  }
  return grads;
}

/// Gradient for one watched var; zero tensor of its shape if unreachable.
inline Tensor grad_of(const std::unordered_map<int, Tensor>& grads, const Var& v) {
  auto it = grads.find(v.id);
  if (it != grads.end()) return it->second;
  return Tensor(v.val.rows(), v.val.cols());
}

/// Central finite differences (f(x+h e_i) - f(x-h e_i)) / 2h per entry.
/// Test oracle; independent of the tape.
inline Tensor finite_diff_gradient(const std::function<double(const Tensor&)>& f,
                                   const Tensor& x, double step) {
  if (step <= 0.0) throw ContractError("finite_diff_gradient: step must be positive");
  Tensor g(x.rows(), x.cols());
  Tensor xp = x;
  for (std::size_t k = 0; k < x.size(); ++k) {
    double orig = xp[k];
    xp[k] = orig + step;
    double fp = f(xp);
    xp[k] = orig - step;
    double fm = f(xp);
    xp[k] = orig;
    g[k] = (fp - fm) / (2.0 * step);
  }
  return g;
}

}  // namespace stableflow

#endif
