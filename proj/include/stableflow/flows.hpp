#ifndef STABLEFLOW_FLOWS_HPP
#define STABLEFLOW_FLOWS_HPP

#include <memory>
#include <random>

#include "stableflow/graph.hpp"
#include "stableflow/tape.hpp"

namespace stableflow {

enum class FlowKind { kGrand, kGraphBel, kGraphCon };

inline const char* flow_name(FlowKind k) {
  switch (k) {
    case FlowKind::kGrand: return "grand";
    case FlowKind::kGraphBel: return "graphbel";
    case FlowKind::kGraphCon: return "graphcon";
  }
  return "?";
}

inline FlowKind flow_from_name(const std::string& s) {
  if (s == "grand") return FlowKind::kGrand;
  if (s == "graphbel") return FlowKind::kGraphBel;
  if (s == "graphcon") return FlowKind::kGraphCon;
  throw ConfigurationError("unknown flow kind: " + s);
}

/// Scaled dot-product attention parameters (W^K, W^Q, d_k).
struct AttentionParams {
  Tensor wk, wq;
  double d_k = 1.0;
};

/// One of the three base vector fields with its parameters.
struct FlowField {
  FlowKind kind = FlowKind::kGrand;
  AttentionParams attention;
  double graphcon_gamma = 1.0;
  double graphcon_alpha = 1.0;
  double zeta_width = 0.1;  // smoothing width of the GraphCON activation
};

/// Attention parameters lifted onto a tape (watched or constant).
struct FlowVars {
  Var wk, wq;
  double d_k = 1.0;
};

inline FlowVars watch_flow(Tape* tp, const FlowField& f, bool trainable) {
  FlowVars v;
  if (tp && trainable) {
    v.wk = tp->watch(f.attention.wk);
    v.wq = tp->watch(f.attention.wq);
  } else {
    v.wk = Var{f.attention.wk, -1};
    v.wq = Var{f.attention.wq, -1};
  }
  v.d_k = f.attention.d_k;
  return v;
}

/// Support mask for attention: graph adjacency pattern plus the self entry.
/// With the self entry included, (A - I) has zero row sums, so constant
/// feature states are equilibria of GRAND.
inline std::shared_ptr<const Tensor> attention_support(const Graph& g) {
  auto m = std::make_shared<Tensor>(g.adjacency);
  for (std::size_t i = 0; i < g.n_nodes; ++i) m->at(i, i) = 1.0;
  return m;
}

/// Symmetric degree normalization of the support pattern, used as the
/// GraphBel B_s factor. Constant in U.
inline std::shared_ptr<const Tensor> graphbel_norm_matrix(const Graph& g) {
  const std::size_t n = g.n_nodes;
  auto b = std::make_shared<Tensor>(n, n);
  std::vector<double> deg(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    deg[i] = 1.0;  // self entry
    for (std::size_t j = 0; j < n; ++j)
      if (i != j && g.adjacency.at(i, j) != 0.0) deg[i] += 1.0;
  }
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      bool sup = (i == j) || g.adjacency.at(i, j) != 0.0;
      if (sup) b->at(i, j) = 1.0 / std::sqrt(deg[i] * deg[j]);
    }
  return b;
}

/// Precomputed per-graph context shared by all rhs evaluations.
struct FlowContext {
  std::shared_ptr<const Tensor> support;      // attention mask (adjacency + self)
  std::shared_ptr<const Tensor> graphbel_b;   // only built for GraphBel
  std::size_t n_nodes = 0;

  static FlowContext build(const Graph& g, FlowKind kind) {
    FlowContext c;
    c.support = attention_support(g);
    c.n_nodes = g.n_nodes;
    if (kind == FlowKind::kGraphBel) c.graphbel_b = graphbel_norm_matrix(g);
    return c;
  }
};

inline Var attention_matrix(Tape* tp, const Var& u, const FlowVars& p,
                            std::shared_ptr<const Tensor> support) {
  return attention(tp, u, p.wk, p.wq, std::move(support), p.d_k);
}

/// GRAND: dU/dt = (A(U) - I) U.
inline Var grand_rhs(Tape* tp, const Var& u, const FlowVars& p, const FlowContext& ctx) {
  Var a = attention_matrix(tp, u, p, ctx.support);
  return subtract(tp, matmul(tp, a, u), u);
}

/// GraphBel: dU/dt = (A_s odot B_s - Psi) U with Psi the diagonal of row sums
/// of A_s odot B_s, so the operator has zero row sums by construction.
inline Var graphbel_rhs(Tape* tp, const Var& u, const FlowVars& p, const FlowContext& ctx) {
  Var a = attention_matrix(tp, u, p, ctx.support);
  Var m = hadamard(tp, a, Var{*ctx.graphbel_b, -1});
  const std::size_t n = ctx.n_nodes;
  Var ones_col{Tensor(n, 1, 1.0), -1};
  Var row_sums = matmul(tp, m, ones_col);                       // N x 1
  Var ones_row{Tensor(1, u.val.cols(), 1.0), -1};
  Var psi_u = hadamard(tp, matmul(tp, row_sums, ones_row), u);  // diag(rowsum) U
  return subtract(tp, matmul(tp, m, u), psi_u);
}

/// GraphCON on the stacked state [U; Y] (2N x d):
///   dU/dt = zeta((A(U) - I) U) - gamma U - alpha Y,  dY/dt = U.
inline Var graphcon_rhs(Tape* tp, const Var& state, const FlowVars& p, const FlowContext& ctx,
                        double gamma, double alpha, double zeta_width) {
  const std::size_t n = ctx.n_nodes;
  if (state.val.rows() != 2 * n)
    throw ContractError("graphcon_rhs: stacked state must have 2N rows (auxiliary Y missing)");
  Var u = slice_rows(tp, state, 0, n);
  Var y = slice_rows(tp, state, n, 2 * n);
  Var a = attention_matrix(tp, u, p, ctx.support);
  Var coupling = subtract(tp, matmul(tp, a, u), u);
  Var du = relu_smooth(tp, coupling, zeta_width);
  du = subtract(tp, du, scale(tp, u, gamma));
  du = subtract(tp, du, scale(tp, y, alpha));
  return concat_rows(tp, du, u);
}

/// Dispatch for the configured base field. GraphCON expects the stacked state.
inline Var flow_rhs(Tape* tp, const Var& state, const FlowField& f, const FlowVars& p,
                    const FlowContext& ctx) {
  switch (f.kind) {
    case FlowKind::kGrand: return grand_rhs(tp, state, p, ctx);
    case FlowKind::kGraphBel: return graphbel_rhs(tp, state, p, ctx);
    case FlowKind::kGraphCon:
      return graphcon_rhs(tp, state, p, ctx, f.graphcon_gamma, f.graphcon_alpha, f.zeta_width);
  }
  throw ContractError("flow_rhs: bad kind");
}

/// Number of state rows for N graph nodes under this flow.
inline std::size_t state_rows(FlowKind kind, std::size_t n_nodes) {
  return kind == FlowKind::kGraphCon ? 2 * n_nodes : n_nodes;
}

inline FlowField init_flow(FlowKind kind, std::size_t dim, std::size_t d_h, std::mt19937_64& rng) {
  FlowField f;
  f.kind = kind;
  std::normal_distribution<double> dist(0.0, 1.0 / std::sqrt(static_cast<double>(dim)));
  f.attention.wk = Tensor(dim, d_h);
  f.attention.wq = Tensor(dim, d_h);
  for (std::size_t k = 0; k < f.attention.wk.size(); ++k) f.attention.wk[k] = dist(rng);
  for (std::size_t k = 0; k < f.attention.wq.size(); ++k) f.attention.wq[k] = dist(rng);
  f.attention.d_k = std::sqrt(static_cast<double>(d_h));
  return f;
}

}  // namespace stableflow

#endif
