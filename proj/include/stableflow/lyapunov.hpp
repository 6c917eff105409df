#ifndef STABLEFLOW_LYAPUNOV_HPP
#define STABLEFLOW_LYAPUNOV_HPP

#include <random>
#include <vector>

#include "stableflow/solver.hpp"
#include "stableflow/tape.hpp"

namespace stableflow {

/// Input-convex network parameters. Pass-through weights are stored
/// unconstrained and mapped through the smooth ReLU, so the nonnegativity
/// invariant survives every optimizer step by construction.
struct ICNNParams {
  std::vector<Tensor> w;      // k entries, input weights d_in x m_i
  std::vector<Tensor> b;      // k entries, biases 1 x m_i
  std::vector<Tensor> p_raw;  // k-1 entries, unconstrained pass-through m_{i-1} x m_i
  double d = 0.1;             // smoothing width of every activation

  std::size_t layers() const { return w.size(); }
  std::size_t input_dim() const { return w.empty() ? 0 : w[0].rows(); }

  void validate() const {
    if (d <= 0.0) throw ContractError("ICNNParams: smoothing width must be positive");
    if (w.size() < 2 || b.size() != w.size() || p_raw.size() != w.size() - 1)
      throw ContractError("ICNNParams: inconsistent layer counts");
  }
};

inline ICNNParams init_icnn(std::size_t input_dim, std::size_t hidden, std::size_t k,
                            double width, std::mt19937_64& rng) {
  ICNNParams p;
  p.d = width;
  std::normal_distribution<double> dist(0.0, 0.1);
  for (std::size_t i = 0; i < k; ++i) {
    std::size_t m = (i + 1 == k) ? 1 : hidden;
    p.w.emplace_back(input_dim, m);
    p.b.emplace_back(1, m);
    for (std::size_t t = 0; t < p.w.back().size(); ++t) p.w.back()[t] = dist(rng);
    if (i > 0) {
      std::size_t prev = hidden;
      p.p_raw.emplace_back(prev, m);
      for (std::size_t t = 0; t < p.p_raw.back().size(); ++t) p.p_raw.back()[t] = dist(rng);
    }
  }
  p.validate();
  return p;
}

enum class StabilityMode { kInteger, kFractional };

/// Decay constants of the decrease conditions: Vdot <= -c V (integer) and
/// D^beta V <= -alpha3 ||U|| (fractional).
struct LyapunovConfig {
  double c = 1.0;
  double alpha3 = 0.1;
  StabilityMode mode = StabilityMode::kInteger;

  void validate() const {
    if (c <= 0.0 || alpha3 <= 0.0) throw ContractError("LyapunovConfig: c and alpha3 must be positive");
  }
};

/// ICNN parameters lifted onto a tape. `p` holds the mapped (nonnegative)
/// pass-through weights.
struct IcnnVars {
  std::vector<Var> w, b, p;
  double d = 0.1;
};

inline IcnnVars watch_icnn(Tape* tp, const ICNNParams& params, bool trainable,
                           std::vector<Var>* raw_out = nullptr) {
  params.validate();
  IcnnVars v;
  v.d = params.d;
  for (std::size_t i = 0; i < params.w.size(); ++i) {
    v.w.push_back(tp && trainable ? tp->watch(params.w[i]) : Var{params.w[i], -1});
    v.b.push_back(tp && trainable ? tp->watch(params.b[i]) : Var{params.b[i], -1});
  }
  for (std::size_t i = 0; i < params.p_raw.size(); ++i) {
    Var raw = tp && trainable ? tp->watch(params.p_raw[i]) : Var{params.p_raw[i], -1};
    if (raw_out) raw_out->push_back(raw);
    v.p.push_back(relu_smooth(tp, raw, params.d));
  }
  return v;
}

struct IcnnTrace {
  std::vector<Var> z;  // pre-activations per layer, N x m_i
  Var rows;            // per-row network output, N x 1
};

/// Row-wise ICNN: each row of `u` is an input vector; outputs one scalar per
/// row. Convex in the input because the pass-through weights are nonnegative
/// and the activation is convex nondecreasing.
inline IcnnTrace icnn_rows(Tape* tp, const Var& u, const IcnnVars& v) {
  for (const Var& p : v.p)
    for (std::size_t t = 0; t < p.val.size(); ++t)
      if (p.val[t] < 0.0) throw ContractError("icnn_rows: negative pass-through weight");
  IcnnTrace tr;
  Var q;
  const std::size_t k = v.w.size();
  for (std::size_t i = 0; i < k; ++i) {
    Var z = add_row_vec(tp, matmul(tp, u, v.w[i]), v.b[i]);
    if (i > 0) z = add(tp, z, matmul(tp, q, v.p[i - 1]));
    tr.z.push_back(z);
    q = relu_smooth(tp, z, v.d);
  }
  tr.rows = q;  // final width is 1
  return tr;
}

/// Scalar ICNN output for a single input vector (1 x d row).
inline Var icnn_forward(Tape* tp, const Var& u_flat, const IcnnVars& v) {
  if (u_flat.val.rows() != 1) throw ShapeError("icnn_forward: expected a single row vector");
  return icnn_rows(tp, u_flat, v).rows;
}

/// g(U) = sum_i icnn(u_i), the graph-level convex potential; size-invariant
/// under node injection and permutation-equivariant by construction.
inline Var icnn_potential(Tape* tp, const Var& u, const IcnnVars& v) {
  return sum(tp, icnn_rows(tp, u, v).rows);
}

/// V(U) = sigma(g(U) - g(0)) + ||U||_F^2. V(0) = 0 and V >= ||U||_F^2.
inline Var lyapunov_value(Tape* tp, const Var& u, const IcnnVars& v) {
  Var g = icnn_potential(tp, u, v);
  Var zero_row{Tensor(1, u.val.cols()), -1};
  Var g0 = scale(tp, icnn_forward(tp, zero_row, v), static_cast<double>(u.val.rows()));
  Var inner = subtract(tp, g, g0);
  return add(tp, relu_smooth(tp, inner, v.d), squared_frobenius_norm(tp, u));
}

/// Analytic gradient of lyapunov_value with respect to U, built from tape
/// primitives so it stays differentiable in the ICNN parameters:
/// grad = sigma'(g - g0) * grad g + 2U.
inline Var lyapunov_grad(Tape* tp, const Var& u, const IcnnVars& v) {
  IcnnTrace tr = icnn_rows(tp, u, v);
  const std::size_t k = v.w.size();
  // Layer-wise chain rule for grad g, rows independent.
  Var r = relu_smooth_deriv(tp, tr.z[k - 1], v.d);  // N x 1
  Var grad_g = matmul(tp, r, transpose(tp, v.w[k - 1]));
  for (std::size_t i = k - 1; i-- > 0;) {
    r = hadamard(tp, matmul(tp, r, transpose(tp, v.p[i])), relu_smooth_deriv(tp, tr.z[i], v.d));
    grad_g = add(tp, grad_g, matmul(tp, r, transpose(tp, v.w[i])));
  }
  Var g = sum(tp, tr.rows);
  Var zero_row{Tensor(1, u.val.cols()), -1};
  Var g0 = scale(tp, icnn_forward(tp, zero_row, v), static_cast<double>(u.val.rows()));
  Var outer = relu_smooth_deriv(tp, subtract(tp, g, g0), v.d);
  return add(tp, mul_scalar(tp, grad_g, outer), scale(tp, u, 2.0));
}

/// Decrease-condition functional.
///   integer:    phi = <grad V, F>_F + c V
///   fractional: phi = D^beta V (L1 over stored history + V(U)) + alpha3 ||U||_F
inline Var phi(Tape* tp, const Var& u, const Var& f_value, const std::vector<Var>& v_history,
               const LyapunovConfig& cfg, const IcnnVars& vars, double beta = 1.0,
               double step_h = 1.0) {
  cfg.validate();
  if (cfg.mode == StabilityMode::kInteger) {
    Var v = lyapunov_value(tp, u, vars);
    Var grad = lyapunov_grad(tp, u, vars);
    Var inner = sum(tp, hadamard(tp, grad, f_value));
    return add(tp, inner, scale(tp, v, cfg.c));
  }
  if (v_history.empty())
    throw ContractError("phi: fractional mode requires at least one stored V value");
  std::vector<Var> hist = v_history;
  hist.push_back(lyapunov_value(tp, u, vars));
  Var dv = caputo_l1_estimate(tp, hist, beta, step_h);
  Var norm = sqrt_elem(tp, squared_frobenius_norm(tp, u));
  return add(tp, dv, scale(tp, norm, cfg.alpha3));
}

inline constexpr double kEpsGradSq = 1e-12;

struct ProjectionStats {
  std::size_t evals = 0;
  std::size_t fired = 0;
  std::size_t grad_fallbacks = 0;
};

/// Projection onto the Lyapunov-stable half-space: F unchanged when phi <= 0,
/// otherwise F - grad V * phi / ||grad V||_F^2 (the gradient direction is used
/// in both modes). Near-vanishing gradients fall back to -c U.
inline Var project(Tape* tp, const Var& u, const Var& f_value, const std::vector<Var>& v_history,
                   const LyapunovConfig& cfg, const IcnnVars& vars, double beta = 1.0,
                   double step_h = 1.0, ProjectionStats* stats = nullptr) {
  Var ph = phi(tp, u, f_value, v_history, cfg, vars, beta, step_h);
  if (stats) ++stats->evals;
  if (ph.val.value() <= 0.0) return f_value;
  if (stats) ++stats->fired;
  Var grad = lyapunov_grad(tp, u, vars);
  Var gn2 = squared_frobenius_norm(tp, grad);
  if (gn2.val.value() < kEpsGradSq) {
    if (stats) ++stats->grad_fallbacks;
    return scale(tp, u, -cfg.c);
  }
  Var corr = div_scalar(tp, mul_scalar(tp, grad, ph), gn2);
  return subtract(tp, f_value, corr);
}

}  // namespace stableflow

#endif
