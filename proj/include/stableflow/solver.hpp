#ifndef STABLEFLOW_SOLVER_HPP
#define STABLEFLOW_SOLVER_HPP

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "stableflow/special.hpp"
#include "stableflow/tape.hpp"

namespace stableflow {

enum class Scheme { kEuler, kRk4, kFracAbm };

inline const char* scheme_name(Scheme s) {
  switch (s) {
    case Scheme::kEuler: return "euler";
    case Scheme::kRk4: return "rk4";
    case Scheme::kFracAbm: return "frac_abm";
  }
  return "?";
}

inline Scheme scheme_from_name(const std::string& s) {
  if (s == "euler") return Scheme::kEuler;
  if (s == "rk4") return Scheme::kRk4;
  if (s == "frac_abm") return Scheme::kFracAbm;
  throw ContractError("unknown scheme: " + s);
}

struct SolverConfig {
  double beta = 1.0;
  double step_h = 1.0;
  double t_end = 10.0;
  Scheme scheme = Scheme::kRk4;
  std::size_t memory_window = 0;  // 0 = full memory

  std::size_t n_steps() const {
    double n = t_end / step_h;
    double r = std::round(n);
    if (std::abs(n - r) > 1e-9 || r < 1.0)
      throw ContractError("SolverConfig: t_end / step_h must be a positive integer");
    return static_cast<std::size_t>(r);
  }

  void validate() const {
    if (step_h <= 0.0 || t_end <= 0.0) throw ContractError("SolverConfig: step_h and t_end must be positive");
    if (beta <= 0.0 || beta > 1.0) throw ContractError("SolverConfig: beta must be in (0,1]");
    if (scheme != Scheme::kFracAbm && beta != 1.0)
      throw ContractError("SolverConfig: euler/rk4 require beta == 1");
    n_steps();
  }
};

struct SolveAbort : std::runtime_error {
  SolveAbort(std::size_t step_, double norm_)
      : std::runtime_error("solve: non-finite state at step " + std::to_string(step_) +
                           " (norm " + std::to_string(norm_) + ")"),
        step(step_),
        norm(norm_) {}
  std::size_t step;
  double norm;
};

/// Stored states, vector-field evaluations, and V values along a solve; the
/// Caputo memory kernel and the certifier both read from it.
struct TrajectoryRecord {
  std::vector<double> times;
  std::vector<Var> states;
  std::vector<Var> rhs_history;
  std::vector<Var> v_history;  // empty unless a Lyapunov observer was supplied
};

using RhsFn = std::function<Var(Tape*, const Var&, const TrajectoryRecord&)>;
using LyapFn = std::function<Var(Tape*, const Var&)>;

namespace detail {

inline void check_finite(const Var& u, std::size_t step) {
  if (!u.val.all_finite()) throw SolveAbort(step, frob_norm(u.val));
}

inline void commit(Tape* tp, TrajectoryRecord& rec, double t, const Var& u, const LyapFn& lyap) {
  rec.times.push_back(t);
  rec.states.push_back(u);
  if (lyap) rec.v_history.push_back(lyap(tp, u));
}

}  // namespace detail

/// Fixed-step integration of du/dt = rhs(u) (euler, rk4) or of the Caputo
/// system D^beta u = rhs(u) via the Adams-Bashforth-Moulton predictor-
/// corrector with one corrector iteration.
inline TrajectoryRecord solve(Tape* tp, const RhsFn& rhs, const Var& u0, const SolverConfig& cfg,
                              const LyapFn& lyap = nullptr) {
  cfg.validate();
  const std::size_t n_steps = cfg.n_steps();
  const double h = cfg.step_h;
  TrajectoryRecord rec;
  detail::check_finite(u0, 0);
  detail::commit(tp, rec, 0.0, u0, lyap);

  if (cfg.scheme == Scheme::kEuler) {
    Var u = u0;
    for (std::size_t k = 0; k < n_steps; ++k) {
      Var f = rhs(tp, u, rec);
      rec.rhs_history.push_back(f);
      u = add(tp, u, scale(tp, f, h));
      detail::check_finite(u, k + 1);
      detail::commit(tp, rec, (k + 1) * h, u, lyap);
    }
    rec.rhs_history.push_back(rhs(tp, u, rec));
    return rec;
  }

  if (cfg.scheme == Scheme::kRk4) {
    Var u = u0;
    for (std::size_t k = 0; k < n_steps; ++k) {
      Var k1 = rhs(tp, u, rec);
      Var k2 = rhs(tp, add(tp, u, scale(tp, k1, h / 2.0)), rec);
      Var k3 = rhs(tp, add(tp, u, scale(tp, k2, h / 2.0)), rec);
      Var k4 = rhs(tp, add(tp, u, scale(tp, k3, h)), rec);
      rec.rhs_history.push_back(k1);
      Var incr = add(tp, k1, scale(tp, add(tp, k2, k3), 2.0));
      incr = add(tp, incr, k4);
      u = add(tp, u, scale(tp, incr, h / 6.0));
      detail::check_finite(u, k + 1);
      detail::commit(tp, rec, (k + 1) * h, u, lyap);
    }
    rec.rhs_history.push_back(rhs(tp, u, rec));
    return rec;
  }

  // Fractional ABM. f_j are the corrected vector-field values at t_j.
  const double beta = cfg.beta;
  const double g1 = gamma_fn(beta + 1.0);
  const double g2 = gamma_fn(beta + 2.0);
  const double hb = std::pow(h, beta);
  std::vector<Var> f;
  f.push_back(rhs(tp, u0, rec));
  rec.rhs_history.push_back(f[0]);
  for (std::size_t n = 0; n < n_steps; ++n) {
    const double dn = static_cast<double>(n);
    // Predictor: u0 + h^b/G(b+1) sum_j [(n+1-j)^b - (n-j)^b] f_j
    Var pacc;
    bool first = true;
    for (std::size_t j = 0; j <= n; ++j) {
      if (cfg.memory_window > 0 && n - j >= cfg.memory_window) continue;
      double bj = std::pow(dn + 1.0 - j, beta) - std::pow(dn - j, beta);
      Var term = scale(tp, f[j], bj * hb / g1);
      pacc = first ? term : add(tp, pacc, term);
      first = false;
    }
    Var up = add(tp, u0, pacc);
    Var fp = rhs(tp, up, rec);
    // Corrector: u0 + h^b/G(b+2) [ f(up) + a_0 f_0 + sum_{j>=1} a_j f_j ]
    Var cacc = scale(tp, fp, hb / g2);
    for (std::size_t j = 0; j <= n; ++j) {
      if (cfg.memory_window > 0 && n - j >= cfg.memory_window) continue;
      double aj;
      if (j == 0)
        aj = std::pow(dn, beta + 1.0) - (dn - beta) * std::pow(dn + 1.0, beta);
      else
        aj = std::pow(dn - j + 2.0, beta + 1.0) + std::pow(dn - j, beta + 1.0) -
             2.0 * std::pow(dn - j + 1.0, beta + 1.0);
      cacc = add(tp, cacc, scale(tp, f[j], aj * hb / g2));
    }
    Var u = add(tp, u0, cacc);
    detail::check_finite(u, n + 1);
    detail::commit(tp, rec, (n + 1) * h, u, lyap);
    f.push_back(rhs(tp, u, rec));
    rec.rhs_history.push_back(f.back());
  }
  return rec;
}

/// L1 estimate of the Caputo derivative of a scalar history at its last
/// point: h^{-b}/G(2-b) * sum_j [(j+1)^{1-b} - j^{1-b}] (V_{n-j} - V_{n-j-1}).
inline double caputo_l1_estimate(const std::vector<double>& v, double beta, double step_h) {
  if (v.size() < 2) throw ContractError("caputo_l1_estimate: need at least 2 history points");
  if (beta <= 0.0 || beta > 1.0) throw ContractError("caputo_l1_estimate: beta must be in (0,1]");
  const std::size_t n = v.size() - 1;
  double s = 0.0, c = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    // j = 0: the j^{1-beta} term vanishes for every beta in (0,1], including
    // beta = 1 where pow(0, 0) would otherwise evaluate to 1.
    double w = j == 0 ? 1.0
                      : std::pow(j + 1.0, 1.0 - beta) - std::pow(static_cast<double>(j), 1.0 - beta);
    double y = w * (v[n - j] - v[n - j - 1]) - c;
    double t = s + y;
    c = (t - s) - y;
    s = t;
  }
  return s / (std::pow(step_h, beta) * gamma_fn(2.0 - beta));
}

/// Differentiable variant over scalar tape vars.
inline Var caputo_l1_estimate(Tape* tp, const std::vector<Var>& v, double beta, double step_h) {
  if (v.size() < 2) throw ContractError("caputo_l1_estimate: need at least 2 history points");
  const std::size_t n = v.size() - 1;
  const double norm = 1.0 / (std::pow(step_h, beta) * gamma_fn(2.0 - beta));
  Var acc;
  for (std::size_t j = 0; j < n; ++j) {
    double w = j == 0 ? 1.0
                      : std::pow(j + 1.0, 1.0 - beta) - std::pow(static_cast<double>(j), 1.0 - beta);
    Var diff = subtract(tp, v[n - j], v[n - j - 1]);
    Var term = scale(tp, diff, w * norm);
    acc = j == 0 ? term : add(tp, acc, term);
  }
  return acc;
}

}  // namespace stableflow

#endif
