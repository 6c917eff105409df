#ifndef STABLEFLOW_ROBUSTNESS_HPP
#define STABLEFLOW_ROBUSTNESS_HPP

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "stableflow/training.hpp"

namespace stableflow {

enum class AttackKind { kPgdFeatures, kPgdInject, kRandomInject };

inline const char* attack_name(AttackKind k) {
  switch (k) {
    case AttackKind::kPgdFeatures: return "pgd_features";
    case AttackKind::kPgdInject: return "pgd_inject";
    case AttackKind::kRandomInject: return "random_inject";
  }
  return "?";
}

inline AttackKind attack_from_name(const std::string& s) {
  if (s == "pgd_features") return AttackKind::kPgdFeatures;
  if (s == "pgd_inject") return AttackKind::kPgdInject;
  if (s == "random_inject") return AttackKind::kRandomInject;
  throw ConfigurationError("unknown attack: " + s);
}

struct AttackConfig {
  AttackKind kind = AttackKind::kPgdFeatures;
  double eps = 0.1;
  std::size_t steps = 20;
  double step_size = 0.01;
  InjectionBudget budget{60, 20};

  void validate() const {
    if (eps <= 0.0) throw ConfigurationError("AttackConfig: eps must be positive");
    if (kind != AttackKind::kRandomInject && steps == 0)
      throw ConfigurationError("AttackConfig: steps must be positive");
    if (kind != AttackKind::kPgdFeatures) budget.validate();
  }
};

inline nlohmann::json to_json(const AttackConfig& a) {
  return {{"kind", attack_name(a.kind)},
          {"eps", a.eps},
          {"steps", a.steps},
          {"step_size", a.step_size},
          {"budget_nodes", a.budget.max_nodes},
          {"budget_edges_per_node", a.budget.max_edges_per_node}};
}

inline double eval_accuracy(const Model& m, const Dataset& data,
                            const std::vector<std::size_t>& rows) {
  FlowContext ctx = FlowContext::build(data.graph, m.cfg.flow);
  WatchPlan plan;  // nothing trainable: plain forward, no tape
  ModelVars v = watch_model(nullptr, m, data.features, plan);
  ForwardResult fwd = forward(nullptr, data, m, v, ctx, m.cfg.stabilized);
  return predict(fwd.logits.val, data.labels, rows);
}

namespace detail {

inline void feature_column_bounds(const Tensor& x, std::vector<double>& lo,
                                  std::vector<double>& hi) {
  lo.assign(x.cols(), 0.0);
  hi.assign(x.cols(), 0.0);
  for (std::size_t j = 0; j < x.cols(); ++j) {
    lo[j] = hi[j] = x.at(0, j);
    for (std::size_t i = 1; i < x.rows(); ++i) {
      lo[j] = std::min(lo[j], x.at(i, j));
      hi[j] = std::max(hi[j], x.at(i, j));
    }
  }
}

/// Wire `max_nodes` new nodes to distinct targets sampled from the eval
/// region and draw their features uniformly inside the per-dimension range of
/// the clean features.
inline Dataset make_injection(const Dataset& data, const InjectionBudget& budget,
                              const std::vector<std::size_t>& eval_rows,
                              std::mt19937_64& rng) {
  std::vector<double> lo, hi;
  feature_column_bounds(data.features, lo, hi);
  const std::size_t m = budget.max_nodes;
  Tensor feats(m, data.features.cols());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < feats.cols(); ++j) {
      std::uniform_real_distribution<double> dist(lo[j], hi[j]);
      feats.at(i, j) = dist(rng);
    }
  std::vector<Edge> wires;
  std::uniform_int_distribution<std::size_t> pick(0, eval_rows.size() - 1);
  for (std::size_t i = 0; i < m; ++i) {
    std::size_t fanout = std::min(budget.max_edges_per_node, eval_rows.size());
    std::vector<std::size_t> chosen;
    while (chosen.size() < fanout) {
      std::size_t t = eval_rows[pick(rng)];
      if (std::find(chosen.begin(), chosen.end(), t) == chosen.end()) chosen.push_back(t);
    }
    for (std::size_t t : chosen) wires.push_back({data.n_nodes() + i, t, 1.0});
  }
  return inject_nodes(data, feats, wires, budget);
}

/// PGD ascent on the injected rows only, clamped to the per-dimension box of
/// the clean features.
inline void pgd_injected_rows(const Model& m, Dataset& data, std::size_t first_new,
                              const std::vector<std::size_t>& eval_rows, std::size_t steps,
                              double step_size, const std::vector<double>& lo,
                              const std::vector<double>& hi) {
  FlowContext ctx = FlowContext::build(data.graph, m.cfg.flow);
  WatchPlan plan;
  plan.features = true;
  for (std::size_t s = 0; s < steps; ++s) {
    Tape tape;
    ModelVars v = watch_model(&tape, m, data.features, plan);
    ForwardResult fwd = forward(&tape, data, m, v, ctx, m.cfg.stabilized);
    Var l = loss(&tape, fwd.logits, data.labels, eval_rows, v.cls_w, 0.0);
    auto grads = backward(tape, l);
    Tensor g = grad_of(grads, v.features);
    for (std::size_t r = first_new; r < data.features.rows(); ++r)
      for (std::size_t j = 0; j < data.features.cols(); ++j) {
        double gd = g.at(r, j);
        double step = gd > 0.0 ? step_size : (gd < 0.0 ? -step_size : 0.0);
        data.features.at(r, j) = std::clamp(data.features.at(r, j) + step, lo[j], hi[j]);
      }
  }
}

}  // namespace detail

/// Produce the attacked dataset. The eval rows define both the attack surface
/// (which predictions the adversary wants to flip) and, for injection, the
/// wiring targets.
inline Dataset apply_attack(const Model& m, const Dataset& data, const AttackConfig& cfg,
                            const std::vector<std::size_t>& eval_rows, std::mt19937_64& rng) {
  cfg.validate();
  if (eval_rows.empty()) throw ConfigurationError("apply_attack: empty eval set");
  if (cfg.kind == AttackKind::kPgdFeatures) {
    FlowContext ctx = FlowContext::build(data.graph, m.cfg.flow);
    Dataset out = data;
    out.features = pgd_on_rows(m, data, ctx, eval_rows, cfg.eps, cfg.steps, cfg.step_size,
                               m.cfg.stabilized);
    return out;
  }
  std::vector<double> lo, hi;
  detail::feature_column_bounds(data.features, lo, hi);
  Dataset out = detail::make_injection(data, cfg.budget, eval_rows, rng);
  if (cfg.kind == AttackKind::kPgdInject)
    detail::pgd_injected_rows(m, out, data.n_nodes(), eval_rows, cfg.steps, cfg.step_size, lo,
                              hi);
  return out;
}

struct RobustReport {
  nlohmann::json config_echo;
  double clean_acc = 0.0;
  std::vector<nlohmann::json> per_attack;  // name, per-seed accs, mean, std

  nlohmann::json to_json() const {
    return {{"config", config_echo}, {"clean_acc", clean_acc}, {"attacks", per_attack}};
  }
};

/// Degree-filter the test set, measure clean accuracy, then apply each attack
/// under each seed and report per-attack mean and standard deviation of the
/// robust accuracy.
inline RobustReport evaluate_robustness(const Model& m, const Dataset& data,
                                        const std::vector<AttackConfig>& attacks,
                                        const std::vector<std::uint64_t>& seeds,
                                        double filter_lo = 0.05, double filter_hi = 0.05) {
  if (seeds.empty()) throw ConfigurationError("evaluate_robustness: no seeds");
  std::vector<std::size_t> eval_rows = degree_filter_eval_set(data, filter_lo, filter_hi);
  RobustReport rep;
  rep.clean_acc = eval_accuracy(m, data, eval_rows);
  rep.config_echo = {{"filter_lo", filter_lo},
                     {"filter_hi", filter_hi},
                     {"seeds", seeds},
                     {"eval_rows", eval_rows.size()}};
  for (const AttackConfig& a : attacks) {
    std::vector<double> accs;
    for (std::uint64_t s : seeds) {
      std::mt19937_64 rng(s);
      Dataset adv = apply_attack(m, data, a, eval_rows, rng);
      accs.push_back(eval_accuracy(m, adv, eval_rows));
    }
    double mean = 0.0;
    for (double x : accs) mean += x;
    mean /= static_cast<double>(accs.size());
    double var = 0.0;
    for (double x : accs) var += (x - mean) * (x - mean);
    double sd = accs.size() > 1 ? std::sqrt(var / static_cast<double>(accs.size() - 1)) : 0.0;
    rep.per_attack.push_back({{"attack", to_json(a)},
                              {"per_seed_acc", accs},
                              {"mean_acc", mean},
                              {"std_acc", sd}});
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Runtime stability certification.
// ---------------------------------------------------------------------------

struct CertifyReport {
  StabilityMode mode = StabilityMode::kInteger;
  double beta = 1.0;
  double tol = 0.0;
  bool pass = false;
  double pass_fraction = 0.0;
  // Worst (largest) violation margin over the decaying part of the
  // trajectory: max_k (value_k - bound_k) / envelope_k. Non-positive means
  // every checkpoint sits inside the envelope; larger is worse.
  double worst_margin = 0.0;
  double measured_k = 0.0;    // alpha2 bound, fractional mode only
  std::vector<double> times, values, envelope;

  nlohmann::json to_json() const {
    return {{"mode", mode == StabilityMode::kInteger ? "integer" : "fractional"},
            {"beta", beta},
            {"tol", tol},
            {"pass", pass},
            {"pass_fraction", pass_fraction},
            {"worst_margin", worst_margin},
            {"measured_k", measured_k},
            {"times", times},
            {"values", values},
            {"envelope", envelope}};
  }
};

/// Check a solved trajectory against its decay envelope.
///   integer:    V(t_k) <= V(0) e^{-c t_k} (1 + tol)
///   fractional: ||U(t_k)||_F^2 <= V(0) E_beta(-(alpha3/K) t_k^beta) (1 + tol)
/// K is the measured class-K sandwich constant with V <= K ||U||_F, i.e.
/// max_k V_k / ||U_k||_F along the trajectory: the enforced decrease
/// D^beta V <= -alpha3 ||U|| then implies D^beta V <= -(alpha3/K) V.
inline CertifyReport certify_trajectory(const std::vector<double>& times,
                                        const std::vector<double>& v_values,
                                        const std::vector<double>& state_sqnorms,
                                        StabilityMode mode, double c, double alpha3, double beta,
                                        double tol) {
  if (times.size() < 2 || v_values.size() != times.size() ||
      state_sqnorms.size() != times.size())
    throw ContractError("certify_trajectory: inconsistent trajectory lengths");
  CertifyReport rep;
  rep.mode = mode;
  rep.beta = beta;
  rep.tol = tol;
  rep.times = times;
  const double v0 = v_values[0];
  if (mode == StabilityMode::kFractional) {
    double k = 1e-12;
    for (std::size_t i = 0; i < times.size(); ++i)
      if (state_sqnorms[i] > 1e-30) k = std::max(k, v_values[i] / std::sqrt(state_sqnorms[i]));
    rep.measured_k = k;
    rep.values = state_sqnorms;
    for (double t : times)
      rep.envelope.push_back(v0 * mittag_leffler(beta, -(alpha3 / k) * std::pow(t, beta)));
  } else {
    rep.values = v_values;
    for (double t : times) rep.envelope.push_back(v0 * std::exp(-c * t));
  }
  std::size_t ok = 0;
  double worst = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < times.size(); ++i) {
    const double env = rep.envelope[i];
    const double bound = env * (1.0 + tol);
    if (rep.values[i] <= bound) ++ok;
    // t = 0 satisfies the envelope trivially; the decay margin measures the
    // decaying part of the trajectory only.
    if (i == 0) continue;
    double denom = std::max(std::abs(env), 1e-30);
    worst = std::max(worst, (rep.values[i] - bound) / denom);
  }
  rep.pass_fraction = static_cast<double>(ok) / static_cast<double>(times.size());
  rep.pass = ok == times.size();
  rep.worst_margin = worst;
  return rep;
}

/// Run the stabilized model forward and certify the resulting trajectory.
inline CertifyReport certify(const Model& m, const Dataset& data, double tol = 0.0) {
  FlowContext ctx = FlowContext::build(data.graph, m.cfg.flow);
  WatchPlan plan;
  ModelVars v = watch_model(nullptr, m, data.features, plan);
  ForwardResult fwd = forward(nullptr, data, m, v, ctx, /*stabilized=*/true);
  std::vector<double> vs, ns;
  const auto& rec = fwd.trajectory;
  for (std::size_t i = 0; i < rec.states.size(); ++i) {
    double n2 = frob_norm(rec.states[i].val);
    ns.push_back(n2 * n2);
    if (i < rec.v_history.size())
      vs.push_back(rec.v_history[i].val.value());
    else
      vs.push_back(lyapunov_value(nullptr, rec.states[i], v.icnn).val.value());
  }
  return certify_trajectory(rec.times, vs, ns, m.cfg.lyap.mode, m.cfg.lyap.c, m.cfg.lyap.alpha3,
                            m.cfg.solver.beta, tol);
}

}  // namespace stableflow

#endif
