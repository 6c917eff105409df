#ifndef STABLEFLOW_TRAINING_HPP
#define STABLEFLOW_TRAINING_HPP

#include <algorithm>
#include <cmath>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "stableflow/model.hpp"

namespace stableflow {

struct TrainConfig {
  std::size_t epochs = 100;
  double lr = 1e-2;
  double momentum = 0.9;
  std::string optimizer = "sgd";  // "sgd" or "adam"
  std::size_t window = 10;        // convergence window (epochs)
  double eps_acc = 0.005;         // max accuracy fluctuation inside the window
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  bool adversarial = false;  // inner PGD max on training-node features
  double at_eps = 0.1;
  std::size_t at_steps = 5;
  double at_step_size = 0.025;

  void validate() const {
    if (epochs == 0) throw ContractError("TrainConfig: epochs must be positive");
    if (lr <= 0.0) throw ContractError("TrainConfig: lr must be positive");
    if (optimizer != "sgd" && optimizer != "adam")
      throw ContractError("TrainConfig: unknown optimizer " + optimizer);
    if (window == 0) throw ContractError("TrainConfig: window must be positive");
  }
};

/// True once the accuracy fluctuation (max - min) over the trailing `window`
/// entries drops to at most eps. Histories shorter than the window never
/// qualify.
inline bool detect_convergence(const std::vector<double>& history, std::size_t window,
                               double eps) {
  if (history.size() < window) return false;
  auto first = history.end() - static_cast<std::ptrdiff_t>(window);
  auto [lo, hi] = std::minmax_element(first, history.end());
  return (*hi - *lo) <= eps;
}

namespace detail {

struct ParamRef {
  Tensor* t;
  int id;
};

inline std::vector<ParamRef> param_refs(Model& m, const ModelVars& v, const WatchPlan& plan) {
  std::vector<ParamRef> r;
  if (plan.encoder) {
    r.push_back({&m.encoder.w, v.enc_w.id});
    r.push_back({&m.encoder.b, v.enc_b.id});
  }
  if (plan.flow) {
    r.push_back({&m.flow.attention.wk, v.flow.wk.id});
    r.push_back({&m.flow.attention.wq, v.flow.wq.id});
  }
  if (plan.icnn) {
    for (std::size_t i = 0; i < m.icnn.w.size(); ++i) {
      r.push_back({&m.icnn.w[i], v.icnn.w[i].id});
      r.push_back({&m.icnn.b[i], v.icnn.b[i].id});
    }
    for (std::size_t i = 0; i < m.icnn.p_raw.size(); ++i)
      r.push_back({&m.icnn.p_raw[i], v.icnn_raw[i].id});
  }
  if (plan.classifier) {
    r.push_back({&m.classifier.w, v.cls_w.id});
    r.push_back({&m.classifier.b, v.cls_b.id});
  }
  return r;
}

class Optimizer {
 public:
  explicit Optimizer(const TrainConfig& cfg) : cfg_(cfg) {}

  void step(const std::vector<ParamRef>& refs,
            const std::unordered_map<int, Tensor>& grads) {
    if (state_.empty())
      for (const auto& r : refs)
        state_.emplace_back(r.t->rows(), r.t->cols());
    if (cfg_.optimizer == "adam" && state2_.empty())
      for (const auto& r : refs)
        state2_.emplace_back(r.t->rows(), r.t->cols());
    ++t_;
    for (std::size_t k = 0; k < refs.size(); ++k) {
      auto it = grads.find(refs[k].id);
      if (it == grads.end()) continue;
      const Tensor& g = it->second;
      Tensor& p = *refs[k].t;
      if (cfg_.optimizer == "sgd") {
        Tensor& vel = state_[k];
        for (std::size_t i = 0; i < p.size(); ++i) {
          vel[i] = cfg_.momentum * vel[i] - cfg_.lr * g[i];
          p[i] += vel[i];
        }
      } else {
        Tensor& m = state_[k];
        Tensor& v = state2_[k];
        const double b1 = cfg_.adam_beta1, b2 = cfg_.adam_beta2;
        const double bc1 = 1.0 - std::pow(b1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(b2, static_cast<double>(t_));
        for (std::size_t i = 0; i < p.size(); ++i) {
          m[i] = b1 * m[i] + (1.0 - b1) * g[i];
          v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
          p[i] -= cfg_.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg_.adam_eps);
        }
      }
    }
  }

 private:
  TrainConfig cfg_;
  std::size_t t_ = 0;
  std::vector<Tensor> state_;   // SGD velocity / Adam first moment
  std::vector<Tensor> state2_;  // Adam second moment
};

}  // namespace detail

/// Sign-gradient PGD ascent on the feature rows in `rows`, projected onto the
/// L-inf ball of radius eps around the clean features. Deterministic: starts
/// from the clean features.
inline Tensor pgd_on_rows(const Model& m, const Dataset& data, const FlowContext& ctx,
                          const std::vector<std::size_t>& rows, double eps, std::size_t steps,
                          double step_size, bool stabilized,
                          const Tensor* start = nullptr) {
  if (rows.empty()) throw ContractError("pgd_on_rows: empty row set");
  Tensor x_adv = start ? *start : data.features;
  WatchPlan plan;
  plan.features = true;
  for (std::size_t s = 0; s < steps; ++s) {
    Tape tape;
    ModelVars v = watch_model(&tape, m, x_adv, plan);
    ForwardResult fwd = forward(&tape, data, m, v, ctx, stabilized);
    Var l = loss(&tape, fwd.logits, data.labels, rows, v.cls_w, 0.0);
    auto grads = backward(tape, l);
    Tensor g = grad_of(grads, v.features);
    for (std::size_t r : rows)
      for (std::size_t j = 0; j < x_adv.cols(); ++j) {
        double gd = g.at(r, j);
        double step = gd > 0.0 ? step_size : (gd < 0.0 ? -step_size : 0.0);
        double next = x_adv.at(r, j) + step;
        double lo = data.features.at(r, j) - eps;
        double hi = data.features.at(r, j) + eps;
        x_adv.at(r, j) = std::clamp(next, lo, hi);
      }
  }
  return x_adv;
}

struct TrainResult {
  Model model;
  std::vector<nlohmann::json> epoch_logs;
  bool converged = false;
  bool diverged = false;
  std::size_t epochs_run = 0;
  double final_train_acc = 0.0;
  double final_val_acc = 0.0;
};

namespace detail {

inline TrainResult train_loop(const Model& start, const Dataset& data, const TrainConfig& cfg,
                              const WatchPlan& plan, bool stabilized) {
  cfg.validate();
  data.validate();
  TrainResult res;
  res.model = start;
  FlowContext ctx = FlowContext::build(data.graph, start.cfg.flow);
  Optimizer opt(cfg);
  std::vector<double> acc_history;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    Tensor feats = data.features;
    if (cfg.adversarial)
      feats = pgd_on_rows(res.model, data, ctx, data.splits.train, cfg.at_eps, cfg.at_steps,
                          cfg.at_step_size, stabilized);
    Tape tape;
    ModelVars v = watch_model(&tape, res.model, feats, plan);
    ForwardResult fwd;
    Var l;
    try {
      fwd = forward(&tape, data, res.model, v, ctx, stabilized);
      l = loss(&tape, fwd.logits, data.labels, data.splits.train, v.cls_w,
               res.model.cfg.lambda_orth);
    } catch (const SolveAbort&) {
      res.diverged = true;  // res.model still holds the last good parameters
      break;
    }
    if (!std::isfinite(l.val.value()) || !fwd.logits.val.all_finite()) {
      res.diverged = true;
      break;
    }
    auto grads = backward(tape, l);
    bool bad_grad = false;
    for (const auto& [id, g] : grads)
      if (!g.all_finite()) bad_grad = true;
    if (bad_grad) {
      res.diverged = true;
      break;
    }
    double train_acc = predict(fwd.logits.val, data.labels, data.splits.train);
    double val_acc = data.splits.val.empty()
                         ? train_acc
                         : predict(fwd.logits.val, data.labels, data.splits.val);
    opt.step(param_refs(res.model, v, plan), grads);
    ++res.epochs_run;
    res.final_train_acc = train_acc;
    res.final_val_acc = val_acc;
    acc_history.push_back(val_acc);
    res.epoch_logs.push_back({{"epoch", epoch},
                              {"loss", l.val.value()},
                              {"train_acc", train_acc},
                              {"val_acc", val_acc},
                              {"projection_fired", fwd.projection.fired},
                              {"projection_evals", fwd.projection.evals}});
    if (detect_convergence(acc_history, cfg.window, cfg.eps_acc)) {
      res.converged = true;
      break;
    }
  }
  return res;
}

}  // namespace detail

/// Stage 1: train encoder, flow attention, and classifier on the base
/// (unprojected) dynamics until accuracy fluctuation settles.
inline TrainResult train_stage1(const Model& init, const Dataset& data, const TrainConfig& cfg) {
  WatchPlan plan;
  plan.encoder = plan.flow = plan.classifier = true;
  Model m = init;
  m.cfg.stabilized = false;
  TrainResult res = detail::train_loop(m, data, cfg, plan, /*stabilized=*/false);
  res.model.cfg.stabilized = false;
  return res;
}

/// Stage 2: starting from a stage-1 model, enable the projection and train
/// only the ICNN and the classification layer. Encoder and flow parameters
/// are frozen bit-for-bit.
inline TrainResult train_stage2(const Model& stage1, const Dataset& data, const TrainConfig& cfg) {
  WatchPlan plan;
  plan.icnn = plan.classifier = true;
  TrainResult res = detail::train_loop(stage1, data, cfg, plan, /*stabilized=*/true);
  res.model.cfg.stabilized = true;
  return res;
}

/// Adversarial training: same stage structure, with the epoch loss evaluated
/// at PGD-perturbed training features (inner maximization).
inline TrainResult adversarial_train(const Model& init, const Dataset& data, TrainConfig cfg,
                                     bool stabilized) {
  cfg.adversarial = true;
  WatchPlan plan;
  if (stabilized)
    plan.icnn = plan.classifier = true;
  else
    plan.encoder = plan.flow = plan.classifier = true;
  TrainResult res = detail::train_loop(init, data, cfg, plan, stabilized);
  res.model.cfg.stabilized = stabilized;
  return res;
}

}  // namespace stableflow

#endif
