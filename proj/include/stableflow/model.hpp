#ifndef STABLEFLOW_MODEL_HPP
#define STABLEFLOW_MODEL_HPP

#include <fstream>
#include <random>
#include <string>

#include <json.hpp>

#include "stableflow/flows.hpp"
#include "stableflow/graph.hpp"
#include "stableflow/lyapunov.hpp"
#include "stableflow/solver.hpp"

namespace stableflow {

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

constexpr int kCheckpointVersion = 1;

struct ModelConfig {
  FlowKind flow = FlowKind::kGrand;
  SolverConfig solver;
  LyapunovConfig lyap;
  bool stabilized = false;     // Lyapunov stability module enabled
  std::size_t hidden_dim = 16;  // flow dimension after the encoder
  std::size_t attn_dim = 16;
  std::size_t icnn_hidden = 64;
  std::size_t icnn_layers = 2;
  double icnn_width = 0.1;
  double lambda_orth = 1e-2;
  double graphcon_gamma = 1.0;
  double graphcon_alpha = 0.5;

  void validate() const {
    if (lambda_orth < 0.0) throw ContractError("ModelConfig: lambda_orth must be >= 0");
    if (hidden_dim == 0) throw ContractError("ModelConfig: hidden_dim must be positive");
    if (solver.t_end > 0.0) solver.validate();
    lyap.validate();
  }
};

inline nlohmann::json to_json(const ModelConfig& c) {
  return {
      {"flow", flow_name(c.flow)},
      {"solver",
       {{"beta", c.solver.beta},
        {"step_h", c.solver.step_h},
        {"t_end", c.solver.t_end},
        {"scheme", scheme_name(c.solver.scheme)},
        {"memory_window", c.solver.memory_window}}},
      {"lyapunov",
       {{"c", c.lyap.c},
        {"alpha3", c.lyap.alpha3},
        {"mode", c.lyap.mode == StabilityMode::kInteger ? "integer" : "fractional"}}},
      {"stabilized", c.stabilized},
      {"hidden_dim", c.hidden_dim},
      {"attn_dim", c.attn_dim},
      {"icnn_hidden", c.icnn_hidden},
      {"icnn_layers", c.icnn_layers},
      {"icnn_width", c.icnn_width},
      {"lambda_orth", c.lambda_orth},
      {"graphcon_gamma", c.graphcon_gamma},
      {"graphcon_alpha", c.graphcon_alpha},
  };
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.flow = flow_from_name(j.value("flow", "grand"));
  if (j.contains("solver")) {
    const auto& s = j.at("solver");
    c.solver.beta = s.value("beta", 1.0);
    c.solver.step_h = s.value("step_h", 1.0);
    c.solver.t_end = s.value("t_end", 10.0);
    c.solver.scheme = scheme_from_name(s.value("scheme", "rk4"));
    c.solver.memory_window = s.value("memory_window", std::size_t{0});
  }
  if (j.contains("lyapunov")) {
    const auto& l = j.at("lyapunov");
    c.lyap.c = l.value("c", 1.0);
    c.lyap.alpha3 = l.value("alpha3", 0.1);
    c.lyap.mode = l.value("mode", "integer") == std::string("fractional")
                      ? StabilityMode::kFractional
                      : StabilityMode::kInteger;
  }
  c.stabilized = j.value("stabilized", false);
  c.hidden_dim = j.value("hidden_dim", std::size_t{16});
  c.attn_dim = j.value("attn_dim", c.hidden_dim);
  c.icnn_hidden = j.value("icnn_hidden", std::size_t{64});
  c.icnn_layers = j.value("icnn_layers", std::size_t{2});
  c.icnn_width = j.value("icnn_width", 0.1);
  c.lambda_orth = j.value("lambda_orth", 1e-2);
  c.graphcon_gamma = j.value("graphcon_gamma", 1.0);
  c.graphcon_alpha = j.value("graphcon_alpha", 0.5);
  return c;
}

struct EncoderParams {
  Tensor w, b;  // d_in x d_h, 1 x d_h
};

struct ClassifierParams {
  Tensor w, b;  // d_h x n_classes, 1 x n_classes
};

/// End-to-end classifier: encoder -> (projected) flow -> classification layer.
struct Model {
  ModelConfig cfg;
  EncoderParams encoder;
  FlowField flow;
  ICNNParams icnn;
  ClassifierParams classifier;
};

inline Model init_model(const ModelConfig& cfg, std::size_t d_in, std::size_t n_classes,
                        std::mt19937_64& rng) {
  cfg.validate();
  Model m;
  m.cfg = cfg;
  std::normal_distribution<double> enc_dist(0.0, 1.0 / std::sqrt(static_cast<double>(d_in)));
  m.encoder.w = Tensor(d_in, cfg.hidden_dim);
  m.encoder.b = Tensor(1, cfg.hidden_dim);
  for (std::size_t k = 0; k < m.encoder.w.size(); ++k) m.encoder.w[k] = enc_dist(rng);
  m.flow = init_flow(cfg.flow, cfg.hidden_dim, cfg.attn_dim, rng);
  m.flow.graphcon_gamma = cfg.graphcon_gamma;
  m.flow.graphcon_alpha = cfg.graphcon_alpha;
  m.flow.zeta_width = cfg.icnn_width;
  m.icnn = init_icnn(cfg.hidden_dim, cfg.icnn_hidden, cfg.icnn_layers, cfg.icnn_width, rng);
  std::normal_distribution<double> cls_dist(0.0, 1.0 / std::sqrt(static_cast<double>(cfg.hidden_dim)));
  m.classifier.w = Tensor(cfg.hidden_dim, n_classes);
  m.classifier.b = Tensor(1, n_classes);
  for (std::size_t k = 0; k < m.classifier.w.size(); ++k) m.classifier.w[k] = cls_dist(rng);
  return m;
}

/// Which parameter groups get recorded as trainable on a tape.
struct WatchPlan {
  bool encoder = false;
  bool flow = false;
  bool icnn = false;
  bool classifier = false;
  bool features = false;
};

struct ModelVars {
  Var features;
  Var enc_w, enc_b;
  FlowVars flow;
  IcnnVars icnn;
  std::vector<Var> icnn_raw;  // unconstrained pass-through leaves (for updates)
  Var cls_w, cls_b;
};

inline ModelVars watch_model(Tape* tp, const Model& m, const Tensor& features,
                             const WatchPlan& plan) {
  ModelVars v;
  auto lift = [&](const Tensor& t, bool train) {
    return (tp && train) ? tp->watch(t) : Var{t, -1};
  };
  v.features = lift(features, plan.features);
  v.enc_w = lift(m.encoder.w, plan.encoder);
  v.enc_b = lift(m.encoder.b, plan.encoder);
  v.flow = watch_flow(tp, m.flow, plan.flow);
  v.icnn = watch_icnn(tp, m.icnn, plan.icnn, &v.icnn_raw);
  v.cls_w = lift(m.classifier.w, plan.classifier);
  v.cls_b = lift(m.classifier.b, plan.classifier);
  return v;
}

struct ForwardResult {
  Var logits;
  TrajectoryRecord trajectory;
  ProjectionStats projection;
};

/// U(0) = encode(features); solve the (optionally projected) flow over
/// [0, T]; logits = U(T) W_c + b_c. With t_end == 0 the pipeline degenerates
/// to logistic regression on encoded features.
inline ForwardResult forward(Tape* tp, const Dataset& data, const Model& m, ModelVars& v,
                             const FlowContext& ctx, bool stabilized) {
  ForwardResult out;
  Var u0 = add_row_vec(tp, matmul(tp, v.features, v.enc_w), v.enc_b);
  Var state0 = u0;
  if (m.cfg.flow == FlowKind::kGraphCon)
    state0 = concat_rows(tp, u0, Var{Tensor(u0.val.rows(), u0.val.cols()), -1});

  if (m.cfg.solver.t_end == 0.0) {
    out.trajectory.times.push_back(0.0);
    out.trajectory.states.push_back(state0);
  } else {
    RhsFn rhs;
    LyapFn lyap = nullptr;
    if (stabilized) {
      lyap = [&](Tape* t2, const Var& s) { return lyapunov_value(t2, s, v.icnn); };
      rhs = [&](Tape* t2, const Var& s, const TrajectoryRecord& rec) {
        Var f = flow_rhs(t2, s, m.flow, v.flow, ctx);
        return project(t2, s, f, rec.v_history, m.cfg.lyap, v.icnn, m.cfg.solver.beta,
                       m.cfg.solver.step_h, &out.projection);
      };
    } else {
      rhs = [&](Tape* t2, const Var& s, const TrajectoryRecord&) {
        return flow_rhs(t2, s, m.flow, v.flow, ctx);
      };
    }
    out.trajectory = solve(tp, rhs, state0, m.cfg.solver, lyap);
  }

  Var ut = out.trajectory.states.back();
  if (m.cfg.flow == FlowKind::kGraphCon) ut = slice_rows(tp, ut, 0, data.n_nodes());
  out.logits = add_row_vec(tp, matmul(tp, ut, v.cls_w), v.cls_b);
  return out;
}

/// Mean cross-entropy over the split plus the classifier orthogonality
/// penalty lambda * ||W_c^T W_c - I||_F^2.
inline Var loss(Tape* tp, const Var& logits, const std::vector<int>& labels,
                const std::vector<std::size_t>& split, const Var& cls_w, double lambda_orth) {
  if (split.empty()) throw ContractError("loss: empty split");
  Var ce = softmax_cross_entropy(tp, logits, labels, split);
  if (lambda_orth == 0.0) return ce;
  Var gram = matmul(tp, transpose(tp, cls_w), cls_w);
  Var pen = squared_frobenius_norm(
      tp, subtract(tp, gram, Var{Tensor::identity(gram.val.rows()), -1}));
  return add(tp, ce, scale(tp, pen, lambda_orth));
}

/// Accuracy of argmax predictions over the given rows; ties break toward the
/// lower class id.
inline double predict(const Tensor& logits, const std::vector<int>& labels,
                      const std::vector<std::size_t>& indices) {
  if (indices.empty()) throw ContractError("predict: empty index set");
  std::size_t hits = 0;
  for (std::size_t i : indices) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < logits.cols(); ++j)
      if (logits.at(i, j) > logits.at(i, best)) best = j;
    if (labels[i] >= 0 && static_cast<std::size_t>(labels[i]) == best) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(indices.size());
}

// ---------------------------------------------------------------------------
// Checkpoints: versioned container of named parameter arrays + config echo.
// ---------------------------------------------------------------------------

namespace detail {

inline nlohmann::json tensor_to_json(const Tensor& t) {
  return {{"rows", t.rows()},
          {"cols", t.cols()},
          {"data", std::vector<double>(t.data(), t.data() + t.size())}};
}

inline Tensor tensor_from_json(const nlohmann::json& j) {
  return Tensor(j.at("rows").get<std::size_t>(), j.at("cols").get<std::size_t>(),
                j.at("data").get<std::vector<double>>());
}

}  // namespace detail

inline nlohmann::json checkpoint_to_json(const Model& m) {
  nlohmann::json params;
  params["encoder.w"] = detail::tensor_to_json(m.encoder.w);
  params["encoder.b"] = detail::tensor_to_json(m.encoder.b);
  params["flow.wk"] = detail::tensor_to_json(m.flow.attention.wk);
  params["flow.wq"] = detail::tensor_to_json(m.flow.attention.wq);
  for (std::size_t i = 0; i < m.icnn.w.size(); ++i) {
    params["icnn.w" + std::to_string(i)] = detail::tensor_to_json(m.icnn.w[i]);
    params["icnn.b" + std::to_string(i)] = detail::tensor_to_json(m.icnn.b[i]);
  }
  for (std::size_t i = 0; i < m.icnn.p_raw.size(); ++i)
    params["icnn.p" + std::to_string(i)] = detail::tensor_to_json(m.icnn.p_raw[i]);
  params["classifier.w"] = detail::tensor_to_json(m.classifier.w);
  params["classifier.b"] = detail::tensor_to_json(m.classifier.b);
  return {{"format_version", kCheckpointVersion},
          {"config", to_json(m.cfg)},
          {"attention_d_k", m.flow.attention.d_k},
          {"icnn_d", m.icnn.d},
          {"params", params}};
}

inline void save_checkpoint(const std::string& path, const Model& m) {
  std::ofstream out(path);
  if (!out) throw CheckpointError("cannot write checkpoint: " + path);
  out << checkpoint_to_json(m).dump(2) << '\n';
}

inline Model load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw CheckpointError("cannot open checkpoint: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("corrupt checkpoint " + path + ": " + e.what());
  }
  if (!j.contains("format_version") || j.at("format_version").get<int>() != kCheckpointVersion)
    throw CheckpointError("checkpoint " + path + ": format version mismatch (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  Model m;
  try {
    m.cfg = model_config_from_json(j.at("config"));
    const auto& p = j.at("params");
    m.encoder.w = detail::tensor_from_json(p.at("encoder.w"));
    m.encoder.b = detail::tensor_from_json(p.at("encoder.b"));
    m.flow.kind = m.cfg.flow;
    m.flow.attention.wk = detail::tensor_from_json(p.at("flow.wk"));
    m.flow.attention.wq = detail::tensor_from_json(p.at("flow.wq"));
    m.flow.attention.d_k = j.at("attention_d_k").get<double>();
    m.flow.graphcon_gamma = m.cfg.graphcon_gamma;
    m.flow.graphcon_alpha = m.cfg.graphcon_alpha;
    m.flow.zeta_width = m.cfg.icnn_width;
    m.icnn.d = j.at("icnn_d").get<double>();
    for (std::size_t i = 0; i < m.cfg.icnn_layers; ++i) {
      m.icnn.w.push_back(detail::tensor_from_json(p.at("icnn.w" + std::to_string(i))));
      m.icnn.b.push_back(detail::tensor_from_json(p.at("icnn.b" + std::to_string(i))));
      if (i > 0)
        m.icnn.p_raw.push_back(detail::tensor_from_json(p.at("icnn.p" + std::to_string(i - 1))));
    }
    m.classifier.w = detail::tensor_from_json(p.at("classifier.w"));
    m.classifier.b = detail::tensor_from_json(p.at("classifier.b"));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("corrupt checkpoint " + path + ": " + e.what());
  }
  return m;
}

}  // namespace stableflow

#endif
