#ifndef STABLEFLOW_CONFIG_HPP
#define STABLEFLOW_CONFIG_HPP

#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "stableflow/fixtures.hpp"
#include "stableflow/robustness.hpp"

namespace stableflow {

/// Everything a CLI run needs, parsed from one JSON file.
struct RunConfig {
  ModelConfig model;
  TrainConfig stage1;
  TrainConfig stage2;
  bool two_stage = true;
  std::vector<AttackConfig> attacks;
  std::string dataset = "small";  // small | cora | citeseer | files
  std::string feature_path, edge_path, label_path, split_path;
  std::uint64_t seed = 0;
  std::uint64_t data_seed = 7;  // synthetic benchmark generation
  double certify_tol = 0.0;
  double filter_lo = 0.05, filter_hi = 0.05;
  nlohmann::json raw;  // echoed verbatim into outputs

  void validate() const {
    model.validate();
    stage1.validate();
    stage2.validate();
    for (const auto& a : attacks) a.validate();
    if (dataset == "files") {
      if (feature_path.empty() || edge_path.empty() || label_path.empty() || split_path.empty())
        throw ConfigurationError("RunConfig: dataset \"files\" requires feature/edge/label/split paths");
    } else if (dataset != "small" && dataset != "cora" && dataset != "citeseer") {
      throw ConfigurationError("RunConfig: unknown dataset " + dataset);
    }
  }
};

namespace detail {

inline TrainConfig train_config_from_json(const nlohmann::json& j, const TrainConfig& base) {
  TrainConfig c = base;
  c.epochs = j.value("epochs", c.epochs);
  c.lr = j.value("lr", c.lr);
  c.momentum = j.value("momentum", c.momentum);
  c.optimizer = j.value("optimizer", c.optimizer);
  c.window = j.value("window", c.window);
  c.eps_acc = j.value("eps_acc", c.eps_acc);
  c.adversarial = j.value("adversarial", c.adversarial);
  c.at_eps = j.value("at_eps", c.at_eps);
  c.at_steps = j.value("at_steps", c.at_steps);
  c.at_step_size = j.value("at_step_size", c.at_step_size);
  return c;
}

inline AttackConfig attack_config_from_json(const nlohmann::json& j) {
  AttackConfig a;
  a.kind = attack_from_name(j.value("kind", "pgd_features"));
  a.eps = j.value("eps", a.eps);
  a.steps = j.value("steps", a.steps);
  a.step_size = j.value("step_size", a.step_size);
  a.budget.max_nodes = j.value("budget_nodes", a.budget.max_nodes);
  a.budget.max_edges_per_node = j.value("budget_edges_per_node", a.budget.max_edges_per_node);
  return a;
}

}  // namespace detail

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  RunConfig c;
  c.raw = j;
  if (j.contains("model")) c.model = model_config_from_json(j.at("model"));
  TrainConfig s1_default;  // stage-1 default lr
  s1_default.lr = 1e-2;
  c.stage1 = j.contains("stage1") ? detail::train_config_from_json(j.at("stage1"), s1_default)
                                  : s1_default;
  TrainConfig s2_default = c.stage1;
  s2_default.lr = 1e-3;
  c.stage2 = j.contains("stage2") ? detail::train_config_from_json(j.at("stage2"), s2_default)
                                  : s2_default;
  c.two_stage = j.value("two_stage", true);
  if (j.contains("attacks"))
    for (const auto& a : j.at("attacks")) c.attacks.push_back(detail::attack_config_from_json(a));
  c.dataset = j.value("dataset", std::string("small"));
  c.feature_path = j.value("feature_path", std::string());
  c.edge_path = j.value("edge_path", std::string());
  c.label_path = j.value("label_path", std::string());
  c.split_path = j.value("split_path", std::string());
  c.seed = j.value("seed", std::uint64_t{0});
  c.data_seed = j.value("data_seed", std::uint64_t{7});
  c.certify_tol = j.value("certify_tol", 0.0);
  c.filter_lo = j.value("filter_lo", 0.05);
  c.filter_hi = j.value("filter_hi", 0.05);
  c.validate();
  return c;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigurationError("cannot open config: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigurationError("config " + path + ": " + e.what());
  }
  try {
    return run_config_from_json(j);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigurationError("config " + path + ": " + e.what());
  }
}

inline Dataset load_configured_dataset(const RunConfig& c) {
  if (c.dataset == "small") return make_small_fixture();
  if (c.dataset == "cora") return make_cora_scale(c.data_seed);
  if (c.dataset == "citeseer") return make_citeseer_scale(c.data_seed);
  return load_dataset(c.feature_path, c.edge_path, c.label_path, c.split_path);
}

}  // namespace stableflow

#endif
