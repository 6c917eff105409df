// stableflow: train / attack / certify / solve / inspect for stable graph
// neural flows. All outputs are deterministic JSON; wall-clock metadata goes
// to a separate meta file so reruns with the same config and seed are
// byte-identical.

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <stableflow/stableflow.hpp>

extern "C" void openblas_set_num_threads(int);

namespace {

using namespace stableflow;
namespace fs = std::filesystem;

constexpr int kExitConfig = 2;
constexpr int kExitDivergence = 3;
constexpr int kExitCheckpointVersion = 4;
constexpr int kExitUnstabilizedCertify = 5;

std::string iso_now() {
  std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  char buf[32];
  std::strftime(buf, sizeof(buf), "%FT%TZ", std::gmtime(&t));
  return buf;
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  fs::create_directories(path.parent_path().empty() ? "." : path.parent_path());
  std::ofstream out(path);
  if (!out) throw ConfigurationError("cannot write output: " + path.string());
  out << j.dump(2) << '\n';
}

void write_meta(const fs::path& out_dir, const std::string& command) {
  write_json(out_dir / "meta.json", {{"command", command}, {"timestamp", iso_now()}});
}

struct CommonArgs {
  std::string config_path;
  std::string out_dir = "out";
  std::string checkpoint;
  std::uint64_t seed = 0;
  bool seed_set = false;
  int jobs = 1;
};

RunConfig load_cfg(const CommonArgs& a) {
  RunConfig cfg = load_run_config(a.config_path);
  if (a.seed_set) cfg.seed = a.seed;
  if (!a.out_dir.empty() && a.out_dir != "-") fs::create_directories(a.out_dir);
  return cfg;
}

nlohmann::json train_logs_json(const TrainResult& r) {
  return {{"epochs", r.epoch_logs},
          {"converged", r.converged},
          {"diverged", r.diverged},
          {"epochs_run", r.epochs_run},
          {"final_train_acc", r.final_train_acc},
          {"final_val_acc", r.final_val_acc}};
}

int cmd_train(const CommonArgs& a) {
  RunConfig cfg = load_cfg(a);
  Dataset data = load_configured_dataset(cfg);
  std::mt19937_64 rng(cfg.seed);
  Model init = init_model(cfg.model, data.n_features(), data.n_classes, rng);

  nlohmann::json log = {{"config", cfg.raw}, {"seed", cfg.seed}};
  TrainResult s1 = cfg.stage1.adversarial ? adversarial_train(init, data, cfg.stage1, false)
                                          : train_stage1(init, data, cfg.stage1);
  log["stage1"] = train_logs_json(s1);
  Model final_model = s1.model;
  bool diverged = s1.diverged;
  if (!diverged && cfg.two_stage) {
    TrainResult s2 = cfg.stage2.adversarial
                         ? adversarial_train(s1.model, data, cfg.stage2, true)
                         : train_stage2(s1.model, data, cfg.stage2);
    log["stage2"] = train_logs_json(s2);
    final_model = s2.model;
    diverged = s2.diverged;
  }
  save_checkpoint((fs::path(a.out_dir) / "checkpoint.json").string(), final_model);
  write_json(fs::path(a.out_dir) / "train_log.json", log);
  write_meta(a.out_dir, "train");
  if (diverged) {
    std::cerr << "training diverged; last good checkpoint saved\n";
    return kExitDivergence;
  }
  return 0;
}

int cmd_attack(const CommonArgs& a) {
  RunConfig cfg = load_cfg(a);
  if (cfg.attacks.empty()) throw ConfigurationError("attack: no attacks configured");
  Dataset data = load_configured_dataset(cfg);
  Model m = load_checkpoint(a.checkpoint);
  std::vector<std::uint64_t> seeds;
  if (cfg.raw.contains("eval_seeds"))
    for (const auto& s : cfg.raw.at("eval_seeds")) seeds.push_back(s.get<std::uint64_t>());
  else
    seeds.push_back(cfg.seed);
  RobustReport rep =
      evaluate_robustness(m, data, cfg.attacks, seeds, cfg.filter_lo, cfg.filter_hi);
  nlohmann::json out = rep.to_json();
  out["config"] = cfg.raw;
  write_json(fs::path(a.out_dir) / "robust_report.json", out);
  write_meta(a.out_dir, "attack");
  return 0;
}

int cmd_certify(const CommonArgs& a) {
  RunConfig cfg = load_cfg(a);
  Dataset data = load_configured_dataset(cfg);
  Model m = load_checkpoint(a.checkpoint);
  if (!m.cfg.stabilized) {
    std::cerr << "certify: checkpoint was trained without the stability module\n";
    return kExitUnstabilizedCertify;
  }
  CertifyReport rep = certify(m, data, cfg.certify_tol);
  nlohmann::json out = rep.to_json();
  out["config"] = cfg.raw;
  write_json(fs::path(a.out_dir) / "certify_report.json", out);
  write_meta(a.out_dir, "certify");
  return 0;
}

int cmd_solve(const CommonArgs& a) {
  RunConfig cfg = load_cfg(a);
  Dataset data = load_configured_dataset(cfg);
  Model m;
  if (!a.checkpoint.empty()) {
    m = load_checkpoint(a.checkpoint);
  } else {
    std::mt19937_64 rng(cfg.seed);
    m = init_model(cfg.model, data.n_features(), data.n_classes, rng);
    m.cfg.stabilized = cfg.model.stabilized;
  }
  FlowContext ctx = FlowContext::build(data.graph, m.cfg.flow);
  ModelVars v = watch_model(nullptr, m, data.features, WatchPlan{});
  ForwardResult fwd = forward(nullptr, data, m, v, ctx, m.cfg.stabilized);
  nlohmann::json traj;
  traj["times"] = fwd.trajectory.times;
  std::vector<double> norms, vs;
  for (const Var& s : fwd.trajectory.states) norms.push_back(frob_norm(s.val));
  for (const Var& vv : fwd.trajectory.v_history) vs.push_back(vv.val.value());
  traj["state_norms"] = norms;
  traj["lyapunov_values"] = vs;
  traj["projection_evals"] = fwd.projection.evals;
  traj["projection_fired"] = fwd.projection.fired;
  nlohmann::json out = {{"config", cfg.raw}, {"trajectory", traj}};
  write_json(fs::path(a.out_dir) / "trajectory.json", out);
  write_meta(a.out_dir, "solve");
  return 0;
}

int cmd_inspect(const CommonArgs& a) {
  nlohmann::json out;
  if (!a.config_path.empty()) {
    RunConfig cfg = load_cfg(a);
    Dataset data = load_configured_dataset(cfg);
    std::size_t n_edges = data.graph.edges.size();
    out["dataset"] = {{"name", cfg.dataset},
                      {"nodes", data.n_nodes()},
                      {"edges", n_edges},
                      {"features", data.n_features()},
                      {"classes", data.n_classes},
                      {"train", data.splits.train.size()},
                      {"val", data.splits.val.size()},
                      {"test", data.splits.test.size()},
                      {"checksum", checksum(data)}};
  }
  if (!a.checkpoint.empty()) {
    Model m = load_checkpoint(a.checkpoint);
    out["checkpoint"] = {{"format_version", kCheckpointVersion},
                         {"stabilized", m.cfg.stabilized},
                         {"flow", flow_name(m.cfg.flow)},
                         {"scheme", scheme_name(m.cfg.solver.scheme)},
                         {"beta", m.cfg.solver.beta},
                         {"hidden_dim", m.cfg.hidden_dim}};
  }
  std::cout << out.dump(2) << '\n';
  if (!a.out_dir.empty() && a.out_dir != "-") {
    write_json(fs::path(a.out_dir) / "inspect.json", out);
    write_meta(a.out_dir, "inspect");
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Lyapunov-stable graph neural flows"};
  app.require_subcommand(1);
  CommonArgs args;

  auto add_common = [&](CLI::App* sub, bool need_config, bool need_ckpt) {
    auto* c = sub->add_option("--config", args.config_path, "JSON run configuration");
    if (need_config) c->required();
    sub->add_option("--out", args.out_dir, "output directory");
    auto* s = sub->add_option("--seed", args.seed, "override the config seed");
    s->each([&](const std::string&) { args.seed_set = true; });
    sub->add_option("--jobs", args.jobs, "BLAS thread count");
    auto* k = sub->add_option("--checkpoint", args.checkpoint, "model checkpoint path");
    if (need_ckpt) k->required();
  };

  CLI::App* train = app.add_subcommand("train", "two-stage training");
  add_common(train, true, false);
  CLI::App* attack = app.add_subcommand("attack", "adversarial evaluation");
  add_common(attack, true, true);
  CLI::App* certify = app.add_subcommand("certify", "runtime stability certification");
  add_common(certify, true, true);
  CLI::App* solve = app.add_subcommand("solve", "integrate the flow and record the trajectory");
  add_common(solve, true, false);
  CLI::App* inspect = app.add_subcommand("inspect", "summarize a dataset or checkpoint");
  add_common(inspect, false, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : kExitConfig;
  }

  openblas_set_num_threads(args.jobs > 0 ? args.jobs : 1);
  try {
    if (train->parsed()) return cmd_train(args);
    if (attack->parsed()) return cmd_attack(args);
    if (certify->parsed()) return cmd_certify(args);
    if (solve->parsed()) return cmd_solve(args);
    if (inspect->parsed()) return cmd_inspect(args);
  } catch (const ConfigurationError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << '\n';
    return kExitCheckpointVersion;
  } catch (const SolveAbort& e) {
    std::cerr << "divergence: " << e.what() << '\n';
    return kExitDivergence;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return kExitConfig;
}
