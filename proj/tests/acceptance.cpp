// Acceptance gate: one pass/fail line per criterion, nonzero exit on any
// failure. Run with criterion numbers as arguments to select a subset.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <stableflow/stableflow.hpp>

using namespace stableflow;
using Clock = std::chrono::steady_clock;

namespace {

int g_failures = 0;

void report(int criterion, bool pass, const std::string& detail) {
  std::printf("[%s] criterion %d: %s\n", pass ? "PASS" : "FAIL", criterion, detail.c_str());
  std::fflush(stdout);
  if (!pass) ++g_failures;
}

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

ModelConfig fixture_config() {
  ModelConfig c;
  c.hidden_dim = 6;
  c.attn_dim = 6;
  c.icnn_hidden = 8;
  return c;
}

// ---------------------------------------------------------------------------

void criterion1() {
  auto t0 = Clock::now();
  RhsFn decay = [](Tape* tp, const Var& u, const TrajectoryRecord&) {
    return scale(tp, u, -1.0);
  };
  Var u0{Tensor::scalar(1.0), -1};
  SolverConfig frac;
  frac.scheme = Scheme::kFracAbm;
  frac.beta = 0.5;
  frac.step_h = 1.0 / 512.0;
  frac.t_end = 1.0;
  double uf = solve(nullptr, decay, u0, frac).states.back().val.value();
  double err_frac = std::abs(uf - 0.427584);

  SolverConfig rk;
  rk.scheme = Scheme::kRk4;
  rk.step_h = 1.0 / 512.0;
  rk.t_end = 1.0;
  double ur = solve(nullptr, decay, u0, rk).states.back().val.value();
  double err_rk = std::abs(ur - std::exp(-1.0));
  double el = seconds_since(t0);
  char buf[256];
  std::snprintf(buf, sizeof(buf),
                "frac_abm |u(1)-0.427584| = %.2e (<=5e-3), rk4 err = %.2e (<=1e-6), %.2fs (<5s)",
                err_frac, err_rk, el);
  report(1, err_frac <= 5e-3 && err_rk <= 1e-6 && el < 5.0, buf);
}

void criterion2() {
  double worst1 = 0.0;
  for (int k = 0; k < 100; ++k) {
    double z = -5.0 + 10.0 * k / 99.0;
    worst1 = std::max(worst1, std::abs(mittag_leffler(1.0, z) - std::exp(z)));
  }
  double erfc_oracle = std::exp(1.0) * std::erfc(1.0);  // E_{1/2}(-1) = e * erfc(1)
  double err_half = std::abs(mittag_leffler(0.5, -1.0) - erfc_oracle);
  char buf[256];
  std::snprintf(buf, sizeof(buf),
                "max |E_1(z)-exp(z)| = %.2e (<=1e-10), |E_1/2(-1)-erfc oracle| = %.2e (<=1e-6)",
                worst1, err_half);
  report(2, worst1 <= 1e-10 && err_half <= 1e-6, buf);
}

void criterion3() {
  auto t0 = Clock::now();
  Dataset ds = make_small_fixture();
  double worst = 0.0;
  std::string worst_name;
  for (int mode = 0; mode < 2; ++mode) {
    ModelConfig cfg = fixture_config();
    cfg.stabilized = true;
    if (mode == 0) {
      cfg.solver.scheme = Scheme::kEuler;
      cfg.solver.step_h = 1.0;
      cfg.solver.t_end = 5.0;  // 5 unrolled steps
      cfg.lyap.mode = StabilityMode::kInteger;
    } else {
      cfg.solver.scheme = Scheme::kFracAbm;
      cfg.solver.beta = 0.5;
      cfg.solver.step_h = 1.0;
      cfg.solver.t_end = 5.0;
      cfg.lyap.mode = StabilityMode::kFractional;
    }
    std::mt19937_64 rng(11 + mode);
    Model m = init_model(cfg, ds.n_features(), ds.n_classes, rng);
    FlowContext ctx = FlowContext::build(ds.graph, cfg.flow);
    WatchPlan plan;
    plan.encoder = plan.flow = plan.icnn = plan.classifier = true;

    Tape tape;
    ModelVars v = watch_model(&tape, m, ds.features, plan);
    ForwardResult fwd = forward(&tape, ds, m, v, ctx, true);
    Var l = loss(&tape, fwd.logits, ds.labels, ds.splits.train, v.cls_w, 1e-2);
    auto grads = backward(tape, l);

    auto eval_with = [&](const Model& mm) {
      ModelVars vv = watch_model(nullptr, mm, ds.features, WatchPlan{});
      ForwardResult ff = forward(nullptr, ds, mm, vv, ctx, true);
      return loss(nullptr, ff.logits, ds.labels, ds.splits.train, vv.cls_w, 1e-2).val.value();
    };
    auto check = [&](const Tensor& g, Tensor Model::* /*unused*/, const std::string& name,
                     const std::function<void(Model&, const Tensor&)>& set, const Tensor& base) {
      Tensor fd = finite_diff_gradient(
          [&](const Tensor& t) {
            Model m2 = m;
            set(m2, t);
            return eval_with(m2);
          },
          base, 1e-5);
      double rel = max_abs_diff(g, fd) / std::max(1e-8, frob_norm(fd));
      if (rel > worst) {
        worst = rel;
        worst_name = (mode ? "frac/" : "int/") + name;
      }
    };
    check(grad_of(grads, v.enc_w), nullptr, "enc_w",
          [](Model& mm, const Tensor& t) { mm.encoder.w = t; }, m.encoder.w);
    check(grad_of(grads, v.enc_b), nullptr, "enc_b",
          [](Model& mm, const Tensor& t) { mm.encoder.b = t; }, m.encoder.b);
    check(grad_of(grads, v.flow.wk), nullptr, "wk",
          [](Model& mm, const Tensor& t) { mm.flow.attention.wk = t; }, m.flow.attention.wk);
    check(grad_of(grads, v.flow.wq), nullptr, "wq",
          [](Model& mm, const Tensor& t) { mm.flow.attention.wq = t; }, m.flow.attention.wq);
    for (std::size_t i = 0; i < m.icnn.w.size(); ++i) {
      check(grad_of(grads, v.icnn.w[i]), nullptr, "icnn_w" + std::to_string(i),
            [i](Model& mm, const Tensor& t) { mm.icnn.w[i] = t; }, m.icnn.w[i]);
      check(grad_of(grads, v.icnn.b[i]), nullptr, "icnn_b" + std::to_string(i),
            [i](Model& mm, const Tensor& t) { mm.icnn.b[i] = t; }, m.icnn.b[i]);
    }
    for (std::size_t i = 0; i < m.icnn.p_raw.size(); ++i)
      check(grad_of(grads, v.icnn_raw[i]), nullptr, "icnn_p" + std::to_string(i),
            [i](Model& mm, const Tensor& t) { mm.icnn.p_raw[i] = t; }, m.icnn.p_raw[i]);
    check(grad_of(grads, v.cls_w), nullptr, "cls_w",
          [](Model& mm, const Tensor& t) { mm.classifier.w = t; }, m.classifier.w);
    check(grad_of(grads, v.cls_b), nullptr, "cls_b",
          [](Model& mm, const Tensor& t) { mm.classifier.b = t; }, m.classifier.b);
  }
  double el = seconds_since(t0);
  char buf[256];
  std::snprintf(buf, sizeof(buf),
                "worst grad rel err = %.2e at %s (<=1e-3), both modes, %.1fs (<120s)", worst,
                worst_name.c_str(), el);
  report(3, worst <= 1e-3 && el < 120.0, buf);
}

void criterion4() {
  std::mt19937_64 rng(17);
  std::normal_distribution<double> nd(0.0, 1.5);
  ICNNParams p = init_icnn(3, 8, 2, 0.1, rng);
  IcnnVars v = watch_icnn(nullptr, p, false);
  LyapunovConfig cfg;
  std::size_t fired = 0;
  double worst = 0.0;
  while (fired < 1000) {
    Tensor u(4, 3), f(4, 3);
    for (std::size_t k = 0; k < u.size(); ++k) u[k] = nd(rng);
    for (std::size_t k = 0; k < f.size(); ++k) f[k] = nd(rng);
    ProjectionStats stats;
    Var fh = project(nullptr, Var{u, -1}, Var{f, -1}, {}, cfg, v, 1.0, 1.0, &stats);
    if (stats.fired == 0) continue;
    ++fired;
    double residual = std::abs(phi(nullptr, Var{u, -1}, fh, {}, cfg, v).val.value());
    worst = std::max(worst, residual);
  }
  char buf[256];
  std::snprintf(buf, sizeof(buf), "1000 fired projections, max |<gradV,F^>+cV| = %.2e (<=1e-9)",
                worst);
  report(4, worst <= 1e-9, buf);
}

void criterion5() {
  Dataset ds = make_small_fixture();
  bool all = true;
  std::string detail;
  for (double c : {0.5, 1.0}) {
    ModelConfig cfg = fixture_config();
    cfg.stabilized = true;
    cfg.lyap.c = c;
    cfg.solver.scheme = Scheme::kRk4;
    cfg.solver.step_h = 0.05;
    cfg.solver.t_end = 10.0;
    std::mt19937_64 rng(23);
    Model m = init_model(cfg, ds.n_features(), ds.n_classes, rng);
    CertifyReport rep = certify(m, ds, 0.05);
    all = all && rep.pass;
    char buf[96];
    std::snprintf(buf, sizeof(buf), "c=%.1f: pass_frac=%.3f margin=%.3f; ", c,
                  rep.pass_fraction, rep.worst_margin);
    detail += buf;
  }
  report(5, all, "projected integer GRAND within 1.05 * V(0)exp(-ct): " + detail);
}

void criterion6() {
  Dataset ds = make_small_fixture();
  bool all = true;
  std::string detail;
  for (double beta : {0.5, 0.9}) {
    ModelConfig cfg = fixture_config();
    cfg.stabilized = true;
    cfg.lyap.mode = StabilityMode::kFractional;
    cfg.solver.scheme = Scheme::kFracAbm;
    cfg.solver.beta = beta;
    cfg.solver.step_h = 0.05;
    cfg.solver.t_end = 10.0;
    std::mt19937_64 rng(29);
    Model m = init_model(cfg, ds.n_features(), ds.n_classes, rng);
    CertifyReport rep = certify(m, ds, 0.10);
    all = all && rep.pass;
    char buf[96];
    std::snprintf(buf, sizeof(buf), "beta=%.1f: K=%.2f pass_frac=%.3f margin=%.3f; ", beta,
                  rep.measured_k, rep.pass_fraction, rep.worst_margin);
    detail += buf;
  }
  report(6, all, "fractional envelope ||U||^2 <= 1.10 * V(0)E_b(-(a3/K)t^b): " + detail);
}

void criterion7() {
  std::mt19937_64 rng(31);
  std::normal_distribution<double> nd(0.0, 2.0);
  const std::size_t pairs = 100000, dim = 3;
  std::size_t violations = 0;
  bool value_props = true;
  for (int draw = 0; draw < 20; ++draw) {
    ICNNParams p = init_icnn(dim, 8, 2, 0.1, rng);
    IcnnVars v = watch_icnn(nullptr, p, false);
    Tensor x(pairs, dim), y(pairs, dim), mid(pairs, dim);
    for (std::size_t k = 0; k < x.size(); ++k) {
      x[k] = nd(rng);
      y[k] = nd(rng);
      mid[k] = 0.5 * (x[k] + y[k]);
    }
    Tensor fx = icnn_rows(nullptr, Var{x, -1}, v).rows.val;
    Tensor fy = icnn_rows(nullptr, Var{y, -1}, v).rows.val;
    Tensor fm = icnn_rows(nullptr, Var{mid, -1}, v).rows.val;
    for (std::size_t i = 0; i < pairs; ++i)
      if (fm.at(i, 0) > 0.5 * (fx.at(i, 0) + fy.at(i, 0)) + 1e-12) ++violations;

    Tensor u(6, dim);
    for (std::size_t k = 0; k < u.size(); ++k) u[k] = nd(rng);
    double val = lyapunov_value(nullptr, Var{u, -1}, v).val.value();
    double n = frob_norm(u);
    if (val < n * n - 1e-12) value_props = false;
    if (lyapunov_value(nullptr, Var{Tensor(6, dim), -1}, v).val.value() != 0.0)
      value_props = false;
  }
  char buf[160];
  std::snprintf(buf, sizeof(buf),
                "%zu midpoint violations of %d x %zu pairs (=0), V>=||U||^2 and V(0)=0: %s",
                violations, 20, pairs, value_props ? "yes" : "NO");
  report(7, violations == 0 && value_props, buf);
}

void criterion8() {
  auto t0 = Clock::now();
  Dataset ds = make_cora_scale();
  FlowContext ctx = FlowContext::build(ds.graph, FlowKind::kGrand);
  std::vector<std::size_t> eval_rows = degree_filter_eval_set(ds, 0.05, 0.05);

  ModelConfig cfg;
  cfg.hidden_dim = 16;
  cfg.attn_dim = 16;
  cfg.solver.scheme = Scheme::kEuler;
  cfg.solver.step_h = 1.0;
  cfg.solver.t_end = 10.0;
  cfg.lyap.c = 1.0;

  AttackConfig pgd;
  pgd.eps = 0.1;
  pgd.steps = 20;
  pgd.step_size = 0.0125;  // 2.5 * eps / steps

  double clean_sum = 0.0, rob_stab_sum = 0.0, rob_unstab_sum = 0.0;
  const std::vector<std::uint64_t> seeds{101, 202, 303};
  for (std::uint64_t seed : seeds) {
    std::mt19937_64 rng(seed);
    Model init = init_model(cfg, ds.n_features(), ds.n_classes, rng);
    TrainConfig tc1;
    tc1.epochs = 60;
    tc1.lr = 0.05;
    TrainResult s1 = train_stage1(init, ds, tc1);
    TrainConfig tc2 = tc1;
    tc2.epochs = 25;
    tc2.lr = 0.05;  // the projected state is small; the classifier needs a
                    // matching step size to rescale within the epoch budget
    TrainResult s2 = train_stage2(s1.model, ds, tc2);

    double clean = eval_accuracy(s2.model, ds, eval_rows);
    std::mt19937_64 arng(seed);
    Dataset adv_s = apply_attack(s2.model, ds, pgd, eval_rows, arng);
    double rob_s = eval_accuracy(s2.model, adv_s, eval_rows);
    std::mt19937_64 arng2(seed);
    Dataset adv_u = apply_attack(s1.model, ds, pgd, eval_rows, arng2);
    double rob_u = eval_accuracy(s1.model, adv_u, eval_rows);
    clean_sum += clean;
    rob_stab_sum += rob_s;
    rob_unstab_sum += rob_u;
    std::printf("  seed %llu: clean(stab)=%.3f robust(stab)=%.3f robust(unstab)=%.3f "
                "[s1 %zu ep, s2 %zu ep]\n",
                static_cast<unsigned long long>(seed), clean, rob_s, rob_u, s1.epochs_run,
                s2.epochs_run);
    std::fflush(stdout);
  }
  double clean = clean_sum / 3.0, rob_s = rob_stab_sum / 3.0, rob_u = rob_unstab_sum / 3.0;
  double el = seconds_since(t0);
  char buf[256];
  std::snprintf(buf, sizeof(buf),
                "mean clean(stab)=%.3f (>=0.70), robust stab=%.3f vs unstab=%.3f "
                "(gap %.3f >= 0.05), %.0fs (<3600s)",
                clean, rob_s, rob_u, rob_s - rob_u, el);
  report(8, clean >= 0.70 && rob_s >= rob_u + 0.05 && el < 3600.0, buf);
}

void criterion9() {
  Dataset ds = make_small_fixture();
  const std::vector<double> betas{0.25, 0.5, 0.75, 1.0};
  auto margins_for = [&](std::uint64_t seed) {
    std::vector<double> margins;
    for (double beta : betas) {
      ModelConfig cfg = fixture_config();
      cfg.stabilized = true;
      cfg.lyap.mode = StabilityMode::kFractional;
      cfg.solver.scheme = Scheme::kFracAbm;
      cfg.solver.beta = beta;
      cfg.solver.step_h = 0.05;
      cfg.solver.t_end = 10.0;
      std::mt19937_64 rng(seed);
      Model m = init_model(cfg, ds.n_features(), ds.n_classes, rng);
      margins.push_back(certify(m, ds, 0.10).worst_margin);
    }
    return margins;
  };
  auto monotone = [](const std::vector<double>& m) {
    for (std::size_t i = 1; i < m.size(); ++i)
      if (m[i] < m[i - 1]) return false;
    return true;
  };
  std::vector<double> m = margins_for(37);
  bool ok = monotone(m);
  bool reseeded = false;
  if (!ok) {  // one re-seed tolerance
    reseeded = true;
    m = margins_for(38);
    ok = monotone(m);
  }
  char buf[256];
  std::snprintf(buf, sizeof(buf),
                "worst margins beta 0.25/0.5/0.75/1.0 = %.4f %.4f %.4f %.4f%s (non-decreasing)",
                m[0], m[1], m[2], m[3], reseeded ? " (after one re-seed)" : "");
  report(9, ok, buf);
}

void criterion10() {
  Dataset ds = make_small_fixture();
  auto run = [&]() {
    ModelConfig cfg = fixture_config();
    cfg.solver.scheme = Scheme::kEuler;
    cfg.solver.step_h = 1.0;
    cfg.solver.t_end = 3.0;
    std::mt19937_64 rng(41);
    Model init = init_model(cfg, ds.n_features(), ds.n_classes, rng);
    TrainConfig tc;
    tc.epochs = 12;
    TrainResult s1 = train_stage1(init, ds, tc);
    TrainConfig tc2 = tc;
    tc2.epochs = 5;
    tc2.lr = 1e-3;
    TrainResult s2 = train_stage2(s1.model, ds, tc2);
    nlohmann::json log = {{"stage1", s1.epoch_logs}, {"stage2", s2.epoch_logs}};
    AttackConfig pgd;
    pgd.steps = 3;
    pgd.step_size = 0.05;
    RobustReport rep = evaluate_robustness(s2.model, ds, {pgd}, {1, 2}, 0.0, 0.0);
    return checkpoint_to_json(s2.model).dump() + log.dump() + rep.to_json().dump() +
           certify(s2.model, ds, 0.1).to_json().dump();
  };
  std::string a = run(), b = run();
  bool ok = a == b;
  char buf[128];
  std::snprintf(buf, sizeof(buf), "rerun JSON outputs byte-identical: %s (%zu bytes)",
                ok ? "yes" : "NO", a.size());
  report(10, ok, buf);
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> which;
  for (int i = 1; i < argc; ++i) which.insert(std::atoi(argv[i]));
  auto want = [&](int k) { return which.empty() || which.count(k) > 0; };
  if (want(1)) criterion1();
  if (want(2)) criterion2();
  if (want(3)) criterion3();
  if (want(4)) criterion4();
  if (want(5)) criterion5();
  if (want(6)) criterion6();
  if (want(7)) criterion7();
  if (want(8)) criterion8();
  if (want(9)) criterion9();
  if (want(10)) criterion10();
  if (g_failures) std::printf("%d criterion(s) failed\n", g_failures);
  return g_failures == 0 ? 0 : 1;
}
