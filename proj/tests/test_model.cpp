#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>

#include <catch2/catch_amalgamated.hpp>
#include <stableflow/fixtures.hpp>
#include <stableflow/model.hpp>

using namespace stableflow;
namespace fs = std::filesystem;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.hidden_dim = 6;
  c.attn_dim = 6;
  c.icnn_hidden = 8;
  c.solver.scheme = Scheme::kEuler;
  c.solver.step_h = 1.0;
  c.solver.t_end = 3.0;
  return c;
}

}  // namespace

TEST_CASE("forward produces logits for every node") {
  Dataset ds = make_small_fixture();
  std::mt19937_64 rng(1);
  Model m = init_model(small_config(), ds.n_features(), ds.n_classes, rng);
  FlowContext ctx = FlowContext::build(ds.graph, m.cfg.flow);
  ModelVars v = watch_model(nullptr, m, ds.features, WatchPlan{});
  ForwardResult fwd = forward(nullptr, ds, m, v, ctx, false);
  REQUIRE(fwd.logits.val.rows() == ds.n_nodes());
  REQUIRE(fwd.logits.val.cols() == ds.n_classes);
  REQUIRE(fwd.trajectory.states.size() == 4);  // t = 0..3
  REQUIRE(fwd.logits.val.all_finite());
}

TEST_CASE("zero integration time degenerates to logistic regression") {
  Dataset ds = make_small_fixture();
  std::mt19937_64 rng(2);
  ModelConfig cfg = small_config();
  cfg.solver.t_end = 0.0;
  Model m = init_model(cfg, ds.n_features(), ds.n_classes, rng);
  FlowContext ctx = FlowContext::build(ds.graph, m.cfg.flow);
  ModelVars v = watch_model(nullptr, m, ds.features, WatchPlan{});
  ForwardResult fwd = forward(nullptr, ds, m, v, ctx, false);
  REQUIRE(fwd.trajectory.states.size() == 1);
  // logits == encode(X) W_c + b_c directly
  Var enc = add_row_vec(nullptr, matmul(nullptr, v.features, v.enc_w), v.enc_b);
  Var expect = add_row_vec(nullptr, matmul(nullptr, enc, v.cls_w), v.cls_b);
  REQUIRE(max_abs_diff(fwd.logits.val, expect.val) == 0.0);
}

TEST_CASE("graphcon forward stacks and unstacks the auxiliary state") {
  Dataset ds = make_small_fixture();
  std::mt19937_64 rng(3);
  ModelConfig cfg = small_config();
  cfg.flow = FlowKind::kGraphCon;
  Model m = init_model(cfg, ds.n_features(), ds.n_classes, rng);
  FlowContext ctx = FlowContext::build(ds.graph, m.cfg.flow);
  ModelVars v = watch_model(nullptr, m, ds.features, WatchPlan{});
  ForwardResult fwd = forward(nullptr, ds, m, v, ctx, false);
  REQUIRE(fwd.trajectory.states.back().val.rows() == 2 * ds.n_nodes());
  REQUIRE(fwd.logits.val.rows() == ds.n_nodes());
}

TEST_CASE("loss adds the orthogonality penalty") {
  Dataset ds = make_small_fixture();
  std::mt19937_64 rng(4);
  Model m = init_model(small_config(), ds.n_features(), ds.n_classes, rng);
  FlowContext ctx = FlowContext::build(ds.graph, m.cfg.flow);
  ModelVars v = watch_model(nullptr, m, ds.features, WatchPlan{});
  ForwardResult fwd = forward(nullptr, ds, m, v, ctx, false);
  double l0 = loss(nullptr, fwd.logits, ds.labels, ds.splits.train, v.cls_w, 0.0).val.value();
  double l1 = loss(nullptr, fwd.logits, ds.labels, ds.splits.train, v.cls_w, 0.01).val.value();
  Var gram = matmul(nullptr, transpose(nullptr, v.cls_w), v.cls_w);
  Var dev = subtract(nullptr, gram, Var{Tensor::identity(gram.val.rows()), -1});
  double pen = squared_frobenius_norm(nullptr, dev).val.value();
  REQUIRE(l1 == Catch::Approx(l0 + 0.01 * pen).epsilon(1e-12));
  REQUIRE_THROWS_AS(loss(nullptr, fwd.logits, ds.labels, {}, v.cls_w, 0.0), ContractError);
}

TEST_CASE("predict breaks ties toward the lower class id") {
  Tensor logits(2, 3, {1.0, 1.0, 1.0, 0.0, 2.0, 2.0});
  std::vector<int> labels{0, 1};
  REQUIRE(predict(logits, labels, {0}) == 1.0);  // tie across all -> class 0
  REQUIRE(predict(logits, labels, {1}) == 1.0);  // tie 1 vs 2 -> class 1
  REQUIRE(predict(logits, labels, {0, 1}) == 1.0);
}

TEST_CASE("model-level gradient against finite differences on the classifier") {
  Dataset ds = make_small_fixture();
  std::mt19937_64 rng(5);
  Model m = init_model(small_config(), ds.n_features(), ds.n_classes, rng);
  FlowContext ctx = FlowContext::build(ds.graph, m.cfg.flow);
  Tape tape;
  WatchPlan plan;
  plan.classifier = true;
  ModelVars v = watch_model(&tape, m, ds.features, plan);
  ForwardResult fwd = forward(&tape, ds, m, v, ctx, false);
  Var l = loss(&tape, fwd.logits, ds.labels, ds.splits.train, v.cls_w, 1e-2);
  auto grads = backward(tape, l);
  Tensor g = grad_of(grads, v.cls_w);
  Tensor fd = finite_diff_gradient(
      [&](const Tensor& t) {
        Model m2 = m;
        m2.classifier.w = t;
        ModelVars v2 = watch_model(nullptr, m2, ds.features, WatchPlan{});
        ForwardResult f2 = forward(nullptr, ds, m2, v2, ctx, false);
        return loss(nullptr, f2.logits, ds.labels, ds.splits.train, v2.cls_w, 1e-2).val.value();
      },
      m.classifier.w, 1e-5);
  REQUIRE(max_abs_diff(g, fd) / std::max(1e-8, frob_norm(fd)) < 1e-5);
}

TEST_CASE("checkpoint roundtrip is bit-exact") {
  Dataset ds = make_small_fixture();
  std::mt19937_64 rng(6);
  ModelConfig cfg = small_config();
  cfg.stabilized = true;
  cfg.lyap.mode = StabilityMode::kFractional;
  cfg.solver.scheme = Scheme::kFracAbm;
  cfg.solver.beta = 0.5;
  Model m = init_model(cfg, ds.n_features(), ds.n_classes, rng);
  fs::path p = fs::temp_directory_path() / "stableflow_ckpt_test.json";
  save_checkpoint(p.string(), m);
  Model back = load_checkpoint(p.string());
  REQUIRE(checksum(back.encoder.w) == checksum(m.encoder.w));
  REQUIRE(checksum(back.flow.attention.wk) == checksum(m.flow.attention.wk));
  REQUIRE(checksum(back.icnn.w[0]) == checksum(m.icnn.w[0]));
  REQUIRE(checksum(back.icnn.p_raw[0]) == checksum(m.icnn.p_raw[0]));
  REQUIRE(checksum(back.classifier.b) == checksum(m.classifier.b));
  REQUIRE(back.cfg.stabilized);
  REQUIRE(back.cfg.solver.beta == 0.5);
  REQUIRE(back.cfg.lyap.mode == StabilityMode::kFractional);
  REQUIRE(back.flow.attention.d_k == m.flow.attention.d_k);
}

TEST_CASE("checkpoint version and corruption are rejected loudly") {
  fs::path p = fs::temp_directory_path() / "stableflow_ckpt_bad.json";
  {
    std::ofstream out(p);
    out << R"({"format_version": 999, "config": {}, "params": {}})";
  }
  REQUIRE_THROWS_AS(load_checkpoint(p.string()), CheckpointError);
  {
    std::ofstream out(p);
    out << "{ not json";
  }
  REQUIRE_THROWS_AS(load_checkpoint(p.string()), CheckpointError);
  {
    std::ofstream out(p);
    out << R"({"config": {}, "params": {}})";  // version missing entirely
  }
  REQUIRE_THROWS_AS(load_checkpoint(p.string()), CheckpointError);
  REQUIRE_THROWS_AS(load_checkpoint("/nonexistent/ckpt.json"), CheckpointError);
}
