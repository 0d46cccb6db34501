#include "doctest.h"

#include <cmath>
#include <sstream>

#include "hydra/experiments.hpp"
#include "hydra/trainer.hpp"

using namespace hydra;

namespace {

TrainConfig quick(Scheme scheme, std::size_t experts = 1) {
  TrainConfig c;
  c.scheme = scheme;
  c.rank = 2;
  c.experts = experts;
  c.steps = 20;
  c.batch_size = 8;
  c.learning_rate = 0.1;
  c.eval_interval = 5;
  c.seed = 3;
  c.d_model = 8;
  c.data = "synth:clusters=3,docs=10,disjointness=0.8,seed=2,length=8";
  return c;
}

// Solves the square system a x = b by Gaussian elimination with partial pivoting.
Matrix solve(Matrix a, Matrix b) {
  const std::size_t n = a.rows();
  for (std::size_t c = 0; c < n; ++c) {
    std::size_t piv = c;
    for (std::size_t r = c + 1; r < n; ++r)
      if (std::abs(a(r, c)) > std::abs(a(piv, c))) piv = r;
    for (std::size_t j = 0; j < n; ++j) std::swap(a(c, j), a(piv, j));
    for (std::size_t j = 0; j < b.cols(); ++j) std::swap(b(c, j), b(piv, j));
    for (std::size_t r = 0; r < n; ++r) {
      if (r == c) continue;
      const double f = a(r, c) / a(c, c);
      for (std::size_t j = 0; j < n; ++j) a(r, j) -= f * a(c, j);
      for (std::size_t j = 0; j < b.cols(); ++j) b(r, j) -= f * b(c, j);
    }
  }
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < b.cols(); ++j) b(r, j) /= a(r, r);
  return b;
}

}  // namespace

TEST_CASE("config files parse every documented key") {
  std::istringstream in(R"(# demo
scheme = hydra
rank = 8      # per expert
experts = 3
alpha = 16
learning_rate = 0.005
steps = 50
batch_size = 4
seed = 9
optimizer = adam
data = corpus.jsonl
eval_interval = 5
train_head = false
d_model = 12
experts_from = cluster.json
target = q_proj, 0.v_proj
)");
  const auto c = parse_train_config(in);
  CHECK(c.scheme == Scheme::Hydra);
  CHECK(c.rank == 8);
  CHECK(c.experts == 3);
  CHECK(*c.alpha == 16.0);
  CHECK(c.learning_rate == 0.005);
  CHECK(c.steps == 50);
  CHECK(c.batch_size == 4);
  CHECK(c.seed == 9);
  CHECK(c.optimizer == OptimizerKind::Adam);
  CHECK(c.data == "corpus.jsonl");
  CHECK(c.eval_interval == 5);
  CHECK_FALSE(c.train_head);
  CHECK(c.d_model == 12);
  CHECK(c.experts_from == "cluster.json");
  CHECK(c.target == std::vector<std::string>{"q_proj", "0.v_proj"});
}

TEST_CASE("config errors") {
  auto parse = [](const std::string& s) {
    std::istringstream in(s);
    return parse_train_config(in);
  };
  CHECK_THROWS_AS(parse("bogus = 1\n"), UsageError);
  CHECK_THROWS_AS(parse("rank = eight\n"), UsageError);
  CHECK_THROWS_AS(parse("scheme = dora\n"), UsageError);
  CHECK_THROWS_AS(parse("rank 4\n"), UsageError);
  CHECK_THROWS_AS(parse("rank = 4\nrank = 5\n"), UsageError);
  CHECK_THROWS_WITH_AS(parse("\n\nsteps = x\n"), doctest::Contains("line 3"), UsageError);

  auto c = quick(Scheme::Lora);
  c.steps = 0;
  CHECK_THROWS_AS(c.validate(), UsageError);
  c = quick(Scheme::Lora);
  c.learning_rate = -1;
  CHECK_THROWS_AS(c.validate(), UsageError);
  c = quick(Scheme::Hydra, 2);
  c.rank = 9;
  CHECK_THROWS_AS(c.validate(), UsageError);
  c = quick(Scheme::Lora, 3);
  CHECK_THROWS_AS(c.validate(), UsageError);
  c = quick(Scheme::Hydra, 0);
  CHECK_THROWS_AS(c.validate(), UsageError);
}

TEST_CASE("zero learning rate leaves every parameter bit-identical") {
  for (auto opt : {OptimizerKind::Sgd, OptimizerKind::Adam}) {
    auto cfg = quick(Scheme::Hydra, 2);
    cfg.learning_rate = 0.0;
    cfg.optimizer = opt;
    auto run = prepare_run(cfg);
    const ToyModel before = run.model;
    const auto res = train(run.model, run.data.train, run.data.eval, run.config);
    for (const auto& p : res.report.curve) CHECK(p.loss == res.report.initial_loss);
    CHECK(res.report.final_loss == res.report.initial_loss);
    CHECK(std::get<HydraAdapter>(run.model.adapter("0.q_proj")).a ==
          std::get<HydraAdapter>(before.adapter("0.q_proj")).a);
    CHECK(run.model.head_weight() == before.head_weight());
  }
}

TEST_CASE("step-zero loss is the frozen base loss for every scheme") {
  for (auto [scheme, n] : {std::pair{Scheme::Lora, 1}, {Scheme::Split, 2}, {Scheme::Hydra, 3}, {Scheme::Full, 1}}) {
    auto cfg = quick(scheme, static_cast<std::size_t>(n));
    auto run = prepare_run(cfg);
    ToyModel bare = run.model;
    bare.detach_all();
    const auto res = train(run.model, run.data.train, run.data.eval, run.config);
    CHECK(res.report.initial_loss == bare.forward(run.data.eval).loss);
  }
}

TEST_CASE("training is deterministic, keeps the base frozen and reports sane gates") {
  const auto cfg = quick(Scheme::Hydra, 3);
  auto a = prepare_run(cfg);
  auto b = prepare_run(cfg);
  const auto fp = a.model.base_fingerprint();
  const auto ra = train(a.model, a.data.train, a.data.eval, a.config);
  const auto rb = train(b.model, b.data.train, b.data.eval, b.config);
  CHECK(a.model.base_fingerprint() == fp);
  CHECK(serialize_checkpoint(ra.checkpoint) == serialize_checkpoint(rb.checkpoint));
  CHECK(report_json(ra.report) == report_json(rb.report));
  std::ostringstream ca, cb;
  write_report_csv(ca, ra.report);
  write_report_csv(cb, rb.report);
  CHECK(ca.str() == cb.str());
  CHECK(ca.str().rfind("step,loss,acc,gate_0,gate_1,gate_2\n", 0) == 0);
  CHECK(ra.report.curve.size() == 5);
  CHECK(ra.report.final_loss < ra.report.initial_loss);
  CHECK(ra.report.flops > 0);
  double sum = 0;
  for (double g : ra.report.gate_usage) {
    CHECK(g >= 0.0);
    CHECK(g <= 1.0);
    sum += g;
  }
  CHECK(std::abs(sum - 1.0) <= 1e-9);

  // Restoring the checkpoint onto a fresh model reproduces the trained one.
  auto fresh = prepare_run(cfg);
  fresh.model.detach_all();
  restore_checkpoint(fresh.model, ra.checkpoint);
  CHECK(fresh.model.forward(a.data.eval).output == a.model.forward(a.data.eval).output);
}

TEST_CASE("full fine-tuning moves the base and checkpoints it") {
  auto run = prepare_run(quick(Scheme::Full));
  const auto fp = run.model.base_fingerprint();
  const auto res = train(run.model, run.data.train, run.data.eval, run.config);
  CHECK(run.model.base_fingerprint() != fp);
  CHECK(res.checkpoint.find_tensor("0.wv") != nullptr);
  CHECK(res.report.adapter_params == run.model.base_param_count());
}

TEST_CASE("non-finite loss aborts and names the step") {
  auto cfg = quick(Scheme::Lora);
  cfg.learning_rate = 1e200;
  auto run = prepare_run(cfg);
  try {
    train(run.model, run.data.train, run.data.eval, run.config);
    FAIL("expected abort");
  } catch (const NonFiniteLossError& e) {
    CHECK(e.step() >= 2);
    CHECK(std::string(e.what()).find("step " + std::to_string(e.step())) != std::string::npos);
  }
}

TEST_CASE("rank-2 least squares reaches the closed-form optimum") {
  SeededRng rng(21);
  ModelConfig mc;
  mc.loss = LossKind::MeanSquared;
  mc.d_model = 16;
  ToyModel model = ToyModel::create(mc, rng);
  const std::size_t n = 256;
  const Matrix x = gaussian(n, 16, rng);
  const std::vector<std::size_t> tasks(n, 0);
  Batch data = regression_batch(model, x, {random_low_rank(16, 2, rng)}, tasks);
  for (auto& v : data.targets.data()) v += 0.05 * rng.normal();

  // Oracle: unconstrained least squares for the residual map M in R = X M^T.
  const Matrix base = model.forward(data).output;
  const Matrix resid = sub(data.targets, base);
  const Matrix mt = solve(matmul(transpose(x), x), matmul(transpose(x), resid));
  const Matrix err = sub(matmul(x, mt), resid);
  const double optimum = frobenius_norm(err) * frobenius_norm(err) / static_cast<double>(n * 16);

  model.attach("v_proj", AdapterConfig{Scheme::Lora, 2}, rng);
  TrainConfig cfg;
  cfg.rank = 2;
  cfg.steps = 1500;
  cfg.batch_size = n;
  cfg.learning_rate = 0.01;
  cfg.optimizer = OptimizerKind::Adam;
  cfg.eval_interval = cfg.steps;
  const auto rep = train(model, data, data, cfg).report;
  MESSAGE("final " << rep.final_loss << " optimum " << optimum);
  CHECK(rep.final_loss <= optimum + 1e-3);
  CHECK(rep.final_loss >= optimum - 1e-12);
}

TEST_CASE("observation I refuses unequal budgets and reports a control") {
  const std::vector<std::uint64_t> seeds{1, 2};
  Observation1Options bad;
  bad.lora_rank = 6;
  CHECK_THROWS_AS(run_observation1(seeds, bad), UsageError);

  Observation1Options opt;
  opt.run.steps = 150;
  const auto rep = run_observation1(seeds, opt);
  CHECK(rep.lora_params == rep.split_params);
  CHECK(rep.split_wins == 2);

  opt.interference = false;
  const auto control = run_observation1(seeds, opt);
  for (const auto& r : control.rows) MESSAGE("control seed " << r.seed << ": lora " << r.lora_loss << " split " << r.split_loss);
}

TEST_CASE("observation II degenerate cases") {
  const std::vector<std::uint64_t> seeds{4, 5};
  Observation2Options opt;
  opt.run.steps = 50;
  opt.run.learning_rate = 0.0;
  for (const auto& r : run_observation2(seeds, opt).rows) {
    CHECK(r.d_a == 0.0);
    CHECK(r.d_b == 0.0);
    CHECK(r.ratio == 1.0);
  }
  opt.run.learning_rate = 0.05;
  opt.identical_tasks = true;
  for (const auto& r : run_observation2(seeds, opt).rows) {
    CHECK(r.d_a == 0.0);
    CHECK(r.d_b == 0.0);
  }
  opt.identical_tasks = false;
  CHECK(run_observation2(seeds, opt).b_wins == 2);
  CHECK_THROWS_AS(run_observation2(std::vector<std::uint64_t>{1}, opt), UsageError);
  CHECK(std::isinf(spread_ratio(0.0, 0.5)));
}

TEST_CASE("heterogeneity rows are deterministic and gap is fft minus peft") {
  HeterogeneityOptions opt;
  opt.levels = {1, 4};
  opt.run.steps = 200;
  const auto a = run_heterogeneity(7, opt);
  const auto b = run_heterogeneity(7, opt);
  REQUIRE(a.size() == 2);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].gap == a[i].fft - a[i].peft);
    CHECK(a[i].fft == b[i].fft);
    CHECK(a[i].peft == b[i].peft);
  }
  CHECK(a[1].gap > a[0].gap);
  opt.levels = {4, 2};
  CHECK_THROWS_AS(run_heterogeneity(7, opt), UsageError);
  opt.levels = {9};
  CHECK_THROWS_AS(run_heterogeneity(7, opt), UsageError);
}
