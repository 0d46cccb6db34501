#include "hydra/experiments.hpp"

#include <cmath>
#include <limits>

namespace hydra {

Matrix random_orthogonal(std::size_t d, SeededRng& rng) {
  Matrix q = gaussian(d, d, rng);
  // Modified Gram-Schmidt, two passes.
  for (int pass = 0; pass < 2; ++pass) {
    for (std::size_t j = 0; j < d; ++j) {
      for (std::size_t p = 0; p < j; ++p) {
        double dot = 0.0;
        for (std::size_t i = 0; i < d; ++i) dot += q(i, p) * q(i, j);
        for (std::size_t i = 0; i < d; ++i) q(i, j) -= dot * q(i, p);
      }
      double n = 0.0;
      for (std::size_t i = 0; i < d; ++i) n += q(i, j) * q(i, j);
      n = std::sqrt(n);
      for (std::size_t i = 0; i < d; ++i) q(i, j) /= n;
    }
  }
  return q;
}

Matrix random_low_rank(std::size_t d, std::size_t rank, SeededRng& rng) {
  if (rank < 1 || rank > d) throw UsageError("rank must lie in [1, d]");
  const Matrix u = random_orthogonal(d, rng);
  const Matrix v = random_orthogonal(d, rng);
  Matrix w(d, d);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j)
      for (std::size_t p = 0; p < rank; ++p) w(i, j) += u(i, p) * v(j, p);
  return w;
}

Batch regression_batch(const ToyModel& model, const Matrix& x, const std::vector<Matrix>& deltas,
                       std::span<const std::size_t> tasks) {
  Batch b;
  b.features = x;
  b.targets = Matrix(x.rows(), x.cols());
  b.tasks.assign(tasks.begin(), tasks.end());
  const Matrix base = model.forward(b).output;
  b.targets = base;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const Vector shift = matvec(deltas.at(tasks[i]), x.row(i));
    auto row = b.targets.row(i);
    for (std::size_t j = 0; j < row.size(); ++j) row[j] += shift[j];
  }
  return b;
}

namespace {

ModelConfig regression_config(const ExperimentOptions& run) {
  ModelConfig mc;
  mc.input = InputKind::Dense;
  mc.loss = LossKind::MeanSquared;
  mc.d_model = run.d_model;
  return mc;
}

TrainConfig train_config(const ExperimentOptions& run, std::uint64_t seed, Scheme scheme) {
  TrainConfig cfg;
  cfg.scheme = scheme;
  cfg.learning_rate = run.learning_rate;
  cfg.steps = run.steps;
  cfg.batch_size = run.batch_size;
  cfg.optimizer = run.optimizer;
  cfg.eval_interval = run.steps;
  cfg.seed = seed;
  cfg.d_model = run.d_model;
  cfg.train_head = false;
  return cfg;
}

std::vector<std::size_t> round_robin(std::size_t rows, std::size_t tasks) {
  std::vector<std::size_t> t(rows);
  for (std::size_t i = 0; i < rows; ++i) t[i] = i % tasks;
  return t;
}

}  // namespace

namespace {

void check_budget(const Observation1Options& opt, Observation1Report* rep) {
  const auto d = static_cast<std::uint64_t>(opt.run.d_model);
  const auto lora = params_per_matrix(Scheme::Lora, ParamShape{d, d, opt.lora_rank, 1, 1, 1});
  const auto split = params_per_matrix(Scheme::Split, ParamShape{d, d, opt.split_rank, opt.heads, 1, 1});
  if (lora != split) {
    throw UsageError("observation I compares equal budgets, but LoRA r=" + std::to_string(opt.lora_rank) + " has " +
                     std::to_string(lora) + " parameters and split " + std::to_string(opt.split_rank) + "x" +
                     std::to_string(opt.heads) + " has " + std::to_string(split));
  }
  if (rep) {
    rep->lora_params = lora;
    rep->split_params = split;
  }
}

}  // namespace

Observation1Row observation1_seed(std::uint64_t seed, const Observation1Options& opt) {
  check_budget(opt, nullptr);
  const std::size_t tasks = opt.heads;
  SeededRng rng(seed);
  const auto mc = regression_config(opt.run);
  const ToyModel base = ToyModel::create(mc, rng);
  std::vector<Matrix> deltas;
  for (std::size_t t = 0; t < tasks; ++t) {
    if (t == 0 || opt.interference) deltas.push_back(random_low_rank(mc.d_model, opt.task_rank, rng));
    else deltas.push_back(deltas.front());
  }
  const auto train_tasks = round_robin(opt.run.train_rows, tasks);
  const auto eval_tasks = round_robin(opt.run.eval_rows, tasks);
  const Batch train_set = regression_batch(base, gaussian(opt.run.train_rows, mc.d_model, rng), deltas, train_tasks);
  const Batch eval_set = regression_batch(base, gaussian(opt.run.eval_rows, mc.d_model, rng), deltas, eval_tasks);
  const std::uint64_t adapter_seed = rng.next_u64();

  auto run = [&](const AdapterConfig& ac) {
    ToyModel model = base;
    SeededRng arng(adapter_seed);
    model.attach("v_proj", ac, arng);
    return train(model, train_set, eval_set, train_config(opt.run, seed, ac.scheme)).report.final_loss;
  };
  Observation1Row row;
  row.seed = seed;
  row.lora_loss = run(AdapterConfig{Scheme::Lora, opt.lora_rank, 1});
  row.split_loss = run(AdapterConfig{Scheme::Split, opt.split_rank, opt.heads, std::nullopt, SplitRouting::Task});
  return row;
}

Observation1Report run_observation1(std::span<const std::uint64_t> seeds, const Observation1Options& opt) {
  Observation1Report rep;
  check_budget(opt, &rep);
  for (auto seed : seeds) {
    rep.rows.push_back(observation1_seed(seed, opt));
    rep.split_wins += rep.rows.back().split_loss < rep.rows.back().lora_loss;
  }
  return rep;
}

double normalized_spread(std::span<const Matrix> mats) {
  if (mats.size() < 2) throw UsageError("spread needs at least two matrices");
  double dist = 0.0, norm = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < mats.size(); ++i) {
    norm += frobenius_norm(mats[i]);
    for (std::size_t j = i + 1; j < mats.size(); ++j, ++pairs) dist += frobenius_distance(mats[i], mats[j]);
  }
  dist /= static_cast<double>(pairs);
  norm /= static_cast<double>(mats.size());
  return norm > 0.0 ? dist / norm : 0.0;
}

double spread_ratio(double d_a, double d_b) {
  if (d_a > 0.0) return d_b / d_a;
  return d_b > 0.0 ? std::numeric_limits<double>::infinity() : 1.0;
}

Observation2Row observation2_seed(std::uint64_t seed, const Observation2Options& opt) {
  if (opt.tasks < 2) throw UsageError("observation II needs at least 2 tasks");
  SeededRng rng(seed);
  const auto mc = regression_config(opt.run);
  const ToyModel base = ToyModel::create(mc, rng);
  const std::uint64_t adapter_seed = rng.next_u64();
  std::vector<Matrix> as, bs;
  const Matrix shared_delta = random_low_rank(mc.d_model, opt.task_rank, rng);
  for (std::size_t t = 0; t < opt.tasks; ++t) {
    const std::vector<Matrix> deltas{opt.identical_tasks ? shared_delta : random_low_rank(mc.d_model, opt.task_rank, rng)};
    // Identical tasks also share their data draw.
    SeededRng data_rng = opt.identical_tasks ? SeededRng(adapter_seed) : SeededRng(rng.next_u64());
    const std::vector<std::size_t> train_tasks(opt.run.train_rows, 0), eval_tasks(opt.run.eval_rows, 0);
    const Batch train_set = regression_batch(base, gaussian(opt.run.train_rows, mc.d_model, data_rng), deltas, train_tasks);
    const Batch eval_set = regression_batch(base, gaussian(opt.run.eval_rows, mc.d_model, data_rng), deltas, eval_tasks);
    ToyModel model = base;
    SeededRng arng(adapter_seed);
    model.attach("v_proj", AdapterConfig{Scheme::Lora, opt.rank, 1}, arng);
    train(model, train_set, eval_set, train_config(opt.run, seed, Scheme::Lora));
    const auto& lora = std::get<LoraAdapter>(model.adapter("0.v_proj"));
    as.push_back(lora.a);
    bs.push_back(lora.b);
  }
  Observation2Row row;
  row.seed = seed;
  row.d_a = normalized_spread(as);
  row.d_b = normalized_spread(bs);
  row.ratio = spread_ratio(row.d_a, row.d_b);
  return row;
}

Observation2Report run_observation2(std::span<const std::uint64_t> seeds, const Observation2Options& opt) {
  if (seeds.size() < 2) throw UsageError("observation II needs at least 2 seeds");
  Observation2Report rep;
  for (auto seed : seeds) {
    rep.rows.push_back(observation2_seed(seed, opt));
    rep.b_wins += rep.rows.back().ratio > 1.0;
  }
  return rep;
}

std::vector<HeterogeneityRow> run_heterogeneity(std::uint64_t seed, const HeterogeneityOptions& opt) {
  const std::size_t d = opt.run.d_model;
  if (opt.levels.empty()) throw UsageError("no heterogeneity levels given");
  for (std::size_t i = 0; i < opt.levels.size(); ++i) {
    if (opt.levels[i] < 1 || 2 * opt.levels[i] > d) {
      throw UsageError("heterogeneity level " + std::to_string(opt.levels[i]) + " needs 2 input dimensions per component (d_model " +
                       std::to_string(d) + ")");
    }
    if (i > 0 && opt.levels[i] <= opt.levels[i - 1]) throw UsageError("heterogeneity levels must be strictly increasing");
  }
  SeededRng rng(seed);
  const auto mc = regression_config(opt.run);
  const ToyModel base = ToyModel::create(mc, rng);
  const Matrix basis = random_orthogonal(d, rng);
  std::vector<Matrix> deltas;
  for (std::size_t c = 0; c < d / 2; ++c) deltas.push_back(random_low_rank(d, 2, rng));
  const std::uint64_t adapter_seed = rng.next_u64();

  auto inputs = [&](std::size_t rows, std::size_t level, SeededRng& r) {
    Matrix x(rows, d);
    for (std::size_t i = 0; i < rows; ++i) {
      const std::size_t c = i % level;
      const double g0 = r.normal(), g1 = r.normal();
      for (std::size_t j = 0; j < d; ++j) x(i, j) = g0 * basis(j, 2 * c) + g1 * basis(j, 2 * c + 1);
    }
    return x;
  };

  std::vector<HeterogeneityRow> rows;
  for (auto level : opt.levels) {
    SeededRng data_rng(rng.next_u64());
    const auto train_tasks = round_robin(opt.run.train_rows, level);
    const auto eval_tasks = round_robin(opt.run.eval_rows, level);
    const Batch train_set = regression_batch(base, inputs(opt.run.train_rows, level, data_rng), deltas, train_tasks);
    const Batch eval_set = regression_batch(base, inputs(opt.run.eval_rows, level, data_rng), deltas, eval_tasks);
    auto metric = [](const TrainReport& r) { return 1.0 - r.final_loss / r.initial_loss; };

    ToyModel full = base;
    full.set_full_finetune(true);
    const auto fft = train(full, train_set, eval_set, train_config(opt.run, seed, Scheme::Full)).report;

    ToyModel lora = base;
    SeededRng arng(adapter_seed);
    lora.attach("v_proj", AdapterConfig{Scheme::Lora, opt.rank, 1}, arng);
    const auto peft = train(lora, train_set, eval_set, train_config(opt.run, seed, Scheme::Lora)).report;

    HeterogeneityRow row;
    row.level = level;
    row.fft = metric(fft);
    row.peft = metric(peft);
    row.gap = row.fft - row.peft;
    rows.push_back(row);
  }
  return rows;
}

}  // namespace hydra
