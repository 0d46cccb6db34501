#pragma once

// Desk-scale experiment harnesses on dense regression fixtures. Every
// fixture uses a frozen one-block model with d_model inputs; sequences have
// length one, so the block computes x + (Wv + adapter) x and each task is a
// hidden weight shift dW added to Wv.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "hydra/toy_model.hpp"
#include "hydra/trainer.hpp"

namespace hydra {

struct RegressionSplit {
  Batch train;
  Batch eval;
};

// Targets are the frozen model's own output plus dW_task x for each row.
Batch regression_batch(const ToyModel& model, const Matrix& x, const std::vector<Matrix>& deltas,
                       std::span<const std::size_t> tasks);

// Random d x d matrix of exactly the given rank with unit-scale singular values.
Matrix random_low_rank(std::size_t d, std::size_t rank, SeededRng& rng);

// Columns of a uniformly random orthogonal matrix (Gram-Schmidt on Gaussians).
Matrix random_orthogonal(std::size_t d, SeededRng& rng);

struct ExperimentOptions {
  std::size_t d_model = 16;
  std::size_t train_rows = 256;
  std::size_t eval_rows = 128;
  std::size_t steps = 300;
  std::size_t batch_size = 32;
  double learning_rate = 0.02;
  OptimizerKind optimizer = OptimizerKind::Adam;
};

// ---- Observation I: one wide LoRA vs task-dedicated split heads ----------

struct Observation1Options {
  ExperimentOptions run;
  std::size_t split_rank = 4;
  std::size_t heads = 2;
  std::size_t lora_rank = 8;
  std::size_t task_rank = 4;  // rank of each task's dW
  bool interference = true;   // false: both tasks share one dW (control)
};

struct Observation1Row {
  std::uint64_t seed = 0;
  double lora_loss = 0.0;
  double split_loss = 0.0;
};

struct Observation1Report {
  std::uint64_t lora_params = 0;
  std::uint64_t split_params = 0;
  std::vector<Observation1Row> rows;
  std::size_t split_wins = 0;
};

// Tasks draw inputs from the same distribution. Throws UsageError unless the
// two schemes have equal trainable parameter counts.
Observation1Row observation1_seed(std::uint64_t seed, const Observation1Options& opt);
Observation1Report run_observation1(std::span<const std::uint64_t> seeds, const Observation1Options& opt);

// ---- Observation II: A matrices agree, B matrices diverge -----------------

struct Observation2Options {
  ExperimentOptions run{16, 256, 128, 300, 32, 0.05, OptimizerKind::Sgd};
  std::size_t tasks = 3;
  std::size_t rank = 4;
  std::size_t task_rank = 2;
  bool identical_tasks = false;
};

struct Observation2Row {
  std::uint64_t seed = 0;
  double d_a = 0.0;  // mean pairwise distance / mean norm among A
  double d_b = 0.0;
  double ratio = 0.0;  // d_b / d_a; infinite when only d_a is 0, 1 when both are
};

struct Observation2Report {
  std::vector<Observation2Row> rows;
  std::size_t b_wins = 0;  // seeds with ratio > 1
};

// Normalized spread of a set of same-shape matrices: mean pairwise Frobenius
// distance over mean Frobenius norm. Zero when all norms are zero.
double normalized_spread(std::span<const Matrix> mats);
double spread_ratio(double d_a, double d_b);

Observation2Row observation2_seed(std::uint64_t seed, const Observation2Options& opt);
Observation2Report run_observation2(std::span<const std::uint64_t> seeds, const Observation2Options& opt);

// ---- Heterogeneity: full fine-tuning vs LoRA as components are mixed ------

struct HeterogeneityOptions {
  ExperimentOptions run{16, 256, 128, 400, 64, 0.02, OptimizerKind::Adam};
  std::vector<std::size_t> levels{1, 2, 4, 8};
  std::size_t rank = 2;
};

struct HeterogeneityRow {
  std::size_t level = 0;
  double fft = 0.0;   // 1 - final eval mse / initial eval mse
  double peft = 0.0;
  double gap = 0.0;   // fft - peft
};

// Level m mixes m components; component c feeds inputs from its own 2-D
// subspace and shifts the weights by its own rank-2 dW.
std::vector<HeterogeneityRow> run_heterogeneity(std::uint64_t seed, const HeterogeneityOptions& opt);

}  // namespace hydra
