#pragma once

// Fine-tuning loop over a ToyModel. Base weights stay frozen unless the scheme
// is full fine-tuning; adapters, routers and (optionally) the task head train.
//
// TrainConfig files are `key = value` lines; '#' starts a comment.
//
//   scheme         lora | split | hydra | full
//   rank           adapter rank r
//   experts        hydra expert count N or split head count n
//   alpha          scale numerator (default: rank)
//   learning_rate
//   steps          >= 1
//   batch_size
//   seed
//   optimizer      sgd | adam
//   data           JSONL corpus path (documents labeled by "task"), or
//                  synth:clusters=3,docs=50,disjointness=0.8,seed=1
//   eval_interval  steps between loss-curve points (default 10)
//   train_head     true | false (default true)
//   d_model        default 16
//   experts_from   cluster JSON whose k_selected overrides `experts`
//   target         comma list of projections (default q_proj,v_proj)
//
// Relative paths in `data` and `experts_from` resolve against the config
// file's directory.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "hydra/checkpoint.hpp"
#include "hydra/corpus.hpp"
#include "hydra/toy_model.hpp"

namespace hydra {

enum class OptimizerKind { Sgd, Adam };

struct TrainConfig {
  Scheme scheme = Scheme::Lora;
  std::size_t rank = 4;
  std::size_t experts = 1;
  std::optional<double> alpha;
  double learning_rate = 0.1;
  std::size_t steps = 100;
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;
  OptimizerKind optimizer = OptimizerKind::Sgd;
  std::string data;
  std::size_t eval_interval = 10;
  bool train_head = true;
  std::size_t d_model = 16;
  std::string experts_from;
  std::vector<std::string> target{"q_proj", "v_proj"};

  // UsageError on out-of-range values or scheme/rank combinations the model
  // dimension cannot hold.
  void validate() const;
};

// UsageError names the offending line.
TrainConfig parse_train_config(std::istream& in);
TrainConfig load_train_config(const std::filesystem::path& path);

struct CurvePoint {
  std::size_t step = 0;
  double loss = 0.0;
  double accuracy = 0.0;
  Vector gates;
};

struct TrainReport {
  std::string scheme;
  std::uint64_t seed = 0;
  std::size_t steps = 0;
  std::vector<CurvePoint> curve;  // eval set, step 0 and every eval_interval
  double initial_loss = 0.0;
  double final_loss = 0.0;
  double final_accuracy = 0.0;
  std::uint64_t adapter_params = 0;  // or base params under full fine-tuning
  std::uint64_t head_params = 0;
  Vector gate_usage;
  std::uint64_t flops = 0;  // 2 x multiply-accumulates over training
};

struct TrainResult {
  TrainReport report;
  Checkpoint checkpoint;
};

// Raised when the training loss stops being finite.
class NonFiniteLossError : public std::runtime_error {
 public:
  NonFiniteLossError(std::size_t step, double loss);
  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

// Trains whatever is attached to `model`. Deterministic in cfg.seed.
TrainResult train(ToyModel& model, const Batch& train_set, const Batch& eval_set, const TrainConfig& cfg);

// Attaches the configured adapters (or enables full fine-tuning).
void configure_model(ToyModel& model, const TrainConfig& cfg, SeededRng& rng);

// Puts checkpointed adapters and tensors back onto a freshly built model.
void restore_checkpoint(ToyModel& model, const Checkpoint& ckpt);

// Corpus classification data: documents become token sequences over the
// sorted corpus vocabulary (id 0 is reserved for unknown words) and sorted
// distinct task tags become class labels. Every fifth document is held out.
struct TextDataset {
  std::vector<std::string> vocabulary;
  std::vector<std::string> classes;
  Batch train;
  Batch eval;
};

TextDataset make_text_dataset(const Corpus& corpus);
Batch encode_documents(const TextDataset& ds, const Corpus& corpus);

// Everything `train` needs for a config file: data, model, adapters.
struct PreparedRun {
  TrainConfig config;
  TextDataset data;
  ToyModel model;
};

PreparedRun prepare_run(const TrainConfig& cfg, const std::filesystem::path& base_dir = {});

void write_report_csv(std::ostream& out, const TrainReport& report);
std::string report_json(const TrainReport& report);

}  // namespace hydra
