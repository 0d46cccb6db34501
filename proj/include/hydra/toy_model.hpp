#pragma once

// Small frozen base networks that adapters attach to.
//
// Each block is single-head self-attention with a residual connection,
// optionally followed by a frozen ReLU MLP sublayer:
//
//   Q = H Wq^T (+ q_proj adapter)   K = H Wk^T   V = H Wv^T (+ v_proj adapter)
//   H <- H + softmax(Q K^T / sqrt(d)) V          (per sequence)
//   H <- H + relu(H W1^T) W2^T                   (if mlp)
//
// Sequences are mean-pooled, then fed to a softmax classifier head or, for
// regression tasks, compared directly against target vectors. Dense inputs
// are sequences of length one.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "hydra/adapters.hpp"
#include "hydra/autodiff.hpp"
#include "hydra/linalg.hpp"

namespace hydra {

enum class InputKind { Dense, Tokens };
enum class LossKind { CrossEntropy, MeanSquared };

struct ModelConfig {
  InputKind input = InputKind::Dense;
  LossKind loss = LossKind::CrossEntropy;
  std::size_t d_model = 16;
  std::size_t vocab = 0;    // token inputs only
  std::size_t classes = 2;  // cross-entropy only
  std::size_t blocks = 1;
  bool mlp = false;
  std::size_t mlp_hidden = 32;

  void validate() const;
};

struct Batch {
  Matrix features;                               // dense: rows x d_model
  std::vector<std::vector<std::size_t>> tokens;  // token inputs
  std::vector<std::size_t> labels;               // cross-entropy
  Matrix targets;                                // mean-squared: rows x d_model
  std::vector<std::size_t> tasks;                // optional per-example task tags

  std::size_t size() const;
  Batch select(std::span<const std::size_t> rows) const;
};

struct AdapterConfig {
  Scheme scheme = Scheme::Lora;
  std::size_t rank = 4;
  std::size_t count = 1;  // experts (hydra) or heads (split)
  std::optional<double> alpha;
  SplitRouting routing = SplitRouting::Sum;
};

Adapter make_adapter(const AdapterConfig& cfg, std::size_t d, std::size_t k, SeededRng& rng);

struct AttentionBlock {
  Matrix wq, wk, wv;
  Matrix fc1, fc2;  // empty unless the model has an MLP sublayer
  std::optional<Adapter> q_adapter;
  std::optional<Adapter> v_adapter;
};

struct ForwardGraph {
  ad::Var loss;
  ad::Var output;  // logits (cross-entropy) or predictions (mean-squared)
  std::vector<std::pair<std::string, ad::Var>> params;  // trainable leaves by name
  std::vector<ad::Var> gates;      // one rows x N matrix per hydra adapter
  std::vector<ad::Var> attention;  // per block, per sequence probability matrices
};

struct ForwardResult {
  Matrix output;
  double loss = 0.0;
  double accuracy = 0.0;  // zero for regression
  Vector gate_usage;      // mean gate weight per expert; {1} without hydra adapters
};

class ToyModel {
 public:
  static ToyModel create(const ModelConfig& cfg, SeededRng& rng);

  const ModelConfig& config() const { return cfg_; }
  const std::vector<AttentionBlock>& blocks() const { return blocks_; }

  // `projection` is "q_proj" or "v_proj" (every block) or "<block>.q_proj".
  void attach(std::string_view projection, const AdapterConfig& cfg, SeededRng& rng);
  void attach(std::string_view projection, const Adapter& adapter);
  void detach_all();

  // "0.q_proj", "0.v_proj", ... for attached adapters, in block order.
  std::vector<std::string> attachment_names() const;
  const Adapter& adapter(std::string_view name) const;
  Adapter& adapter(std::string_view name);
  std::size_t expert_count() const;  // max N over hydra adapters, else 1

  // Base weights become trainable (full fine-tuning).
  void set_full_finetune(bool on) { full_finetune_ = on; }
  bool full_finetune() const { return full_finetune_; }
  void set_head_trainable(bool on) { head_trainable_ = on; }
  bool head_trainable() const { return head_trainable_; }
  void reset_head(SeededRng& rng);

  // Trainable tensors in the order ForwardGraph::params lists them.
  std::vector<std::pair<std::string, Matrix*>> trainable_tensors();
  std::vector<std::pair<std::string, const Matrix*>> base_tensors() const;
  std::vector<std::pair<std::string, const Matrix*>> head_tensors() const;
  // Base or head weight by canonical name ("0.wv", "head.w", ...); null if absent.
  Matrix* tensor(std::string_view name);
  std::uint64_t adapter_param_count() const;
  std::uint64_t head_param_count() const;
  std::uint64_t base_param_count() const;

  // FNV-1a over the bytes of every base (non-head) weight.
  std::uint64_t base_fingerprint() const;

  ForwardGraph build(ad::Tape& tape, const Batch& batch, bool trainable = true) const;
  ForwardResult forward(const Batch& batch) const;

  Matrix& head_weight() { return head_w_; }
  Matrix& head_bias() { return head_b_; }
  const Matrix& head_weight() const { return head_w_; }
  const Matrix& head_bias() const { return head_b_; }
  Matrix& embedding() { return embedding_; }

 private:
  ModelConfig cfg_;
  Matrix embedding_;  // vocab x d_model, token inputs only
  std::vector<AttentionBlock> blocks_;
  Matrix head_w_;  // classes x d_model
  Matrix head_b_;  // 1 x classes
  bool full_finetune_ = false;
  bool head_trainable_ = true;
};

void validate_batch(const Batch& batch, const ModelConfig& cfg);

}  // namespace hydra
