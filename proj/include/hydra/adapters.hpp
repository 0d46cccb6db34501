#pragma once

// Low-rank adapter schemes attached to a frozen weight W0 (d x k):
//
//   LoRA     y = W0 x + s * B (A x)
//   Split    y = W0 x + s * sum_i B_i (A_i x)
//   Hydra    z = A x,  w = softmax(Wg^T z),  y = W0 x + s * sum_i w_i * B_i z
//
// with s = alpha / r. A shared A (r x k) feeds N expert matrices B_i (d x r);
// the router Wg is r x N and sees the rank-r projection z.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "hydra/autodiff.hpp"
#include "hydra/linalg.hpp"

namespace hydra {

struct LoraAdapter {
  Matrix a;  // r x k, Kaiming uniform at construction
  Matrix b;  // d x r, zero at construction
  double alpha = 1.0;

  // alpha defaults to r, making the scale exactly 1.
  static LoraAdapter create(std::size_t d, std::size_t k, std::size_t r, SeededRng& rng,
                            std::optional<double> alpha = std::nullopt);

  std::size_t rank() const { return a.rows(); }
  std::size_t in_dim() const { return a.cols(); }
  std::size_t out_dim() const { return b.rows(); }
  double scaling() const { return alpha / static_cast<double>(rank()); }
  void validate() const;
};

// How split heads combine: all heads summed, or one head per task tag.
enum class SplitRouting { Sum, Task };

struct SplitAdapter {
  std::vector<LoraAdapter> heads;
  SplitRouting routing = SplitRouting::Sum;

  static SplitAdapter create(std::size_t d, std::size_t k, std::size_t r, std::size_t n,
                             SeededRng& rng, std::optional<double> alpha = std::nullopt,
                             SplitRouting routing = SplitRouting::Sum);

  std::size_t head_count() const { return heads.size(); }
  std::size_t rank() const { return heads.front().rank(); }
  std::size_t in_dim() const { return heads.front().in_dim(); }
  std::size_t out_dim() const { return heads.front().out_dim(); }
  void validate() const;
};

struct HydraAdapter {
  Matrix a;                     // shared, r x k
  std::vector<Matrix> experts;  // N matrices, each d x r
  Matrix router;                // Wg, r x N
  double alpha = 1.0;

  static HydraAdapter create(std::size_t d, std::size_t k, std::size_t r, std::size_t experts,
                             SeededRng& rng, std::optional<double> alpha = std::nullopt);

  std::size_t rank() const { return a.rows(); }
  std::size_t in_dim() const { return a.cols(); }
  std::size_t out_dim() const { return experts.front().rows(); }
  std::size_t expert_count() const { return experts.size(); }
  double scaling() const { return alpha / static_cast<double>(rank()); }
  void validate() const;
};

struct GateOutput {
  Vector weights;
};

using Adapter = std::variant<LoraAdapter, SplitAdapter, HydraAdapter>;

std::string scheme_name(const Adapter& adapter);
std::size_t in_dim(const Adapter& adapter);
std::size_t out_dim(const Adapter& adapter);
void validate(const Adapter& adapter);

// Trainable tensors in a fixed order, shared by training, checkpoints and
// analysis. Names are stable: A, B (LoRA); A0, B0, A1, ... (split);
// A, B0..B{N-1}, router (Hydra).
std::vector<std::pair<std::string, const Matrix*>> named_tensors(const Adapter& adapter);
std::vector<Matrix*> trainable_tensors(Adapter& adapter);
std::uint64_t trainable_count(const Adapter& adapter);

Vector lora_forward(std::span<const double> x, const Matrix& w0, const LoraAdapter& ad);
Vector split_forward(std::span<const double> x, const Matrix& w0, const SplitAdapter& ad);
// Only head `task` contributes (task-dedicated heads).
Vector split_forward_task(std::span<const double> x, const Matrix& w0, const SplitAdapter& ad,
                          std::size_t task);

GateOutput route(std::span<const double> z, const Matrix& router);

struct HydraOutput {
  Vector y;
  GateOutput gates;
};

HydraOutput hydra_forward(std::span<const double> x, const Matrix& w0, const HydraAdapter& ad);

// Averages the experts under the input's gates first, then applies the single
// merged B. Equal to hydra_forward by linearity.
Vector merge_infer(std::span<const double> x, const Matrix& w0, const HydraAdapter& ad);

// Dispatches on scheme; split adapters use their summed form.
Vector adapter_forward(std::span<const double> x, const Matrix& w0, const Adapter& ad);

// ---------------------------------------------------------------------------
// Parameter accounting

enum class Scheme { Lora, Split, Hydra, Full };

Scheme parse_scheme(std::string_view name);
std::string_view scheme_string(Scheme scheme);

struct ParamShape {
  std::uint64_t d = 1;
  std::uint64_t k = 1;
  std::uint64_t rank = 1;
  std::uint64_t count = 1;  // experts (Hydra) or heads (Split)
  std::uint64_t matrices_per_layer = 1;
  std::uint64_t layers = 1;
};

struct ParamCount {
  std::uint64_t trainable = 0;
  // Percent of base_total truncated (not rounded) to three decimals.
  double percent = 0.0;
  // Exact 100 * trainable / base_total.
  double percent_exact = 0.0;
};

std::uint64_t params_per_matrix(Scheme scheme, const ParamShape& shape);
ParamCount param_count(Scheme scheme, const ParamShape& shape, std::uint64_t base_total);
// "4194304 (0.062%)"
std::string format_param_count(const ParamCount& count);

// ---------------------------------------------------------------------------
// Tape construction

struct AdapterTrace {
  std::vector<ad::Var> params;  // aligned with trainable_tensors()
  std::optional<ad::Var> gates; // Hydra: rows x N softmax weights
};

// Returns base + delta for a batch of row inputs `x` (rows x k). `base` is the
// frozen projection output (rows x d). Task-routed split adapters need one
// task tag per row.
ad::Var apply_adapter(ad::Tape& tape, ad::Var x, ad::Var base, const Adapter& adapter,
                      std::span<const std::size_t> row_tasks, AdapterTrace* trace,
                      bool trainable = true);

}  // namespace hydra
