#pragma once

// Post-hoc adapter analysis: how far apart the A and B submodules of several
// trained checkpoints sit, a 2-D PCA embedding of them, and trainable
// parameter / multiply-accumulate cost tables.

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "hydra/adapters.hpp"
#include "hydra/checkpoint.hpp"

namespace hydra {

struct SubmoduleLabel {
  std::string checkpoint;  // caller-supplied id
  char role = 'A';         // 'A' or 'B'
  std::size_t layer = 0;
  std::string projection;  // q_proj / v_proj
  std::string tensor;      // A, B, A0, B1, ...

  std::string id() const;  // "<checkpoint>/<layer>.<projection>.<tensor>"
};

struct EmbeddingReport {
  std::vector<SubmoduleLabel> labels;
  Matrix distances;  // n x n over role-normalized, flattened submodules
  Matrix coords;     // n x 2 PCA coordinates
  double d_a = 0.0;
  double d_b = 0.0;
  double ratio = 1.0;
  std::string ratio_flag;  // "", "undefined" (both zero) or "infinite" (d_a zero)
};

// Needs at least two checkpoints carrying the same adapters with the same
// tensor shapes; anything else is a UsageError. Every submodule is scaled by
// 1 / (mean Frobenius norm of its role) before distances and PCA. d_a and d_b
// average the normalized spread of each A or B slot across checkpoints.
EmbeddingReport breakdown(std::span<const std::pair<std::string, Checkpoint>> checkpoints);

// Top principal components of the rows of `x` by power iteration on the
// covariance, deflating after the first. Returns rows x components scores.
Matrix pca_scores(const Matrix& x, std::size_t components = 2, double tol = 1e-9);

void write_distance_csv(std::ostream& out, const EmbeddingReport& report);
void write_embedding_csv(std::ostream& out, const EmbeddingReport& report);
void write_embedding_svg(std::ostream& out, const EmbeddingReport& report);

struct CostReport {
  std::string scheme;
  std::uint64_t params = 0;    // trainable
  std::uint64_t macs_fwd = 0;  // extra multiply-accumulates per token
  std::uint64_t macs_bwd = 0;  // twice the forward count
  double ratio = 1.0;          // params / reference params
};

// Per adapted matrix, LoRA adds r(k + d) MACs per token, split n r(k + d),
// Hydra r k + N d r + r N, and full fine-tuning d k.
std::uint64_t macs_per_matrix(Scheme scheme, const ParamShape& shape);
CostReport cost(Scheme scheme, const ParamShape& shape, std::uint64_t reference_params);

void write_cost_csv(std::ostream& out, std::span<const CostReport> rows);

}  // namespace hydra
