#pragma once

// Reverse-mode differentiation over a closed set of matrix primitives.
//
// A Tape records nodes eagerly: each builder call computes its value
// immediately and appends the node, so the node list is always in
// topological order and backward() simply walks it in reverse. Leaves are
// either trainable parameters or frozen constants; frozen leaves (and any
// node that depends only on them) never receive a gradient.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "hydra/linalg.hpp"

namespace hydra::ad {

struct Var {
  std::size_t id = 0;
  bool operator==(const Var&) const = default;
};

enum class OpKind : std::uint8_t {
  Leaf,
  MatMul,
  Transpose,
  Add,
  Sub,
  Scale,
  Relu,
  SoftmaxRows,
  ScaleRowsByColumn,
  AddRowVector,
  MeanRows,
  SliceRows,
  ConcatRows,
  SoftmaxCrossEntropy,
  MeanSquaredError,
  SumAll,
  HalfSquaredNorm,
};

const char* op_name(OpKind op);

struct Node {
  OpKind op = OpKind::Leaf;
  std::vector<std::size_t> inputs;
  Matrix value;
  bool trainable = false;      // leaves only
  bool requires_grad = false;  // true if any trainable leaf feeds this node
  double factor = 0.0;         // Scale
  std::size_t index = 0;       // ScaleRowsByColumn column, SliceRows start
  std::size_t count = 0;       // SliceRows length
  std::vector<std::size_t> labels;  // SoftmaxCrossEntropy
  std::string name;            // leaves, for reports
};

class Gradients {
 public:
  bool contains(Var v) const { return grads_.count(v.id) != 0; }
  const Matrix& operator[](Var v) const;
  std::size_t size() const { return grads_.size(); }

 private:
  friend class Tape;
  std::unordered_map<std::size_t, Matrix> grads_;
};

class Tape {
 public:
  Var parameter(Matrix value, std::string name = {});
  Var constant(Matrix value, std::string name = {});

  Var matmul(Var a, Var b);
  Var transpose(Var a);
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var scale(Var a, double factor);
  Var relu(Var a);
  Var softmax_rows(Var a);
  // out(i, :) = m(i, :) * gates(i, column)
  Var scale_rows_by_column(Var m, Var gates, std::size_t column);
  // m + broadcast of a 1 x cols row vector
  Var add_row_vector(Var m, Var row);
  Var mean_rows(Var a);
  Var slice_rows(Var a, std::size_t start, std::size_t count);
  Var concat_rows(const std::vector<Var>& parts);
  // Mean softmax cross-entropy of row-wise logits against class labels.
  Var softmax_cross_entropy(Var logits, std::vector<std::size_t> labels);
  // Mean over all entries of (pred - target)^2.
  Var mean_squared_error(Var pred, Var target);
  Var sum_all(Var a);
  Var half_squared_norm(Var a);

  const Matrix& value(Var v) const { return node(v).value; }
  double scalar(Var v) const;
  const Node& node(Var v) const;
  std::size_t size() const { return nodes_.size(); }
  std::vector<Var> trainable_leaves() const;

  Gradients backward(Var loss) const;

  // Overwrites a leaf and recomputes every downstream value in tape order.
  void set_leaf(Var leaf, Matrix value);
  void replay();

  // Re-evaluates the recorded graph in extended precision with one leaf
  // coordinate shifted by delta. Used by the finite-difference checker.
  long double evaluate_extended(Var loss, Var leaf, std::size_t coord, long double delta) const;

 private:
  Var push(Node n);
  std::size_t checked(Var a) const;
  Node& mutable_node(Var v);

  std::vector<Node> nodes_;
};

struct ParamError {
  std::string name;
  std::size_t leaf = 0;
  std::size_t coords_checked = 0;
  double max_rel_error = 0.0;
};

struct GradReport {
  double eps = 0.0;
  double max_rel_error = 0.0;
  std::vector<ParamError> params;
};

// |g_ad - g_fd| / max(1e-12, |g_ad| + |g_fd|)
double relative_error(double analytic, double numeric);

// Central-difference check of every trainable leaf on a random subsample of
// at least `coords_per_param` coordinates (all of them for small tensors).
GradReport grad_check(const Tape& tape, Var loss, SeededRng& rng, double eps,
                      std::size_t coords_per_param = 32);

}  // namespace hydra::ad
