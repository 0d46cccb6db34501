#include "hydra/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace hydra::ad {

namespace {

template <class T>
BasicMatrix<T> softmax_rows_kernel(const BasicMatrix<T>& a) {
  BasicMatrix<T> out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto s = softmax<T>(a.row(i));
    std::copy(s.begin(), s.end(), out.row(i).begin());
  }
  return out;
}

// Forward kernel shared by the f64 tape and the extended-precision replay.
// `get(id)` returns the already-computed value of node `id`.
template <class T, class Get>
BasicMatrix<T> evaluate(const Node& n, Get get) {
  auto in = [&](std::size_t k) -> const BasicMatrix<T>& { return get(n.inputs[k]); };
  switch (n.op) {
    case OpKind::Leaf:
      throw ContractError("evaluate called on a leaf");
    case OpKind::MatMul:
      return matmul(in(0), in(1));
    case OpKind::Transpose:
      return transpose(in(0));
    case OpKind::Add:
      return add(in(0), in(1));
    case OpKind::Sub:
      return sub(in(0), in(1));
    case OpKind::Scale:
      return scale(in(0), static_cast<T>(n.factor));
    case OpKind::Relu: {
      BasicMatrix<T> out = in(0);
      for (auto& x : out.data()) x = x > T(0) ? x : T(0);
      return out;
    }
    case OpKind::SoftmaxRows:
      return softmax_rows_kernel(in(0));
    case OpKind::ScaleRowsByColumn: {
      const auto& m = in(0);
      const auto& g = in(1);
      BasicMatrix<T> out = m;
      for (std::size_t i = 0; i < m.rows(); ++i) {
        const T w = g(i, n.index);
        for (auto& x : out.row(i)) x *= w;
      }
      return out;
    }
    case OpKind::AddRowVector: {
      BasicMatrix<T> out = in(0);
      const auto& r = in(1);
      for (std::size_t i = 0; i < out.rows(); ++i)
        for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) += r(0, j);
      return out;
    }
    case OpKind::MeanRows: {
      const auto& a = in(0);
      BasicMatrix<T> out(1, a.cols());
      for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) out(0, j) += a(i, j);
      for (auto& x : out.data()) x /= static_cast<T>(a.rows());
      return out;
    }
    case OpKind::SliceRows: {
      const auto& a = in(0);
      BasicMatrix<T> out(n.count, a.cols());
      for (std::size_t i = 0; i < n.count; ++i) {
        auto src = a.row(n.index + i);
        std::copy(src.begin(), src.end(), out.row(i).begin());
      }
      return out;
    }
    case OpKind::ConcatRows: {
      std::size_t rows = 0;
      for (std::size_t k = 0; k < n.inputs.size(); ++k) rows += in(k).rows();
      BasicMatrix<T> out(rows, in(0).cols());
      std::size_t at = 0;
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        const auto& part = in(k);
        for (std::size_t i = 0; i < part.rows(); ++i, ++at) {
          auto src = part.row(i);
          std::copy(src.begin(), src.end(), out.row(at).begin());
        }
      }
      return out;
    }
    case OpKind::SoftmaxCrossEntropy: {
      const auto& logits = in(0);
      T total = 0;
      for (std::size_t i = 0; i < logits.rows(); ++i) {
        auto row = logits.row(i);
        const T peak = *std::max_element(row.begin(), row.end());
        T s = 0;
        for (auto x : row) s += std::exp(x - peak);
        total += std::log(s) + peak - row[n.labels[i]];
      }
      return BasicMatrix<T>(1, 1, total / static_cast<T>(logits.rows()));
    }
    case OpKind::MeanSquaredError: {
      const auto& p = in(0);
      const auto& t = in(1);
      T total = 0;
      for (std::size_t i = 0; i < p.size(); ++i) {
        const T d = p[i] - t[i];
        total += d * d;
      }
      return BasicMatrix<T>(1, 1, total / static_cast<T>(p.size()));
    }
    case OpKind::SumAll: {
      T total = 0;
      for (auto x : in(0).data()) total += x;
      return BasicMatrix<T>(1, 1, total);
    }
    case OpKind::HalfSquaredNorm: {
      T total = 0;
      for (auto x : in(0).data()) total += x * x;
      return BasicMatrix<T>(1, 1, total / T(2));
    }
  }
  throw ContractError("unknown op");
}

void accumulate(std::optional<Matrix>& slot, const Matrix& g) {
  if (!slot) {
    slot = g;
  } else {
    for (std::size_t i = 0; i < g.size(); ++i) (*slot)[i] += g[i];
  }
}

}  // namespace

const char* op_name(OpKind op) {
  switch (op) {
    case OpKind::Leaf: return "leaf";
    case OpKind::MatMul: return "matmul";
    case OpKind::Transpose: return "transpose";
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::Scale: return "scale";
    case OpKind::Relu: return "relu";
    case OpKind::SoftmaxRows: return "softmax_rows";
    case OpKind::ScaleRowsByColumn: return "scale_rows_by_column";
    case OpKind::AddRowVector: return "add_row_vector";
    case OpKind::MeanRows: return "mean_rows";
    case OpKind::SliceRows: return "slice_rows";
    case OpKind::ConcatRows: return "concat_rows";
    case OpKind::SoftmaxCrossEntropy: return "softmax_cross_entropy";
    case OpKind::MeanSquaredError: return "mean_squared_error";
    case OpKind::SumAll: return "sum_all";
    case OpKind::HalfSquaredNorm: return "half_squared_norm";
  }
  return "?";
}

const Matrix& Gradients::operator[](Var v) const {
  auto it = grads_.find(v.id);
  if (it == grads_.end()) {
    throw ContractError("no gradient recorded for node " + std::to_string(v.id));
  }
  return it->second;
}

const Node& Tape::node(Var v) const {
  if (v.id >= nodes_.size()) throw ContractError("variable does not belong to this tape");
  return nodes_[v.id];
}

Node& Tape::mutable_node(Var v) {
  if (v.id >= nodes_.size()) throw ContractError("variable does not belong to this tape");
  return nodes_[v.id];
}

double Tape::scalar(Var v) const {
  const auto& m = value(v);
  if (m.rows() != 1 || m.cols() != 1) {
    throw ContractError("expected a scalar node, got " + m.shape());
  }
  return m(0, 0);
}

Var Tape::push(Node n) {
  if (n.op != OpKind::Leaf) {
    for (auto id : n.inputs) {
      if (id >= nodes_.size()) throw ContractError("variable does not belong to this tape");
      n.requires_grad = n.requires_grad || nodes_[id].requires_grad;
    }
    n.value = evaluate<double>(n, [this](std::size_t id) -> const Matrix& { return nodes_[id].value; });
  }
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

Var Tape::parameter(Matrix value, std::string name) {
  Node n;
  n.value = std::move(value);
  n.trainable = true;
  n.requires_grad = true;
  n.name = std::move(name);
  return push(std::move(n));
}

Var Tape::constant(Matrix value, std::string name) {
  Node n;
  n.value = std::move(value);
  n.name = std::move(name);
  return push(std::move(n));
}

namespace {

Node make(OpKind op, std::vector<std::size_t> inputs) {
  Node n;
  n.op = op;
  n.inputs = std::move(inputs);
  return n;
}

void check(bool ok, const char* op, const std::string& detail) {
  if (!ok) throw ShapeError(std::string(op) + ": " + detail);
}

}  // namespace

// Validates that `a` belongs to this tape and returns its id.
std::size_t Tape::checked(Var a) const {
  (void)node(a);
  return a.id;
}

Var Tape::matmul(Var a, Var b) {
  check(value(a).cols() == value(b).rows(), "matmul",
        value(a).shape() + " x " + value(b).shape());
  return push(make(OpKind::MatMul, {a.id, b.id}));
}

Var Tape::transpose(Var a) { return push(make(OpKind::Transpose, {checked(a)})); }

Var Tape::add(Var a, Var b) {
  check(value(a).same_shape(value(b)), "add", value(a).shape() + " vs " + value(b).shape());
  return push(make(OpKind::Add, {a.id, b.id}));
}

Var Tape::sub(Var a, Var b) {
  check(value(a).same_shape(value(b)), "sub", value(a).shape() + " vs " + value(b).shape());
  return push(make(OpKind::Sub, {a.id, b.id}));
}

Var Tape::scale(Var a, double factor) {
  Node n = make(OpKind::Scale, {checked(a)});
  n.factor = factor;
  return push(std::move(n));
}

Var Tape::relu(Var a) { return push(make(OpKind::Relu, {checked(a)})); }

Var Tape::softmax_rows(Var a) { return push(make(OpKind::SoftmaxRows, {checked(a)})); }

Var Tape::scale_rows_by_column(Var m, Var gates, std::size_t column) {
  check(value(m).rows() == value(gates).rows() && column < value(gates).cols(),
        "scale_rows_by_column",
        value(m).shape() + " with gates " + value(gates).shape() + " column " +
            std::to_string(column));
  Node n = make(OpKind::ScaleRowsByColumn, {m.id, gates.id});
  n.index = column;
  return push(std::move(n));
}

Var Tape::add_row_vector(Var m, Var row) {
  check(value(row).rows() == 1 && value(row).cols() == value(m).cols(), "add_row_vector",
        value(m).shape() + " + " + value(row).shape());
  return push(make(OpKind::AddRowVector, {m.id, row.id}));
}

Var Tape::mean_rows(Var a) { return push(make(OpKind::MeanRows, {checked(a)})); }

Var Tape::slice_rows(Var a, std::size_t start, std::size_t count) {
  check(count >= 1 && start + count <= value(a).rows(), "slice_rows",
        "rows [" + std::to_string(start) + ", " + std::to_string(start + count) + ") of " +
            value(a).shape());
  Node n = make(OpKind::SliceRows, {a.id});
  n.index = start;
  n.count = count;
  return push(std::move(n));
}

Var Tape::concat_rows(const std::vector<Var>& parts) {
  check(!parts.empty(), "concat_rows", "no inputs");
  std::vector<std::size_t> ids;
  for (auto p : parts) {
    check(value(p).cols() == value(parts.front()).cols(), "concat_rows",
          value(p).shape() + " vs " + value(parts.front()).shape());
    ids.push_back(p.id);
  }
  return push(make(OpKind::ConcatRows, std::move(ids)));
}

Var Tape::softmax_cross_entropy(Var logits, std::vector<std::size_t> labels) {
  const auto& l = value(logits);
  check(labels.size() == l.rows(), "softmax_cross_entropy",
        std::to_string(labels.size()) + " labels for logits " + l.shape());
  for (auto y : labels) {
    if (y >= l.cols()) {
      throw ContractError("label " + std::to_string(y) + " out of range for " +
                          std::to_string(l.cols()) + " classes");
    }
  }
  Node n = make(OpKind::SoftmaxCrossEntropy, {logits.id});
  n.labels = std::move(labels);
  return push(std::move(n));
}

Var Tape::mean_squared_error(Var pred, Var target) {
  check(value(pred).same_shape(value(target)), "mean_squared_error",
        value(pred).shape() + " vs " + value(target).shape());
  return push(make(OpKind::MeanSquaredError, {pred.id, target.id}));
}

Var Tape::sum_all(Var a) { return push(make(OpKind::SumAll, {checked(a)})); }

Var Tape::half_squared_norm(Var a) { return push(make(OpKind::HalfSquaredNorm, {checked(a)})); }

std::vector<Var> Tape::trainable_leaves() const {
  std::vector<Var> out;
  for (std::size_t i = 0; i < nodes_.size(); ++i)
    if (nodes_[i].op == OpKind::Leaf && nodes_[i].trainable) out.push_back(Var{i});
  return out;
}

Gradients Tape::backward(Var loss) const {
  const auto& lv = node(loss).value;
  if (lv.rows() != 1 || lv.cols() != 1) {
    throw ContractError("backward requires a scalar loss, got " + lv.shape());
  }
  std::vector<std::optional<Matrix>> grad(loss.id + 1);
  grad[loss.id] = Matrix(1, 1, 1.0);

  for (std::size_t id = loss.id + 1; id-- > 0;) {
    const Node& n = nodes_[id];
    if (!grad[id] || !n.requires_grad || n.op == OpKind::Leaf) continue;
    const Matrix& g = *grad[id];
    auto in = [&](std::size_t k) -> const Matrix& { return nodes_[n.inputs[k]].value; };
    auto wants = [&](std::size_t k) { return nodes_[n.inputs[k]].requires_grad; };
    auto push_grad = [&](std::size_t k, const Matrix& m) { accumulate(grad[n.inputs[k]], m); };

    switch (n.op) {
      case OpKind::Leaf:
        break;
      case OpKind::MatMul:
        if (wants(0)) push_grad(0, hydra::matmul(g, hydra::transpose(in(1))));
        if (wants(1)) push_grad(1, hydra::matmul(hydra::transpose(in(0)), g));
        break;
      case OpKind::Transpose:
        push_grad(0, hydra::transpose(g));
        break;
      case OpKind::Add:
        if (wants(0)) push_grad(0, g);
        if (wants(1)) push_grad(1, g);
        break;
      case OpKind::Sub:
        if (wants(0)) push_grad(0, g);
        if (wants(1)) push_grad(1, hydra::scale(g, -1.0));
        break;
      case OpKind::Scale:
        push_grad(0, hydra::scale(g, n.factor));
        break;
      case OpKind::Relu: {
        Matrix d = g;
        const auto& x = in(0);
        for (std::size_t i = 0; i < d.size(); ++i)
          if (!(x[i] > 0.0)) d[i] = 0.0;
        push_grad(0, d);
        break;
      }
      case OpKind::SoftmaxRows: {
        const auto& y = n.value;
        Matrix d(y.rows(), y.cols());
        for (std::size_t i = 0; i < y.rows(); ++i) {
          double dot = 0.0;
          for (std::size_t j = 0; j < y.cols(); ++j) dot += g(i, j) * y(i, j);
          for (std::size_t j = 0; j < y.cols(); ++j) d(i, j) = y(i, j) * (g(i, j) - dot);
        }
        push_grad(0, d);
        break;
      }
      case OpKind::ScaleRowsByColumn: {
        const auto& m = in(0);
        const auto& gates = in(1);
        if (wants(0)) {
          Matrix d = g;
          for (std::size_t i = 0; i < d.rows(); ++i) {
            const double w = gates(i, n.index);
            for (auto& x : d.row(i)) x *= w;
          }
          push_grad(0, d);
        }
        if (wants(1)) {
          Matrix d(gates.rows(), gates.cols());
          for (std::size_t i = 0; i < m.rows(); ++i) {
            double dot = 0.0;
            for (std::size_t j = 0; j < m.cols(); ++j) dot += g(i, j) * m(i, j);
            d(i, n.index) = dot;
          }
          push_grad(1, d);
        }
        break;
      }
      case OpKind::AddRowVector: {
        if (wants(0)) push_grad(0, g);
        if (wants(1)) {
          Matrix d(1, g.cols());
          for (std::size_t i = 0; i < g.rows(); ++i)
            for (std::size_t j = 0; j < g.cols(); ++j) d(0, j) += g(i, j);
          push_grad(1, d);
        }
        break;
      }
      case OpKind::MeanRows: {
        const auto& x = in(0);
        Matrix d(x.rows(), x.cols());
        const double inv = 1.0 / static_cast<double>(x.rows());
        for (std::size_t i = 0; i < x.rows(); ++i)
          for (std::size_t j = 0; j < x.cols(); ++j) d(i, j) = g(0, j) * inv;
        push_grad(0, d);
        break;
      }
      case OpKind::SliceRows: {
        const auto& x = in(0);
        Matrix d(x.rows(), x.cols());
        for (std::size_t i = 0; i < n.count; ++i) {
          auto src = g.row(i);
          std::copy(src.begin(), src.end(), d.row(n.index + i).begin());
        }
        push_grad(0, d);
        break;
      }
      case OpKind::ConcatRows: {
        std::size_t at = 0;
        for (std::size_t k = 0; k < n.inputs.size(); ++k) {
          const auto& part = in(k);
          if (wants(k)) {
            Matrix d(part.rows(), part.cols());
            for (std::size_t i = 0; i < part.rows(); ++i) {
              auto src = g.row(at + i);
              std::copy(src.begin(), src.end(), d.row(i).begin());
            }
            push_grad(k, d);
          }
          at += part.rows();
        }
        break;
      }
      case OpKind::SoftmaxCrossEntropy: {
        const auto& logits = in(0);
        Matrix d(logits.rows(), logits.cols());
        const double w = g(0, 0) / static_cast<double>(logits.rows());
        for (std::size_t i = 0; i < logits.rows(); ++i) {
          auto p = softmax<double>(logits.row(i));
          for (std::size_t j = 0; j < logits.cols(); ++j) d(i, j) = w * p[j];
          d(i, n.labels[i]) -= w;
        }
        push_grad(0, d);
        break;
      }
      case OpKind::MeanSquaredError: {
        const auto& p = in(0);
        const auto& t = in(1);
        Matrix d(p.rows(), p.cols());
        const double w = 2.0 * g(0, 0) / static_cast<double>(p.size());
        for (std::size_t i = 0; i < p.size(); ++i) d[i] = w * (p[i] - t[i]);
        if (wants(0)) push_grad(0, d);
        if (wants(1)) push_grad(1, hydra::scale(d, -1.0));
        break;
      }
      case OpKind::SumAll: {
        const auto& x = in(0);
        push_grad(0, Matrix(x.rows(), x.cols(), g(0, 0)));
        break;
      }
      case OpKind::HalfSquaredNorm:
        push_grad(0, hydra::scale(in(0), g(0, 0)));
        break;
    }
  }

  Gradients out;
  for (std::size_t id = 0; id <= loss.id; ++id) {
    const Node& n = nodes_[id];
    if (n.op != OpKind::Leaf || !n.trainable) continue;
    out.grads_.emplace(id, grad[id] ? *grad[id] : Matrix(n.value.rows(), n.value.cols()));
  }
  return out;
}

void Tape::set_leaf(Var leaf, Matrix value) {
  Node& n = mutable_node(leaf);
  if (n.op != OpKind::Leaf) throw ContractError("set_leaf on a non-leaf node");
  if (!n.value.same_shape(value)) {
    throw ShapeError("set_leaf shape mismatch: " + n.value.shape() + " vs " + value.shape());
  }
  n.value = std::move(value);
  replay();
}

void Tape::replay() {
  for (auto& n : nodes_) {
    if (n.op == OpKind::Leaf) continue;
    n.value = evaluate<double>(n, [this](std::size_t id) -> const Matrix& { return nodes_[id].value; });
  }
}

long double Tape::evaluate_extended(Var loss, Var leaf, std::size_t coord, long double delta) const {
  if (node(leaf).op != OpKind::Leaf) throw ContractError("evaluate_extended: not a leaf");
  std::vector<BasicMatrix<long double>> values(loss.id + 1);
  for (std::size_t id = 0; id <= loss.id; ++id) {
    const Node& n = nodes_[id];
    if (n.op == OpKind::Leaf) {
      values[id] = n.value.cast<long double>();
      if (id == leaf.id) values[id][coord] += delta;
    } else {
      values[id] = evaluate<long double>(
          n, [&values](std::size_t i) -> const BasicMatrix<long double>& { return values[i]; });
    }
  }
  const auto& out = values[loss.id];
  if (out.size() != 1) throw ContractError("evaluate_extended requires a scalar loss");
  return out[0];
}

double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1e-12, std::abs(analytic) + std::abs(numeric));
}

GradReport grad_check(const Tape& tape, Var loss, SeededRng& rng, double eps,
                      std::size_t coords_per_param) {
  if (!(eps > 0.0 && eps <= 1e-3)) {
    throw ContractError("grad_check eps must lie in (0, 1e-3], got " + std::to_string(eps));
  }
  const Gradients grads = tape.backward(loss);
  GradReport report;
  report.eps = eps;
  const long double h = eps;
  for (Var leaf : tape.trainable_leaves()) {
    if (leaf.id > loss.id) continue;
    const Matrix& value = tape.value(leaf);
    if (!all_finite(value)) throw ContractError("grad_check: parameter has non-finite entries");
    std::vector<std::size_t> coords(value.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (coords.size() > coords_per_param) {
      rng.shuffle(coords.begin(), coords.end());
      coords.resize(coords_per_param);
    }
    ParamError pe;
    pe.name = tape.node(leaf).name;
    pe.leaf = leaf.id;
    pe.coords_checked = coords.size();
    const Matrix& g = grads[leaf];
    for (auto c : coords) {
      const long double up = tape.evaluate_extended(loss, leaf, c, h);
      const long double down = tape.evaluate_extended(loss, leaf, c, -h);
      const double fd = static_cast<double>((up - down) / (2.0L * h));
      pe.max_rel_error = std::max(pe.max_rel_error, relative_error(g[c], fd));
    }
    report.max_rel_error = std::max(report.max_rel_error, pe.max_rel_error);
    report.params.push_back(std::move(pe));
  }
  return report;
}

}  // namespace hydra::ad
