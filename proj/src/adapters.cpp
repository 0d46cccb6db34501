#include "hydra/adapters.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

namespace hydra {

namespace {

void require_shape(bool ok, const std::string& msg) {
  if (!ok) throw ShapeError(msg);
}

void check_rank(std::size_t d, std::size_t k, std::size_t r) {
  if (r < 1 || r > std::min(d, k)) {
    throw ContractError("adapter rank " + std::to_string(r) + " must lie in [1, min(d, k)] = [1, " +
                        std::to_string(std::min(d, k)) + "]");
  }
}

double default_alpha(std::optional<double> alpha, std::size_t r) {
  const double a = alpha.value_or(static_cast<double>(r));
  if (!std::isfinite(a)) throw ContractError("adapter alpha must be finite");
  return a;
}

// Router weights are r x N but their fan-in is r, so draw the transpose.
Matrix router_init(std::size_t r, std::size_t n, SeededRng& rng) {
  return scale(transpose(kaiming_uniform(n, r, rng)), 0.01);
}

void check_input(std::span<const double> x, const Matrix& w0, std::size_t k, std::size_t d) {
  require_shape(x.size() == k, "adapter input length " + std::to_string(x.size()) +
                                   " does not match k=" + std::to_string(k));
  require_shape(w0.rows() == d && w0.cols() == k,
                "base weight " + w0.shape() + " does not match adapter " +
                    Matrix::shape_string(d, k));
}

}  // namespace

LoraAdapter LoraAdapter::create(std::size_t d, std::size_t k, std::size_t r, SeededRng& rng,
                                std::optional<double> alpha) {
  check_rank(d, k, r);
  LoraAdapter ad;
  ad.a = kaiming_uniform(r, k, rng);
  ad.b = Matrix(d, r);
  ad.alpha = default_alpha(alpha, r);
  return ad;
}

void LoraAdapter::validate() const {
  require_shape(!a.empty() && !b.empty(), "LoRA adapter is empty");
  require_shape(b.cols() == a.rows(), "LoRA B " + b.shape() + " incompatible with A " + a.shape());
  check_rank(b.rows(), a.cols(), a.rows());
}

SplitAdapter SplitAdapter::create(std::size_t d, std::size_t k, std::size_t r, std::size_t n,
                                  SeededRng& rng, std::optional<double> alpha,
                                  SplitRouting routing) {
  if (n < 1) throw ContractError("split adapter needs at least one head");
  SplitAdapter ad;
  ad.routing = routing;
  for (std::size_t i = 0; i < n; ++i) ad.heads.push_back(LoraAdapter::create(d, k, r, rng, alpha));
  return ad;
}

void SplitAdapter::validate() const {
  if (heads.empty()) throw ContractError("split adapter needs at least one head");
  for (const auto& h : heads) {
    h.validate();
    require_shape(h.a.same_shape(heads.front().a) && h.b.same_shape(heads.front().b),
                  "split heads must share dimensions");
  }
}

HydraAdapter HydraAdapter::create(std::size_t d, std::size_t k, std::size_t r,
                                  std::size_t experts, SeededRng& rng,
                                  std::optional<double> alpha) {
  check_rank(d, k, r);
  if (experts < 1) throw ContractError("hydra adapter needs at least one expert");
  HydraAdapter ad;
  ad.a = kaiming_uniform(r, k, rng);
  ad.router = router_init(r, experts, rng);
  ad.experts.assign(experts, Matrix(d, r));
  ad.alpha = default_alpha(alpha, r);
  return ad;
}

void HydraAdapter::validate() const {
  if (experts.empty()) throw ContractError("hydra adapter needs at least one expert");
  check_rank(experts.front().rows(), a.cols(), a.rows());
  for (const auto& e : experts) {
    require_shape(e.rows() == experts.front().rows() && e.cols() == a.rows(),
                  "hydra expert " + e.shape() + " incompatible with A " + a.shape());
  }
  require_shape(router.rows() == a.rows() && router.cols() == experts.size(),
                "hydra router " + router.shape() + " must be " +
                    Matrix::shape_string(a.rows(), experts.size()));
}

std::string scheme_name(const Adapter& adapter) {
  return std::visit(
      [](const auto& ad) -> std::string {
        using T = std::decay_t<decltype(ad)>;
        if constexpr (std::is_same_v<T, LoraAdapter>) return "lora";
        if constexpr (std::is_same_v<T, SplitAdapter>) return "split";
        if constexpr (std::is_same_v<T, HydraAdapter>) return "hydra";
      },
      adapter);
}

std::size_t in_dim(const Adapter& adapter) {
  return std::visit([](const auto& ad) { return ad.in_dim(); }, adapter);
}

std::size_t out_dim(const Adapter& adapter) {
  return std::visit([](const auto& ad) { return ad.out_dim(); }, adapter);
}

void validate(const Adapter& adapter) {
  std::visit([](const auto& ad) { ad.validate(); }, adapter);
}

std::vector<std::pair<std::string, const Matrix*>> named_tensors(const Adapter& adapter) {
  std::vector<std::pair<std::string, const Matrix*>> out;
  if (const auto* l = std::get_if<LoraAdapter>(&adapter)) {
    out.emplace_back("A", &l->a);
    out.emplace_back("B", &l->b);
  } else if (const auto* s = std::get_if<SplitAdapter>(&adapter)) {
    for (std::size_t i = 0; i < s->heads.size(); ++i) {
      out.emplace_back("A" + std::to_string(i), &s->heads[i].a);
      out.emplace_back("B" + std::to_string(i), &s->heads[i].b);
    }
  } else {
    const auto& h = std::get<HydraAdapter>(adapter);
    out.emplace_back("A", &h.a);
    for (std::size_t i = 0; i < h.experts.size(); ++i)
      out.emplace_back("B" + std::to_string(i), &h.experts[i]);
    out.emplace_back("router", &h.router);
  }
  return out;
}

std::vector<Matrix*> trainable_tensors(Adapter& adapter) {
  std::vector<Matrix*> out;
  for (auto& [name, m] : named_tensors(adapter)) out.push_back(const_cast<Matrix*>(m));
  return out;
}

std::uint64_t trainable_count(const Adapter& adapter) {
  std::uint64_t n = 0;
  for (const auto& [name, m] : named_tensors(adapter)) n += m->size();
  return n;
}

Vector lora_forward(std::span<const double> x, const Matrix& w0, const LoraAdapter& ad) {
  check_input(x, w0, ad.in_dim(), ad.out_dim());
  Vector y = matvec(w0, x);
  const Vector z = matvec(ad.a, x);
  add_in_place(y, matvec(ad.b, z), ad.scaling());
  return y;
}

Vector split_forward(std::span<const double> x, const Matrix& w0, const SplitAdapter& ad) {
  ad.validate();
  check_input(x, w0, ad.in_dim(), ad.out_dim());
  Vector y = matvec(w0, x);
  for (const auto& head : ad.heads) {
    const Vector z = matvec(head.a, x);
    add_in_place(y, matvec(head.b, z), head.scaling());
  }
  return y;
}

Vector split_forward_task(std::span<const double> x, const Matrix& w0, const SplitAdapter& ad,
                          std::size_t task) {
  if (task >= ad.heads.size()) {
    throw ContractError("task " + std::to_string(task) + " has no dedicated head (" +
                        std::to_string(ad.heads.size()) + " heads)");
  }
  return lora_forward(x, w0, ad.heads[task]);
}

GateOutput route(std::span<const double> z, const Matrix& router) {
  require_shape(z.size() == router.rows(), "router input length " + std::to_string(z.size()) +
                                               " does not match router " + router.shape());
  Vector logits(router.cols(), 0.0);
  for (std::size_t i = 0; i < router.rows(); ++i)
    for (std::size_t j = 0; j < router.cols(); ++j) logits[j] += router(i, j) * z[i];
  mac_counter() += static_cast<std::uint64_t>(router.rows()) * router.cols();
  return GateOutput{softmax(logits)};
}

HydraOutput hydra_forward(std::span<const double> x, const Matrix& w0, const HydraAdapter& ad) {
  check_input(x, w0, ad.in_dim(), ad.out_dim());
  Vector y = matvec(w0, x);
  const Vector z = matvec(ad.a, x);
  GateOutput gates = route(z, ad.router);
  const double s = ad.scaling();
  for (std::size_t i = 0; i < ad.experts.size(); ++i) {
    add_in_place(y, matvec(ad.experts[i], z), s * gates.weights[i]);
  }
  return HydraOutput{std::move(y), std::move(gates)};
}

Vector merge_infer(std::span<const double> x, const Matrix& w0, const HydraAdapter& ad) {
  check_input(x, w0, ad.in_dim(), ad.out_dim());
  const Vector z = matvec(ad.a, x);
  const GateOutput gates = route(z, ad.router);
  Matrix merged(ad.out_dim(), ad.rank());
  for (std::size_t i = 0; i < ad.experts.size(); ++i) {
    const double w = gates.weights[i];
    for (std::size_t j = 0; j < merged.size(); ++j) merged[j] += w * ad.experts[i][j];
  }
  Vector y = matvec(w0, x);
  add_in_place(y, matvec(merged, z), ad.scaling());
  return y;
}

Vector adapter_forward(std::span<const double> x, const Matrix& w0, const Adapter& ad) {
  if (const auto* l = std::get_if<LoraAdapter>(&ad)) return lora_forward(x, w0, *l);
  if (const auto* s = std::get_if<SplitAdapter>(&ad)) return split_forward(x, w0, *s);
  return hydra_forward(x, w0, std::get<HydraAdapter>(ad)).y;
}

Scheme parse_scheme(std::string_view name) {
  if (name == "lora") return Scheme::Lora;
  if (name == "split") return Scheme::Split;
  if (name == "hydra") return Scheme::Hydra;
  if (name == "full") return Scheme::Full;
  throw UsageError("unknown scheme '" + std::string(name) + "' (expected lora, split, hydra or full)");
}

std::string_view scheme_string(Scheme scheme) {
  switch (scheme) {
    case Scheme::Lora: return "lora";
    case Scheme::Split: return "split";
    case Scheme::Hydra: return "hydra";
    case Scheme::Full: return "full";
  }
  return "?";
}

std::uint64_t params_per_matrix(Scheme scheme, const ParamShape& s) {
  if (s.d < 1 || s.k < 1 || s.rank < 1 || s.count < 1 || s.matrices_per_layer < 1 || s.layers < 1) {
    throw UsageError("parameter counts must all be >= 1");
  }
  switch (scheme) {
    case Scheme::Lora: return s.rank * (s.d + s.k);
    case Scheme::Split: return s.count * s.rank * (s.d + s.k);
    case Scheme::Hydra: return s.rank * s.k + s.count * s.d * s.rank + s.rank * s.count;
    case Scheme::Full: return s.d * s.k;
  }
  throw UsageError("unknown scheme");
}

ParamCount param_count(Scheme scheme, const ParamShape& shape, std::uint64_t base_total) {
  if (base_total == 0) throw UsageError("base_total must be > 0");
  ParamCount out;
  out.trainable = params_per_matrix(scheme, shape) * shape.matrices_per_layer * shape.layers;
  // floor(100000 * trainable / base_total) thousandths of a percent, exactly.
  const unsigned __int128 thousandths =
      static_cast<unsigned __int128>(out.trainable) * 100000u / base_total;
  out.percent = static_cast<double>(thousandths) / 1000.0;
  out.percent_exact = 100.0 * static_cast<double>(out.trainable) / static_cast<double>(base_total);
  return out;
}

std::string format_param_count(const ParamCount& count) {
  char buf[96];
  std::snprintf(buf, sizeof buf, "%llu (%.3f%%)", static_cast<unsigned long long>(count.trainable),
                count.percent);
  return buf;
}

ad::Var apply_adapter(ad::Tape& tape, ad::Var x, ad::Var base, const Adapter& adapter,
                      std::span<const std::size_t> row_tasks, AdapterTrace* trace,
                      bool trainable) {
  validate(adapter);
  require_shape(tape.value(x).cols() == in_dim(adapter),
                "adapter input " + tape.value(x).shape() + " does not match k=" +
                    std::to_string(in_dim(adapter)));
  require_shape(tape.value(base).cols() == out_dim(adapter) &&
                    tape.value(base).rows() == tape.value(x).rows(),
                "adapter base output " + tape.value(base).shape() + " does not match d=" +
                    std::to_string(out_dim(adapter)));

  AdapterTrace local;
  AdapterTrace& tr = trace ? *trace : local;
  auto leaf = [&](const Matrix& m, const std::string& name) {
    ad::Var v = trainable ? tape.parameter(m, name) : tape.constant(m, name);
    tr.params.push_back(v);
    return v;
  };
  auto low_rank = [&](ad::Var a, ad::Var b) {
    ad::Var z = tape.matmul(x, tape.transpose(a));
    return tape.matmul(z, tape.transpose(b));
  };

  if (const auto* l = std::get_if<LoraAdapter>(&adapter)) {
    ad::Var a = leaf(l->a, "A");
    ad::Var b = leaf(l->b, "B");
    return tape.add(base, tape.scale(low_rank(a, b), l->scaling()));
  }

  if (const auto* s = std::get_if<SplitAdapter>(&adapter)) {
    std::optional<ad::Var> mask;
    if (s->routing == SplitRouting::Task) {
      const std::size_t rows = tape.value(x).rows();
      if (row_tasks.size() != rows) {
        throw ContractError("task-routed split adapter needs one task tag per row");
      }
      Matrix onehot(rows, s->heads.size());
      for (std::size_t i = 0; i < rows; ++i) {
        if (row_tasks[i] >= s->heads.size()) {
          throw ContractError("task tag " + std::to_string(row_tasks[i]) + " has no dedicated head");
        }
        onehot(i, row_tasks[i]) = 1.0;
      }
      mask = tape.constant(std::move(onehot), "task_mask");
    }
    ad::Var out = base;
    for (std::size_t i = 0; i < s->heads.size(); ++i) {
      const auto& h = s->heads[i];
      ad::Var a = leaf(h.a, "A" + std::to_string(i));
      ad::Var b = leaf(h.b, "B" + std::to_string(i));
      ad::Var delta = tape.scale(low_rank(a, b), h.scaling());
      if (mask) delta = tape.scale_rows_by_column(delta, *mask, i);
      out = tape.add(out, delta);
    }
    return out;
  }

  const auto& h = std::get<HydraAdapter>(adapter);
  ad::Var a = leaf(h.a, "A");
  std::vector<ad::Var> experts;
  for (std::size_t i = 0; i < h.experts.size(); ++i)
    experts.push_back(leaf(h.experts[i], "B" + std::to_string(i)));
  ad::Var router = leaf(h.router, "router");

  ad::Var z = tape.matmul(x, tape.transpose(a));
  ad::Var gates = tape.softmax_rows(tape.matmul(z, router));
  tr.gates = gates;
  std::optional<ad::Var> mix;
  for (std::size_t i = 0; i < experts.size(); ++i) {
    ad::Var e = tape.scale_rows_by_column(tape.matmul(z, tape.transpose(experts[i])), gates, i);
    mix = mix ? tape.add(*mix, e) : e;
  }
  return tape.add(base, tape.scale(*mix, h.scaling()));
}

}  // namespace hydra
