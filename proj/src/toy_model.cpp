#include "hydra/toy_model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>

namespace hydra {

namespace {

constexpr std::uint64_t kFnvOffset = 1469598103934665603ULL;
constexpr std::uint64_t kFnvPrime = 1099511628211ULL;

void fnv_mix(std::uint64_t& h, const Matrix& m) {
  for (double v : m.data()) {
    auto bits = std::bit_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) {
      h ^= (bits >> (8 * i)) & 0xffu;
      h *= kFnvPrime;
    }
  }
}

struct Projection {
  std::optional<std::size_t> block;  // nullopt: every block
  bool query = false;
};

Projection parse_projection(std::string_view name, std::size_t blocks) {
  Projection p;
  std::string_view tail = name;
  if (const auto dot = name.find('.'); dot != std::string_view::npos) {
    const auto head = name.substr(0, dot);
    std::size_t b = 0;
    if (head.empty()) throw UsageError("unknown projection '" + std::string(name) + "'");
    for (char c : head) {
      if (c < '0' || c > '9') throw UsageError("unknown projection '" + std::string(name) + "'");
      b = b * 10 + static_cast<std::size_t>(c - '0');
    }
    if (b >= blocks) {
      throw UsageError("projection '" + std::string(name) + "' names block " + std::to_string(b) +
                       " but the model has " + std::to_string(blocks));
    }
    p.block = b;
    tail = name.substr(dot + 1);
  }
  if (tail == "q_proj") {
    p.query = true;
  } else if (tail == "v_proj") {
    p.query = false;
  } else {
    throw UsageError("unknown projection '" + std::string(name) +
                     "' (adaptable projections: q_proj, v_proj)");
  }
  return p;
}

}  // namespace

void ModelConfig::validate() const {
  if (d_model < 1) throw UsageError("d_model must be >= 1");
  if (blocks < 1 || blocks > 2) throw UsageError("blocks must be 1 or 2");
  if (input == InputKind::Tokens && vocab < 1) throw UsageError("token models need vocab >= 1");
  if (loss == LossKind::CrossEntropy && classes < 2) throw UsageError("classifiers need >= 2 classes");
  if (mlp && mlp_hidden < 1) throw UsageError("mlp_hidden must be >= 1");
}

std::size_t Batch::size() const {
  if (!labels.empty()) return labels.size();
  if (!tokens.empty()) return tokens.size();
  return features.rows();
}

Batch Batch::select(std::span<const std::size_t> rows) const {
  Batch out;
  if (!features.empty()) {
    out.features = Matrix(rows.size(), features.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      auto src = features.row(rows[i]);
      std::copy(src.begin(), src.end(), out.features.row(i).begin());
    }
  }
  if (!targets.empty()) {
    out.targets = Matrix(rows.size(), targets.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      auto src = targets.row(rows[i]);
      std::copy(src.begin(), src.end(), out.targets.row(i).begin());
    }
  }
  for (auto r : rows) {
    if (!tokens.empty()) out.tokens.push_back(tokens[r]);
    if (!labels.empty()) out.labels.push_back(labels[r]);
    if (!tasks.empty()) out.tasks.push_back(tasks[r]);
  }
  return out;
}

void validate_batch(const Batch& batch, const ModelConfig& cfg) {
  const std::size_t n = batch.size();
  if (n == 0) throw ContractError("batch is empty");
  if (cfg.input == InputKind::Dense) {
    if (batch.features.empty() || batch.features.cols() != cfg.d_model) {
      throw ShapeError("dense batch features must be rows x " + std::to_string(cfg.d_model));
    }
    if (batch.features.rows() != n) throw ShapeError("feature rows do not match batch size");
  } else {
    if (batch.tokens.size() != n) throw ShapeError("token batch size mismatch");
    for (const auto& seq : batch.tokens) {
      if (seq.empty()) throw ContractError("token sequences must be nonempty");
      for (auto t : seq) {
        if (t >= cfg.vocab) {
          throw ContractError("token " + std::to_string(t) + " outside vocabulary of " +
                              std::to_string(cfg.vocab));
        }
      }
    }
  }
  if (cfg.loss == LossKind::CrossEntropy) {
    if (batch.labels.size() != n) throw ContractError("classification batch needs one label per example");
    for (auto y : batch.labels) {
      if (y >= cfg.classes) {
        throw ContractError("label " + std::to_string(y) + " out of range for " +
                            std::to_string(cfg.classes) + " classes");
      }
    }
  } else {
    if (batch.targets.rows() != n || batch.targets.cols() != cfg.d_model) {
      throw ShapeError("regression targets must be " + std::to_string(n) + " x " +
                       std::to_string(cfg.d_model));
    }
  }
  if (!batch.tasks.empty() && batch.tasks.size() != n) {
    throw ContractError("task tags must be absent or one per example");
  }
}

Adapter make_adapter(const AdapterConfig& cfg, std::size_t d, std::size_t k, SeededRng& rng) {
  switch (cfg.scheme) {
    case Scheme::Lora:
      return LoraAdapter::create(d, k, cfg.rank, rng, cfg.alpha);
    case Scheme::Split:
      return SplitAdapter::create(d, k, cfg.rank, cfg.count, rng, cfg.alpha, cfg.routing);
    case Scheme::Hydra:
      return HydraAdapter::create(d, k, cfg.rank, cfg.count, rng, cfg.alpha);
    case Scheme::Full:
      break;
  }
  throw UsageError("scheme 'full' has no adapter");
}

ToyModel ToyModel::create(const ModelConfig& cfg, SeededRng& rng) {
  cfg.validate();
  ToyModel m;
  m.cfg_ = cfg;
  const std::size_t d = cfg.d_model;
  if (cfg.input == InputKind::Tokens) m.embedding_ = gaussian(cfg.vocab, d, rng);
  for (std::size_t b = 0; b < cfg.blocks; ++b) {
    AttentionBlock blk;
    blk.wq = kaiming_uniform(d, d, rng);
    blk.wk = kaiming_uniform(d, d, rng);
    blk.wv = scale(kaiming_uniform(d, d, rng), 0.5);
    if (cfg.mlp) {
      blk.fc1 = kaiming_uniform(cfg.mlp_hidden, d, rng);
      blk.fc2 = scale(kaiming_uniform(d, cfg.mlp_hidden, rng), 0.5);
    }
    m.blocks_.push_back(std::move(blk));
  }
  if (cfg.loss == LossKind::CrossEntropy) m.reset_head(rng);
  return m;
}

void ToyModel::reset_head(SeededRng& rng) {
  if (cfg_.loss != LossKind::CrossEntropy) return;
  head_w_ = kaiming_uniform(cfg_.classes, cfg_.d_model, rng);
  head_b_ = Matrix(1, cfg_.classes);
}

void ToyModel::attach(std::string_view projection, const AdapterConfig& cfg, SeededRng& rng) {
  const auto p = parse_projection(projection, blocks_.size());
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    if (p.block && *p.block != b) continue;
    auto& slot = p.query ? blocks_[b].q_adapter : blocks_[b].v_adapter;
    slot = make_adapter(cfg, cfg_.d_model, cfg_.d_model, rng);
  }
}

void ToyModel::attach(std::string_view projection, const Adapter& adapter) {
  const auto p = parse_projection(projection, blocks_.size());
  validate(adapter);
  if (in_dim(adapter) != cfg_.d_model || out_dim(adapter) != cfg_.d_model) {
    throw ShapeError("adapter dimensions do not match projection " +
                     Matrix::shape_string(cfg_.d_model, cfg_.d_model));
  }
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    if (p.block && *p.block != b) continue;
    (p.query ? blocks_[b].q_adapter : blocks_[b].v_adapter) = adapter;
  }
}

void ToyModel::detach_all() {
  for (auto& b : blocks_) {
    b.q_adapter.reset();
    b.v_adapter.reset();
  }
}

std::vector<std::string> ToyModel::attachment_names() const {
  std::vector<std::string> out;
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    if (blocks_[b].q_adapter) out.push_back(std::to_string(b) + ".q_proj");
    if (blocks_[b].v_adapter) out.push_back(std::to_string(b) + ".v_proj");
  }
  return out;
}

const Adapter& ToyModel::adapter(std::string_view name) const {
  return const_cast<ToyModel*>(this)->adapter(name);
}

Adapter& ToyModel::adapter(std::string_view name) {
  const auto p = parse_projection(name, blocks_.size());
  if (!p.block) throw UsageError("adapter lookup needs a block index, e.g. 0.q_proj");
  auto& slot = p.query ? blocks_[*p.block].q_adapter : blocks_[*p.block].v_adapter;
  if (!slot) throw UsageError("no adapter attached at '" + std::string(name) + "'");
  return *slot;
}

std::size_t ToyModel::expert_count() const {
  std::size_t n = 1;
  for (const auto& b : blocks_) {
    for (const auto* slot : {&b.q_adapter, &b.v_adapter}) {
      if (*slot) {
        if (const auto* h = std::get_if<HydraAdapter>(&**slot)) n = std::max(n, h->expert_count());
      }
    }
  }
  return n;
}

std::vector<std::pair<std::string, Matrix*>> ToyModel::trainable_tensors() {
  std::vector<std::pair<std::string, Matrix*>> out;
  if (full_finetune_ && cfg_.input == InputKind::Tokens) out.emplace_back("embedding", &embedding_);
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    auto& blk = blocks_[b];
    const std::string prefix = std::to_string(b) + ".";
    if (full_finetune_) {
      out.emplace_back(prefix + "wq", &blk.wq);
      out.emplace_back(prefix + "wk", &blk.wk);
      out.emplace_back(prefix + "wv", &blk.wv);
      if (cfg_.mlp) {
        out.emplace_back(prefix + "fc1", &blk.fc1);
        out.emplace_back(prefix + "fc2", &blk.fc2);
      }
    }
    for (auto [slot, proj] : {std::pair{&blk.q_adapter, "q_proj."}, std::pair{&blk.v_adapter, "v_proj."}}) {
      if (!*slot) continue;
      auto tensors = hydra::trainable_tensors(**slot);
      auto names = named_tensors(**slot);
      for (std::size_t i = 0; i < tensors.size(); ++i)
        out.emplace_back(prefix + proj + names[i].first, tensors[i]);
    }
  }
  if (head_trainable_ && cfg_.loss == LossKind::CrossEntropy) {
    out.emplace_back("head.w", &head_w_);
    out.emplace_back("head.b", &head_b_);
  }
  return out;
}

std::vector<std::pair<std::string, const Matrix*>> ToyModel::base_tensors() const {
  std::vector<std::pair<std::string, const Matrix*>> out;
  if (cfg_.input == InputKind::Tokens) out.emplace_back("embedding", &embedding_);
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    const std::string prefix = std::to_string(b) + ".";
    out.emplace_back(prefix + "wq", &blocks_[b].wq);
    out.emplace_back(prefix + "wk", &blocks_[b].wk);
    out.emplace_back(prefix + "wv", &blocks_[b].wv);
    if (cfg_.mlp) {
      out.emplace_back(prefix + "fc1", &blocks_[b].fc1);
      out.emplace_back(prefix + "fc2", &blocks_[b].fc2);
    }
  }
  return out;
}

std::vector<std::pair<std::string, const Matrix*>> ToyModel::head_tensors() const {
  if (cfg_.loss != LossKind::CrossEntropy) return {};
  return {{"head.w", &head_w_}, {"head.b", &head_b_}};
}

Matrix* ToyModel::tensor(std::string_view name) {
  for (const auto& list : {base_tensors(), head_tensors()})
    for (const auto& [n, m] : list)
      if (n == name) return const_cast<Matrix*>(m);
  return nullptr;
}

std::uint64_t ToyModel::adapter_param_count() const {
  std::uint64_t n = 0;
  for (const auto& b : blocks_) {
    if (b.q_adapter) n += trainable_count(*b.q_adapter);
    if (b.v_adapter) n += trainable_count(*b.v_adapter);
  }
  return n;
}

std::uint64_t ToyModel::head_param_count() const {
  std::uint64_t n = 0;
  for (const auto& [name, m] : head_tensors()) n += m->size();
  return n;
}

std::uint64_t ToyModel::base_param_count() const {
  std::uint64_t n = 0;
  for (const auto& [name, m] : base_tensors()) n += m->size();
  return n;
}

std::uint64_t ToyModel::base_fingerprint() const {
  std::uint64_t h = kFnvOffset;
  for (const auto& [name, m] : base_tensors()) fnv_mix(h, *m);
  return h;
}

ForwardGraph ToyModel::build(ad::Tape& tape, const Batch& batch, bool trainable) const {
  validate_batch(batch, cfg_);
  ForwardGraph g;
  const std::size_t d = cfg_.d_model;
  const bool train_base = trainable && full_finetune_;

  auto leaf = [&](const std::string& name, const Matrix& m, bool train) {
    if (train) {
      ad::Var v = tape.parameter(m, name);
      g.params.emplace_back(name, v);
      return v;
    }
    return tape.constant(m, name);
  };

  // Sequence layout: lengths[i] rows per example in the stacked token matrix.
  std::vector<std::size_t> lengths;
  ad::Var h;
  if (cfg_.input == InputKind::Dense) {
    lengths.assign(batch.size(), 1);
    h = tape.constant(batch.features, "features");
  } else {
    std::size_t total = 0;
    for (const auto& seq : batch.tokens) {
      lengths.push_back(seq.size());
      total += seq.size();
    }
    Matrix onehot(total, cfg_.vocab);
    std::size_t row = 0;
    for (const auto& seq : batch.tokens)
      for (auto t : seq) onehot(row++, t) = 1.0;
    ad::Var emb = leaf("embedding", embedding_, train_base);
    h = tape.matmul(tape.constant(std::move(onehot), "onehot"), emb);
  }
  const bool all_single = std::all_of(lengths.begin(), lengths.end(), [](auto n) { return n == 1; });

  std::vector<std::size_t> row_tasks;
  if (!batch.tasks.empty()) {
    for (std::size_t i = 0; i < lengths.size(); ++i) row_tasks.insert(row_tasks.end(), lengths[i], batch.tasks[i]);
  }

  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    const auto& blk = blocks_[b];
    const std::string prefix = std::to_string(b) + ".";
    ad::Var wq = leaf(prefix + "wq", blk.wq, train_base);
    ad::Var wk = leaf(prefix + "wk", blk.wk, train_base);
    ad::Var wv = leaf(prefix + "wv", blk.wv, train_base);
    std::optional<ad::Var> fc1, fc2;
    if (cfg_.mlp) {
      fc1 = leaf(prefix + "fc1", blk.fc1, train_base);
      fc2 = leaf(prefix + "fc2", blk.fc2, train_base);
    }

    auto project = [&](ad::Var w, const std::optional<Adapter>& adapter, const std::string& name) {
      ad::Var base = tape.matmul(h, tape.transpose(w));
      if (!adapter) return base;
      AdapterTrace trace;
      ad::Var out = apply_adapter(tape, h, base, *adapter, row_tasks, &trace, trainable);
      if (trainable) {
        const auto names = named_tensors(*adapter);
        for (std::size_t i = 0; i < trace.params.size(); ++i)
          g.params.emplace_back(prefix + name + "." + names[i].first, trace.params[i]);
      }
      if (trace.gates) g.gates.push_back(*trace.gates);
      return out;
    };

    ad::Var q = project(wq, blk.q_adapter, "q_proj");
    ad::Var k = tape.matmul(h, tape.transpose(wk));
    ad::Var v = project(wv, blk.v_adapter, "v_proj");

    ad::Var attended;
    if (all_single) {
      attended = v;  // softmax over a single key is exactly 1
    } else {
      std::vector<ad::Var> parts;
      std::size_t offset = 0;
      for (auto len : lengths) {
        ad::Var qs = tape.slice_rows(q, offset, len);
        ad::Var ks = tape.slice_rows(k, offset, len);
        ad::Var vs = tape.slice_rows(v, offset, len);
        ad::Var probs = tape.softmax_rows(tape.scale(tape.matmul(qs, tape.transpose(ks)), inv_sqrt_d));
        g.attention.push_back(probs);
        parts.push_back(tape.matmul(probs, vs));
        offset += len;
      }
      attended = tape.concat_rows(parts);
    }
    h = tape.add(h, attended);
    if (cfg_.mlp) {
      ad::Var hidden = tape.relu(tape.matmul(h, tape.transpose(*fc1)));
      h = tape.add(h, tape.matmul(hidden, tape.transpose(*fc2)));
    }
  }

  ad::Var pooled = h;
  if (!all_single) {
    std::vector<ad::Var> rows;
    std::size_t offset = 0;
    for (auto len : lengths) {
      rows.push_back(tape.mean_rows(tape.slice_rows(h, offset, len)));
      offset += len;
    }
    pooled = tape.concat_rows(rows);
  }

  if (cfg_.loss == LossKind::CrossEntropy) {
    const bool train_head = trainable && head_trainable_;
    ad::Var hw = leaf("head.w", head_w_, train_head);
    ad::Var hb = leaf("head.b", head_b_, train_head);
    g.output = tape.add_row_vector(tape.matmul(pooled, tape.transpose(hw)), hb);
    g.loss = tape.softmax_cross_entropy(g.output, batch.labels);
  } else {
    g.output = pooled;
    g.loss = tape.mean_squared_error(pooled, tape.constant(batch.targets, "targets"));
  }
  return g;
}

ForwardResult ToyModel::forward(const Batch& batch) const {
  ad::Tape tape;
  const auto g = build(tape, batch, false);
  ForwardResult r;
  r.output = tape.value(g.output);
  r.loss = tape.scalar(g.loss);
  if (cfg_.loss == LossKind::CrossEntropy) {
    std::size_t correct = 0;
    for (std::size_t i = 0; i < r.output.rows(); ++i) {
      auto row = r.output.row(i);
      const auto pred = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
      correct += pred == batch.labels[i] ? 1 : 0;
    }
    r.accuracy = static_cast<double>(correct) / static_cast<double>(r.output.rows());
  }
  if (g.gates.empty()) {
    r.gate_usage = {1.0};
  } else {
    r.gate_usage.assign(tape.value(g.gates.front()).cols(), 0.0);
    for (auto gv : g.gates) {
      const auto& m = tape.value(gv);
      for (std::size_t i = 0; i < m.rows(); ++i)
        for (std::size_t j = 0; j < m.cols() && j < r.gate_usage.size(); ++j)
          r.gate_usage[j] += m(i, j) / static_cast<double>(m.rows() * g.gates.size());
    }
  }
  return r;
}

}  // namespace hydra
