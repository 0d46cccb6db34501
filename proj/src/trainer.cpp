#include "hydra/trainer.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <ostream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace hydra {

namespace {

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <class T>
T parse_number(std::string_view text, const std::string& what) {
  T v{};
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || ptr != text.data() + text.size()) {
    throw UsageError(what + ": '" + std::string(text) + "' is not a valid number");
  }
  return v;
}

bool parse_bool(std::string_view text, const std::string& what) {
  if (text == "true" || text == "1" || text == "yes") return true;
  if (text == "false" || text == "0" || text == "no") return false;
  throw UsageError(what + ": expected true or false, got '" + std::string(text) + "'");
}

std::vector<std::string> split_list(std::string_view text, char sep) {
  std::vector<std::string> out;
  while (true) {
    const auto pos = text.find(sep);
    auto item = trim(text.substr(0, pos));
    if (!item.empty()) out.emplace_back(item);
    if (pos == std::string_view::npos) break;
    text.remove_prefix(pos + 1);
  }
  return out;
}

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

class Optimizer {
 public:
  Optimizer(const TrainConfig& cfg, const std::vector<std::pair<std::string, Matrix*>>& params)
      : kind_(cfg.optimizer), lr_(cfg.learning_rate) {
    if (kind_ == OptimizerKind::Adam) {
      for (const auto& [name, m] : params) {
        m_.emplace_back(m->rows(), m->cols());
        v_.emplace_back(m->rows(), m->cols());
      }
    }
  }

  void begin_step() { ++t_; }

  void update(std::size_t i, Matrix& p, const Matrix& g) {
    if (kind_ == OptimizerKind::Sgd) {
      add_in_place(p, g, -lr_);
      return;
    }
    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    auto pd = p.data();
    auto gd = g.data();
    auto md = m_[i].data();
    auto vd = v_[i].data();
    for (std::size_t j = 0; j < pd.size(); ++j) {
      md[j] = b1 * md[j] + (1.0 - b1) * gd[j];
      vd[j] = b2 * vd[j] + (1.0 - b2) * gd[j] * gd[j];
      pd[j] -= lr_ * (md[j] / c1) / (std::sqrt(vd[j] / c2) + eps);
    }
  }

 private:
  OptimizerKind kind_;
  double lr_;
  std::size_t t_ = 0;
  std::vector<Matrix> m_, v_;
};

// Cycles through shuffled epochs of the training rows.
class Sampler {
 public:
  Sampler(std::size_t n, std::size_t batch, std::uint64_t seed) : rng_(seed), order_(n), batch_(batch) {
    for (std::size_t i = 0; i < n; ++i) order_[i] = i;
    pos_ = n;
  }

  std::vector<std::size_t> next() {
    if (batch_ >= order_.size()) return order_;
    std::vector<std::size_t> out;
    while (out.size() < batch_) {
      if (pos_ == order_.size()) {
        rng_.shuffle(order_.begin(), order_.end());
        pos_ = 0;
      }
      out.push_back(order_[pos_++]);
    }
    return out;
  }

 private:
  SeededRng rng_;
  std::vector<std::size_t> order_;
  std::size_t batch_;
  std::size_t pos_;
};

}  // namespace

void TrainConfig::validate() const {
  if (steps < 1) throw UsageError("steps must be >= 1");
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
    throw UsageError("learning_rate must be a finite value >= 0");
  }
  if (batch_size < 1) throw UsageError("batch_size must be >= 1");
  if (eval_interval < 1) throw UsageError("eval_interval must be >= 1");
  if (d_model < 1) throw UsageError("d_model must be >= 1");
  if (alpha && !(*alpha > 0.0)) throw UsageError("alpha must be > 0");
  if (scheme == Scheme::Full) return;
  if (rank < 1 || rank > d_model) {
    throw UsageError("rank " + std::to_string(rank) + " is invalid for d_model " + std::to_string(d_model) +
                     " (need 1 <= rank <= d_model)");
  }
  if (experts < 1) throw UsageError("experts must be >= 1");
  if (scheme == Scheme::Lora && experts != 1) {
    throw UsageError("scheme lora takes no experts (got " + std::to_string(experts) + "); use split or hydra");
  }
  if (target.empty()) throw UsageError("target lists no projections");
}

TrainConfig parse_train_config(std::istream& in) {
  TrainConfig cfg;
  std::string line;
  std::size_t lineno = 0;
  std::set<std::string> seen;
  while (std::getline(in, line)) {
    ++lineno;
    std::string_view text = line;
    if (auto hash = text.find('#'); hash != std::string_view::npos) text = text.substr(0, hash);
    text = trim(text);
    if (text.empty()) continue;
    const auto eq = text.find('=');
    const std::string where = "config line " + std::to_string(lineno);
    if (eq == std::string_view::npos) throw UsageError(where + ": expected key = value");
    const std::string key(trim(text.substr(0, eq)));
    const auto value = trim(text.substr(eq + 1));
    const std::string what = where + " (" + key + ")";
    if (!seen.insert(key).second) throw UsageError(where + ": duplicate key '" + key + "'");
    if (key == "scheme") {
      cfg.scheme = parse_scheme(value);
    } else if (key == "rank") {
      cfg.rank = parse_number<std::size_t>(value, what);
    } else if (key == "experts") {
      cfg.experts = parse_number<std::size_t>(value, what);
    } else if (key == "alpha") {
      cfg.alpha = parse_number<double>(value, what);
    } else if (key == "learning_rate") {
      cfg.learning_rate = parse_number<double>(value, what);
    } else if (key == "steps") {
      cfg.steps = parse_number<std::size_t>(value, what);
    } else if (key == "batch_size") {
      cfg.batch_size = parse_number<std::size_t>(value, what);
    } else if (key == "seed") {
      cfg.seed = parse_number<std::uint64_t>(value, what);
    } else if (key == "optimizer") {
      if (value == "sgd") {
        cfg.optimizer = OptimizerKind::Sgd;
      } else if (value == "adam") {
        cfg.optimizer = OptimizerKind::Adam;
      } else {
        throw UsageError(what + ": optimizer must be sgd or adam");
      }
    } else if (key == "data") {
      cfg.data = value;
    } else if (key == "eval_interval") {
      cfg.eval_interval = parse_number<std::size_t>(value, what);
    } else if (key == "train_head") {
      cfg.train_head = parse_bool(value, what);
    } else if (key == "d_model") {
      cfg.d_model = parse_number<std::size_t>(value, what);
    } else if (key == "experts_from") {
      cfg.experts_from = value;
    } else if (key == "target") {
      cfg.target = split_list(value, ',');
    } else {
      throw UsageError(where + ": unknown key '" + key + "'");
    }
  }
  return cfg;
}

TrainConfig load_train_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file '" + path.string() + "'");
  return parse_train_config(in);
}

NonFiniteLossError::NonFiniteLossError(std::size_t step, double loss)
    : std::runtime_error("training loss became " + format_double(loss) + " at step " + std::to_string(step)),
      step_(step) {}

void configure_model(ToyModel& model, const TrainConfig& cfg, SeededRng& rng) {
  cfg.validate();
  if (cfg.scheme == Scheme::Full) {
    model.set_full_finetune(true);
    return;
  }
  AdapterConfig ac;
  ac.scheme = cfg.scheme;
  ac.rank = cfg.rank;
  ac.count = cfg.experts;
  ac.alpha = cfg.alpha;
  for (const auto& t : cfg.target) model.attach(t, ac, rng);
}

void restore_checkpoint(ToyModel& model, const Checkpoint& ckpt) {
  for (const auto& [name, adapter] : ckpt.adapters) model.attach(name, adapter);
  for (const auto& [name, m] : ckpt.tensors) {
    Matrix* dst = model.tensor(name);
    if (dst == nullptr || !dst->same_shape(m)) {
      throw std::runtime_error("checkpoint tensor '" + name + "' (" + m.shape() + ") does not fit the model");
    }
    *dst = m;
  }
}

TrainResult train(ToyModel& model, const Batch& train_set, const Batch& eval_set, const TrainConfig& cfg) {
  cfg.validate();
  validate_batch(train_set, model.config());
  validate_batch(eval_set, model.config());
  model.set_head_trainable(cfg.train_head);

  TrainResult result;
  auto& rep = result.report;
  rep.scheme = std::string(scheme_string(cfg.scheme));
  rep.seed = cfg.seed;
  rep.steps = cfg.steps;
  rep.adapter_params = model.full_finetune() ? model.base_param_count() : model.adapter_param_count();
  rep.head_params = cfg.train_head ? model.head_param_count() : 0;

  auto record = [&](std::size_t step) {
    const auto r = model.forward(eval_set);
    rep.curve.push_back({step, r.loss, r.accuracy, r.gate_usage});
  };

  const auto tensors = model.trainable_tensors();
  Optimizer opt(cfg, tensors);
  Sampler sampler(train_set.size(), cfg.batch_size, SeededRng(cfg.seed).fork());
  std::uint64_t macs = 0;

  record(0);
  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    const auto rows = sampler.next();
    const Batch batch = train_set.select(rows);
    const auto before = mac_counter();
    ad::Tape tape;
    const auto g = model.build(tape, batch);
    const double loss = tape.scalar(g.loss);
    if (!std::isfinite(loss)) throw NonFiniteLossError(step, loss);
    const auto grads = tape.backward(g.loss);
    macs += mac_counter() - before;
    opt.begin_step();
    for (std::size_t i = 0; i < tensors.size(); ++i) {
      opt.update(i, *tensors[i].second, grads[g.params[i].second]);
    }
    if (step % cfg.eval_interval == 0 || step == cfg.steps) record(step);
  }

  rep.initial_loss = rep.curve.front().loss;
  rep.final_loss = rep.curve.back().loss;
  rep.final_accuracy = rep.curve.back().accuracy;
  rep.gate_usage = rep.curve.back().gates;
  rep.flops = 2 * macs;

  auto& ck = result.checkpoint;
  ck.seed = cfg.seed;
  ck.meta["scheme"] = rep.scheme;
  ck.meta["rank"] = std::to_string(cfg.rank);
  ck.meta["experts"] = std::to_string(cfg.experts);
  ck.meta["steps"] = std::to_string(cfg.steps);
  char fp[17];
  std::snprintf(fp, sizeof fp, "%016llx", static_cast<unsigned long long>(model.base_fingerprint()));
  ck.meta["base_fingerprint"] = fp;
  for (const auto& name : model.attachment_names()) ck.adapters.emplace_back(name, model.adapter(name));
  if (model.full_finetune()) {
    for (const auto& [name, m] : model.base_tensors()) ck.tensors.emplace_back(name, *m);
  }
  if (cfg.train_head) {
    for (const auto& [name, m] : model.head_tensors()) ck.tensors.emplace_back(name, *m);
  }
  return result;
}

// ---------------------------------------------------------------------------

namespace {

std::size_t lookup(const std::vector<std::string>& vocab, std::string_view tok) {
  auto it = std::lower_bound(vocab.begin() + 1, vocab.end(), tok);
  if (it == vocab.end() || *it != tok) return 0;
  return static_cast<std::size_t>(it - vocab.begin());
}

}  // namespace

Batch encode_documents(const TextDataset& ds, const Corpus& corpus) {
  Batch b;
  for (const auto& doc : corpus) {
    if (!doc.task) throw std::runtime_error("document '" + doc.id + "' has no task label");
    auto it = std::lower_bound(ds.classes.begin(), ds.classes.end(), *doc.task);
    if (it == ds.classes.end() || *it != *doc.task) {
      throw std::runtime_error("document '" + doc.id + "' has unknown task '" + *doc.task + "'");
    }
    std::vector<std::size_t> seq;
    for (const auto& t : tokenize(doc.text)) seq.push_back(lookup(ds.vocabulary, t));
    if (seq.empty()) seq.push_back(0);
    b.tokens.push_back(std::move(seq));
    b.labels.push_back(static_cast<std::size_t>(it - ds.classes.begin()));
  }
  return b;
}

TextDataset make_text_dataset(const Corpus& corpus) {
  if (corpus.empty()) throw std::runtime_error("training corpus is empty");
  TextDataset ds;
  std::set<std::string> words, tasks;
  for (const auto& doc : corpus) {
    for (auto& t : tokenize(doc.text)) words.insert(std::move(t));
    if (!doc.task) throw std::runtime_error("document '" + doc.id + "' has no task label");
    tasks.insert(*doc.task);
  }
  if (tasks.size() < 2) throw std::runtime_error("training corpus needs at least 2 distinct task labels");
  ds.vocabulary.push_back("<unk>");
  ds.vocabulary.insert(ds.vocabulary.end(), words.begin(), words.end());
  ds.classes.assign(tasks.begin(), tasks.end());

  Corpus train_docs, eval_docs;
  for (std::size_t i = 0; i < corpus.size(); ++i) (i % 5 == 4 ? eval_docs : train_docs).push_back(corpus[i]);
  if (eval_docs.empty()) eval_docs = train_docs;
  ds.train = encode_documents(ds, train_docs);
  ds.eval = encode_documents(ds, eval_docs);
  return ds;
}

namespace {

Corpus synthetic_training_corpus(std::string_view spec) {
  SynthSpec s;
  for (const auto& item : split_list(spec, ',')) {
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw UsageError("synthetic data spec: expected key=value, got '" + item + "'");
    const auto key = item.substr(0, eq);
    const std::string_view value = std::string_view(item).substr(eq + 1);
    const std::string what = "synthetic data spec (" + key + ")";
    if (key == "clusters") {
      s.clusters = parse_number<std::size_t>(value, what);
    } else if (key == "docs") {
      s.docs_per_cluster = parse_number<std::size_t>(value, what);
    } else if (key == "disjointness") {
      s.disjointness = parse_number<double>(value, what);
    } else if (key == "seed") {
      s.seed = parse_number<std::uint64_t>(value, what);
    } else if (key == "pool") {
      s.pool_size = parse_number<std::size_t>(value, what);
    } else if (key == "length") {
      s.doc_length = parse_number<std::size_t>(value, what);
    } else {
      throw UsageError("synthetic data spec: unknown key '" + key + "'");
    }
  }
  auto out = synth_corpus(s);
  for (std::size_t i = 0; i < out.corpus.size(); ++i) out.corpus[i].task = "c" + std::to_string(out.labels[i]);
  return std::move(out.corpus);
}

}  // namespace

PreparedRun prepare_run(const TrainConfig& input, const std::filesystem::path& base_dir) {
  TrainConfig cfg = input;
  auto resolve = [&](const std::string& p) {
    std::filesystem::path path(p);
    return path.is_relative() && !base_dir.empty() ? base_dir / path : path;
  };
  if (!cfg.experts_from.empty()) {
    const auto path = resolve(cfg.experts_from);
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open cluster file '" + path.string() + "'");
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
      throw std::runtime_error("cluster file '" + path.string() + "': " + e.what());
    }
    if (!j.contains("k_selected") || !j["k_selected"].is_number_unsigned()) {
      throw std::runtime_error("cluster file '" + path.string() + "' has no k_selected");
    }
    cfg.experts = j["k_selected"].get<std::size_t>();
  }
  cfg.validate();
  if (cfg.data.empty()) throw UsageError("config has no data entry");

  Corpus corpus;
  constexpr std::string_view synth = "synth:";
  if (cfg.data.rfind(synth, 0) == 0) {
    corpus = synthetic_training_corpus(std::string_view(cfg.data).substr(synth.size()));
  } else {
    corpus = read_corpus(resolve(cfg.data));
  }
  TextDataset data = make_text_dataset(corpus);

  ModelConfig mc;
  mc.input = InputKind::Tokens;
  mc.loss = LossKind::CrossEntropy;
  mc.d_model = cfg.d_model;
  mc.vocab = data.vocabulary.size();
  mc.classes = data.classes.size();
  SeededRng rng(cfg.seed);
  ToyModel model = ToyModel::create(mc, rng);
  configure_model(model, cfg, rng);
  return PreparedRun{std::move(cfg), std::move(data), std::move(model)};
}

void write_report_csv(std::ostream& out, const TrainReport& report) {
  const std::size_t n = report.gate_usage.size();
  out << "step,loss,acc";
  for (std::size_t i = 0; i < n; ++i) out << ",gate_" << i;
  out << '\n';
  for (const auto& p : report.curve) {
    out << p.step << ',' << format_double(p.loss) << ',' << format_double(p.accuracy);
    for (std::size_t i = 0; i < n; ++i) out << ',' << format_double(i < p.gates.size() ? p.gates[i] : 0.0);
    out << '\n';
  }
}

std::string report_json(const TrainReport& report) {
  nlohmann::ordered_json j;
  j["scheme"] = report.scheme;
  j["seed"] = report.seed;
  j["steps"] = report.steps;
  j["initial_loss"] = report.initial_loss;
  j["final_loss"] = report.final_loss;
  j["final_accuracy"] = report.final_accuracy;
  j["trainable_params"] = report.adapter_params;
  j["head_params"] = report.head_params;
  j["gate_usage"] = report.gate_usage;
  j["flops"] = report.flops;
  return j.dump(2) + "\n";
}

}  // namespace hydra
