#include "hydra/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <set>

#include <json.hpp>

namespace hydra {

void validate_corpus(const Corpus& corpus) {
  std::set<std::string_view> seen;
  for (const auto& doc : corpus) {
    if (!seen.insert(doc.id).second) throw ContractError("duplicate document id '" + doc.id + "'");
  }
}

Corpus parse_corpus(std::istream& in) {
  Corpus corpus;
  std::map<std::string, std::size_t> first_line;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto fail = [&](const std::string& msg) -> ParseError {
      return ParseError("corpus line " + std::to_string(lineno) + ": " + msg, lineno);
    };
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw fail(std::string("invalid JSON (") + e.what() + ")");
    }
    if (!j.is_object()) throw fail("expected a JSON object");
    Document doc;
    auto str_field = [&](const char* key, bool required) -> std::optional<std::string> {
      auto it = j.find(key);
      if (it == j.end() || it->is_null()) {
        if (required) throw fail(std::string("missing field \"") + key + "\"");
        return std::nullopt;
      }
      if (!it->is_string()) throw fail(std::string("field \"") + key + "\" must be a string");
      return it->get<std::string>();
    };
    doc.id = *str_field("id", true);
    doc.text = *str_field("text", true);
    doc.task = str_field("task", false);
    if (auto [it, fresh] = first_line.emplace(doc.id, lineno); !fresh) {
      throw fail("duplicate id '" + doc.id + "' (first seen on line " + std::to_string(it->second) + ")");
    }
    corpus.push_back(std::move(doc));
  }
  return corpus;
}

Corpus read_corpus(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open corpus file '" + path.string() + "'");
  return parse_corpus(in);
}

void write_corpus(std::ostream& out, const Corpus& corpus) {
  for (const auto& doc : corpus) {
    nlohmann::ordered_json j;
    j["id"] = doc.id;
    j["text"] = doc.text;
    if (doc.task) j["task"] = *doc.task;
    out << j.dump() << '\n';
  }
}

void write_corpus(const std::filesystem::path& path, const Corpus& corpus) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write corpus file '" + path.string() + "'");
  write_corpus(out, corpus);
}

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (c >= 0x80 || (c >= '0' && c <= '9') || (c >= 'a' && c <= 'z')) {
      cur.push_back(ch);
    } else if (c >= 'A' && c <= 'Z') {
      cur.push_back(static_cast<char>(c - 'A' + 'a'));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

std::optional<std::size_t> TfIdfModel::column(std::string_view term) const {
  auto it = std::lower_bound(terms_.begin(), terms_.end(), term);
  if (it == terms_.end() || *it != term) return std::nullopt;
  return static_cast<std::size_t>(it - terms_.begin());
}

std::optional<double> TfIdfModel::idf_of(std::string_view term) const {
  if (auto c = column(term)) return idf_[*c];
  return std::nullopt;
}

TfIdfModel tfidf_fit(const Corpus& corpus) {
  if (corpus.empty()) throw UsageError("cannot fit TF-IDF on an empty corpus");
  std::map<std::string, std::size_t> df;
  for (const auto& doc : corpus) {
    auto toks = tokenize(doc.text);
    std::sort(toks.begin(), toks.end());
    toks.erase(std::unique(toks.begin(), toks.end()), toks.end());
    for (auto& t : toks) ++df[std::move(t)];
  }
  TfIdfModel m;
  m.doc_count_ = corpus.size();
  const double d = static_cast<double>(corpus.size());
  for (const auto& [term, count] : df) {
    m.terms_.push_back(term);
    m.idf_.push_back(std::log((1.0 + d) / (1.0 + static_cast<double>(count))) + 1.0);
  }
  return m;
}

Vector tfidf_transform(const TfIdfModel& model, std::string_view text) {
  Vector v(model.dimension(), 0.0);
  for (const auto& t : tokenize(text)) {
    if (auto c = model.column(t)) v[*c] += 1.0;
  }
  double norm = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    v[i] *= model.idf()[i];
    norm += v[i] * v[i];
  }
  if (norm > 0.0) {
    norm = std::sqrt(norm);
    for (auto& x : v) x /= norm;
  }
  return v;
}

std::vector<Vector> tfidf_transform(const TfIdfModel& model, const Corpus& corpus) {
  std::vector<Vector> out;
  out.reserve(corpus.size());
  for (const auto& doc : corpus) out.push_back(tfidf_transform(model, doc.text));
  return out;
}

namespace {

std::string pool_term(std::size_t pool, std::size_t index, bool common) {
  if (common) return "g" + std::to_string(index);
  return "c" + std::to_string(pool) + "t" + std::to_string(index);
}

}  // namespace

SynthCorpus synth_corpus(const SynthSpec& spec) {
  if (spec.clusters < 1 || spec.docs_per_cluster < 1 || spec.pool_size < 1 || spec.doc_length < 1) {
    throw UsageError("synthetic corpus counts must be >= 1");
  }
  if (!(spec.disjointness >= 0.0 && spec.disjointness <= 1.0)) {
    throw UsageError("disjointness must lie in [0, 1]");
  }
  SeededRng rng(spec.seed);
  std::vector<std::size_t> labels;
  for (std::size_t c = 0; c < spec.clusters; ++c) labels.insert(labels.end(), spec.docs_per_cluster, c);
  rng.shuffle(labels.begin(), labels.end());

  SynthCorpus out;
  out.labels = labels;
  const std::size_t width = std::to_string(labels.size()).size();
  for (std::size_t i = 0; i < labels.size(); ++i) {
    std::string text;
    for (std::size_t t = 0; t < spec.doc_length; ++t) {
      const bool own = rng.uniform01() < spec.disjointness;
      if (!text.empty()) text.push_back(' ');
      text += pool_term(labels[i], rng.index(spec.pool_size), !own);
    }
    std::string id = std::to_string(i);
    id.insert(0, width - id.size(), '0');
    out.corpus.push_back(Document{"doc" + id, std::move(text), std::nullopt});
  }
  return out;
}

}  // namespace hydra
