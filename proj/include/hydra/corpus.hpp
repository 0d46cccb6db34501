#pragma once

// Documents, JSONL corpus files, TF-IDF features and planted synthetic corpora.
//
// Tokens are maximal runs of ASCII alphanumerics (lowercased) or non-ASCII
// bytes, so UTF-8 words stay whole. tf is the raw count and
//   idf(t) = ln((1 + D) / (1 + df(t))) + 1
// with the vocabulary sorted lexicographically.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "hydra/errors.hpp"
#include "hydra/linalg.hpp"

namespace hydra {

struct Document {
  std::string id;
  std::string text;
  std::optional<std::string> task;

  bool operator==(const Document&) const = default;
};

using Corpus = std::vector<Document>;

// Throws ContractError on duplicate ids.
void validate_corpus(const Corpus& corpus);

// One JSON object per line: {"id": ..., "text": ..., "task": ...}. Blank lines
// are skipped and unknown fields ignored. ParseError::position() is the
// 1-based line number.
Corpus parse_corpus(std::istream& in);
Corpus read_corpus(const std::filesystem::path& path);
void write_corpus(std::ostream& out, const Corpus& corpus);
void write_corpus(const std::filesystem::path& path, const Corpus& corpus);

std::vector<std::string> tokenize(std::string_view text);

class TfIdfModel {
 public:
  const std::vector<std::string>& vocabulary() const { return terms_; }
  const Vector& idf() const { return idf_; }
  std::size_t doc_count() const { return doc_count_; }
  std::size_t dimension() const { return terms_.size(); }

  std::optional<std::size_t> column(std::string_view term) const;
  // idf of a fitted term; nullopt when out of vocabulary.
  std::optional<double> idf_of(std::string_view term) const;

  bool operator==(const TfIdfModel&) const = default;

 private:
  friend TfIdfModel tfidf_fit(const Corpus& corpus);
  std::vector<std::string> terms_;
  Vector idf_;
  std::size_t doc_count_ = 0;
};

// Throws UsageError on an empty corpus.
TfIdfModel tfidf_fit(const Corpus& corpus);
// L2-normalized tf-idf over the fitted vocabulary; zero vector when nothing
// in `text` is in vocabulary.
Vector tfidf_transform(const TfIdfModel& model, std::string_view text);
std::vector<Vector> tfidf_transform(const TfIdfModel& model, const Corpus& corpus);

struct SynthSpec {
  std::size_t clusters = 3;
  std::size_t docs_per_cluster = 50;
  double disjointness = 0.8;  // chance a token comes from the cluster's own pool
  std::uint64_t seed = 0;
  std::size_t pool_size = 20;   // terms per cluster pool and in the common pool
  std::size_t doc_length = 30;  // tokens per document
};

struct SynthCorpus {
  Corpus corpus;
  std::vector<std::size_t> labels;  // planted component per document
};

// Documents are shuffled and carry no task tag; labels stay on the side.
SynthCorpus synth_corpus(const SynthSpec& spec);

}  // namespace hydra
