#include "doctest.h"

#include <cmath>
#include <set>
#include <sstream>

#include "hydra/corpus.hpp"

using namespace hydra;

namespace {

Corpus docs(std::initializer_list<const char*> texts) {
  Corpus c;
  for (auto t : texts) c.push_back({"d" + std::to_string(c.size()), t, std::nullopt});
  return c;
}

double norm(const Vector& v) {
  double s = 0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

}  // namespace

TEST_CASE("tokenize lowercases and splits on non-alphanumerics") {
  CHECK(tokenize("Hello, World!  x2-y") == std::vector<std::string>{"hello", "world", "x2", "y"});
  CHECK(tokenize("").empty());
  CHECK(tokenize("caf\xc3\xa9 bar") == std::vector<std::string>{"caf\xc3\xa9", "bar"});
}

TEST_CASE("smooth idf on a two-document corpus") {
  const auto m = tfidf_fit(docs({"a b", "a c"}));
  CHECK(m.vocabulary() == std::vector<std::string>{"a", "b", "c"});
  CHECK(*m.idf_of("a") == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(*m.idf_of("b") == doctest::Approx(std::log(1.5) + 1.0).epsilon(1e-15));
  CHECK(*m.idf_of("c") == doctest::Approx(1.405465).epsilon(1e-6));
  CHECK_FALSE(m.idf_of("z"));
  CHECK(m.doc_count() == 2);

  const auto v = tfidf_transform(m, "a b");
  const double b = std::log(1.5) + 1.0;
  const double n = std::sqrt(1.0 + b * b);
  CHECK(v[0] == doctest::Approx(1.0 / n));
  CHECK(v[1] == doctest::Approx(b / n));
  CHECK(v[2] == 0.0);
  CHECK(v[0] == doctest::Approx(0.580).epsilon(1e-3));
  CHECK(v[1] == doctest::Approx(0.815).epsilon(1e-3));
}

TEST_CASE("repeated document gives idf one everywhere") {
  const auto m = tfidf_fit(docs({"x y z", "z y x", "x y z"}));
  for (double w : m.idf()) CHECK(w == 1.0);
}

TEST_CASE("empty corpus and empty documents") {
  CHECK_THROWS_AS(tfidf_fit(Corpus{}), UsageError);
  const auto m = tfidf_fit(docs({"a b", "a c"}));
  CHECK(tfidf_transform(m, "") == Vector{0, 0, 0});
  CHECK(tfidf_transform(m, "zz qq") == Vector{0, 0, 0});
}

TEST_CASE("transform norms are one or zero") {
  const auto s = synth_corpus({3, 20, 0.6, 11});
  const auto m = tfidf_fit(s.corpus);
  for (const auto& v : tfidf_transform(m, s.corpus)) CHECK(std::abs(norm(v) - 1.0) <= 1e-12);
}

TEST_CASE("fit is order-insensitive") {
  auto s = synth_corpus({3, 10, 0.5, 2});
  const auto a = tfidf_fit(s.corpus);
  SeededRng rng(1);
  for (int t = 0; t < 5; ++t) {
    rng.shuffle(s.corpus.begin(), s.corpus.end());
    CHECK(tfidf_fit(s.corpus) == a);
  }
}

TEST_CASE("idf never rises with document frequency") {
  // t_i appears in exactly i of 8 documents.
  Corpus c;
  for (int d = 0; d < 8; ++d) {
    std::string text;
    for (int i = 1; i <= 8; ++i)
      if (d < i) text += "t" + std::to_string(i) + " ";
    c.push_back({std::to_string(d), text, std::nullopt});
  }
  const auto m = tfidf_fit(c);
  for (int i = 1; i < 8; ++i)
    CHECK(*m.idf_of("t" + std::to_string(i + 1)) <= *m.idf_of("t" + std::to_string(i)));
}

TEST_CASE("synthetic corpus contract") {
  const auto s = synth_corpus({3, 50, 0.8, 7});
  CHECK(s.corpus.size() == 150);
  CHECK(std::set<std::size_t>(s.labels.begin(), s.labels.end()).size() == 3);
  CHECK_NOTHROW(validate_corpus(s.corpus));
  CHECK(synth_corpus({3, 50, 0.8, 7}).corpus == s.corpus);
  CHECK(synth_corpus({3, 50, 0.8, 8}).corpus != s.corpus);

  // Disjointness zero: a single shared pool.
  const auto flat = synth_corpus({3, 10, 0.0, 7});
  for (const auto& d : flat.corpus)
    for (const auto& t : tokenize(d.text)) CHECK(t[0] == 'g');
  CHECK_THROWS_AS(synth_corpus({0, 10, 0.5, 1}), UsageError);
  CHECK_THROWS_AS(synth_corpus({2, 10, 1.5, 1}), UsageError);
}

TEST_CASE("jsonl round trip and errors name the line") {
  Corpus c = docs({"alpha \"quoted\"", "beta\nnewline"});
  c[1].task = "t1";
  std::stringstream ss;
  write_corpus(ss, c);
  CHECK(parse_corpus(ss) == c);

  std::istringstream extra("{\"id\":\"x\",\"text\":\"y\",\"score\":3}\n\n");
  CHECK(parse_corpus(extra).size() == 1);

  auto error_line = [](const std::string& text) -> std::size_t {
    std::istringstream in(text);
    try {
      parse_corpus(in);
    } catch (const ParseError& e) {
      CHECK(std::string(e.what()).find("line " + std::to_string(e.position())) != std::string::npos);
      return e.position();
    }
    return 0;
  };
  CHECK(error_line("{\"id\":\"a\",\"text\":\"\"}\n{oops\n") == 2);
  CHECK(error_line("{\"id\":\"a\"}\n") == 1);
  CHECK(error_line("{\"id\":\"a\",\"text\":\"\"}\n\n{\"id\":\"a\",\"text\":\"b\"}\n") == 3);
  CHECK(error_line("[1,2]\n") == 1);
  CHECK(error_line("{\"id\":3,\"text\":\"\"}\n") == 1);
}
