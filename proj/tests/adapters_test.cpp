#include "doctest.h"

#include <algorithm>
#include <cmath>

#include "hydra/adapters.hpp"

using namespace hydra;

namespace {

// Dense oracle: materialize W = W0 + s * sum_i c_i B_i A_i and multiply.
Vector dense_apply(const Matrix& w, const Vector& x) {
  Vector y(w.rows(), 0.0);
  for (std::size_t i = 0; i < w.rows(); ++i)
    for (std::size_t j = 0; j < w.cols(); ++j) y[i] += w(i, j) * x[j];
  return y;
}

Matrix dense_product(const Matrix& a, const Matrix& b) {
  Matrix c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j)
      for (std::size_t p = 0; p < a.cols(); ++p) c(i, j) += a(i, p) * b(p, j);
  return c;
}

double max_abs_diff(const Vector& a, const Vector& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

Vector random_vector(std::size_t n, SeededRng& rng) {
  Vector v(n);
  for (auto& x : v) x = rng.normal();
  return v;
}

HydraAdapter random_hydra(std::size_t d, std::size_t k, std::size_t r, std::size_t n, SeededRng& rng) {
  auto h = HydraAdapter::create(d, k, r, n, rng);
  for (auto& e : h.experts) e = gaussian(d, r, rng);
  h.router = gaussian(r, n, rng);
  return h;
}

}  // namespace

TEST_CASE("lora_forward: zero-init equals the base exactly") {
  SeededRng rng(1);
  const Matrix w0 = gaussian(5, 7, rng);
  const auto ad = LoraAdapter::create(5, 7, 3, rng);
  const Vector x = random_vector(7, rng);
  CHECK(lora_forward(x, w0, ad) == matvec(w0, x));
  CHECK(ad.alpha == 3.0);
  CHECK(ad.scaling() == 1.0);
}

TEST_CASE("lora_forward: hand-set instance against the dense oracle") {
  LoraAdapter ad;
  ad.a = Matrix{{1, 0}};
  ad.b = Matrix{{1}, {0}};
  ad.alpha = 1.0;
  const Matrix w0 = Matrix::identity(2);
  const Vector x{2, 3};
  const Vector expected = dense_apply(add(w0, dense_product(ad.b, ad.a)), x);
  CHECK(expected == Vector{4, 3});
  CHECK(lora_forward(x, w0, ad) == expected);
}

TEST_CASE("lora_forward: alpha = 2r doubles the update") {
  SeededRng rng(2);
  const Matrix w0 = gaussian(4, 4, rng);
  auto ad = LoraAdapter::create(4, 4, 2, rng);
  ad.b = gaussian(4, 2, rng);
  const Vector x = random_vector(4, rng);
  const Vector base = matvec(w0, x);
  const Vector y1 = lora_forward(x, w0, ad);
  ad.alpha = 4.0;
  const Vector y2 = lora_forward(x, w0, ad);
  for (std::size_t i = 0; i < 4; ++i) CHECK(y2[i] - base[i] == doctest::Approx(2.0 * (y1[i] - base[i])));
}

TEST_CASE("adapter rank and shape contracts") {
  SeededRng rng(3);
  CHECK_THROWS_AS(LoraAdapter::create(4, 6, 5, rng), ContractError);
  CHECK_THROWS_AS(LoraAdapter::create(4, 6, 0, rng), ContractError);
  CHECK_THROWS_AS(HydraAdapter::create(4, 6, 2, 0, rng), ContractError);
  const auto ad = LoraAdapter::create(4, 6, 2, rng);
  CHECK_THROWS_AS(lora_forward(Vector(5), Matrix(4, 6), ad), ShapeError);
  CHECK_THROWS_AS(lora_forward(Vector(6), Matrix(4, 5), ad), ShapeError);
}

TEST_CASE("split_forward: zero init, n=1 reduction, and dense oracle") {
  SeededRng rng(4);
  const Matrix w0 = gaussian(2, 2, rng);
  const Vector x{0.5, -1.5};

  auto zero = SplitAdapter::create(2, 2, 1, 3, rng);
  CHECK(split_forward(x, w0, zero) == matvec(w0, x));

  auto one = SplitAdapter::create(2, 2, 2, 1, rng);
  one.heads[0].b = gaussian(2, 2, rng);
  CHECK(max_abs_diff(split_forward(x, w0, one), lora_forward(x, w0, one.heads[0])) <= 1e-15);

  SplitAdapter two;
  LoraAdapter h1, h2;
  h1.a = Matrix{{1, 2}, {0, 1}};
  h1.b = Matrix{{1, 0}, {2, -1}};
  h1.alpha = 2;
  h2.a = Matrix{{-1, 0}, {3, 1}};
  h2.b = Matrix{{0, 1}, {1, 1}};
  h2.alpha = 2;
  two.heads = {h1, h2};
  const Matrix w = add(add(w0, dense_product(h1.b, h1.a)), dense_product(h2.b, h2.a));
  CHECK(max_abs_diff(split_forward(x, w0, two), dense_apply(w, x)) <= 1e-14);
  CHECK(max_abs_diff(split_forward_task(x, w0, two, 1),
                     dense_apply(add(w0, dense_product(h2.b, h2.a)), x)) <= 1e-14);
  CHECK_THROWS_AS(split_forward_task(x, w0, two, 2), ContractError);
}

TEST_CASE("route: closed forms") {
  auto g = route(Vector{0.3, -2.0}, Matrix(2, 4));
  for (double w : g.weights) CHECK(w == doctest::Approx(0.25).epsilon(1e-15));

  g = route(Vector{std::log(2.0), 0.0}, Matrix::identity(2));
  CHECK(std::abs(g.weights[0] - 2.0 / 3.0) < 1e-15);
  CHECK(std::abs(g.weights[1] - 1.0 / 3.0) < 1e-15);

  g = route(Vector{1.0, 2.0, 3.0}, Matrix{{0.5}, {1.0}, {-2.0}});
  CHECK(g.weights == Vector{1.0});

  CHECK_THROWS_AS(route(Vector{1.0}, Matrix(2, 2)), ShapeError);
}

TEST_CASE("hydra_forward: zero init, N=1 reduction and the W_g=0 dense oracle") {
  SeededRng rng(5);
  const Matrix w0 = gaussian(3, 3, rng);
  const Vector x = random_vector(3, rng);

  auto fresh = HydraAdapter::create(3, 3, 2, 4, rng);
  fresh.router = gaussian(2, 4, rng, 10.0);
  CHECK(hydra_forward(x, w0, fresh).y == matvec(w0, x));

  auto single = random_hydra(3, 3, 2, 1, rng);
  LoraAdapter as_lora{single.a, single.experts[0], single.alpha};
  const auto hy = hydra_forward(x, w0, single);
  CHECK(hy.gates.weights == Vector{1.0});
  CHECK(max_abs_diff(hy.y, lora_forward(x, w0, as_lora)) <= 1e-15);

  HydraAdapter two;
  two.a = Matrix{{1, 0}, {1, 1}};
  two.experts = {Matrix{{1, 2}, {0, 1}}, Matrix{{-1, 0}, {3, 2}}};
  two.router = Matrix(2, 2);
  two.alpha = 2;
  const Matrix w02{{2, 0}, {1, 1}};
  const Vector x2{1.0, -2.0};
  const Matrix avg_b = scale(add(two.experts[0], two.experts[1]), 0.5);
  const Vector expected = dense_apply(add(w02, dense_product(avg_b, two.a)), x2);
  const auto out = hydra_forward(x2, w02, two);
  CHECK(max_abs_diff(out.y, expected) <= 1e-14);
  CHECK(out.gates.weights == Vector{0.5, 0.5});
}

TEST_CASE("merge_infer: equal experts collapse and random instances agree") {
  SeededRng rng(6);
  const Matrix w0 = gaussian(4, 4, rng);
  auto same = random_hydra(4, 4, 2, 3, rng);
  same.experts = {same.experts[0], same.experts[0], same.experts[0]};
  const Vector x = random_vector(4, rng);
  LoraAdapter as_lora{same.a, same.experts[0], same.alpha};
  CHECK(max_abs_diff(merge_infer(x, w0, same), lora_forward(x, w0, as_lora)) <= 1e-14);

  for (int trial = 0; trial < 1000; ++trial) {
    const auto h = random_hydra(4, 4, 1 + rng.index(4), 3, rng);
    const Vector xi = random_vector(4, rng);
    CHECK(max_abs_diff(merge_infer(xi, w0, h), hydra_forward(xi, w0, h).y) <= 1e-12);
  }
}

TEST_CASE("zero-init contract holds for every scheme") {
  SeededRng rng(7);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t d = 1 + rng.index(8), k = 1 + rng.index(8);
    const std::size_t r = 1 + rng.index(std::min(d, k));
    const Matrix w0 = gaussian(d, k, rng);
    const Vector x = random_vector(k, rng);
    const Vector base = matvec(w0, x);
    CHECK(lora_forward(x, w0, LoraAdapter::create(d, k, r, rng)) == base);
    CHECK(split_forward(x, w0, SplitAdapter::create(d, k, r, 1 + rng.index(4), rng)) == base);
    CHECK(hydra_forward(x, w0, HydraAdapter::create(d, k, r, 1 + rng.index(5), rng)).y == base);
  }
}

TEST_CASE("gates are normalized and argmax is invariant to positive scaling of z") {
  SeededRng rng(8);
  for (int trial = 0; trial < 2000; ++trial) {
    const std::size_t r = 1 + rng.index(6), n = 1 + rng.index(6);
    const Matrix wg = gaussian(r, n, rng);
    const Vector z = random_vector(r, rng);
    const auto g = route(z, wg);
    double total = 0.0;
    for (double w : g.weights) {
      CHECK(w >= 0.0);
      total += w;
    }
    CHECK(std::abs(total - 1.0) <= 1e-12);

    Vector scaled = z;
    const double c = rng.uniform(0.01, 20.0);
    for (auto& v : scaled) v *= c;
    const auto g2 = route(scaled, wg);
    const auto am1 = std::max_element(g.weights.begin(), g.weights.end()) - g.weights.begin();
    const auto am2 = std::max_element(g2.weights.begin(), g2.weights.end()) - g2.weights.begin();
    // Exact logit ties are measure-zero for Gaussian draws.
    CHECK(am1 == am2);
  }
}

TEST_CASE("param_count at 7B scale: counts and truncated percents") {
  const ParamShape llama{4096, 4096, 8, 1, 2, 32};
  const std::uint64_t base = 6'738'000'000ULL;

  auto lora8 = param_count(Scheme::Lora, llama, base);
  CHECK(lora8.trainable == 4'194'304ULL);
  CHECK(lora8.percent == 0.062);
  CHECK(format_param_count(lora8) == "4194304 (0.062%)");

  auto s = llama;
  s.rank = 16;
  CHECK(param_count(Scheme::Lora, s, base).percent == 0.124);
  s.rank = 32;
  const auto lora32 = param_count(Scheme::Lora, s, base);
  CHECK(lora32.percent == 0.248);

  auto hydra = llama;
  hydra.count = 3;
  const auto h3 = param_count(Scheme::Hydra, hydra, base);
  CHECK(h3.trainable == (8ULL * 4096 + 3ULL * 4096 * 8 + 8ULL * 3) * 64);
  CHECK(h3.percent == 0.124);

  hydra.count = 10;
  const auto h10 = param_count(Scheme::Hydra, hydra, base);
  CHECK(h10.trainable == 23'073'792ULL);
  CHECK(std::abs(h10.percent - 0.341) <= 0.002);

  auto split = llama;
  split.count = 4;
  const auto s84 = param_count(Scheme::Split, split, base);
  CHECK(s84.trainable == lora32.trainable);
  CHECK(s84.percent == 0.248);

  CHECK_THROWS_AS(parse_scheme("adalora"), UsageError);
  CHECK_THROWS_AS(param_count(Scheme::Lora, llama, 0), UsageError);
}

TEST_CASE("split with n heads of rank r costs the same as LoRA of rank r*n") {
  for (std::uint64_t r = 1; r <= 16; ++r) {
    for (std::uint64_t n = 1; n <= 8; ++n) {
      const ParamShape split{512, 384, r, n, 2, 4};
      ParamShape lora = split;
      lora.rank = r * n;
      lora.count = 1;
      CHECK(param_count(Scheme::Split, split, 1'000'000).trainable ==
            param_count(Scheme::Lora, lora, 1'000'000).trainable);
    }
  }
}

TEST_CASE("tape construction matches the direct forward") {
  SeededRng rng(9);
  const std::size_t d = 5, k = 4, rows = 6;
  const Matrix w0 = gaussian(d, k, rng);
  const Matrix xs = gaussian(rows, k, rng);
  std::vector<std::size_t> tasks{0, 1, 1, 0, 1, 0};

  auto lora = LoraAdapter::create(d, k, 2, rng, 3.0);
  lora.b = gaussian(d, 2, rng);
  auto split = SplitAdapter::create(d, k, 2, 2, rng, std::nullopt, SplitRouting::Task);
  for (auto& h : split.heads) h.b = gaussian(d, 2, rng);
  auto hydra = random_hydra(d, k, 3, 3, rng);

  for (const Adapter& adapter : std::vector<Adapter>{lora, split, hydra}) {
    ad::Tape tape;
    auto x = tape.constant(xs);
    auto base = tape.matmul(x, tape.constant(transpose(w0)));
    AdapterTrace trace;
    auto out = apply_adapter(tape, x, base, adapter, tasks, &trace);
    CHECK(trace.params.size() == named_tensors(adapter).size());
    for (std::size_t i = 0; i < rows; ++i) {
      const auto row = xs.row(i);
      Vector expected;
      if (const auto* s = std::get_if<SplitAdapter>(&adapter)) {
        expected = split_forward_task(row, w0, *s, tasks[i]);
      } else {
        expected = adapter_forward(row, w0, adapter);
      }
      const auto got = tape.value(out).row(i);
      for (std::size_t j = 0; j < d; ++j) CHECK(std::abs(got[j] - expected[j]) <= 1e-13);
    }
    if (std::holds_alternative<HydraAdapter>(adapter)) {
      REQUIRE(trace.gates.has_value());
      const auto g = route(matvec(hydra.a, xs.row(2)), hydra.router);
      for (std::size_t j = 0; j < 3; ++j) CHECK(tape.value(*trace.gates)(2, j) == doctest::Approx(g.weights[j]));
    }
  }
}
