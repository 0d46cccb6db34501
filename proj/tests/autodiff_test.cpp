#include "doctest.h"

#include <cmath>

#include "hydra/autodiff.hpp"

using namespace hydra;
using hydra::ad::Tape;
using hydra::ad::Var;

TEST_CASE("backward: half squared norm gives the identity gradient") {
  Tape tape;
  Var x = tape.parameter(Matrix{{3.0, 4.0}}, "x");
  Var loss = tape.half_squared_norm(x);
  CHECK(tape.scalar(loss) == 12.5);
  const auto g = tape.backward(loss);
  CHECK(g[x] == Matrix{{3.0, 4.0}});
}

TEST_CASE("backward: frozen weights receive no gradient") {
  // loss = sum(W x); d loss / dx = W^T 1 computed by hand.
  const Matrix w{{1, 2, 3}, {-4, 5, 0.5}};
  Tape tape;
  Var wv = tape.constant(w, "W");
  Var x = tape.parameter(Matrix{{0.3}, {-1.2}, {2.0}}, "x");
  Var loss = tape.sum_all(tape.matmul(wv, x));
  const auto g = tape.backward(loss);
  CHECK_FALSE(g.contains(wv));
  REQUIRE(g.contains(x));
  CHECK(g[x] == Matrix{{1 - 4}, {2 + 5}, {3 + 0.5}});
  CHECK(g.size() == 1);
}

TEST_CASE("backward: constant loss yields zero gradients") {
  Tape tape;
  Var p = tape.parameter(Matrix{{1.0, 2.0}}, "p");
  Var c = tape.constant(Matrix{{5.0}});
  Var loss = tape.sum_all(c);
  const auto g = tape.backward(loss);
  CHECK(g[p] == Matrix(1, 2));
}

TEST_CASE("backward: non-scalar loss is a contract error") {
  Tape tape;
  Var p = tape.parameter(Matrix{{1.0, 2.0}});
  CHECK_THROWS_AS(tape.backward(p), ContractError);
}

TEST_CASE("grad_check: linear graph is exact and eps is validated") {
  SeededRng rng(1);
  Tape tape;
  Var w = tape.parameter(gaussian(3, 4, rng), "W");
  Var x = tape.constant(gaussian(4, 2, rng));
  Var loss = tape.sum_all(tape.scale(tape.matmul(w, x), 0.7));
  const auto report = ad::grad_check(tape, loss, rng, 1e-6);
  CHECK(report.max_rel_error <= 1e-9);
  CHECK(report.params.size() == 1);
  CHECK(report.params[0].coords_checked == 12);
  CHECK_THROWS_AS(ad::grad_check(tape, loss, rng, 0.0), ContractError);
  CHECK_THROWS_AS(ad::grad_check(tape, loss, rng, 1e-2), ContractError);
}

TEST_CASE("grad_check covers every primitive") {
  SeededRng rng(17);
  for (int trial = 0; trial < 10; ++trial) {
    Tape tape;
    Var x = tape.parameter(gaussian(5, 4, rng), "x");
    Var w = tape.parameter(gaussian(4, 3, rng), "w");
    Var bias = tape.parameter(gaussian(1, 3, rng), "bias");
    Var h = tape.add_row_vector(tape.matmul(x, w), bias);             // 5x3
    Var act = tape.relu(tape.add(h, tape.constant(Matrix(5, 3, 0.1))));
    Var gates = tape.softmax_rows(tape.scale(h, 0.5));
    Var mixed = tape.scale_rows_by_column(act, gates, 1);
    Var top = tape.slice_rows(mixed, 0, 2);
    Var bottom = tape.slice_rows(tape.sub(mixed, act), 2, 3);
    Var joined = tape.concat_rows({bottom, top});                      // 5x3
    Var pooled = tape.mean_rows(tape.transpose(tape.transpose(joined)));
    Var target = tape.constant(gaussian(5, 3, rng));
    Var logits = tape.matmul(joined, tape.constant(gaussian(3, 4, rng)));
    Var loss = tape.add(tape.add(tape.softmax_cross_entropy(logits, {0, 1, 2, 3, 1}),
                                 tape.mean_squared_error(joined, target)),
                        tape.add(tape.half_squared_norm(pooled), tape.sum_all(gates)));
    const auto report = ad::grad_check(tape, loss, rng, 1e-6);
    CHECK(report.max_rel_error <= 1e-6);
  }
}

TEST_CASE("backward is linear: gradient of summed losses is the sum of gradients") {
  SeededRng rng(5);
  const Matrix w0 = gaussian(3, 4, rng);
  const Matrix x1 = gaussian(2, 3, rng);
  const Matrix x2 = gaussian(2, 3, rng);

  auto per_sample = [&](const Matrix& x) {
    Tape t;
    Var w = t.parameter(w0);
    Var loss = t.softmax_cross_entropy(t.matmul(t.constant(x), w), {1, 3});
    return t.backward(loss)[w];
  };

  Tape t;
  Var w = t.parameter(w0);
  Var l1 = t.softmax_cross_entropy(t.matmul(t.constant(x1), w), {1, 3});
  Var l2 = t.softmax_cross_entropy(t.matmul(t.constant(x2), w), {1, 3});
  const auto joint = t.backward(t.add(l1, l2))[w];
  const auto sum = add(per_sample(x1), per_sample(x2));
  CHECK(frobenius_distance(joint, sum) <= 1e-14);
}

TEST_CASE("label out of range is a contract error") {
  Tape tape;
  Var logits = tape.parameter(Matrix(2, 3));
  CHECK_THROWS_AS(tape.softmax_cross_entropy(logits, {0, 3}), ContractError);
  CHECK_THROWS_AS(tape.softmax_cross_entropy(logits, {0}), ShapeError);
}

TEST_CASE("uniform logits give ln C cross-entropy") {
  Tape tape;
  Var logits = tape.constant(Matrix(4, 5, 0.3));
  Var loss = tape.softmax_cross_entropy(logits, {0, 1, 2, 4});
  CHECK(tape.scalar(loss) == doctest::Approx(std::log(5.0)).epsilon(1e-15));
}

TEST_CASE("set_leaf replays downstream values") {
  Tape tape;
  Var x = tape.parameter(Matrix{{1.0, 2.0}});
  Var loss = tape.half_squared_norm(x);
  tape.set_leaf(x, Matrix{{3.0, 4.0}});
  CHECK(tape.scalar(loss) == 12.5);
  CHECK_THROWS_AS(tape.set_leaf(x, Matrix(2, 2)), ShapeError);
}
