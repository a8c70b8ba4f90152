#include <cmath>
#include <limits>

#include "doctest.h"
#include "ranlab/errors.hpp"
#include "ranlab/gradcheck.hpp"
#include "ranlab/ops.hpp"
#include "ranlab/rng.hpp"

using namespace ranlab;

namespace {

Array random_array(Shape shape, Rng& rng, double scale = 1.0) {
  Array a(std::move(shape));
  for (double& v : a.data()) v = rng.normal() * scale;
  return a;
}

}  // namespace

TEST_CASE("square has derivative 2x") {
  Tape tape;
  const Var x = tape.leaf(Array::scalar(3.0), "x");
  const Var loss = ops::square(x);
  CHECK(loss.value().item() == 9.0);
  CHECK(tape.grad(loss, x).item() == 6.0);
}

TEST_CASE("sum has unit gradient") {
  Tape tape;
  const Var v = tape.leaf(Array::vector({1, -2, 3, 4.5, 0}), "v");
  const Array g = tape.grad(ops::sum(v), v);
  for (double gi : g.data()) CHECK(gi == 1.0);
}

TEST_CASE("least squares gradient matches an independent central difference") {
  Rng rng(7);
  const Array a = random_array({4, 3}, rng);
  const Array b = random_array({4, 1}, rng);
  const Array x = random_array({3, 1}, rng);

  // Plain-double oracle, no tape involved.
  auto f = [&](const std::vector<double>& xv) {
    double s = 0.0;
    for (std::size_t i = 0; i < 4; ++i) {
      double r = -b[i];
      for (std::size_t j = 0; j < 3; ++j) r += a.at(i, j) * xv[j];
      s += r * r;
    }
    return s;
  };

  Tape tape;
  const Var xv = tape.leaf(x, "x");
  const Var r = ops::sub(ops::matmul(tape.constant(a), xv), tape.constant(b));
  const Array g = tape.grad(ops::sum(ops::square(r)), xv);

  const double h = 1e-5;
  for (std::size_t j = 0; j < 3; ++j) {
    std::vector<double> p(x.values()), m(x.values());
    p[j] += h;
    m[j] -= h;
    const double fd = (f(p) - f(m)) / (2 * h);
    CHECK(std::abs(g[j] - fd) / std::max(1.0, std::abs(g[j])) < 1e-6);
  }
}

TEST_CASE("unused leaves get exact zeros") {
  Tape tape;
  const Var x = tape.leaf(Array::vector({1, 2}), "x");
  const Var unused = tape.leaf(Array::matrix(2, 2, {1, 2, 3, 4}), "unused");
  const Var loss = ops::sum(ops::square(x));
  const Var leaves[] = {x, unused};
  const auto grads = tape.grad(loss, leaves);
  CHECK(grads[1] == Array(Shape{2, 2}, 0.0));
}

TEST_CASE("non-scalar loss is a contract violation") {
  Tape tape;
  const Var x = tape.leaf(Array::vector({1, 2}), "x");
  CHECK_THROWS_AS(tape.grad(ops::square(x), x), ContractViolation);
}

TEST_CASE("non-finite values are reported with the producing node") {
  Tape tape;
  const Var x = tape.leaf(Array::scalar(800.0), "x");
  try {
    (void)ops::exp(x);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("exp") != std::string::npos);
  }
  CHECK_THROWS_AS(tape.leaf(Array::scalar(std::numeric_limits<double>::quiet_NaN())),
                  NumericError);
  CHECK_THROWS_AS(ops::log(tape.leaf(Array::scalar(0.0))), NumericError);
}

TEST_CASE("finite_diff_check on a quadratic is exact to rounding") {
  Rng rng(3);
  const Array q = random_array({5, 5}, rng);
  LossFn loss = [&](Tape& t, std::span<const Var> p) {
    const Var y = ops::matmul(t.constant(q), p[0]);
    return ops::sum(ops::mul(y, p[0]));
  };
  CHECK(finite_diff_check(loss, {random_array({5, 1}, rng)}, 1e-5) < 1e-8);
}

TEST_CASE("finite_diff_check on softmax cross-entropy") {
  Rng rng(11);
  const std::vector<int> labels = {0, 2, 1, 2, 3, 0};
  LossFn loss = [&](Tape&, std::span<const Var> p) { return ops::cross_entropy(p[0], labels); };
  CHECK(finite_diff_check(loss, {random_array({6, 4}, rng, 2.0)}, 1e-5) < 1e-6);
}

TEST_CASE("finite_diff_check rejects a non-positive step") {
  LossFn loss = [](Tape&, std::span<const Var> p) { return ops::sum(p[0]); };
  CHECK_THROWS_AS(finite_diff_check(loss, {Array::vector({1.0})}, 0.0), ContractViolation);
  CHECK_THROWS_AS(finite_diff_check(loss, {Array::vector({1.0})}, -1e-5), ContractViolation);
}

TEST_CASE("finite_diff_check surfaces a non-finite probe") {
  LossFn loss = [](Tape&, std::span<const Var> p) { return ops::sum(ops::log(p[0])); };
  CHECK_THROWS_AS(finite_diff_check(loss, {Array::vector({1e-7})}, 1e-5), NumericError);
}

TEST_CASE("every op passes the gradient check on random inputs") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const Array a = random_array({3, 4}, rng);
    const Array b = random_array({4, 2}, rng);
    const Array c = random_array({3, 4}, rng);
    const Array v = random_array({4}, rng);
    const Array s = Array::scalar(0.5 + rng.uniform());
    const Array img = random_array({2, 4 * 4 * 2}, rng);
    const std::vector<std::size_t> gather_idx = {2, 0, 2, 1};
    const std::vector<std::size_t> seg = {1, 2, 1};
    const std::vector<std::size_t> col = {2, 0, 1};

    LossFn loss = [&](Tape& t, std::span<const Var> p) {
      const Var w = ops::matmul(p[0], p[1]);                         // 3x2
      const Var nt = ops::matmul_nt(p[0], p[2]);                      // 3x3
      const Var sm = ops::softmax_rows(nt);
      const Var ls = ops::log_softmax_rows(ops::scale_by(nt, p[4]));
      const Var nr = ops::normalize_rows(ops::add_row(p[0], p[3]));
      const Var act = ops::add(ops::tanh(p[2]), ops::smooth_relu(p[0]));
      const Var dist = ops::row_distances(p[0], ops::transpose(ops::transpose(p[2])));
      const Var ac = ops::acos_clamped(ops::scale(ops::tanh(p[2]), 0.9), -1 + 1e-7, 1 - 1e-7);
      const Var g = ops::gather_rows(p[0], gather_idx);
      const Var segm = ops::segment_mean(ops::slice_rows(g, 0, 4), seg);
      const Var patches = ops::patchify(p[5], 4, 4, 2, 2);
      const Var cc = ops::concat_cols(w, nt);
      const Var cat = ops::concat(p[3], ops::sum_rows(p[0]));
      Var total = ops::sum(ops::square(w));
      total = ops::add(total, ops::sum(ops::mul(sm, nt)));
      total = ops::add(total, ops::sum(ops::pick(ls, col)));
      total = ops::add(total, ops::sum(ops::row_dot(nr, ops::normalize_rows(p[2]))));
      total = ops::add(total, ops::mean(ops::exp(ops::scale(act, 0.3))));
      total = ops::add(total, ops::sum(dist));
      total = ops::add(total, ops::sum(ac));
      total = ops::add(total, ops::sum(ops::square(segm)));
      total = ops::add(total, ops::sum(ops::tanh(ops::mean_rows(patches))));
      total = ops::add(total, ops::sum(ops::sqrt(ops::add_scalar(ops::square(cc), 1.0))));
      total = ops::add(total, ops::sum(ops::sum_cols(ops::reshape(ops::square(cat), {2, 4}))));
      total = ops::add(total, ops::log(ops::add_scalar(ops::square(ops::sum(ops::sub_row(p[0], p[3]))), 1.0)));
      return total;
    };
    CHECK(finite_diff_check(loss, {a, b, c, v, s, img}, 1e-5) < 1e-6);
  }
}

TEST_CASE("binary cross-entropy gradient") {
  Rng rng(5);
  Array targets(Shape{4, 3});
  for (double& t : targets.data()) t = rng.bernoulli(0.5) ? 1.0 : 0.0;
  LossFn loss = [&](Tape&, std::span<const Var> p) { return ops::binary_cross_entropy(p[0], targets); };
  CHECK(finite_diff_check(loss, {random_array({4, 3}, rng, 3.0)}, 1e-5) < 1e-6);
}

TEST_CASE("backward leaves inputs unmodified and reductions are reproducible") {
  Rng rng(9);
  const Array x = random_array({16, 8}, rng);
  const Array copy = x;
  auto run = [&] {
    Tape tape;
    const Var xv = tape.leaf(x, "x");
    const Var loss = ops::mean(ops::square(ops::softmax_rows(xv)));
    return std::make_pair(loss.value().item(), tape.grad(loss, xv));
  };
  const auto first = run();
  const auto second = run();
  CHECK(x == copy);
  CHECK(first.first == second.first);
  CHECK(first.second == second.second);
}

TEST_CASE("zero-distance gradient is zero, not NaN") {
  Tape tape;
  const Var f = tape.leaf(Array::matrix(1, 2, {1, 0}), "f");
  const Var c = tape.leaf(Array::matrix(1, 2, {1, 0}), "c");
  const Var leaves[] = {f, c};
  const auto g = tape.grad(ops::sum(ops::row_distances(f, c)), leaves);
  CHECK(g[0] == Array(Shape{1, 2}, 0.0));
}

TEST_CASE("normalize_rows rejects zero rows") {
  Tape tape;
  CHECK_THROWS_AS(ops::normalize_rows(tape.leaf(Array::matrix(2, 2, {1, 0, 0, 0}))),
                  DegenerateEmbedding);
}

TEST_CASE("rng draws are reproducible and in range") {
  Rng a(42), b(42);
  for (int i = 0; i < 1000; ++i) {
    const double u = a.uniform();
    CHECK(u == b.uniform());
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
    CHECK(a.below(7) == b.below(7));
  }
  double m = 0.0, s2 = 0.0;
  Rng n(1);
  const int count = 20000;
  for (int i = 0; i < count; ++i) {
    const double z = n.normal();
    m += z;
    s2 += z * z;
  }
  m /= count;
  CHECK(std::abs(m) < 0.03);
  CHECK(std::abs(s2 / count - 1.0) < 0.05);
}
