#include <doctest.h>

#include <cmath>

#include "dhicm/gradcheck.hpp"
#include "dhicm/ops.hpp"
#include "dhicm/rng.hpp"
#include "dhicm/tensor.hpp"

using namespace dhicm;

namespace {

Tensor rand_tensor(std::vector<int> shape, Rng& rng, bool rg = true) {
  Tensor t(std::move(shape), 0.0, rg);
  for (auto& v : t.value()) v = rng.uniform(-2.0, 2.0);
  return t;
}

}  // namespace

TEST_CASE("tensor shape and data invariants") {
  Tensor t({2, 3}, 0.5);
  CHECK(t.numel() == 6);
  CHECK(t.at(1, 2) == 0.5);
  CHECK_THROWS_AS(Tensor({0, 3}), std::invalid_argument);
  CHECK_THROWS_AS(Tensor({2, 2}, std::vector<real>{1.0}), std::invalid_argument);
}

TEST_CASE("matmul identity and hand cases") {
  Tensor eye({2, 2}, {1, 0, 0, 1});
  Tensor v({2, 1}, {3, 4});
  Tensor out = matmul(eye, v);
  CHECK(out.at(0, 0) == 3.0);
  CHECK(out.at(1, 0) == 4.0);

  Tensor row({1, 2}, {1, 2});
  CHECK(matmul(row, v).item() == doctest::Approx(11.0));
}

TEST_CASE("matmul matches triple-loop oracle") {
  Rng rng(42);
  Tensor a = rand_tensor({3, 4}, rng, false);
  Tensor b = rand_tensor({4, 2}, rng, false);
  Tensor out = matmul(a, b);
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 2; ++j) {
      real expect = 0.0;
      for (int k = 0; k < 4; ++k) expect += a.at(i, k) * b.at(k, j);
      CHECK(out.at(i, j) == doctest::Approx(expect).epsilon(1e-12));
    }
  }
  CHECK_THROWS_WITH_AS(matmul(a, a), doctest::Contains("[3,4]"), std::invalid_argument);
}

TEST_CASE("softmax hand values, shift invariance, masking") {
  Tensor x({1, 4}, {0, 0, 0, 0});
  Tensor s = softmax(x, -1);
  for (int j = 0; j < 4; ++j) CHECK(s.at(0, j) == doctest::Approx(0.25));

  Tensor y({1, 2}, {std::log(2.0), 0.0});
  Tensor sy = softmax(y, -1);
  CHECK(sy.at(0, 0) == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
  CHECK(sy.at(0, 1) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));

  Tensor z({1, 2}, {5, 1});
  Tensor mask({1, 2}, {1, 0});
  Tensor sz = softmax(z, -1, mask);
  CHECK(sz.at(0, 0) == 1.0);
  CHECK(sz.at(0, 1) == 0.0);

  // all-masked row -> zeros
  Tensor none({1, 2}, {5, 1});
  Tensor mask0({1, 2}, {0, 0});
  Tensor s0 = softmax(none, -1, mask0);
  CHECK(s0.at(0, 0) == 0.0);
  CHECK(s0.at(0, 1) == 0.0);

  Rng rng(7);
  Tensor r = rand_tensor({5, 6}, rng, false);
  Tensor sr = softmax(r, -1);
  Tensor shifted = r.clone();
  for (auto& v : shifted.value()) v += 123.456;
  Tensor ss = softmax(shifted, -1);
  for (std::size_t i = 0; i < sr.numel(); ++i) {
    CHECK(std::abs(sr.value()[i] - ss.value()[i]) < 1e-9);
  }
  for (int i = 0; i < 5; ++i) {
    real sum = 0.0;
    int argmax_s = 0, argmax_x = 0;
    for (int j = 0; j < 6; ++j) {
      sum += sr.at(i, j);
      if (sr.at(i, j) > sr.at(i, argmax_s)) argmax_s = j;
      if (r.at(i, j) > r.at(i, argmax_x)) argmax_x = j;
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(argmax_s == argmax_x);
  }
}

TEST_CASE("softmax over a middle axis") {
  // shape [2,3,2], softmax along axis 1
  Rng rng(9);
  Tensor x = rand_tensor({2, 3, 2}, rng, false);
  Tensor s = softmax(x, 1);
  for (int a = 0; a < 2; ++a) {
    for (int c = 0; c < 2; ++c) {
      real sum = 0.0;
      for (int b = 0; b < 3; ++b) sum += s.at(a, b, c);
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
    }
  }
}

TEST_CASE("backward basics: sum and quadratic") {
  Tensor w({3}, {1.0, -2.0, 0.5}, true);
  {
    Tape tape;
    Tensor loss = sum_all(w);
    tape.backward(loss);
    for (int i = 0; i < 3; ++i) CHECK(w.grad()[static_cast<std::size_t>(i)] == 1.0);
  }
  w.zero_grad();
  {
    Tape tape;
    Tensor loss = scale(sum_all(mul(w, w)), 0.5);
    tape.backward(loss);
    for (int i = 0; i < 3; ++i) {
      CHECK(w.grad()[static_cast<std::size_t>(i)] == doctest::Approx(w.at(i)).epsilon(1e-12));
    }
  }
}

TEST_CASE("tape error paths") {
  Tensor w({2}, {1.0, 2.0}, true);
  Tape tape;
  Tensor vec = mul(w, w);
  CHECK_THROWS_AS(tape.backward(vec), std::runtime_error);  // non-scalar loss
  Tensor loss = sum_all(vec);
  tape.backward(loss);
  CHECK_THROWS_AS(tape.backward(loss), std::runtime_error);  // second backward without reset
  tape.reset();
  CHECK_THROWS_AS(tape.backward(loss), std::runtime_error);  // empty tape after reset
}

TEST_CASE("dropout identity and inverted scaling") {
  Rng rng(11);
  Tensor x({4, 4}, 1.0, false);
  Rng r1 = rng.split("a");
  Tensor eval_out = dropout(x, 0.5, false, r1);
  CHECK(eval_out.node().get() == x.node().get());  // exact identity
  Rng r2 = rng.split("b");
  Tensor rate0 = dropout(x, 0.0, true, r2);
  CHECK(rate0.node().get() == x.node().get());

  // surviving entries are scaled by 1/(1-p); expectation over masks is x
  const real p = 0.3;
  double sum = 0.0;
  const int trials = 2000;
  Rng r3 = rng.split("c");
  for (int t = 0; t < trials; ++t) {
    Tensor out = dropout(x, p, true, r3);
    for (real v : out.value()) {
      if (v != 0.0) CHECK(v == doctest::Approx(1.0 / (1.0 - p)).epsilon(1e-12));
      sum += v;
    }
  }
  const double mean = sum / (trials * 16.0);
  CHECK(mean == doctest::Approx(1.0).epsilon(0.05));
  CHECK_THROWS_AS(dropout(x, 1.0, true, r3), std::invalid_argument);
}

TEST_CASE("primitive gradients match finite differences") {
  GradCheckSuiteResult suite = run_gradcheck_suite(123);
  for (const auto& r : suite.reports) {
    INFO(r.name, " max rel err ", r.max_rel_err, " worst ", r.worst_param);
    CHECK(r.pass);
  }
}

TEST_CASE("broadcasting follows trailing alignment, rejects mismatches") {
  Tensor a({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor row({3}, {10, 20, 30});
  Tensor col({2, 1}, {100, 200});
  Tensor s1 = add(a, row);
  CHECK(s1.at(1, 2) == 36.0);
  Tensor s2 = add(a, col);
  CHECK(s2.at(1, 0) == 204.0);
  Tensor bad({4}, 0.0);
  CHECK_THROWS_AS(add(a, bad), std::invalid_argument);
}

TEST_CASE("rng determinism and stream independence") {
  Rng a(99), b(99);
  for (int i = 0; i < 10; ++i) CHECK(a.next_u64() == b.next_u64());
  Rng root(5);
  Rng s1 = root.split("x");
  Rng s2 = root.split("y");
  CHECK(s1.next_u64() != s2.next_u64());
  // same label, same child
  CHECK(Rng(5).split("x").next_u64() == Rng(5).split("x").next_u64());
}
