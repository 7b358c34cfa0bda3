// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <algorithm>
#include <numeric>
#include <set>

#include "awaker/error.hpp"
#include "awaker/optim.hpp"
#include "awaker/rng.hpp"
#include "awaker/tensor.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace awaker;
using awaker::test::max_grad_error;
using awaker::test::random_tensor;

TEST_SUITE("tensor-core") {

TEST_CASE("construction checks shape against data") {
  CHECK(Tensor::zeros({2, 3}).numel() == 6);
  CHECK_THROWS_AS(Tensor::from({2, 0}, {}), ShapeError);
  CHECK_THROWS_AS(Tensor::from({2, 2}, {1, 2, 3}), ShapeError);
  CHECK(Tensor::scalar(4.0).item() == 4.0);
  CHECK_THROWS_AS(Tensor::zeros({2}).item(), RankError);
}

TEST_CASE("matmul") {
  const Tensor id = Tensor::from({2, 2}, {1, 0, 0, 1});
  const Tensor m = Tensor::from({2, 2}, {1, 2, 3, 4});
  const Tensor p = matmul(id, m);
  CHECK(std::vector<double>(p.data().begin(), p.data().end()) == std::vector<double>{1, 2, 3, 4});

  // hand arithmetic: 1·3 + 2·4
  CHECK(matmul(Tensor::from({1, 2}, {1, 2}), Tensor::from({2, 1}, {3, 4})).item() == 11.0);

  const Tensor z = matmul(random_tensor({3, 4}, 1, false), Tensor::zeros({4, 5}));
  CHECK(std::all_of(z.data().begin(), z.data().end(), [](double v) { return v == 0.0; }));

  try {
    matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3}));
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
    CHECK(msg.find("incompatible with [2x3]") != std::string::npos);
  }
}

TEST_CASE("matmul records both parents") {
  Tensor a = random_tensor({2, 3}, 2);
  Tensor b = random_tensor({3, 2}, 3);
  const Tensor c = matmul(a, b);
  REQUIRE(c.node()->parents.size() == 2);
  CHECK(c.node()->parents[0] == a.node());
  CHECK(c.node()->parents[1] == b.node());
}

TEST_CASE("softmax_row") {
  auto vals = [](const Tensor& t) { return std::vector<double>(t.data().begin(), t.data().end()); };
  for (double p : vals(softmax_row(Tensor::from({4}, {0, 0, 0, 0})))) CHECK(p == doctest::Approx(0.25).epsilon(1e-15));

  const auto two = vals(softmax_row(Tensor::from({2}, {std::log(3.0), 0.0})));
  CHECK(std::abs(two[0] - 0.75) < 1e-15);
  CHECK(std::abs(two[1] - 0.25) < 1e-15);

  const auto big = vals(softmax_row(Tensor::from({2}, {1000.0, 0.0})));
  CHECK(std::isfinite(big[0]));
  CHECK(big[0] == doctest::Approx(1.0));
  CHECK(big[1] >= 0.0);
  CHECK(big[1] < 1e-300);

  CHECK_THROWS_AS(softmax_row(Tensor::from({2}, {NAN, 0.0})), NumericError);
}

TEST_CASE("softmax_row sums to one and ignores constant shifts") {
  Rng rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    const auto n = static_cast<std::size_t>(rng.uniform_int(1, 12));
    std::vector<double> v(n);
    for (double& x : v) x = rng.normal(0.0, 5.0);
    const Tensor p = softmax_row(Tensor::from({n}, v));
    double s = 0.0;
    for (double x : p.data()) {
      CHECK(x > 0.0);
      s += x;
    }
    CHECK(std::abs(s - 1.0) <= 1e-12);
    const double c = rng.normal(0.0, 50.0);
    for (double& x : v) x += c;
    const Tensor q = softmax_row(Tensor::from({n}, v));
    for (std::size_t i = 0; i < n; ++i) CHECK(std::abs(p[i] - q[i]) <= 1e-12);
  }
}

TEST_CASE("cross_entropy_masked") {
  const std::vector<int> targets{3, 1, 0};
  SUBCASE("confident correct logits drive the loss to zero") {
    std::vector<double> l(3 * 8, 0.0);
    for (int t = 0; t < 3; ++t) l[static_cast<std::size_t>(t * 8 + targets[static_cast<std::size_t>(t)])] = 800.0;
    CHECK(cross_entropy_masked(Tensor::from({3, 8}, l), targets, {true, true, true}).item() < 1e-300);
  }
  SUBCASE("uniform logits give ln V") {
    const Tensor loss = cross_entropy_masked(Tensor::zeros({3, 32}), targets, {false, true, true});
    CHECK(std::abs(loss.item() - std::log(32.0)) < 1e-14);
    CHECK(loss.item() == doctest::Approx(3.4657).epsilon(1e-4));
  }
  SUBCASE("matches a scalar recomputation") {
    const Tensor logits = random_tensor({3, 8}, 11, false, 3.0);
    const std::vector<bool> mask{true, false, true};
    double expect = 0.0;
    for (std::size_t t : {0u, 2u}) {
      double mx = -INFINITY;
      for (std::size_t v = 0; v < 8; ++v) mx = std::max(mx, logits[t * 8 + v]);
      double z = 0.0;
      for (std::size_t v = 0; v < 8; ++v) z += std::exp(logits[t * 8 + v] - mx);
      expect += -(logits[t * 8 + static_cast<std::size_t>(targets[t])] - mx - std::log(z));
    }
    expect /= 2.0;
    CHECK(std::abs(cross_entropy_masked(logits, targets, mask).item() - expect) < 1e-14);
  }
  SUBCASE("an empty mask is rejected") {
    CHECK_THROWS_AS(cross_entropy_masked(Tensor::zeros({3, 4}), targets, {false, false, false}), InputError);
  }
}

TEST_CASE("backward basics") {
  Tensor x = Tensor::from({3}, {1, 2, 3}, true);
  backward(sum(x));
  CHECK(std::vector<double>(x.grad().begin(), x.grad().end()) == std::vector<double>{1, 1, 1});

  CHECK_THROWS_AS(backward(x), RankError);

  SUBCASE("a parameter used twice gets the sum of both paths") {
    Tensor w = Tensor::from({2}, {0.5, -1.5}, true);
    backward(add(sum(mul(w, w)), sum(scale(w, 3.0))));  // d/dw (w² + 3w) = 2w + 3
    CHECK(w.grad()[0] == doctest::Approx(4.0));
    CHECK(w.grad()[1] == doctest::Approx(0.0));
  }
  SUBCASE("leaf gradients accumulate across backward calls") {
    Tensor w = Tensor::from({1}, {2.0}, true);
    backward(sum(scale(w, 2.0)));
    backward(sum(scale(w, 2.0)));
    CHECK(w.grad()[0] == 4.0);
  }
}

TEST_CASE("xᵀWx gradient matches central differences") {
  Tensor x = random_tensor({1, 4}, 21);
  Tensor w = random_tensor({4, 4}, 22);
  auto loss = [&] { return sum(mul(matmul(x, w), x)); };
  CHECK(max_grad_error(loss, {x, w}) <= 1e-6);
}

TEST_CASE("every op's gradient matches central differences") {
  auto probe = [](const Tensor& y, std::uint64_t seed) {
    // random linear functional so no gradient entry is trivially uniform
    return sum(mul(y, random_tensor(y.shape(), seed, false)));
  };
  Tensor a = random_tensor({3, 4}, 31);
  Tensor b = random_tensor({4, 5}, 32);
  Tensor c = random_tensor({3, 4}, 33);
  Tensor v = random_tensor({4}, 34);
  Tensor s = random_tensor({1}, 35);
  Tensor w = random_tensor({5, 4}, 36);
  Tensor gain = random_tensor({4}, 37);
  Tensor table = random_tensor({6, 4}, 38);
  Tensor q = random_tensor({5, 8}, 39);
  Tensor k = random_tensor({5, 8}, 40);
  Tensor vv = random_tensor({5, 8}, 41);
  const std::vector<int> ids{1, 4, 1, 0};

  CHECK(max_grad_error([&] { return probe(matmul(a, b), 1); }, {a, b}) <= 1e-6);
  CHECK(max_grad_error([&] { return probe(linear(a, w), 2); }, {a, w}) <= 1e-6);
  CHECK(max_grad_error([&] { return probe(linear(v, w), 3); }, {v, w}) <= 1e-6);
  CHECK(max_grad_error([&] { return probe(add(a, c), 4); }, {a, c}) <= 1e-6);
  CHECK(max_grad_error([&] { return probe(mul(a, c), 5); }, {a, c}) <= 1e-6);
  CHECK(max_grad_error([&] { return probe(scale_by(a, s), 6); }, {a, s}) <= 1e-6);
  CHECK(max_grad_error([&] { return probe(rsub(1.0, s), 7); }, {s}) <= 1e-6);
  CHECK(max_grad_error([&] { return probe(silu(a), 8); }, {a}) <= 1e-6);
  CHECK(max_grad_error([&] { return probe(softmax_row(v), 9); }, {v}) <= 1e-6);
  CHECK(max_grad_error([&] { return probe(select(v, 2), 10); }, {v}) <= 1e-6);
  CHECK(max_grad_error([&] { return probe(mean_rows(a, 1, 3), 11); }, {a}) <= 1e-6);
  CHECK(max_grad_error([&] { return probe(rms_norm(a, gain, 1e-6), 12); }, {a, gain}) <= 1e-6);
  CHECK(max_grad_error([&] { return probe(embedding(table, ids), 13); }, {table}) <= 1e-6);
  CHECK(max_grad_error([&] { return probe(rope(q, 2, 10000.0), 14); }, {q}) <= 1e-6);
  CHECK(max_grad_error([&] { return probe(causal_attention(q, k, vv, 2), 15); }, {q, k, vv}) <= 1e-6);
  CHECK(max_grad_error([&] { return cross_entropy_masked(a, std::vector<int>{0, 3, 2}, {true, false, true}); }, {a}) <=
        1e-6);
}

TEST_CASE("causal attention ignores later positions") {
  Tensor q = random_tensor({4, 8}, 51, false);
  Tensor k = random_tensor({4, 8}, 52, false);
  Tensor v = random_tensor({4, 8}, 53, false);
  const Tensor y = causal_attention(q, k, v, 2);
  std::vector<double> k2(k.data().begin(), k.data().end()), v2(v.data().begin(), v.data().end());
  for (std::size_t j = 24; j < 32; ++j) {
    k2[j] += 1.0;
    v2[j] -= 2.0;
  }
  const Tensor y2 = causal_attention(q, Tensor::from({4, 8}, k2), Tensor::from({4, 8}, v2), 2);
  for (std::size_t i = 0; i < 24; ++i) CHECK(y[i] == y2[i]);
  CHECK(y[24] != y2[24]);
}

TEST_CASE("embedding rejects ids outside the vocabulary") {
  CHECK_THROWS_AS(embedding(Tensor::zeros({4, 2}), std::vector<int>{0, 4}), InputError);
  CHECK_THROWS_AS(embedding(Tensor::zeros({4, 2}), std::vector<int>{-1}), InputError);
}

TEST_CASE("no graph is recorded under NoGradGuard or for frozen inputs") {
  Tensor w = random_tensor({2, 2}, 61);
  {
    NoGradGuard guard;
    CHECK_FALSE(grad_enabled());
    const Tensor y = matmul(w, w);
    CHECK_FALSE(y.requires_grad());
    CHECK(y.node()->parents.empty());
  }
  CHECK(grad_enabled());
  const Tensor frozen = random_tensor({2, 2}, 62, false);
  CHECK(matmul(frozen, frozen).node()->parents.empty());
}

TEST_CASE("tape visits every node once, parents before children") {
  Tensor x = random_tensor({2, 2}, 71);
  Tensor h = matmul(x, x);
  Tensor loss = sum(add(h, h));  // diamond: h reached twice
  const GradTape tape = GradTape::record(loss);
  const auto& order = tape.nodes();
  std::set<Node*> unique(order.begin(), order.end());
  CHECK(unique.size() == order.size());
  auto pos = [&](const Tensor& t) { return std::find(order.begin(), order.end(), t.node().get()) - order.begin(); };
  CHECK(pos(x) < pos(h));
  CHECK(pos(h) < pos(loss));
}

TEST_CASE("tape determinism: same inputs give bitwise-equal losses") {
  auto run = [] {
    Tensor a = random_tensor({4, 6}, 81);
    Tensor b = random_tensor({6, 3}, 82);
    Tensor loss = cross_entropy_masked(matmul(silu(a), b), std::vector<int>{0, 1, 2, 0}, {true, true, false, true});
    backward(loss);
    return std::make_pair(loss.item(), std::vector<double>(a.grad().begin(), a.grad().end()));
  };
  CHECK(run() == run());
}

TEST_CASE("AdamW") {
  SUBCASE("zero gradient leaves the parameter unchanged") {
    Tensor w = Tensor::from({2}, {1.0, -2.0}, true);
    AdamW opt({{"w", w}});
    backward(scale(sum(w), 0.0));
    opt.step(0.1);
    CHECK(w[0] == 1.0);
    CHECK(w[1] == -2.0);
  }
  SUBCASE("one step on w² from w = 1 decreases w²") {
    Tensor w = Tensor::from({1}, {1.0}, true);
    AdamW opt({{"w", w}});
    backward(sum(mul(w, w)));
    opt.step(0.01);
    CHECK(w[0] * w[0] < 1.0);
  }
  SUBCASE("frozen tensors are never touched") {
    Tensor w = Tensor::from({2}, {1.0, 2.0}, true);
    Tensor frozen = Tensor::from({2}, {3.0, 4.0}, false);
    AdamW opt({{"w", w}, {"frozen", frozen}});
    CHECK(opt.slots().size() == 1);
    for (int i = 0; i < 100; ++i) {
      backward(sum(mul(mul(w, frozen), w)));
      opt.step(0.01);
      opt.zero_grad();
    }
    CHECK(frozen[0] == 3.0);
    CHECK(frozen[1] == 4.0);
    CHECK(opt.steps_taken() == 100);
  }
  SUBCASE("non-positive learning rates are rejected") {
    Tensor w = Tensor::from({1}, {1.0}, true);
    AdamW opt({{"w", w}});
    CHECK_THROWS_AS(opt.step(0.0), ConfigError);
    CHECK_THROWS_AS(opt.step(-1e-3), ConfigError);
  }
  SUBCASE("first step moves each coordinate by about lr") {
    Tensor w = Tensor::from({2}, {0.0, 0.0}, true);
    AdamW opt({{"w", w}});
    backward(sum(mul(w, Tensor::from({2}, {3.0, -0.5}))));
    opt.step(0.1);
    CHECK(w[0] == doctest::Approx(-0.1).epsilon(1e-6));
    CHECK(w[1] == doctest::Approx(0.1).epsilon(1e-6));
  }
}

TEST_CASE("cosine_lr") {
  CHECK(cosine_lr(10, 110, 1e-3, 10) == doctest::Approx(1e-3));
  CHECK(cosine_lr(110, 110, 1e-3, 10) == doctest::Approx(0.0));
  CHECK(cosine_lr(60, 110, 1e-3, 10) == doctest::Approx(5e-4));
  CHECK(cosine_lr(5, 110, 1e-3, 10) == doctest::Approx(5e-4));
  CHECK(cosine_lr(0, 110, 1e-3, 10) == 0.0);
  CHECK(cosine_lr(0, 100, 1e-3, 0) == doctest::Approx(1e-3));
  CHECK_THROWS_AS(cosine_lr(0, 0, 1e-3, 0), ConfigError);
  CHECK_THROWS_AS(cosine_lr(101, 100, 1e-3, 0), ConfigError);
  CHECK_THROWS_AS(cosine_lr(-1, 100, 1e-3, 0), ConfigError);
  double prev = INFINITY;
  for (int s = 10; s <= 110; ++s) {
    const double lr = cosine_lr(s, 110, 1e-3, 10);
    CHECK(lr <= prev);
    prev = lr;
  }
}

TEST_CASE("rng streams are reproducible and decorrelated") {
  Rng a = Rng::split(5, RngStream::init, 0);
  Rng b = Rng::split(5, RngStream::init, 0);
  Rng c = Rng::split(5, RngStream::noise, 0);
  const double x = a.normal();
  CHECK(x == b.normal());
  CHECK(x != c.normal());
  Rng d = Rng::split(5, RngStream::data, 1);
  const std::string st = d.state();
  const double first = d.uniform();
  d.restore(st);
  CHECK(d.uniform() == first);
}

}  // TEST_SUITE
