#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "citycond/tensor.hpp"
#include "fd_check.hpp"

using namespace citycond;

namespace {

constexpr int kTrials = 20;
constexpr double kFdTol = 1e-4;

// Random tensor with entries kept away from zero by `margin` (for ops with
// kinks or poles at the origin).
Tensor rand_tensor(Rng& rng, Shape shape, bool rg = true, double margin = 0.0) {
  std::vector<double> data(numel(shape));
  for (double& v : data) {
    v = rng.uniform(-1.0, 1.0);
    if (margin > 0.0 && std::abs(v) < margin) v = v < 0.0 ? v - margin : v + margin;
  }
  return Tensor::from_data(std::move(shape), std::move(data), rg);
}

// Fixed random mixing weights so the loss is sensitive to every output entry.
Tensor probe_like(Rng& rng, const Shape& shape) {
  return rand_tensor(rng, shape, /*rg=*/false);
}

Shape rand_shape(Rng& rng, size_t max_rank = 3, size_t max_dim = 8) {
  size_t rank = 1 + rng.below(max_rank);
  Shape s(rank);
  for (auto& d : s) d = 1 + rng.below(max_dim);
  return s;
}

}  // namespace

TEST_CASE("construction and accessors") {
  Tensor z = Tensor::zeros({2, 3});
  CHECK(z.size() == 6);
  CHECK(z.rank() == 2);
  CHECK(z.at({1, 2}) == 0.0);

  Tensor f = Tensor::full({2, 2}, 1.5);
  CHECK(f.at({0, 1}) == 1.5);

  Tensor s = Tensor::scalar(4.0);
  CHECK(s.value() == 4.0);

  CHECK_THROWS_AS(Tensor::zeros({2, 0, 3}), TensorError);
  CHECK_THROWS_AS(Tensor::from_data({2, 2}, {1.0, 2.0, 3.0}), TensorError);
  CHECK_THROWS_AS(Tensor::from_data({}, {}), TensorError);
  CHECK_THROWS_AS(f.value(), TensorError);  // non-scalar value()
  CHECK_THROWS_AS(f.at({0, 5}), TensorError);
}

TEST_CASE("matmul known values") {
  // A * I == A
  Tensor a = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor eye = Tensor::from_data({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  Tensor out = matmul(a, eye);
  for (size_t i = 0; i < 6; ++i) CHECK(out.data()[i] == a.data()[i]);

  Tensor row = Tensor::from_data({1, 2}, {1, 2});
  Tensor col = Tensor::from_data({2, 1}, {3, 4});
  CHECK(matmul(row, col).value() == doctest::Approx(11.0).epsilon(1e-15));

  // mismatch error names both shapes
  Tensor bad = Tensor::zeros({4, 2});
  try {
    matmul(a, bad);
    FAIL("expected TensorError");
  } catch (const TensorError& e) {
    std::string msg = e.what();
    CHECK(msg.find("[2,3]") != std::string::npos);
    CHECK(msg.find("[4,2]") != std::string::npos);
  }
}

TEST_CASE("softmax values and stability") {
  Tensor flat = softmax(Tensor::from_data({1, 3}, {0, 0, 0}));
  for (double v : flat.data()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

  // large logits must not overflow
  Tensor big = softmax(Tensor::from_data({1, 2}, {1000.0, 0.0}));
  CHECK(all_finite(big));
  CHECK(big.data()[0] == doctest::Approx(1.0).epsilon(1e-12));

  // hand-evaluated reference for [1,2,3]
  Tensor t = softmax(Tensor::from_data({1, 3}, {1, 2, 3}));
  double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  CHECK(std::abs(t.data()[0] - std::exp(1.0) / z) < 1e-12);
  CHECK(std::abs(t.data()[1] - std::exp(2.0) / z) < 1e-12);
  CHECK(std::abs(t.data()[2] - std::exp(3.0) / z) < 1e-12);

  // rows sum to one
  Rng rng(7);
  Tensor x = rand_tensor(rng, {4, 6}, false);
  Tensor y = softmax(x);
  for (size_t r = 0; r < 4; ++r) {
    double s = 0.0;
    for (size_t j = 0; j < 6; ++j) s += y.data()[r * 6 + j];
    CHECK(std::abs(s - 1.0) < 1e-12);
  }
}

TEST_CASE("elementwise known values") {
  Tensor x = Tensor::from_data({1, 4}, {-1.0, 0.0, 0.5, 2.0});
  CHECK(sigmoid(Tensor::scalar(0.0)).value() == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(citycond::tanh(Tensor::scalar(0.0)).value() == 0.0);
  Tensor r = relu(x);
  CHECK(r.data()[0] == 0.0);
  CHECK(r.data()[1] == 0.0);
  CHECK(r.data()[3] == 2.0);
  CHECK(citycond::sqrt(Tensor::scalar(9.0)).value() == doctest::Approx(3.0).epsilon(1e-15));
}

TEST_CASE("broadcasting semantics") {
  Tensor a = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor b = Tensor::from_data({3}, {10, 20, 30});
  Tensor out = add(a, b);
  CHECK(out.shape() == Shape{2, 3});
  CHECK(out.at({1, 0}) == 14.0);
  CHECK(out.at({0, 2}) == 33.0);

  Tensor c = Tensor::from_data({2, 1}, {1, 2});
  Tensor d = Tensor::from_data({1, 4}, {1, 2, 3, 4});
  Tensor m = mul(c, d);
  CHECK(m.shape() == Shape{2, 4});
  CHECK(m.at({1, 3}) == 8.0);

  try {
    add(a, Tensor::zeros({4}));
    FAIL("expected TensorError");
  } catch (const TensorError& e) {
    std::string msg = e.what();
    CHECK(msg.find("[2,3]") != std::string::npos);
    CHECK(msg.find("[4]") != std::string::npos);
  }
}

TEST_CASE("concat and slice round trip") {
  Rng rng(11);
  Tensor a = rand_tensor(rng, {2, 3}, false);
  Tensor b = rand_tensor(rng, {2, 5}, false);
  Tensor cat = concat({a, b}, 1);
  CHECK(cat.shape() == Shape{2, 8});
  CHECK(cat.at({1, 2}) == a.at({1, 2}));
  CHECK(cat.at({0, 3}) == b.at({0, 0}));
  Tensor back = slice(cat, 1, 3, 5);
  for (size_t i = 0; i < back.size(); ++i) CHECK(back.data()[i] == b.data()[i]);

  CHECK_THROWS_AS(concat({a, Tensor::zeros({3, 5})}, 1), TensorError);
  CHECK_THROWS_AS(slice(cat, 1, 6, 5), TensorError);
  CHECK_THROWS_AS(slice(cat, 3, 0, 1), TensorError);
}

TEST_CASE("reductions known values") {
  Tensor a = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor s0 = sum(a, 0);
  CHECK(s0.shape() == Shape{3});
  CHECK(s0.data()[0] == 5.0);
  Tensor s1 = sum(a, 1);
  CHECK(s1.data()[1] == 15.0);
  CHECK(mean(a, 1).data()[0] == doctest::Approx(2.0).epsilon(1e-15));
  CHECK(sum_all(a).value() == 21.0);
  CHECK(mean_all(a).value() == doctest::Approx(3.5).epsilon(1e-15));
  Tensor mx = max(a, 1);
  CHECK(mx.data()[0] == 3.0);
  CHECK(mx.data()[1] == 6.0);
}

TEST_CASE("max ties route gradient to first index") {
  Tensor x = Tensor::from_data({1, 3}, {1.0, 5.0, 5.0}, true);
  backward(sum_all(max(x, 1)));
  CHECK(x.grad()[0] == 0.0);
  CHECK(x.grad()[1] == 1.0);
  CHECK(x.grad()[2] == 0.0);
}

TEST_CASE("backward basics") {
  Tensor x = Tensor::from_data({2, 2}, {1, 2, 3, 4}, true);
  backward(sum_all(x));
  for (double g : x.grad()) CHECK(g == 1.0);

  // repeated backward accumulates (doubles) until zeroed
  Tensor y = mul(x, x);
  Tensor loss = sum_all(y);
  x.zero_grad();
  backward(loss);
  std::vector<double> once = x.grad();
  backward(loss);
  for (size_t i = 0; i < once.size(); ++i) CHECK(x.grad()[i] == doctest::Approx(2.0 * once[i]).epsilon(1e-15));

  x.zero_grad();
  for (double g : x.grad()) CHECK(g == 0.0);

  // non-scalar loss rejected
  CHECK_THROWS_AS(backward(y), TensorError);

  // gradient flows through shared subexpressions
  Tensor a = Tensor::scalar(3.0);
  Tensor a_rg = Tensor::from_data({1}, {3.0}, true);
  Tensor shared = mul(a_rg, a_rg);
  backward(add(sum_all(shared), sum_all(shared)));
  CHECK(a_rg.grad()[0] == doctest::Approx(12.0).epsilon(1e-12));
}

TEST_CASE("embedding lookup") {
  Tensor table = Tensor::from_data({3, 2}, {1, 2, 3, 4, 5, 6}, true);
  Tensor rows = embedding_lookup(table, {2, 0, 2});
  CHECK(rows.shape() == Shape{3, 2});
  CHECK(rows.at({0, 0}) == 5.0);
  CHECK(rows.at({1, 1}) == 2.0);
  backward(sum_all(rows));
  CHECK(table.grad()[0] == 1.0);  // row 0 used once
  CHECK(table.grad()[2] == 0.0);  // row 1 unused
  CHECK(table.grad()[4] == 2.0);  // row 2 used twice
  CHECK_THROWS_AS(embedding_lookup(table, {3}), TensorError);
}

TEST_CASE("conv1d causality") {
  Rng rng(5);
  Tensor w = rand_tensor(rng, {3, 2, 4}, false);
  Tensor x1 = rand_tensor(rng, {6, 2}, false);
  std::vector<double> bumped = x1.data();
  bumped[4 * 2] += 100.0;  // change only t=4
  Tensor x2 = Tensor::from_data({6, 2}, bumped);
  Tensor y1 = conv1d(x1, w, 1);
  Tensor y2 = conv1d(x2, w, 1);
  for (size_t t = 0; t < 4; ++t)
    for (size_t c = 0; c < 4; ++c) CHECK(y1.at({t, c}) == y2.at({t, c}));
  bool diff = false;
  for (size_t c = 0; c < 4; ++c) diff = diff || y1.at({4, c}) != y2.at({4, c});
  CHECK(diff);
  CHECK(y1.shape() == Shape{6, 4});
}

TEST_CASE("uniform factory is deterministic per seed") {
  Rng r1(99), r2(99), r3(100);
  Tensor a = Tensor::uniform({4, 4}, r1, -1, 1);
  Tensor b = Tensor::uniform({4, 4}, r2, -1, 1);
  Tensor c = Tensor::uniform({4, 4}, r3, -1, 1);
  bool same = true, differs = false;
  for (size_t i = 0; i < a.size(); ++i) {
    same = same && a.data()[i] == b.data()[i];
    differs = differs || a.data()[i] != c.data()[i];
  }
  CHECK(same);
  CHECK(differs);
}

TEST_CASE("all_finite flags nan and inf") {
  CHECK(all_finite(Tensor::from_data({2}, {1.0, -2.0})));
  CHECK_FALSE(all_finite(Tensor::from_data({2}, {1.0, std::nan("")})));
  CHECK_FALSE(all_finite(Tensor::from_data({2}, {1.0, INFINITY})));
}

// ---------------------------------------------------------------------------
// finite-difference checks, >= 20 random trials per op
// ---------------------------------------------------------------------------

TEST_CASE("fd: elementwise binary ops with broadcasting") {
  Rng rng(1234);
  for (int trial = 0; trial < kTrials; ++trial) {
    Shape sa = rand_shape(rng, 2);
    Shape sb = sa;
    if (rng.below(2) == 0 && sa.size() == 2) sb = {sa[1]};          // [m,n] op [n]
    if (rng.below(3) == 0) sb[sb.size() - 1] = 1;                   // broadcast last axis
    Tensor a = rand_tensor(rng, sa, true, 0.05);
    Tensor b = rand_tensor(rng, sb, true, 0.6);  // keep divisors away from 0
    Shape out_shape = a.shape();
    Tensor probe = probe_like(rng, out_shape);
    auto run = [&](auto op) {
      auto rep = fd::check({a, b}, [&] { return sum_all(mul(op(a, b), probe)); });
      CHECK(rep.max_rel_err < kFdTol);
    };
    run([](const Tensor& x, const Tensor& y) { return add(x, y); });
    run([](const Tensor& x, const Tensor& y) { return sub(x, y); });
    run([](const Tensor& x, const Tensor& y) { return mul(x, y); });
    run([](const Tensor& x, const Tensor& y) { return div(x, y); });
  }
}

TEST_CASE("fd: scalar and unary ops") {
  Rng rng(4321);
  for (int trial = 0; trial < kTrials; ++trial) {
    Shape s = rand_shape(rng);
    Tensor x = rand_tensor(rng, s, true, 0.05);  // stay off the relu kink
    Tensor probe = probe_like(rng, s);
    auto run = [&](auto op) {
      auto rep = fd::check({x}, [&] { return sum_all(mul(op(x), probe)); });
      CHECK(rep.max_rel_err < kFdTol);
    };
    run([](const Tensor& t) { return add_scalar(t, 0.7); });
    run([](const Tensor& t) { return mul_scalar(t, -1.3); });
    run([](const Tensor& t) { return sigmoid(t); });
    run([](const Tensor& t) { return citycond::tanh(t); });
    run([](const Tensor& t) { return relu(t); });
    run([](const Tensor& t) { return citycond::sqrt(add_scalar(mul(t, t), 0.5)); });
  }
}

TEST_CASE("fd: matmul and transpose") {
  Rng rng(99);
  for (int trial = 0; trial < kTrials; ++trial) {
    size_t m = 1 + rng.below(8), k = 1 + rng.below(8), n = 1 + rng.below(8);
    Tensor a = rand_tensor(rng, {m, k});
    Tensor b = rand_tensor(rng, {k, n});
    Tensor probe = probe_like(rng, {m, n});
    auto rep = fd::check({a, b}, [&] { return sum_all(mul(matmul(a, b), probe)); });
    CHECK(rep.max_rel_err < kFdTol);

    Tensor probe_t = probe_like(rng, {k, m});
    auto rep_t = fd::check({a}, [&] { return sum_all(mul(transpose(a), probe_t)); });
    CHECK(rep_t.max_rel_err < kFdTol);
  }
}

TEST_CASE("fd: structure ops") {
  Rng rng(2025);
  for (int trial = 0; trial < kTrials; ++trial) {
    size_t m = 2 + rng.below(6), n = 2 + rng.below(6);
    Tensor a = rand_tensor(rng, {m, n});
    Tensor b = rand_tensor(rng, {m, 1 + rng.below(4)});

    Tensor probe_r = probe_like(rng, {m * n});
    auto rep_r = fd::check({a}, [&] { return sum_all(mul(reshape(a, {m * n}), probe_r)); });
    CHECK(rep_r.max_rel_err < kFdTol);

    size_t start = rng.below(n - 1);
    size_t len = 1 + rng.below(n - start);
    Tensor probe_s = probe_like(rng, {m, len});
    auto rep_s = fd::check({a}, [&] { return sum_all(mul(slice(a, 1, start, len), probe_s)); });
    CHECK(rep_s.max_rel_err < kFdTol);

    Tensor probe_c = probe_like(rng, {m, n + b.dim(1)});
    auto rep_c = fd::check({a, b}, [&] { return sum_all(mul(concat({a, b}, 1), probe_c)); });
    CHECK(rep_c.max_rel_err < kFdTol);

    Tensor row = rand_tensor(rng, {1, n});
    Tensor probe_b = probe_like(rng, {m, n});
    auto rep_b = fd::check({row}, [&] { return sum_all(mul(broadcast_to(row, {m, n}), probe_b)); });
    CHECK(rep_b.max_rel_err < kFdTol);
  }
}

TEST_CASE("fd: reductions") {
  Rng rng(314);
  for (int trial = 0; trial < kTrials; ++trial) {
    size_t m = 2 + rng.below(6), n = 2 + rng.below(6);
    size_t axis = rng.below(2);
    Tensor a = rand_tensor(rng, {m, n});
    Shape out_shape = {axis == 0 ? n : m};
    Tensor probe = probe_like(rng, out_shape);

    auto rep_s = fd::check({a}, [&] { return sum_all(mul(sum(a, axis), probe)); });
    CHECK(rep_s.max_rel_err < kFdTol);
    auto rep_m = fd::check({a}, [&] { return sum_all(mul(mean(a, axis), probe)); });
    CHECK(rep_m.max_rel_err < kFdTol);
    auto rep_a = fd::check({a}, [&] { return sum_all(mul(mean_all(a), Tensor::scalar(1.7))); });
    CHECK(rep_a.max_rel_err < kFdTol);
  }
}

TEST_CASE("fd: max with well-separated entries") {
  Rng rng(555);
  for (int trial = 0; trial < kTrials; ++trial) {
    size_t m = 2 + rng.below(5), n = 2 + rng.below(5);
    // entries separated by >= 0.01 so the 1e-5 probe cannot flip the argmax
    std::vector<double> vals(m * n);
    for (size_t i = 0; i < vals.size(); ++i) vals[i] = 0.02 * static_cast<double>(rng.below(1000)) +
                                                       1e-3 * static_cast<double>(i % 7);
    for (size_t r = 0; r < m; ++r) {  // force distinct values within each row
      for (size_t c = 0; c < n; ++c) vals[r * n + c] += 0.01 * static_cast<double>((r * n + c) % n);
    }
    Tensor a = Tensor::from_data({m, n}, vals, true);
    Tensor probe = probe_like(rng, {m});
    auto rep = fd::check({a}, [&] { return sum_all(mul(max(a, 1), probe)); });
    CHECK(rep.max_rel_err < kFdTol);
  }
}

TEST_CASE("fd: softmax") {
  Rng rng(777);
  for (int trial = 0; trial < kTrials; ++trial) {
    size_t m = 1 + rng.below(6), n = 2 + rng.below(7);
    Tensor a = rand_tensor(rng, {m, n});
    Tensor probe = probe_like(rng, {m, n});
    auto rep = fd::check({a}, [&] { return sum_all(mul(softmax(a), probe)); });
    CHECK(rep.max_rel_err < kFdTol);
  }
}

TEST_CASE("fd: conv1d across dilations") {
  Rng rng(888);
  for (int trial = 0; trial < kTrials; ++trial) {
    size_t t_len = 4 + rng.below(5), c_in = 1 + rng.below(3), c_out = 1 + rng.below(3);
    size_t k = 2 + rng.below(2);
    size_t dilation = 1 + rng.below(3);
    Tensor x = rand_tensor(rng, {t_len, c_in});
    Tensor w = rand_tensor(rng, {k, c_in, c_out});
    Tensor probe = probe_like(rng, {t_len, c_out});
    auto rep = fd::check({x, w}, [&] { return sum_all(mul(conv1d(x, w, dilation), probe)); });
    CHECK(rep.max_rel_err < kFdTol);
  }
}

TEST_CASE("fd: embedding lookup") {
  Rng rng(1010);
  for (int trial = 0; trial < kTrials; ++trial) {
    size_t v = 3 + rng.below(5), d = 1 + rng.below(6);
    Tensor table = rand_tensor(rng, {v, d});
    std::vector<size_t> idx(4);
    for (auto& i : idx) i = rng.below(v);
    Tensor probe = probe_like(rng, {idx.size(), d});
    auto rep = fd::check({table}, [&] { return sum_all(mul(embedding_lookup(table, idx), probe)); });
    CHECK(rep.max_rel_err < kFdTol);
  }
}

TEST_CASE("fd: composite softmax over matmul") {
  Rng rng(4242);
  for (int trial = 0; trial < kTrials; ++trial) {
    size_t m = 1 + rng.below(5), k = 1 + rng.below(5), n = 2 + rng.below(5);
    Tensor x = rand_tensor(rng, {m, k});
    Tensor w = rand_tensor(rng, {k, n});
    Tensor probe = probe_like(rng, {m, n});
    auto rep = fd::check({x, w}, [&] { return sum_all(mul(softmax(matmul(x, w)), probe)); });
    CHECK(rep.max_rel_err < kFdTol);
  }
}
