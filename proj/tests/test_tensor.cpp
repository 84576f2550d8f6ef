// Tensor engine unit tests. Expected values come from independent oracles
// computed here (triple-loop contraction, direct formulas in f64, explicit
// convolution loops), not from the operations under test.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "dssm/grad_check.hpp"
#include "dssm/ops.hpp"
#include "dssm/random.hpp"
#include "dssm/tensor.hpp"

using namespace dssm;

namespace {

// reference contraction oracle, independent of ops.hpp
std::vector<double> matmul_oracle(const std::vector<double>& a, const std::vector<double>& b, int64_t m,
                                  int64_t k, int64_t n) {
  std::vector<double> c(static_cast<size_t>(m * n), 0.0);
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j)
      for (int64_t kk = 0; kk < k; ++kk)
        c[static_cast<size_t>(i * n + j)] += a[static_cast<size_t>(i * k + kk)] * b[static_cast<size_t>(kk * n + j)];
  return c;
}

}  // namespace

TEST_CASE("matmul identity and hand contraction") {
  auto eye = Tensor<double>::from({2, 2}, {1, 0, 0, 1});
  auto v = Tensor<double>::from({2, 1}, {3, 4});
  auto r = matmul(eye, v);
  CHECK(r.data()[0] == 3.0);
  CHECK(r.data()[1] == 4.0);

  auto a = Tensor<double>::from({1, 2}, {1, 2});
  auto b = Tensor<double>::from({2, 1}, {3, 4});
  CHECK(matmul(a, b).item() == doctest::Approx(11.0).epsilon(1e-15));
}

TEST_CASE("matmul matches triple-loop oracle in f64") {
  Rng rng = Rng::seeded(7);
  Tensor<double> a({4, 5}), b({5, 3});
  rng.fill_uniform(a, -1, 1);
  rng.fill_uniform(b, -1, 1);
  auto c = matmul(a, b);
  auto ref = matmul_oracle(a.vec(), b.vec(), 4, 5, 3);
  for (int64_t i = 0; i < c.size(); ++i)
    CHECK(std::fabs(c.data()[i] - ref[static_cast<size_t>(i)]) <= 1e-12);
}

TEST_CASE("matmul broadcast over batch dims") {
  Rng rng = Rng::seeded(8);
  Tensor<double> a({3, 2, 4}), b({4, 2});
  rng.fill_uniform(a, -1, 1);
  rng.fill_uniform(b, -1, 1);
  auto c = matmul(a, b);
  REQUIRE(c.shape() == Shape{3, 2, 2});
  for (int64_t bi = 0; bi < 3; ++bi) {
    std::vector<double> ai(a.data() + bi * 8, a.data() + (bi + 1) * 8);
    auto ref = matmul_oracle(ai, b.vec(), 2, 4, 2);
    for (int64_t i = 0; i < 4; ++i) CHECK(c.data()[bi * 4 + i] == doctest::Approx(ref[static_cast<size_t>(i)]).epsilon(1e-14));
  }
}

TEST_CASE("matmul shape errors name both shapes") {
  Tensor<double> a({2, 3}), b({4, 2});
  CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("[2,3]"), ShapeError);
  CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("[4,2]"), ShapeError);
}

TEST_CASE("pointwise closed forms") {
  auto x = Tensor<double>::from({1}, {0.0});
  CHECK(pointwise("softplus", x).item() == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  CHECK(pointwise("sigmoid", x).item() == doctest::Approx(0.5).epsilon(1e-15));
  CHECK_THROWS_AS(pointwise("gelu", x), ConfigError);
}

TEST_CASE("silu composes from the sigmoid oracle") {
  for (double v : {-2.0, -1.0, 0.0, 1.0, 2.0}) {
    auto x = Tensor<double>::from({1}, {v});
    double expect = v * (1.0 / (1.0 + std::exp(-v)));  // independent route
    CHECK(pointwise("silu", x).item() == doctest::Approx(expect).epsilon(1e-14));
  }
}

TEST_CASE("softplus and sigmoid are stable at extremes") {
  auto x = Tensor<double>::from({4}, {-1000, -30, 30, 1000});
  auto sp = softplus(x);
  auto sg = sigmoid(x);
  CHECK(sp.all_finite());
  CHECK(sg.all_finite());
  CHECK(sp.data()[0] == 0.0);
  CHECK(sp.data()[3] == doctest::Approx(1000.0));
  CHECK(sg.data()[0] == 0.0);
  CHECK(sg.data()[3] == 1.0);
}

TEST_CASE("softmax symmetry, overflow, and f64 formula oracle") {
  auto s = softmax(Tensor<double>::from({2}, {0, 0}), 0);
  CHECK(s.data()[0] == doctest::Approx(0.5).epsilon(1e-15));

  auto big = softmax(Tensor<double>::from({2}, {1000, 1000}), 0);
  CHECK(big.all_finite());
  CHECK(big.data()[0] == doctest::Approx(0.5).epsilon(1e-15));

  auto x = Tensor<double>::from({3}, {1, 2, 3});
  auto y = softmax(x, 0);
  double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  for (int i = 0; i < 3; ++i) CHECK(std::fabs(y.data()[i] - std::exp(1.0 + i) / z) <= 1e-12);
}

TEST_CASE("softmax rows sum to one") {
  Rng rng = Rng::seeded(3);
  Tensor<float> x({5, 7});
  rng.fill_uniform(x, -8, 8);
  auto y = softmax(x, -1);
  for (int64_t r = 0; r < 5; ++r) {
    double sum = 0;
    for (int64_t j = 0; j < 7; ++j) sum += y.data()[r * 7 + j];
    CHECK(std::fabs(sum - 1.0) <= 1e-6);
  }
}

TEST_CASE("rmsnorm constant, zero, and scale invariance") {
  Tensor<double> gain({4}, 1.0);
  for (double c : {2.5, -1.25}) {
    Tensor<double> x({1, 4}, c);
    auto y = rmsnorm(x, gain, 1e-12);
    for (int i = 0; i < 4; ++i) CHECK(y.data()[i] == doctest::Approx(c > 0 ? 1.0 : -1.0).epsilon(1e-6));
  }
  Tensor<double> z({2, 4}, 0.0);
  auto yz = rmsnorm(z, gain, 1e-5);
  for (int64_t i = 0; i < yz.size(); ++i) CHECK(yz.data()[i] == 0.0);

  Rng rng = Rng::seeded(11);
  Tensor<double> x({3, 4});
  rng.fill_uniform(x, -2, 2);
  auto y1 = rmsnorm(x, gain, 1e-12);
  Tensor<double> xs({3, 4});
  for (int64_t i = 0; i < x.size(); ++i) xs.data()[i] = 3.7 * x.data()[i];
  auto y2 = rmsnorm(xs, gain, 1e-12);
  for (int64_t i = 0; i < x.size(); ++i) CHECK(std::fabs(y1.data()[i] - y2.data()[i]) <= 1e-6);
}

TEST_CASE("rmsnorm output has unit rms for gain one") {
  Rng rng = Rng::seeded(12);
  Tensor<double> x({4, 8});
  rng.fill_uniform(x, -3, 3);
  Tensor<double> gain({8}, 1.0);
  auto y = rmsnorm(x, gain, 1e-12);
  for (int64_t r = 0; r < 4; ++r) {
    double ms = 0;
    for (int64_t i = 0; i < 8; ++i) ms += y.data()[r * 8 + i] * y.data()[r * 8 + i];
    CHECK(std::fabs(std::sqrt(ms / 8) - 1.0) <= 1e-4);
  }
}

TEST_CASE("conv identity tap adds bias only") {
  Rng rng = Rng::seeded(4);
  Tensor<double> x({6, 3});
  rng.fill_uniform(x, -1, 1);
  Tensor<double> k({4, 3}, 0.0);
  for (int64_t c = 0; c < 3; ++c) k.data()[3 * 3 + c] = 1.0;  // last tap = current position
  auto bias = Tensor<double>::from({3}, {0.5, -0.5, 0.0});
  auto y = depthwise_causal_conv1d(x, k, bias);
  for (int64_t t = 0; t < 6; ++t)
    for (int64_t c = 0; c < 3; ++c)
      CHECK(y.data()[t * 3 + c] == doctest::Approx(x.data()[t * 3 + c] + bias.data()[c]).epsilon(1e-15));
}

TEST_CASE("conv impulse response is causal and K-limited") {
  Tensor<double> x({8, 1}, 0.0);
  x.data()[0] = 1.0;  // one-hot at t=0
  Tensor<double> k = Tensor<double>::from({3, 1}, {0.3, 0.2, 0.1});
  Tensor<double> b({1}, 0.0);
  auto y = depthwise_causal_conv1d(x, k, b);
  CHECK(y.data()[0] == doctest::Approx(0.1));
  CHECK(y.data()[1] == doctest::Approx(0.2));
  CHECK(y.data()[2] == doctest::Approx(0.3));
  for (int64_t t = 3; t < 8; ++t) CHECK(y.data()[t] == 0.0);
}

TEST_CASE("conv matches explicit double loop oracle") {
  Rng rng = Rng::seeded(5);
  const int64_t L = 9, D = 3, K = 4;
  Tensor<double> x({L, D}), k({K, D}), b({D});
  rng.fill_uniform(x, -1, 1);
  rng.fill_uniform(k, -1, 1);
  rng.fill_uniform(b, -1, 1);
  auto y = depthwise_causal_conv1d(x, k, b);
  for (int64_t t = 0; t < L; ++t)
    for (int64_t c = 0; c < D; ++c) {
      double acc = b.data()[c];
      for (int64_t kk = 0; kk < K; ++kk) {
        int64_t src = t - K + 1 + kk;
        if (src >= 0) acc += k.data()[kk * D + c] * x.data()[src * D + c];
      }
      CHECK(std::fabs(y.data()[t * D + c] - acc) <= 1e-12);
    }
}

TEST_CASE("conv allows kernels longer than the sequence") {
  Tensor<double> x({2, 1}, 1.0);
  Tensor<double> k({5, 1}, 1.0);
  Tensor<double> b({1}, 0.0);
  auto y = depthwise_causal_conv1d(x, k, b);
  CHECK(y.data()[0] == doctest::Approx(1.0));
  CHECK(y.data()[1] == doctest::Approx(2.0));
}

TEST_CASE("cross entropy closed forms and oracle") {
  Tensor<double> uniform({3, 4}, 0.0);
  std::vector<int32_t> tg{0, 1, 2};
  CHECK(cross_entropy(uniform, std::span<const int32_t>(tg)).item() ==
        doctest::Approx(std::log(4.0)).epsilon(1e-12));

  Tensor<double> peak({1, 4}, 0.0);
  peak.data()[2] = 200.0;
  std::vector<int32_t> t2{2};
  CHECK(cross_entropy(peak, std::span<const int32_t>(t2)).item() == doctest::Approx(0.0).epsilon(1e-12));

  Rng rng = Rng::seeded(6);
  Tensor<double> logits({3, 5});
  rng.fill_uniform(logits, -2, 2);
  std::vector<int32_t> t3{4, 0, 2};
  double expect = 0;
  for (int64_t r = 0; r < 3; ++r) {
    double z = 0;
    for (int64_t j = 0; j < 5; ++j) z += std::exp(logits.data()[r * 5 + j]);
    expect -= std::log(std::exp(logits.data()[r * 5 + t3[static_cast<size_t>(r)]]) / z);
  }
  expect /= 3;
  CHECK(cross_entropy(logits, std::span<const int32_t>(t3)).item() == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("cross entropy rejects out-of-range targets with position") {
  Tensor<double> logits({2, 3}, 0.0);
  std::vector<int32_t> tg{1, 7};
  CHECK_THROWS_WITH_AS(cross_entropy(logits, std::span<const int32_t>(tg)), doctest::Contains("position 1"),
                       DataError);
}

TEST_CASE("cross entropy mask restricts the mean") {
  Tensor<double> logits({2, 4}, 0.0);
  logits.data()[0 * 4 + 1] = 5.0;
  std::vector<int32_t> tg{1, 2};
  std::vector<uint8_t> mask{1, 0};
  double full = cross_entropy(logits, std::span<const int32_t>(tg)).item();
  double masked = cross_entropy(logits, std::span<const int32_t>(tg), static_cast<Tape<double>*>(nullptr),
                                std::span<const uint8_t>(mask))
                      .item();
  CHECK(masked < full);
}

TEST_CASE("grad_check: quadratic is exact for central differences") {
  Rng rng = Rng::seeded(9);
  Tensor<double> x({6});
  rng.fill_uniform(x, -2, 2);
  double err = grad_check(
      [](const Tensor<double>& v, Tape<double>& tape) { return dot(v, v, &tape); }, x, 1e-5);
  CHECK(err <= 1e-8);
}

TEST_CASE("grad_check: cross entropy over random logits") {
  Rng rng = Rng::seeded(10);
  Tensor<double> logits({4, 6});
  rng.fill_uniform(logits, -1, 1);
  std::vector<int32_t> tg{1, 5, 0, 3};
  double err = grad_check(
      [&](const Tensor<double>& v, Tape<double>& tape) {
        return cross_entropy(v, std::span<const int32_t>(tg), &tape);
      },
      logits, 1e-5);
  CHECK(err <= 1e-6);
}

TEST_CASE("grad_check across the op set") {
  Rng rng = Rng::seeded(13);
  Tensor<double> x({3, 4});
  rng.fill_uniform(x, -1.5, 1.5);

  SUBCASE("matmul + silu") {
    Tensor<double> w({4, 4});
    rng.fill_uniform(w, -1, 1);
    double err = grad_check_multi(
        [&](Tape<double>& tape) { return sum_all(silu(matmul(x, w, &tape), &tape), &tape); }, {x, w});
    CHECK(err <= 1e-6);
  }
  SUBCASE("rmsnorm") {
    Tensor<double> gain({4});
    rng.fill_uniform(gain, 0.5, 1.5);
    double err = grad_check_multi(
        [&](Tape<double>& tape) {
          auto y = rmsnorm(x, gain, 1e-5, &tape);
          return dot(y, y, &tape);
        },
        {x, gain});
    CHECK(err <= 1e-6);
  }
  SUBCASE("grouped rmsnorm") {
    Tensor<double> gain({4});
    rng.fill_uniform(gain, 0.5, 1.5);
    double err = grad_check_multi(
        [&](Tape<double>& tape) {
          auto y = rmsnorm(x, gain, 1e-5, &tape, 2);
          return dot(y, y, &tape);
        },
        {x, gain});
    CHECK(err <= 1e-6);
  }
  SUBCASE("conv") {
    Tensor<double> k({3, 4}), b({4});
    rng.fill_uniform(k, -1, 1);
    rng.fill_uniform(b, -1, 1);
    double err = grad_check_multi(
        [&](Tape<double>& tape) {
          auto y = depthwise_causal_conv1d(x, k, b, &tape);
          return dot(y, y, &tape);
        },
        {x, k, b});
    CHECK(err <= 1e-6);
  }
  SUBCASE("softmax") {
    Tensor<double> w({3, 4});
    rng.fill_uniform(w, 0.1, 2.0);
    double err = grad_check_multi(
        [&](Tape<double>& tape) { return dot(softmax(x, -1, &tape), w, &tape); }, {x});
    CHECK(err <= 1e-6);
  }
  SUBCASE("slice and concat") {
    double err = grad_check_multi(
        [&](Tape<double>& tape) {
          auto a = slice_cols(x, 0, 2, &tape);
          auto b = slice_cols(x, 2, 4, &tape);
          auto y = concat_cols(b, a, &tape);
          return dot(y, y, &tape);
        },
        {x});
    CHECK(err <= 1e-8);
  }
  SUBCASE("sub_scaled with scalar lambda") {
    Tensor<double> y({3, 4}), lam({1});
    rng.fill_uniform(y, -1, 1);
    lam.data()[0] = 0.37;
    double err = grad_check_multi(
        [&](Tape<double>& tape) {
          auto d = sub_scaled(x, y, lam, &tape);
          return dot(d, d, &tape);
        },
        {x, y, lam});
    CHECK(err <= 1e-6);
  }
}

TEST_CASE("tape populates every requires_grad leaf") {
  Rng rng = Rng::seeded(14);
  Tensor<float> x({2, 3}), w({3, 3});
  rng.fill_uniform(x, -1, 1);
  rng.fill_uniform(w, -1, 1);
  x.set_requires_grad(true);
  w.set_requires_grad(true);
  Tape<float> tape;
  auto loss = sum_all(matmul(x, w, &tape), &tape);
  tape.backward(loss);
  CHECK(x.has_grad());
  CHECK(w.has_grad());
  bool any = false;
  for (float g : x.grad_vec()) any |= (g != 0.0f);
  CHECK(any);
}

TEST_CASE("ops are deterministic within a build") {
  Rng rng = Rng::seeded(15);
  Tensor<float> a({16, 16}), b({16, 16});
  rng.fill_uniform(a, -1, 1);
  rng.fill_uniform(b, -1, 1);
  auto c1 = matmul(a, b);
  auto c2 = matmul(a, b);
  for (int64_t i = 0; i < c1.size(); ++i) CHECK(c1.data()[i] == c2.data()[i]);
}

TEST_CASE("dropout is deterministic given the seed and scales kept cells") {
  Tensor<float> x({64, 4}, 1.0f);
  Rng r1 = Rng::seeded(21), r2 = Rng::seeded(21);
  auto y1 = dropout(x, 0.5, r1);
  auto y2 = dropout(x, 0.5, r2);
  for (int64_t i = 0; i < y1.size(); ++i) {
    CHECK(y1.data()[i] == y2.data()[i]);
    CHECK((y1.data()[i] == 0.0f || y1.data()[i] == 2.0f));
  }
}
