// Selective-SSM core tests: combine associativity, selective parameter
// projections against per-step loops, discretization closed forms, hand scan
// cases, parallel/sequential agreement, causality, data-controlled linearity,
// and gradient checks for the whole s6 path.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>
#include <vector>

#include "dssm/grad_check.hpp"
#include "dssm/s6.hpp"

using namespace dssm;

namespace {

template <typename T>
S6Parameters<T> random_s6(int64_t d, int64_t n, int64_t h, uint64_t seed) {
  Rng rng = Rng::seeded(seed);
  return S6Parameters<T>::init(d, n, h, rng);
}

// scale-normalized max deviation between two scan outputs
template <typename T>
double scan_rel_diff(const Tensor<T>& a, const Tensor<T>& b) {
  double scale = 0, diff = 0;
  for (int64_t i = 0; i < a.size(); ++i) {
    scale = std::max(scale, std::fabs(static_cast<double>(b.data()[i])));
    diff = std::max(diff, std::fabs(static_cast<double>(a.data()[i]) - static_cast<double>(b.data()[i])));
  }
  return diff / std::max(scale, 1e-30);
}

}  // namespace

TEST_CASE("scan element combine is associative to round-off") {
  Rng rng = Rng::seeded(42);
  for (int trial = 0; trial < 1000; ++trial) {
    ScanElement<double> e1{rng.uniform(0, 1), rng.uniform(-2, 2)};
    ScanElement<double> e2{rng.uniform(0, 1), rng.uniform(-2, 2)};
    ScanElement<double> e3{rng.uniform(0, 1), rng.uniform(-2, 2)};
    auto left = combine(combine(e1, e2), e3);
    auto right = combine(e1, combine(e2, e3));
    CHECK(std::fabs(left.a - right.a) <= 1e-15);
    CHECK(std::fabs(left.b - right.b) <= 1e-14);
  }
}

TEST_CASE("selective params at zero input") {
  auto p = random_s6<double>(4, 3, 2, 1);
  std::fill(p.delta_bias.data(), p.delta_bias.data() + p.delta_bias.size(), 0.0);
  Tensor<double> x({5, 4}, 0.0);
  auto sel = selective_params(x, p);
  for (int64_t i = 0; i < sel.b.size(); ++i) CHECK(sel.b.data()[i] == 0.0);
  for (int64_t i = 0; i < sel.c.size(); ++i) CHECK(sel.c.data()[i] == 0.0);
  for (int64_t i = 0; i < sel.delta.size(); ++i)
    CHECK(sel.delta.data()[i] == doctest::Approx(std::log(2.0)).epsilon(1e-15));
}

TEST_CASE("selective params: zero projection gives constant delta") {
  auto p = random_s6<double>(4, 3, 1, 2);
  std::fill(p.sdelta.data(), p.sdelta.data() + p.sdelta.size(), 0.0);
  p.delta_bias.data()[0] = 0.7;
  Rng rng = Rng::seeded(3);
  Tensor<double> x({6, 4});
  rng.fill_uniform(x, -1, 1);
  auto sel = selective_params(x, p);
  for (int64_t t = 0; t < 6; ++t)
    CHECK(sel.delta.data()[t] == doctest::Approx(stable_softplus(0.7)).epsilon(1e-15));
}

TEST_CASE("selective params match a per-step loop oracle") {
  auto p = random_s6<double>(5, 4, 1, 4);
  Rng rng = Rng::seeded(5);
  Tensor<double> x({7, 5});
  rng.fill_uniform(x, -1, 1);
  auto sel = selective_params(x, p);
  for (int64_t t = 0; t < 7; ++t) {
    for (int64_t s = 0; s < 4; ++s) {
      double accb = 0, accc = 0;
      for (int64_t d = 0; d < 5; ++d) {
        accb += p.sb.data()[s * 5 + d] * x.data()[t * 5 + d];
        accc += p.sc.data()[s * 5 + d] * x.data()[t * 5 + d];
      }
      CHECK(std::fabs(sel.b.data()[t * 4 + s] - accb) <= 1e-12);
      CHECK(std::fabs(sel.c.data()[t * 4 + s] - accc) <= 1e-12);
    }
    double accd = p.delta_bias.data()[0];
    for (int64_t d = 0; d < 5; ++d) accd += p.sdelta.data()[d] * x.data()[t * 5 + d];
    CHECK(std::fabs(sel.delta.data()[t] - stable_softplus(accd)) <= 1e-12);
  }
}

TEST_CASE("selective params reject non-finite input with step index") {
  auto p = random_s6<double>(3, 2, 1, 6);
  Tensor<double> x({4, 3}, 0.0);
  x.data()[2 * 3 + 1] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_WITH_AS(selective_params(x, p), doctest::Contains("step 2"), NumericalError);
}

TEST_CASE("discretize closed forms") {
  Tensor<double> a = Tensor<double>::from({2, 2}, {-1, -2, -3, -4});
  Tensor<double> b({3, 2}, 1.0);

  SUBCASE("delta zero") {
    Tensor<double> delta({3, 1}, 0.0);
    auto d = discretize(a, b, delta);
    for (int64_t i = 0; i < d.abar.size(); ++i) CHECK(d.abar.data()[i] == 1.0);
    for (int64_t i = 0; i < d.bbar.size(); ++i) CHECK(d.bbar.data()[i] == 0.0);
  }
  SUBCASE("A zero") {
    Tensor<double> a0({2, 2}, 0.0);
    Tensor<double> delta({3, 1}, 0.9);
    auto d = discretize(a0, b, delta);
    for (int64_t i = 0; i < d.abar.size(); ++i) CHECK(d.abar.data()[i] == 1.0);
  }
  SUBCASE("A=-1, delta=ln2 halves the state") {
    Tensor<double> a1({1, 1}, -1.0);
    Tensor<double> b1({2, 1}, 1.0);
    Tensor<double> delta({2, 1}, std::log(2.0));
    auto d = discretize(a1, b1, delta);
    for (int64_t i = 0; i < d.abar.size(); ++i) CHECK(d.abar.data()[i] == doctest::Approx(0.5).epsilon(1e-15));
  }
}

TEST_CASE("scan hand cases") {
  SUBCASE("running sum") {
    Tensor<double> abar({3, 1, 1}, 1.0), bbar({3, 1, 1}, 1.0), c({3, 1}, 1.0);
    Tensor<double> x = Tensor<double>::from({3, 1}, {1, 1, 1});
    auto y = scan_sequential(abar, bbar, c, x);
    CHECK(y.data()[0] == 1.0);
    CHECK(y.data()[1] == 2.0);
    CHECK(y.data()[2] == 3.0);
  }
  SUBCASE("zero decay is memoryless") {
    Rng rng = Rng::seeded(7);
    Tensor<double> abar({5, 2, 3}, 0.0), bbar({5, 2, 3}), c({5, 3}), x({5, 2});
    rng.fill_uniform(bbar, -1, 1);
    rng.fill_uniform(c, -1, 1);
    rng.fill_uniform(x, -1, 1);
    auto y = scan_sequential(abar, bbar, c, x);
    for (int64_t t = 0; t < 5; ++t)
      for (int64_t d = 0; d < 2; ++d) {
        double acc = 0;
        for (int64_t n = 0; n < 3; ++n)
          acc += c.data()[t * 3 + n] * bbar.data()[(t * 2 + d) * 3 + n] * x.data()[t * 2 + d];
        CHECK(y.data()[t * 2 + d] == doctest::Approx(acc).epsilon(1e-14));
      }
  }
  SUBCASE("geometric decay") {
    Tensor<double> abar({3, 1, 1}, 0.5), bbar({3, 1, 1}, 1.0), c({3, 1}, 1.0);
    Tensor<double> x = Tensor<double>::from({3, 1}, {1, 0, 0});
    auto y = scan_sequential(abar, bbar, c, x);
    CHECK(y.data()[0] == doctest::Approx(1.0));
    CHECK(y.data()[1] == doctest::Approx(0.5));
    CHECK(y.data()[2] == doctest::Approx(0.25));
  }
}

TEST_CASE("parallel scan equals sequential") {
  SUBCASE("single element") {
    Tensor<double> abar({1, 1, 1}, 0.3), bbar({1, 1, 1}, 0.7), c({1, 1}, 2.0);
    Tensor<double> x({1, 1}, 1.5);
    auto y = scan_parallel(abar, bbar, c, x);
    CHECK(y.item() == doctest::Approx(2.0 * 0.7 * 1.5).epsilon(1e-15));
  }
  SUBCASE("f64 grid including non powers of two") {
    for (int64_t l : {1, 2, 3, 7, 64, 257}) {
      for (uint64_t seed : {1ull, 2ull}) {
        Rng rng = Rng::seeded(seed * 100 + static_cast<uint64_t>(l));
        Tensor<double> abar({l, 2, 4}), bbar({l, 2, 4}), c({l, 4}), x({l, 2});
        rng.fill_uniform(abar, 0.0, 1.0);
        rng.fill_uniform(bbar, -1, 1);
        rng.fill_uniform(c, -1, 1);
        rng.fill_uniform(x, -1, 1);
        auto ys = scan_sequential(abar, bbar, c, x);
        auto yp = scan_parallel(abar, bbar, c, x);
        CHECK(scan_rel_diff(yp, ys) <= 1e-10);
      }
    }
  }
  SUBCASE("f32 L=256 random") {
    Rng rng = Rng::seeded(9);
    Tensor<float> abar({256, 8, 16}), bbar({256, 8, 16}), c({256, 16}), x({256, 8});
    rng.fill_uniform(abar, 0.0, 1.0);
    rng.fill_uniform(bbar, -1, 1);
    rng.fill_uniform(c, -1, 1);
    rng.fill_uniform(x, -1, 1);
    auto ys = scan_sequential(abar, bbar, c, x);
    auto yp = scan_parallel(abar, bbar, c, x);
    CHECK(scan_rel_diff(yp, ys) <= 1e-5);
  }
}

TEST_CASE("s6_forward zero input gives zero output") {
  auto p = random_s6<double>(4, 3, 2, 11);
  Tensor<double> x({6, 4}, 0.0);
  for (ScanMode m : {ScanMode::Sequential, ScanMode::Parallel}) {
    auto y = s6_forward(x, p, m);
    for (int64_t i = 0; i < y.size(); ++i) CHECK(y.data()[i] == 0.0);
  }
}

TEST_CASE("discretize + scan reproduce the geometric hand case") {
  S6Parameters<double> p;
  p.channels = 1;
  p.d_state = 1;
  p.heads = 1;
  p.A = Tensor<double>::from({1, 1}, {-1.0});
  p.sdelta = Tensor<double>::from({1, 1}, {0.0});
  p.delta_bias = Tensor<double>::from({1}, {0.0});
  // delta = softplus(0) = ln2 -> abar = exp(-ln2) = 0.5; choose B so bbar = 1
  Tensor<double> x = Tensor<double>::from({3, 1}, {1, 0, 0});
  Tensor<double> b_forced({3, 1}, 1.0 / std::log(2.0));
  Tensor<double> delta({3, 1}, std::log(2.0));
  auto disc = discretize(p.A, b_forced, delta);
  Tensor<double> c_forced({3, 1}, 1.0);
  auto y = scan_sequential(disc.abar, disc.bbar, c_forced, x);
  CHECK(y.data()[0] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(y.data()[1] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(y.data()[2] == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("s6_forward is causal: future perturbations leave the prefix bit-identical") {
  auto p = random_s6<double>(4, 3, 2, 13);
  Rng rng = Rng::seeded(14);
  Tensor<double> x({10, 4});
  rng.fill_uniform(x, -1, 1);
  for (ScanMode m : {ScanMode::Sequential, ScanMode::Parallel}) {
    auto y0 = s6_forward(x, p, m);
    Tensor<double> x2 = x.clone();
    const int64_t t0 = 6;
    for (int64_t t = t0 + 1; t < 10; ++t)
      for (int64_t d = 0; d < 4; ++d) x2.data()[t * 4 + d] += rng.uniform(0.5, 1.5);
    auto y1 = s6_forward(x2, p, m);
    for (int64_t t = 0; t <= t0; ++t)
      for (int64_t d = 0; d < 4; ++d) CHECK(y0.data()[t * 4 + d] == y1.data()[t * 4 + d]);
  }
}

TEST_CASE("s6 acts linearly on the input under frozen selective parameters") {
  auto p = random_s6<double>(3, 4, 1, 15);
  Rng rng = Rng::seeded(16);
  Tensor<double> xref({8, 3}), x1({8, 3}), x2({8, 3});
  rng.fill_uniform(xref, -1, 1);
  rng.fill_uniform(x1, -1, 1);
  rng.fill_uniform(x2, -1, 1);
  auto sel = selective_params(xref, p);
  auto disc = discretize(p.A, sel.b, sel.delta);
  const double alpha = 0.7, beta = -1.3;
  Tensor<double> xc({8, 3});
  for (int64_t i = 0; i < xc.size(); ++i) xc.data()[i] = alpha * x1.data()[i] + beta * x2.data()[i];
  auto yc = scan_sequential(disc.abar, disc.bbar, sel.c, xc);
  auto y1 = scan_sequential(disc.abar, disc.bbar, sel.c, x1);
  auto y2 = scan_sequential(disc.abar, disc.bbar, sel.c, x2);
  for (int64_t i = 0; i < yc.size(); ++i)
    CHECK(std::fabs(yc.data()[i] - (alpha * y1.data()[i] + beta * y2.data()[i])) <= 1e-6);
}

TEST_CASE("discretize gradients pass finite differences") {
  Rng rng = Rng::seeded(17);
  Tensor<double> a({3, 2});
  rng.fill_uniform(a, -2, -0.2);
  Tensor<double> b({4, 2}), delta({4, 1});
  rng.fill_uniform(b, -1, 1);
  rng.fill_uniform(delta, 0.05, 0.9);
  Tensor<double> wa({4, 3, 2}), wb({4, 3, 2});
  rng.fill_uniform(wa, -1, 1);
  rng.fill_uniform(wb, -1, 1);
  double err = grad_check_multi(
      [&](Tape<double>& tape) {
        auto d = discretize(a, b, delta, &tape);
        return add(dot(d.abar, wa, &tape), dot(d.bbar, wb, &tape), &tape);
      },
      {a, b, delta});
  CHECK(err <= 1e-7);
}

TEST_CASE("scan gradients pass finite differences in both modes") {
  Rng rng = Rng::seeded(18);
  const int64_t l = 6, d = 2, n = 3;
  Tensor<double> abar({l, d, n}), bbar({l, d, n}), c({l, n}), x({l, d});
  rng.fill_uniform(abar, 0.1, 0.95);
  rng.fill_uniform(bbar, -1, 1);
  rng.fill_uniform(c, -1, 1);
  rng.fill_uniform(x, -1, 1);
  Tensor<double> w({l, d});
  rng.fill_uniform(w, -1, 1);
  for (ScanMode m : {ScanMode::Sequential, ScanMode::Parallel}) {
    double err = grad_check_multi(
        [&](Tape<double>& tape) { return dot(scan_apply(abar, bbar, c, x, m, &tape), w, &tape); },
        {abar, bbar, c, x});
    CHECK(err <= 1e-7);
  }
}

TEST_CASE("full s6_forward gradient check") {
  auto p = random_s6<double>(3, 2, 1, 19);
  Rng rng = Rng::seeded(20);
  Tensor<double> x({5, 3});
  rng.fill_uniform(x, -1, 1);
  Tensor<double> w({5, 3});
  rng.fill_uniform(w, -1, 1);
  for (ScanMode m : {ScanMode::Sequential, ScanMode::Parallel}) {
    double err = grad_check_multi(
        [&](Tape<double>& tape) { return dot(s6_forward(x, p, m, &tape), w, &tape); },
        {x, p.A, p.sb, p.sc, p.sdelta, p.delta_bias});
    CHECK(err <= 1e-5);
  }
}

TEST_CASE("head groups share delta across their channels") {
  // 4 channels, 2 heads: channels {0,1} read head 0, {2,3} head 1
  auto p = random_s6<double>(4, 2, 2, 21);
  Rng rng = Rng::seeded(22);
  Tensor<double> x({5, 4});
  rng.fill_uniform(x, -1, 1);
  auto sel = selective_params(x, p);
  CHECK(sel.delta.shape() == Shape{5, 2});
  auto disc = discretize(p.A, sel.b, sel.delta);
  for (int64_t t = 0; t < 5; ++t)
    for (int64_t n = 0; n < 2; ++n) {
      double d0 = sel.delta.data()[t * 2 + 0];
      CHECK(disc.abar.data()[(t * 4 + 0) * 2 + n] ==
            doctest::Approx(std::exp(d0 * p.A.data()[0 * 2 + n])).epsilon(1e-14));
      CHECK(disc.abar.data()[(t * 4 + 1) * 2 + n] ==
            doctest::Approx(std::exp(d0 * p.A.data()[1 * 2 + n])).epsilon(1e-14));
    }
}

TEST_CASE("decay factors stay in (0,1) for negative A and positive input") {
  auto p = random_s6<double>(4, 3, 1, 23);
  Rng rng = Rng::seeded(24);
  Tensor<double> x({16, 4});
  rng.fill_uniform(x, -3, 3);
  auto sel = selective_params(x, p);
  auto disc = discretize(p.A, sel.b, sel.delta);
  for (int64_t i = 0; i < disc.abar.size(); ++i) {
    CHECK(disc.abar.data()[i] > 0.0);
    CHECK(disc.abar.data()[i] < 1.0);
  }
}
