// Operator materialization tests: closed forms, strict causality, oracle
// equivalence against the recurrent forwards, differential operator algebra,
// and row statistics.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "dssm/implicit.hpp"

using namespace dssm;

namespace {

template <typename T>
Tensor<T> random_input(int64_t l, int64_t d, uint64_t seed) {
  Rng rng = Rng::seeded(seed);
  Tensor<T> x({l, d});
  rng.fill_uniform(x, -1, 1);
  return x;
}

template <typename T>
void check_strictly_causal(const ImplicitOperator<T>& op) {
  int64_t l = op.length();
  for (int64_t t = 0; t < l; ++t)
    for (int64_t s = t + 1; s < l; ++s) CHECK(op.matrix.data()[t * l + s] == T(0));
}

}  // namespace

TEST_CASE("s6 operator closed form at L=2") {
  // single channel/state engineered so abar = 0.5 and bbar = 1 at every step
  S6Parameters<double> p;
  p.channels = 1;
  p.d_state = 1;
  p.heads = 1;
  p.A = Tensor<double>::from({1, 1}, {-1.0});
  p.sb = Tensor<double>::from({1, 1}, {0.0});
  p.sc = Tensor<double>::from({1, 1}, {0.0});
  p.sdelta = Tensor<double>::from({1, 1}, {0.0});
  p.delta_bias = Tensor<double>::from({1}, {0.0});
  Tensor<double> x({2, 1}, 1.0);
  auto sel = selective_params(x, p);
  Tensor<double> b_forced({2, 1}, 1.0 / std::log(2.0));
  auto disc = discretize(p.A, b_forced, sel.delta);
  Tensor<double> c_forced({2, 1}, 1.0);
  // expected operator [[1,0],[0.5,1]]: check via application to basis vectors
  auto e0 = scan_sequential(disc.abar, disc.bbar, c_forced, Tensor<double>::from({2, 1}, {1, 0}));
  auto e1 = scan_sequential(disc.abar, disc.bbar, c_forced, Tensor<double>::from({2, 1}, {0, 1}));
  CHECK(e0.data()[0] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(e0.data()[1] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(e1.data()[0] == 0.0);
  CHECK(e1.data()[1] == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("s6 operator with zero decay is diagonal") {
  Rng rng = Rng::seeded(2);
  auto p = S6Parameters<double>::init(3, 2, 1, rng);
  for (int64_t i = 0; i < p.A.size(); ++i) p.A.data()[i] = -200.0;
  std::fill(p.sdelta.data(), p.sdelta.data() + p.sdelta.size(), 0.0);
  p.delta_bias.data()[0] = 5.0;  // delta ~ 5, so abar = exp(-1000) underflows to 0
  auto x = random_input<double>(6, 3, 3);
  auto op = materialize_s6(x, p, 1);
  for (int64_t t = 1; t < 6; ++t)
    for (int64_t s = 0; s < t; ++s) CHECK(std::fabs(op.matrix.data()[t * 6 + s]) <= 1e-30);
}

TEST_CASE("s6 operator reproduces the scan on random instances (f64)") {
  for (uint64_t seed = 0; seed < 8; ++seed) {
    Rng rng = Rng::seeded(10 + seed);
    int64_t d = 3, n = 4, l = 16;
    auto p = S6Parameters<double>::init(d, n, 1, rng);
    auto x = random_input<double>(l, d, 20 + seed);
    auto y = s6_forward(x, p, ScanMode::Sequential);
    for (int64_t c = 0; c < d; ++c) {
      auto op = materialize_s6(x, p, c);
      check_strictly_causal(op);
      std::vector<double> col(static_cast<size_t>(l));
      for (int64_t t = 0; t < l; ++t) col[static_cast<size_t>(t)] = x.data()[t * d + c];
      auto yc = op.apply(col);
      for (int64_t t = 0; t < l; ++t)
        CHECK(std::fabs(yc[static_cast<size_t>(t)] - y.data()[t * d + c]) <= 1e-10);
    }
  }
}

TEST_CASE("s6 operator respects the length cap") {
  Rng rng = Rng::seeded(30);
  auto p = S6Parameters<double>::init(2, 2, 1, rng);
  auto x = random_input<double>(9, 2, 31);
  CHECK_THROWS_AS(materialize_s6(x, p, 0, /*cap=*/8), ResourceError);
}

TEST_CASE("mamba operator: gate one and identity conv collapse to s6 times sigmoid diagonal") {
  Rng rng = Rng::seeded(32);
  auto p = MambaBlockParams<double>::init(3, 1, 2, 1, 3, rng);
  std::fill(p.conv_w.data(), p.conv_w.data() + p.conv_w.size(), 0.0);
  for (int64_t c = 0; c < p.d_inner; ++c) p.conv_w.data()[(p.conv_k - 1) * p.d_inner + c] = 1.0;
  std::fill(p.conv_b.data(), p.conv_b.data() + p.conv_b.size(), 0.0);
  auto u = random_input<double>(7, 3, 33);
  const int64_t ch = 1;
  auto op = materialize_mamba(u, p, ch, kOperatorLengthCap, /*unit_gate=*/true);
  check_strictly_causal(op);

  auto v_full = linear(u, p.w_in_x);
  auto x_act = silu(v_full);
  auto s6op = materialize_s6(x_act, p.s6, ch);
  int64_t l = 7;
  for (int64_t t = 0; t < l; ++t)
    for (int64_t s = 0; s <= t; ++s) {
      double expect = s6op.matrix.data()[t * l + s] * stable_sigmoid(v_full.data()[s * 3 + ch]);
      CHECK(std::fabs(op.matrix.data()[t * l + s] - expect) <= 1e-12);
    }
}

TEST_CASE("mamba operator at L=1 is the scalar path product") {
  Rng rng = Rng::seeded(34);
  auto p = MambaBlockParams<double>::init(2, 1, 2, 1, 2, rng);
  std::fill(p.conv_b.data(), p.conv_b.data() + p.conv_b.size(), 0.0);
  auto u = random_input<double>(1, 2, 35);
  const int64_t ch = 0;
  auto op = materialize_mamba(u, p, ch);
  REQUIRE(op.length() == 1);
  MambaTaps<double> taps;
  mamba_forward(u, p, ScanMode::Sequential, static_cast<Tape<double>*>(nullptr), {}, &taps);
  double v = taps.x_pre_conv.data()[ch];
  CHECK(op.matrix.item() * v == doctest::Approx(taps.gated.data()[ch]).epsilon(1e-12));
}

TEST_CASE("mamba operator reproduces the pre-out-projection channel path") {
  for (uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng = Rng::seeded(40 + seed);
    auto p = MambaBlockParams<double>::init(3, 2, 3, 2, 3, rng);
    std::fill(p.conv_b.data(), p.conv_b.data() + p.conv_b.size(), 0.0);  // operator form needs zero conv bias
    auto u = random_input<double>(8, 3, 50 + seed);
    MambaTaps<double> taps;
    mamba_forward(u, p, ScanMode::Sequential, static_cast<Tape<double>*>(nullptr), {}, &taps);
    for (int64_t ch = 0; ch < p.d_inner; ch += 2) {
      auto op = materialize_mamba(u, p, ch);
      check_strictly_causal(op);
      std::vector<double> v(8);
      for (int64_t t = 0; t < 8; ++t) v[static_cast<size_t>(t)] = taps.x_pre_conv.data()[t * p.d_inner + ch];
      auto y = op.apply(v);
      for (int64_t t = 0; t < 8; ++t)
        CHECK(std::fabs(y[static_cast<size_t>(t)] - taps.gated.data()[t * p.d_inner + ch]) <= 1e-5);
    }
  }
}

TEST_CASE("differential operator algebra") {
  Rng rng = Rng::seeded(60);
  auto p = S6Parameters<double>::init(2, 3, 1, rng);
  auto x = random_input<double>(10, 2, 61);
  auto op = materialize_s6(x, p, 0);

  SUBCASE("identical operators with lambda=1 vanish") {
    auto d = materialize_diff(op, op, 1.0);
    for (int64_t i = 0; i < d.matrix.size(); ++i) CHECK(d.matrix.data()[i] == 0.0);
    std::vector<double> v(10, 0.7);
    auto y = d.apply(v);
    for (double val : y) CHECK(val == 0.0);
  }
  SUBCASE("lambda=0 leaves the first operator unchanged") {
    auto p2 = S6Parameters<double>::init(2, 3, 1, rng);
    auto op2 = materialize_s6(x, p2, 0);
    auto d = materialize_diff(op, op2, 0.0);
    for (int64_t i = 0; i < d.matrix.size(); ++i) CHECK(d.matrix.data()[i] == op.matrix.data()[i]);
  }
  SUBCASE("shape mismatch is rejected") {
    auto x2 = random_input<double>(5, 2, 62);
    auto op2 = materialize_s6(x2, p, 0);
    CHECK_THROWS_AS(materialize_diff(op, op2, 0.5), ShapeError);
  }
}

TEST_CASE("diff operator matches unnormalized unscaled diff-s6 forward") {
  for (uint64_t seed = 0; seed < 6; ++seed) {
    Rng rng = Rng::seeded(70 + seed);
    int64_t d = 2, n = 3, l = 3 + static_cast<int64_t>(seed) * 5;  // up to 28
    auto pa = S6Parameters<double>::init(d, n, 1, rng);
    auto pb = S6Parameters<double>::init(d, n, 1, rng);
    auto lam = DiffLambda<double>::init(LambdaMode::Simple, d, 0.0, rng);
    lam.forced = 0.6;
    auto x = random_input<double>(l, d, 80 + seed);
    Tensor<double> gain({d}, 1.0);
    // lambda_init = 0 makes the output scale factor exactly one
    auto y = diff_s6_forward(x, pa, pb, lam, false, gain, ScanMode::Sequential);
    for (int64_t c = 0; c < d; ++c) {
      auto op = materialize_diff(materialize_s6(x, pa, c), materialize_s6(x, pb, c), 0.6);
      check_strictly_causal(op);
      std::vector<double> v(static_cast<size_t>(l));
      for (int64_t t = 0; t < l; ++t) v[static_cast<size_t>(t)] = x.data()[t * d + c];
      auto yc = op.apply(v);
      for (int64_t t = 0; t < l; ++t)
        CHECK(std::fabs(yc[static_cast<size_t>(t)] - y.data()[t * d + c]) <= 1e-6);
    }
  }
}

TEST_CASE("diff-mamba operator identity holds with tied in-projections") {
  for (uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng = Rng::seeded(90 + seed);
    auto p = DiffMambaBlockParams<double>::init(3, 2, 1, 2, LambdaMode::Simple, 0.0, rng);
    int64_t w = p.d_model;
    // tie the in-projections and gates across paths (channel-mixing stages sit
    // outside the per-channel operator statement); conv bias must be zero
    for (int64_t r = 0; r < w; ++r)
      for (int64_t c = 0; c < w; ++c) {
        p.w_in_x.data()[(r + w) * w + c] = p.w_in_x.data()[r * w + c];
        p.w_in_z.data()[(r + w) * w + c] = p.w_in_z.data()[r * w + c];
      }
    std::fill(p.conv_b.data(), p.conv_b.data() + p.conv_b.size(), 0.0);
    p.lambda.forced = 0.45;
    auto u = random_input<double>(8, 3, 100 + seed);

    auto path_min = diff_mamba_path(p, true);
    auto path_sub = diff_mamba_path(p, false);
    MambaTaps<double> taps_min, taps_sub;
    mamba_forward(u, path_min, ScanMode::Sequential, static_cast<Tape<double>*>(nullptr), {}, &taps_min);
    mamba_forward(u, path_sub, ScanMode::Sequential, static_cast<Tape<double>*>(nullptr), {}, &taps_sub);

    for (int64_t ch = 0; ch < w; ++ch) {
      auto op = materialize_diff(materialize_mamba(u, path_min, ch), materialize_mamba(u, path_sub, ch), 0.45);
      check_strictly_causal(op);
      std::vector<double> v(8);
      for (int64_t t = 0; t < 8; ++t) v[static_cast<size_t>(t)] = taps_min.x_pre_conv.data()[t * w + ch];
      auto y = op.apply(v);
      for (int64_t t = 0; t < 8; ++t) {
        double expect = taps_min.gated.data()[t * w + ch] - 0.45 * taps_sub.gated.data()[t * w + ch];
        CHECK(std::fabs(y[static_cast<size_t>(t)] - expect) <= 1e-5);
      }
    }
  }
}

TEST_CASE("operator stats") {
  SUBCASE("identity operator: zero off-target mass at self, zero entropy") {
    ImplicitOperator<double> op;
    op.matrix = Tensor<double>(Shape{4, 4});
    for (int64_t i = 0; i < 4; ++i) op.matrix.data()[i * 4 + i] = 1.0;
    auto st = operator_stats(op);
    for (int64_t t = 0; t < 4; ++t) {
      CHECK(st.off_target[static_cast<size_t>(t)] == 0.0);
      CHECK(st.entropy[static_cast<size_t>(t)] == 0.0);
    }
  }
  SUBCASE("uniform causal rows: entropy ln(t+1)") {
    ImplicitOperator<double> op;
    op.matrix = Tensor<double>(Shape{5, 5});
    for (int64_t t = 0; t < 5; ++t)
      for (int64_t s = 0; s <= t; ++s) op.matrix.data()[t * 5 + s] = 0.3;
    auto st = operator_stats(op);
    for (int64_t t = 0; t < 5; ++t)
      CHECK(st.entropy[static_cast<size_t>(t)] ==
            doctest::Approx(std::log(static_cast<double>(t + 1))).epsilon(1e-12));
  }
  SUBCASE("difference of identical operators: zero mass everywhere") {
    Rng rng = Rng::seeded(110);
    auto p = S6Parameters<double>::init(2, 2, 1, rng);
    auto x = random_input<double>(6, 2, 111);
    auto op = materialize_s6(x, p, 0);
    auto d = materialize_diff(op, op, 1.0);
    auto st = operator_stats(d);
    for (int64_t t = 0; t < 6; ++t) {
      CHECK(st.row_mass[static_cast<size_t>(t)] == 0.0);
      CHECK(st.entropy[static_cast<size_t>(t)] == 0.0);
    }
  }
  SUBCASE("fixed target position") {
    ImplicitOperator<double> op;
    op.matrix = Tensor<double>(Shape{3, 3});
    op.matrix.data()[2 * 3 + 0] = 1.0;
    op.matrix.data()[2 * 3 + 1] = 1.0;
    auto st = operator_stats(op, OperatorTarget{false, 0});
    CHECK(st.off_target[2] == doctest::Approx(0.5).epsilon(1e-12));
  }
}

TEST_CASE("causality across the randomized shape grid") {
  for (int64_t l : {1, 2, 3, 8, 16, 32}) {
    Rng rng = Rng::seeded(200 + static_cast<uint64_t>(l));
    auto p = S6Parameters<double>::init(2, 2, 1, rng);
    Tensor<double> x({l, 2});
    rng.fill_uniform(x, -1, 1);
    auto op = materialize_s6(x, p, 0);
    check_strictly_causal(op);
  }
}
