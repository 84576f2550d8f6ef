// Differential sequence-mixing variants: a minuend path minus lambda times a
// subtrahend path, optional RMS normalization before/after the subtraction,
// and output rescaling by (1 - lambda_init).
//
// Diff-Mamba parameters live in a fused doubled-channel layout (lower channel
// half = subtrahend path, upper half = minuend). The fused forward runs both
// paths inside single doubled-width kernels; the two-pass forward slices the
// same tensors into two standalone blocks. Both routes share storage, so they
// must agree exactly.

#pragma once

#include <type_traits>

#include <cstdint>
#include <functional>
#include <optional>
#include <string>

#include "dssm/mamba.hpp"
#include "dssm/ops.hpp"
#include "dssm/s6.hpp"

namespace dssm {

enum class LambdaMode { Simple, Reparam };

inline LambdaMode lambda_mode_by_name(const std::string& name) {
  if (name == "simple") return LambdaMode::Simple;
  if (name == "reparam") return LambdaMode::Reparam;
  throw ConfigError("lambda mode must be 'simple' or 'reparam', got '" + name + "'");
}

template <typename T>
struct DiffLambda {
  LambdaMode mode = LambdaMode::Simple;
  Tensor<T> bar;                 // simple: lambda = sigmoid(sum(bar)) + lambda_init
  Tensor<T> q1, k1, q2, k2;      // reparam: exp(q1.k1) - exp(q2.k2) + lambda_init
  T lambda_init = T(0.5);
  std::optional<T> forced;       // test hook: overrides the learned value

  static constexpr T kDotClamp = T(20);  // keeps exp() finite in reparam mode

  static DiffLambda init(LambdaMode mode, int64_t dim, T lambda_init, Rng& rng, bool scalar_bar = false) {
    DiffLambda l;
    l.mode = mode;
    l.lambda_init = lambda_init;
    int64_t n = scalar_bar ? 1 : dim;
    if (mode == LambdaMode::Simple) {
      l.bar = Tensor<T>(Shape{n});
    } else {
      l.q1 = Tensor<T>(Shape{n});
      l.k1 = Tensor<T>(Shape{n});
      l.q2 = Tensor<T>(Shape{n});
      l.k2 = Tensor<T>(Shape{n});
      rng.fill_normal(l.q1, 0.0, 0.1);
      rng.fill_normal(l.k1, 0.0, 0.1);
      rng.fill_normal(l.q2, 0.0, 0.1);
      rng.fill_normal(l.k2, 0.0, 0.1);
    }
    return l;
  }

  Tensor<T> value(std::type_identity_t<Tape<T>*> tape) const {
    if (forced) return Tensor<T>::scalar(*forced);
    if (mode == LambdaMode::Simple) {
      return add_const(sigmoid(sum_all(bar, tape), tape), lambda_init, tape);
    }
    Tensor<T> e1 = exp_op(clamp(dot(q1, k1, tape), -kDotClamp, kDotClamp, tape), tape);
    Tensor<T> e2 = exp_op(clamp(dot(q2, k2, tape), -kDotClamp, kDotClamp, tape), tape);
    return add_const(add(e1, scale_const(e2, T(-1), tape), tape), lambda_init, tape);
  }

  int64_t param_count() const {
    if (mode == LambdaMode::Simple) return bar.size();
    return q1.size() + k1.size() + q2.size() + k2.size();
  }

  void set_requires_grad(bool v = true) {
    if (mode == LambdaMode::Simple) {
      bar.set_requires_grad(v);
    } else {
      q1.set_requires_grad(v);
      k1.set_requires_grad(v);
      q2.set_requires_grad(v);
      k2.set_requires_grad(v);
    }
  }

  void named_tensors(const std::string& prefix,
                     const std::function<void(const std::string&, Tensor<T>&, bool)>& visit) {
    if (mode == LambdaMode::Simple) {
      visit(prefix + ".lam_bar", bar, false);
    } else {
      visit(prefix + ".lam_q1", q1, false);
      visit(prefix + ".lam_k1", k1, false);
      visit(prefix + ".lam_q2", q2, false);
      visit(prefix + ".lam_k2", k2, false);
    }
  }
};

// lambda as a plain number (no tape)
template <typename T>
T lambda_value(const DiffLambda<T>& l) {
  return l.value(nullptr).item();
}

// ---------------------------------------------------------------------------
// Diff-S6: S6_min(x) - lambda * S6_sub(x), optional norm, scaled by 1-init
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> diff_s6_forward(const Tensor<T>& x, const S6Parameters<T>& s6_min, const S6Parameters<T>& s6_sub,
                          const DiffLambda<T>& lambda, bool normalized, const Tensor<T>& norm_gain,
                          ScanMode mode, std::type_identity_t<Tape<T>*> tape = nullptr, T eps = T(1e-5)) {
  Tensor<T> y1 = s6_forward(x, s6_min, mode, tape);
  Tensor<T> y2 = s6_forward(x, s6_sub, mode, tape);
  Tensor<T> lam = lambda.value(tape);
  Tensor<T> d = sub_scaled(y1, y2, lam, tape);
  if (normalized) d = rmsnorm(d, norm_gain, eps, tape);
  return scale_const(d, T(1) - lambda.lambda_init, tape);
}

// Mamba-style block whose mixing core is the differential S6 pair.
template <typename T>
struct DiffS6BlockParams {
  Tensor<T> w_in_x, w_in_z;  // [Din, Dm]
  Tensor<T> conv_w, conv_b;  // [K, Din], [Din]
  S6Parameters<T> s6_min, s6_sub;
  DiffLambda<T> lambda;
  Tensor<T> norm_gain;  // [Din]
  Tensor<T> w_out;      // [Dm, Din]
  bool normalized = true;
  int64_t d_model = 0, d_inner = 0, expand = 2, conv_k = 4;

  static DiffS6BlockParams init(int64_t d_model, int64_t expand, int64_t d_state, int64_t heads, int64_t conv_k,
                                LambdaMode lmode, T lambda_init, bool normalized, Rng& rng,
                                bool scalar_bar = false) {
    DiffS6BlockParams p;
    p.d_model = d_model;
    p.expand = expand;
    p.d_inner = expand * d_model;
    p.conv_k = conv_k;
    p.normalized = normalized;
    double ws = std::sqrt(1.0 / static_cast<double>(d_model));
    p.w_in_x = Tensor<T>(Shape{p.d_inner, d_model});
    p.w_in_z = Tensor<T>(Shape{p.d_inner, d_model});
    rng.fill_uniform(p.w_in_x, -ws, ws);
    rng.fill_uniform(p.w_in_z, -ws, ws);
    p.conv_w = Tensor<T>(Shape{conv_k, p.d_inner});
    p.conv_b = Tensor<T>(Shape{p.d_inner});
    rng.fill_uniform(p.conv_w, -std::sqrt(1.0 / conv_k), std::sqrt(1.0 / conv_k));
    p.s6_min = S6Parameters<T>::init(p.d_inner, d_state, heads, rng);
    p.s6_sub = S6Parameters<T>::init(p.d_inner, d_state, heads, rng);
    p.lambda = DiffLambda<T>::init(lmode, p.d_inner, lambda_init, rng, scalar_bar);
    p.norm_gain = Tensor<T>(Shape{p.d_inner}, T(1));
    double os = std::sqrt(1.0 / static_cast<double>(p.d_inner));
    p.w_out = Tensor<T>(Shape{d_model, p.d_inner});
    rng.fill_uniform(p.w_out, -os, os);
    return p;
  }

  int64_t param_count() const {
    return w_in_x.size() + w_in_z.size() + conv_w.size() + conv_b.size() + s6_min.param_count() +
           s6_sub.param_count() + lambda.param_count() + norm_gain.size() + w_out.size();
  }

  void set_requires_grad(bool v = true) {
    w_in_x.set_requires_grad(v);
    w_in_z.set_requires_grad(v);
    conv_w.set_requires_grad(v);
    conv_b.set_requires_grad(v);
    s6_min.set_requires_grad(v);
    s6_sub.set_requires_grad(v);
    lambda.set_requires_grad(v);
    norm_gain.set_requires_grad(v);
    w_out.set_requires_grad(v);
  }

  void named_tensors(const std::string& prefix,
                     const std::function<void(const std::string&, Tensor<T>&, bool)>& visit) {
    visit(prefix + ".in_x", w_in_x, true);
    visit(prefix + ".in_z", w_in_z, true);
    visit(prefix + ".conv_w", conv_w, true);
    visit(prefix + ".conv_b", conv_b, false);
    s6_min.named_tensors(prefix + ".s6_min", visit);
    s6_sub.named_tensors(prefix + ".s6_sub", visit);
    lambda.named_tensors(prefix, visit);
    visit(prefix + ".norm_gain", norm_gain, false);
    visit(prefix + ".out", w_out, true);
  }
};

template <typename T>
Tensor<T> diff_s6_block_forward(const Tensor<T>& u, const DiffS6BlockParams<T>& p, ScanMode mode,
                                std::type_identity_t<Tape<T>*> tape = nullptr, T eps = T(1e-5)) {
  Tensor<T> x = silu(depthwise_causal_conv1d(linear(u, p.w_in_x, tape), p.conv_w, p.conv_b, tape), tape);
  Tensor<T> z = silu(linear(u, p.w_in_z, tape), tape);
  Tensor<T> core = diff_s6_forward(x, p.s6_min, p.s6_sub, p.lambda, p.normalized, p.norm_gain, mode, tape, eps);
  return linear(mul(core, z, tape), p.w_out, tape);
}

// ---------------------------------------------------------------------------
// Diff-Mamba: fused doubled-channel parameter block
// ---------------------------------------------------------------------------

template <typename T>
struct DiffMambaBlockParams {
  // Doubled-channel layout over W = d_model per path: channel range [0, W) is
  // the subtrahend path, [W, 2W) the minuend. Split index = half the width.
  Tensor<T> w_in_x;  // [2W, W]
  Tensor<T> w_in_z;  // [2W, W]
  Tensor<T> conv_w;  // [K, 2W]
  Tensor<T> conv_b;  // [2W]
  Tensor<T> a;       // [2W, N]
  Tensor<T> sb_lo, sb_hi;          // [N, W] per-path input projections
  Tensor<T> sc_lo, sc_hi;          // [N, W]
  Tensor<T> sdelta_lo, sdelta_hi;  // [H, W]
  Tensor<T> dbias_lo, dbias_hi;    // [H]
  Tensor<T> w_out;                 // [2W, W]: rows [0,W) lower-path out stage, [W,2W) upper
  Tensor<T> post_mamba_gain;       // [2W], normalized per half
  Tensor<T> post_sub_gain;         // [W]
  DiffLambda<T> lambda;
  bool pre_sub_norm = true;   // norm each path before subtraction
  bool post_sub_norm = true;  // norm the difference
  int64_t d_model = 0, d_state = 16, heads = 1, conv_k = 4;

  static DiffMambaBlockParams init(int64_t d_model, int64_t d_state, int64_t heads, int64_t conv_k,
                                   LambdaMode lmode, T lambda_init, Rng& rng, bool scalar_bar = false) {
    DiffMambaBlockParams p;
    p.d_model = d_model;
    p.d_state = d_state;
    p.heads = heads;
    p.conv_k = conv_k;
    int64_t w = d_model;
    // every per-path piece is initialized exactly like a standalone expand=1 block
    Rng r_lo = rng.derive(1), r_hi = rng.derive(2);
    MambaBlockParams<T> lo = MambaBlockParams<T>::init(w, 1, d_state, heads, conv_k, r_lo);
    MambaBlockParams<T> hi = MambaBlockParams<T>::init(w, 1, d_state, heads, conv_k, r_hi);
    auto stack_rows = [](const Tensor<T>& a0, const Tensor<T>& a1) {
      Tensor<T> out(Shape{a0.dim(0) * 2, a0.dim(1)});
      std::memcpy(out.data(), a0.data(), sizeof(T) * static_cast<size_t>(a0.size()));
      std::memcpy(out.data() + a0.size(), a1.data(), sizeof(T) * static_cast<size_t>(a1.size()));
      return out;
    };
    auto stack_cols = [](const Tensor<T>& a0, const Tensor<T>& a1) {
      int64_t rows = a0.dim(0), c0 = a0.dim(1), c1 = a1.dim(1);
      Tensor<T> out(Shape{rows, c0 + c1});
      for (int64_t r = 0; r < rows; ++r) {
        std::memcpy(out.data() + r * (c0 + c1), a0.data() + r * c0, sizeof(T) * static_cast<size_t>(c0));
        std::memcpy(out.data() + r * (c0 + c1) + c0, a1.data() + r * c1, sizeof(T) * static_cast<size_t>(c1));
      }
      return out;
    };
    p.w_in_x = stack_rows(lo.w_in_x, hi.w_in_x);
    p.w_in_z = stack_rows(lo.w_in_z, hi.w_in_z);
    p.conv_w = stack_cols(lo.conv_w, hi.conv_w);
    p.conv_b = Tensor<T>(Shape{2 * w});
    std::memcpy(p.conv_b.data(), lo.conv_b.data(), sizeof(T) * static_cast<size_t>(w));
    std::memcpy(p.conv_b.data() + w, hi.conv_b.data(), sizeof(T) * static_cast<size_t>(w));
    p.a = stack_rows(lo.s6.A, hi.s6.A);
    p.sb_lo = lo.s6.sb;
    p.sb_hi = hi.s6.sb;
    p.sc_lo = lo.s6.sc;
    p.sc_hi = hi.s6.sc;
    p.sdelta_lo = lo.s6.sdelta;
    p.sdelta_hi = hi.s6.sdelta;
    p.dbias_lo = lo.s6.delta_bias;
    p.dbias_hi = hi.s6.delta_bias;
    p.w_out = stack_rows(lo.w_out, hi.w_out);
    p.post_mamba_gain = Tensor<T>(Shape{2 * w}, T(1));
    p.post_sub_gain = Tensor<T>(Shape{w}, T(1));
    p.lambda = DiffLambda<T>::init(lmode, d_model, lambda_init, rng, scalar_bar);
    return p;
  }

  int64_t param_count() const {
    return w_in_x.size() + w_in_z.size() + conv_w.size() + conv_b.size() + a.size() + sb_lo.size() +
           sb_hi.size() + sc_lo.size() + sc_hi.size() + sdelta_lo.size() + sdelta_hi.size() + dbias_lo.size() +
           dbias_hi.size() + w_out.size() + post_mamba_gain.size() + post_sub_gain.size() +
           lambda.param_count();
  }

  void set_requires_grad(bool v = true) {
    for (Tensor<T>* t : {&w_in_x, &w_in_z, &conv_w, &conv_b, &a, &sb_lo, &sb_hi, &sc_lo, &sc_hi, &sdelta_lo,
                         &sdelta_hi, &dbias_lo, &dbias_hi, &w_out, &post_mamba_gain, &post_sub_gain})
      t->set_requires_grad(v);
    lambda.set_requires_grad(v);
  }

  void named_tensors(const std::string& prefix,
                     const std::function<void(const std::string&, Tensor<T>&, bool)>& visit) {
    visit(prefix + ".in_x", w_in_x, true);
    visit(prefix + ".in_z", w_in_z, true);
    visit(prefix + ".conv_w", conv_w, true);
    visit(prefix + ".conv_b", conv_b, false);
    visit(prefix + ".A", a, false);
    visit(prefix + ".sb_lo", sb_lo, true);
    visit(prefix + ".sb_hi", sb_hi, true);
    visit(prefix + ".sc_lo", sc_lo, true);
    visit(prefix + ".sc_hi", sc_hi, true);
    visit(prefix + ".sdelta_lo", sdelta_lo, true);
    visit(prefix + ".sdelta_hi", sdelta_hi, true);
    visit(prefix + ".dbias_lo", dbias_lo, false);
    visit(prefix + ".dbias_hi", dbias_hi, false);
    visit(prefix + ".out", w_out, true);
    visit(prefix + ".pm_gain", post_mamba_gain, false);
    visit(prefix + ".ps_gain", post_sub_gain, false);
    lambda.named_tensors(prefix, visit);
  }
};

// View of one path as a standalone expand=1 block. With a tape the slices
// participate in autodiff, so gradients flow back into the fused tensors.
template <typename T>
MambaBlockParams<T> diff_mamba_path(const DiffMambaBlockParams<T>& p, bool minuend, std::type_identity_t<Tape<T>*> tape = nullptr) {
  int64_t w = p.d_model;
  int64_t off = minuend ? w : 0;
  MambaBlockParams<T> m;
  m.d_model = w;
  m.expand = 1;
  m.d_inner = w;
  m.conv_k = p.conv_k;
  m.w_in_x = slice_rows(p.w_in_x, off, off + w, tape);
  m.w_in_z = slice_rows(p.w_in_z, off, off + w, tape);
  m.conv_w = slice_cols(p.conv_w, off, off + w, tape);
  m.conv_b = slice_vec(p.conv_b, off, off + w, tape);
  m.s6.channels = w;
  m.s6.d_state = p.d_state;
  m.s6.heads = p.heads;
  m.s6.A = slice_rows(p.a, off, off + w, tape);
  m.s6.sb = minuend ? p.sb_hi : p.sb_lo;
  m.s6.sc = minuend ? p.sc_hi : p.sc_lo;
  m.s6.sdelta = minuend ? p.sdelta_hi : p.sdelta_lo;
  m.s6.delta_bias = minuend ? p.dbias_hi : p.dbias_lo;
  m.w_out = slice_rows(p.w_out, off, off + w, tape);
  return m;
}

// Two-pass route: run each path as a full block, then norm/subtract/scale.
template <typename T>
Tensor<T> diff_mamba_forward(const Tensor<T>& u, const DiffMambaBlockParams<T>& p, ScanMode mode,
                             std::type_identity_t<Tape<T>*> tape = nullptr, bool normalized = true, T eps = T(1e-5)) {
  int64_t w = p.d_model;
  MambaBlockParams<T> path_min = diff_mamba_path(p, true, tape);
  MambaBlockParams<T> path_sub = diff_mamba_path(p, false, tape);
  Tensor<T> m1 = mamba_forward(u, path_min, mode, tape);
  Tensor<T> m2 = mamba_forward(u, path_sub, mode, tape);
  if (normalized && p.pre_sub_norm) {
    m1 = rmsnorm(m1, slice_vec(p.post_mamba_gain, w, 2 * w, tape), eps, tape);
    m2 = rmsnorm(m2, slice_vec(p.post_mamba_gain, int64_t(0), w, tape), eps, tape);
  }
  Tensor<T> o = sub_scaled(m1, m2, p.lambda.value(tape), tape);
  if (normalized && p.post_sub_norm) o = rmsnorm(o, p.post_sub_gain, eps, tape);
  return scale_const(o, T(1) - p.lambda.lambda_init, tape);
}

// Fused route: one pass over doubled channels, post-mamba norm per half,
// split into minuend (upper half) and subtrahend (lower half), subtract,
// post-subtraction norm, scale by 1 - lambda_init.
template <typename T>
Tensor<T> fused_diff_mamba_forward(const Tensor<T>& u, const DiffMambaBlockParams<T>& p, ScanMode mode,
                                   std::type_identity_t<Tape<T>*> tape = nullptr, T eps = T(1e-5)) {
  int64_t w = p.d_model;
  if (p.w_in_x.dim(0) % 2 != 0 || p.w_in_x.dim(0) != 2 * w)
    throw ConfigError("fused diff-mamba: internal width " + std::to_string(p.w_in_x.dim(0)) +
                      " must be exactly twice the model width");
  // one in-projection into the doubled channel space (the replicated input
  // through a block-diagonal weight), one conv, one activation, one scan
  Tensor<T> x2 = silu(depthwise_causal_conv1d(linear(u, p.w_in_x, tape), p.conv_w, p.conv_b, tape), tape);
  Tensor<T> z2 = silu(linear(u, p.w_in_z, tape), tape);

  Tensor<T> x_lo = slice_cols(x2, int64_t(0), w, tape);
  Tensor<T> x_hi = slice_cols(x2, w, 2 * w, tape);
  require_finite(x_lo, "fused diff-mamba selective input");
  Tensor<T> b2 = concat_cols(linear(x_lo, p.sb_lo, tape), linear(x_hi, p.sb_hi, tape), tape);
  Tensor<T> c2 = concat_cols(linear(x_lo, p.sc_lo, tape), linear(x_hi, p.sc_hi, tape), tape);
  Tensor<T> d_lo = softplus(linear(x_lo, p.sdelta_lo, tape, &p.dbias_lo), tape);
  Tensor<T> d_hi = softplus(linear(x_hi, p.sdelta_hi, tape, &p.dbias_hi), tape);
  Tensor<T> delta2 = concat_cols(d_lo, d_hi, tape);

  Discretized<T> disc = discretize(p.a, b2, delta2, tape, /*groups=*/2);
  Tensor<T> y2 = scan_apply(disc.abar, disc.bbar, c2, x2, mode, tape);
  Tensor<T> g2 = mul(y2, z2, tape);

  // block-structured out stage, then per-half norm
  Tensor<T> o_lo = linear(slice_cols(g2, int64_t(0), w, tape), slice_rows(p.w_out, int64_t(0), w, tape), tape);
  Tensor<T> o_hi = linear(slice_cols(g2, w, 2 * w, tape), slice_rows(p.w_out, w, 2 * w, tape), tape);
  Tensor<T> y_full = concat_cols(o_lo, o_hi, tape);
  if (p.pre_sub_norm) y_full = rmsnorm(y_full, p.post_mamba_gain, eps, tape, /*groups=*/2);

  Tensor<T> minuend = slice_cols(y_full, w, 2 * w, tape);
  Tensor<T> subtrahend = slice_cols(y_full, int64_t(0), w, tape);
  Tensor<T> o = sub_scaled(minuend, subtrahend, p.lambda.value(tape), tape);
  if (p.post_sub_norm) o = rmsnorm(o, p.post_sub_gain, eps, tape);
  return scale_const(o, T(1) - p.lambda.lambda_init, tape);
}

}  // namespace dssm
