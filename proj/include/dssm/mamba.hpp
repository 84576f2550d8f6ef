// Gated selective-SSM sequence-mixing block:
//   X = SiLU(Conv1D(Linear(u))), Z = SiLU(Linear(u)), Y = S6(X),
//   out = Linear(Y (*) Z)
// Projections are bias-free; the depthwise conv carries a bias.

#pragma once

#include <type_traits>

#include <cstdint>
#include <functional>
#include <string>

#include "dssm/ops.hpp"
#include "dssm/s6.hpp"

namespace dssm {

template <typename T>
struct MambaBlockParams {
  Tensor<T> w_in_x;  // [Din, Dm]
  Tensor<T> w_in_z;  // [Din, Dm]
  Tensor<T> conv_w;  // [K, Din]
  Tensor<T> conv_b;  // [Din]
  S6Parameters<T> s6;
  Tensor<T> w_out;  // [Dm, Din]
  int64_t d_model = 0, d_inner = 0, expand = 2, conv_k = 4;

  static MambaBlockParams init(int64_t d_model, int64_t expand, int64_t d_state, int64_t heads, int64_t conv_k,
                               Rng& rng) {
    if (expand < 1) throw ConfigError("mamba: expand must be >= 1");
    MambaBlockParams p;
    p.d_model = d_model;
    p.expand = expand;
    p.d_inner = expand * d_model;
    p.conv_k = conv_k;
    double ws = std::sqrt(1.0 / static_cast<double>(d_model));
    p.w_in_x = Tensor<T>(Shape{p.d_inner, d_model});
    p.w_in_z = Tensor<T>(Shape{p.d_inner, d_model});
    rng.fill_uniform(p.w_in_x, -ws, ws);
    rng.fill_uniform(p.w_in_z, -ws, ws);
    p.conv_w = Tensor<T>(Shape{conv_k, p.d_inner});
    p.conv_b = Tensor<T>(Shape{p.d_inner});
    rng.fill_uniform(p.conv_w, -std::sqrt(1.0 / conv_k), std::sqrt(1.0 / conv_k));
    p.s6 = S6Parameters<T>::init(p.d_inner, d_state, heads, rng);
    double os = std::sqrt(1.0 / static_cast<double>(p.d_inner));
    p.w_out = Tensor<T>(Shape{d_model, p.d_inner});
    rng.fill_uniform(p.w_out, -os, os);
    return p;
  }

  int64_t param_count() const {
    return w_in_x.size() + w_in_z.size() + conv_w.size() + conv_b.size() + s6.param_count() + w_out.size();
  }

  void set_requires_grad(bool v = true) {
    w_in_x.set_requires_grad(v);
    w_in_z.set_requires_grad(v);
    conv_w.set_requires_grad(v);
    conv_b.set_requires_grad(v);
    s6.set_requires_grad(v);
    w_out.set_requires_grad(v);
  }

  void named_tensors(const std::string& prefix,
                     const std::function<void(const std::string&, Tensor<T>&, bool)>& visit) {
    visit(prefix + ".in_x", w_in_x, true);
    visit(prefix + ".in_z", w_in_z, true);
    visit(prefix + ".conv_w", conv_w, true);
    visit(prefix + ".conv_b", conv_b, false);
    s6.named_tensors(prefix + ".s6", visit);
    visit(prefix + ".out", w_out, true);
  }
};

template <typename T>
struct MambaTaps {
  Tensor<T> x_pre_conv;  // Linear(u)
  Tensor<T> x;           // SiLU(Conv1D(Linear(u)))
  Tensor<T> z;           // SiLU(Linear(u))
  Tensor<T> y_ssm;       // S6(X)
  Tensor<T> gated;       // Y (*) Z, the pre-out-projection channel path
};

struct MambaOptions {
  bool unit_gate = false;  // test hook: replaces Z with ones
};

template <typename T>
Tensor<T> mamba_forward(const Tensor<T>& u, const MambaBlockParams<T>& p, ScanMode mode, std::type_identity_t<Tape<T>*> tape = nullptr,
                        const MambaOptions& opt = {}, MambaTaps<T>* taps = nullptr) {
  if (u.rank() != 2 || u.dim(1) != p.d_model)
    throw ShapeError("mamba_forward: input " + shape_str(u.shape()) + " does not match model width " +
                     std::to_string(p.d_model));
  Tensor<T> x_pre = linear(u, p.w_in_x, tape);
  Tensor<T> x = silu(depthwise_causal_conv1d(x_pre, p.conv_w, p.conv_b, tape), tape);
  Tensor<T> y = s6_forward(x, p.s6, mode, tape);
  Tensor<T> z;
  Tensor<T> gated;
  if (opt.unit_gate) {
    gated = y;
  } else {
    z = silu(linear(u, p.w_in_z, tape), tape);
    gated = mul(y, z, tape);
  }
  Tensor<T> out = linear(gated, p.w_out, tape);
  if (taps) {
    taps->x_pre_conv = x_pre;
    taps->x = x;
    taps->z = z;
    taps->y_ssm = y;
    taps->gated = gated;
  }
  return out;
}

}  // namespace dssm
