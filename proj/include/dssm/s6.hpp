// Selective state-space layer: input-dependent B_t/C_t/delta_t projections,
// exponential discretization, and the time-variant recurrence
//   h_t = abar_t (*) h_{t-1} + bbar_t * x_t,   y_t = C_t . h_t
// evaluated sequentially or by work-efficient parallel scan. Both modes share
// one reverse-time adjoint recurrence for the backward pass.

#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "dssm/ops.hpp"
#include "dssm/random.hpp"
#include "dssm/scan.hpp"
#include <type_traits>

#include "dssm/tensor.hpp"

namespace dssm {

enum class ScanMode { Sequential, Parallel };

inline ScanMode scan_mode_by_name(const std::string& name) {
  if (name == "sequential") return ScanMode::Sequential;
  if (name == "parallel") return ScanMode::Parallel;
  throw ConfigError("scan mode must be 'sequential' or 'parallel', got '" + name + "'");
}

template <typename T>
struct S6Parameters {
  Tensor<T> A;           // [D, N] transition magnitudes, negative at init
  Tensor<T> sb;          // [N, D] input projection
  Tensor<T> sc;          // [N, D] output projection
  Tensor<T> sdelta;      // [H, D] timescale projection (channels share delta per head)
  Tensor<T> delta_bias;  // [H]
  int64_t channels = 0;  // D
  int64_t d_state = 0;   // N
  int64_t heads = 1;     // H, must divide D

  static S6Parameters init(int64_t d, int64_t n, int64_t h, Rng& rng) {
    if (h < 1 || d % h != 0)
      throw ConfigError("s6: head count " + std::to_string(h) + " must divide channel count " + std::to_string(d));
    S6Parameters p;
    p.channels = d;
    p.d_state = n;
    p.heads = h;
    p.A = Tensor<T>(Shape{d, n});
    for (int64_t c = 0; c < d; ++c)
      for (int64_t s = 0; s < n; ++s) p.A.data()[c * n + s] = -static_cast<T>(s + 1);
    double ws = std::sqrt(1.0 / static_cast<double>(d));
    p.sb = Tensor<T>(Shape{n, d});
    p.sc = Tensor<T>(Shape{n, d});
    p.sdelta = Tensor<T>(Shape{h, d});
    rng.fill_uniform(p.sb, -ws, ws);
    rng.fill_uniform(p.sc, -ws, ws);
    rng.fill_uniform(p.sdelta, -ws, ws);
    // bias chosen so softplus lands in [1e-3, 1e-1]
    p.delta_bias = Tensor<T>(Shape{h});
    for (int64_t i = 0; i < h; ++i) {
      double dt = std::exp(rng.uniform(std::log(1e-3), std::log(1e-1)));
      p.delta_bias.data()[i] = static_cast<T>(dt + std::log(-std::expm1(-dt)));  // softplus inverse
    }
    return p;
  }

  int64_t param_count() const {
    return A.size() + sb.size() + sc.size() + sdelta.size() + delta_bias.size();
  }

  void set_requires_grad(bool v = true) {
    A.set_requires_grad(v);
    sb.set_requires_grad(v);
    sc.set_requires_grad(v);
    sdelta.set_requires_grad(v);
    delta_bias.set_requires_grad(v);
  }

  void named_tensors(const std::string& prefix,
                     const std::function<void(const std::string&, Tensor<T>&, bool)>& visit) {
    visit(prefix + ".A", A, false);
    visit(prefix + ".sb", sb, true);
    visit(prefix + ".sc", sc, true);
    visit(prefix + ".sdelta", sdelta, true);
    visit(prefix + ".dbias", delta_bias, false);
  }
};

template <typename T>
struct SelectiveOuts {
  Tensor<T> b;      // [L, N]
  Tensor<T> c;      // [L, N]
  Tensor<T> delta;  // [L, H], strictly positive
};

// B_t = S_B x_t, C_t = S_C x_t, delta_t = softplus(S_delta x_t + bias)
template <typename T>
SelectiveOuts<T> selective_params(const Tensor<T>& x, const S6Parameters<T>& p, std::type_identity_t<Tape<T>*> tape = nullptr) {
  require_finite(x, "selective_params input");
  SelectiveOuts<T> out;
  out.b = linear(x, p.sb, tape);
  out.c = linear(x, p.sc, tape);
  Tensor<T> pre = linear(x, p.sdelta, tape, &p.delta_bias);
  out.delta = softplus(pre, tape);
  return out;
}

template <typename T>
struct Discretized {
  Tensor<T> abar;  // [L, D, N] decay factors exp(delta * A)
  Tensor<T> bbar;  // [L, D, N] scaled input matrices delta * B
};

// Euler-style discretization. `b` may carry G groups of N columns ([L, G*N]);
// channel d reads group d / (D/G). Heads likewise share delta columns.
template <typename T>
Discretized<T> discretize(const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& delta,
                          std::type_identity_t<Tape<T>*> tape = nullptr, int64_t groups = 1) {
  int64_t d = a.dim(0), n = a.dim(1);
  int64_t L = b.dim(0);
  if (b.dim(1) % n != 0 || b.dim(1) / n != groups)
    throw ShapeError("discretize: b " + shape_str(b.shape()) + " does not hold " + std::to_string(groups) +
                     " groups of " + std::to_string(n));
  int64_t h = delta.dim(1);
  if (delta.dim(0) != L || d % h != 0 || d % groups != 0)
    throw ShapeError("discretize: delta " + shape_str(delta.shape()) + " incompatible with A " +
                     shape_str(a.shape()));
  int64_t head_size = d / h, group_size = d / groups;

  Discretized<T> out;
  out.abar = Tensor<T>(Shape{L, d, n});
  out.bbar = Tensor<T>(Shape{L, d, n});
  const T* ap = a.data();
  const T* bp = b.data();
  const T* dp = delta.data();
  T* abp = out.abar.data();
  T* bbp = out.bbar.data();
  DSSM_OMP_FOR
  for (int64_t t = 0; t < L; ++t) {
    for (int64_t c = 0; c < d; ++c) {
      T dt = dp[t * h + c / head_size];
      const T* arow = ap + c * n;
      const T* brow = bp + t * groups * n + (c / group_size) * n;
      T* ab = abp + (t * d + c) * n;
      T* bb = bbp + (t * d + c) * n;
      for (int64_t s = 0; s < n; ++s) {
        ab[s] = std::exp(dt * arow[s]);
        bb[s] = dt * brow[s];
      }
    }
  }

  bool track = tape && (a.requires_grad() || b.requires_grad() || delta.requires_grad());
  if (track) {
    out.abar.set_requires_grad(true);
    out.bbar.set_requires_grad(true);
    Tensor<T> ac = a, bc = b, dc = delta, abc = out.abar, bbc = out.bbar;
    tape->record([ac, bc, dc, abc, bbc, L, d, n, h, head_size, group_size, groups]() mutable {
      const T* ga = abc.grad();
      const T* gb = bbc.grad();
      const T* av = ac.data();
      const T* bv = bc.data();
      const T* dv = dc.data();
      for (int64_t t = 0; t < L; ++t)
        for (int64_t c = 0; c < d; ++c) {
          int64_t hd = c / head_size;
          T dt = dv[t * h + hd];
          const T* arow = av + c * n;
          const T* brow = bv + t * groups * n + (c / group_size) * n;
          const T* abv = abc.data() + (t * d + c) * n;
          const T* gar = ga + (t * d + c) * n;
          const T* gbr = gb + (t * d + c) * n;
          T ddelta = T(0);
          for (int64_t s = 0; s < n; ++s) {
            T gexp = gar[s] * abv[s];  // d exp(u)/du = exp(u)
            ddelta += gexp * arow[s] + gbr[s] * brow[s];
            if (ac.requires_grad()) ac.grad()[c * n + s] += gexp * dt;
            if (bc.requires_grad()) bc.grad()[t * groups * n + (c / group_size) * n + s] += gbr[s] * dt;
          }
          if (dc.requires_grad()) dc.grad()[t * h + hd] += ddelta;
        }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// scan_apply: the recurrence itself. C may carry G groups of N columns; the
// parallel mode runs one Blelloch scan per (channel, state) lane.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> scan_apply(const Tensor<T>& abar, const Tensor<T>& bbar, const Tensor<T>& c, const Tensor<T>& x,
                     ScanMode mode, std::type_identity_t<Tape<T>*> tape = nullptr) {
  int64_t L = abar.dim(0), d = abar.dim(1), n = abar.dim(2);
  if (bbar.shape() != abar.shape())
    throw ShapeError("scan: abar " + shape_str(abar.shape()) + " vs bbar " + shape_str(bbar.shape()));
  if (x.dim(0) != L || x.dim(1) != d)
    throw ShapeError("scan: x " + shape_str(x.shape()) + " incompatible with " + shape_str(abar.shape()));
  int64_t groups = c.dim(1) / n;
  if (c.dim(0) != L || c.dim(1) % n != 0 || d % groups != 0)
    throw ShapeError("scan: c " + shape_str(c.shape()) + " incompatible with state size " + std::to_string(n));
  int64_t group_size = d / groups;

  Tensor<T> hstates(Shape{L, d, n});
  const T* ap = abar.data();
  const T* bp = bbar.data();
  const T* xp = x.data();
  T* hp = hstates.data();

  if (mode == ScanMode::Sequential) {
    DSSM_OMP_FOR
    for (int64_t ch = 0; ch < d; ++ch) {
      for (int64_t s = 0; s < n; ++s) {
        T h = T(0);
        for (int64_t t = 0; t < L; ++t) {
          int64_t idx = (t * d + ch) * n + s;
          h = ap[idx] * h + bp[idx] * xp[t * d + ch];
          hp[idx] = h;
        }
      }
    }
  } else {
    DSSM_OMP_FOR
    for (int64_t lane = 0; lane < d * n; ++lane) {
      int64_t ch = lane / n, s = lane % n;
      std::vector<T> la(static_cast<size_t>(L)), lb(static_cast<size_t>(L));
      for (int64_t t = 0; t < L; ++t) {
        int64_t idx = (t * d + ch) * n + s;
        la[static_cast<size_t>(t)] = ap[idx];
        lb[static_cast<size_t>(t)] = bp[idx] * xp[t * d + ch];
      }
      scan_lane_blelloch(la.data(), lb.data(), L);
      for (int64_t t = 0; t < L; ++t) hp[(t * d + ch) * n + s] = lb[static_cast<size_t>(t)];
    }
  }

  Tensor<T> y(Shape{L, d});
  const T* cp = c.data();
  T* yp = y.data();
  DSSM_OMP_FOR
  for (int64_t t = 0; t < L; ++t)
    for (int64_t ch = 0; ch < d; ++ch) {
      const T* crow = cp + t * groups * n + (ch / group_size) * n;
      const T* hrow = hp + (t * d + ch) * n;
      T acc = T(0);
      for (int64_t s = 0; s < n; ++s) acc += crow[s] * hrow[s];
      yp[t * d + ch] = acc;
    }

  bool track = tape && (abar.requires_grad() || bbar.requires_grad() || c.requires_grad() || x.requires_grad());
  if (track) {
    y.set_requires_grad(true);
    Tensor<T> abc = abar, bbc = bbar, cc = c, xc = x, yc = y, hc = hstates;
    tape->record([abc, bbc, cc, xc, yc, hc, L, d, n, groups, group_size]() mutable {
      const T* gy = yc.grad();
      const T* av = abc.data();
      const T* bv = bbc.data();
      const T* cv = cc.data();
      const T* xv = xc.data();
      const T* hv = hc.data();
      // reverse-time adjoint of the recurrence, one lane column per channel
      std::vector<T> lam(static_cast<size_t>(d * n), T(0));
      for (int64_t t = L - 1; t >= 0; --t) {
        for (int64_t ch = 0; ch < d; ++ch) {
          int64_t goff = t * groups * n + (ch / group_size) * n;
          T g = gy[t * d + ch];
          T dx_acc = T(0);
          for (int64_t s = 0; s < n; ++s) {
            int64_t idx = (t * d + ch) * n + s;
            T l = lam[static_cast<size_t>(ch * n + s)];
            if (t < L - 1) l *= av[((t + 1) * d + ch) * n + s];
            l += g * cv[goff + s];
            lam[static_cast<size_t>(ch * n + s)] = l;
            if (cc.requires_grad()) cc.grad()[goff + s] += g * hv[idx];
            if (abc.requires_grad() && t > 0) abc.grad()[idx] += l * hv[((t - 1) * d + ch) * n + s];
            if (bbc.requires_grad()) bbc.grad()[idx] += l * xv[t * d + ch];
            dx_acc += l * bv[idx];
          }
          if (xc.requires_grad()) xc.grad()[t * d + ch] += dx_acc;
        }
      }
    });
  }
  return y;
}

// Named-mode wrappers for the single-S6 case.
template <typename T>
Tensor<T> scan_sequential(const Tensor<T>& abar, const Tensor<T>& bbar, const Tensor<T>& c, const Tensor<T>& x,
                          std::type_identity_t<Tape<T>*> tape = nullptr) {
  return scan_apply(abar, bbar, c, x, ScanMode::Sequential, tape);
}
template <typename T>
Tensor<T> scan_parallel(const Tensor<T>& abar, const Tensor<T>& bbar, const Tensor<T>& c, const Tensor<T>& x,
                        std::type_identity_t<Tape<T>*> tape = nullptr) {
  return scan_apply(abar, bbar, c, x, ScanMode::Parallel, tape);
}

template <typename T>
Tensor<T> s6_forward(const Tensor<T>& x, const S6Parameters<T>& p, ScanMode mode, std::type_identity_t<Tape<T>*> tape = nullptr) {
  if (x.rank() != 2 || x.dim(1) != p.channels)
    throw ShapeError("s6_forward: x " + shape_str(x.shape()) + " does not match channel count " +
                     std::to_string(p.channels));
  SelectiveOuts<T> sel = selective_params(x, p, tape);
  Discretized<T> disc = discretize(p.A, sel.b, sel.delta, tape);
  return scan_apply(disc.abar, disc.bbar, sel.c, x, mode, tape);
}

}  // namespace dssm
