// Differentiable operations over Tensor<T>. Each op computes its forward
// result and, when a Tape is supplied and an input requires grad, records one
// backward closure with the analytic gradient rule.

#pragma once

#include <cmath>
#include <cstring>
#include <optional>
#include <span>
#include <string>

#include "dssm/random.hpp"
#include <type_traits>

#include "dssm/tensor.hpp"

namespace dssm {

template <typename T>
inline void require_finite(const Tensor<T>& x, const char* what) {
  const T* p = x.data();
  for (int64_t i = 0; i < x.size(); ++i) {
    if (!std::isfinite(static_cast<double>(p[i]))) {
      int64_t row = x.rank() >= 2 ? i / x.dim(x.rank() - 1) : i;
      throw NumericalError(std::string(what) + ": non-finite value at flat index " + std::to_string(i) +
                           " (row/step " + std::to_string(row) + ")");
    }
  }
}

// ---------------------------------------------------------------------------
// Stable scalar kernels
// ---------------------------------------------------------------------------

template <typename T>
inline T stable_sigmoid(T x) {
  if (x >= T(0)) {
    T e = std::exp(-x);
    return T(1) / (T(1) + e);
  }
  T e = std::exp(x);
  return e / (T(1) + e);
}

template <typename T>
inline T stable_softplus(T x) {
  if (x > T(0)) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

// ---------------------------------------------------------------------------
// matmul: [..,m,k] x [..,k,n] -> [..,m,n], batch extents broadcastable
// ---------------------------------------------------------------------------

namespace detail {

inline void batch_layout(const Shape& a, const Shape& b, Shape& obatch, std::vector<int64_t>& acoord,
                         std::vector<int64_t>& bcoord) {
  int ar = static_cast<int>(a.size()) - 2, br = static_cast<int>(b.size()) - 2;
  int r = std::max(ar, br);
  obatch.assign(static_cast<size_t>(r), 1);
  acoord.assign(static_cast<size_t>(r), 0);  // 1 where a participates, 0 where broadcast
  bcoord.assign(static_cast<size_t>(r), 0);
  for (int i = 0; i < r; ++i) {
    int64_t ad = (i >= r - ar) ? a[static_cast<size_t>(i - (r - ar))] : 1;
    int64_t bd = (i >= r - br) ? b[static_cast<size_t>(i - (r - br))] : 1;
    if (ad != bd && ad != 1 && bd != 1)
      throw ShapeError("matmul: batch extents not broadcastable: " + shape_str(a) + " vs " + shape_str(b));
    obatch[static_cast<size_t>(i)] = std::max(ad, bd);
    acoord[static_cast<size_t>(i)] = ad;
    bcoord[static_cast<size_t>(i)] = bd;
  }
}

// Maps a linear batch index in the output to the matrix offsets of a and b.
inline void map_batch(int64_t bi, const Shape& obatch, const std::vector<int64_t>& adims,
                      const std::vector<int64_t>& bdims, int64_t& aoff, int64_t& boff) {
  aoff = 0;
  boff = 0;
  int64_t rem = bi;
  for (int i = static_cast<int>(obatch.size()) - 1; i >= 0; --i) {
    int64_t c = rem % obatch[static_cast<size_t>(i)];
    rem /= obatch[static_cast<size_t>(i)];
    int64_t astride = 1, bstride = 1;
    for (int j = i + 1; j < static_cast<int>(obatch.size()); ++j) {
      astride *= adims[static_cast<size_t>(j)];
      bstride *= bdims[static_cast<size_t>(j)];
    }
    if (adims[static_cast<size_t>(i)] != 1) aoff += c * astride;
    if (bdims[static_cast<size_t>(i)] != 1) boff += c * bstride;
  }
}

}  // namespace detail

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, std::type_identity_t<Tape<T>*> tape = nullptr) {
  if (a.rank() < 2 || b.rank() < 2)
    throw ShapeError("matmul: operands must have rank >= 2, got " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  int64_t m = a.dim(a.rank() - 2), k = a.dim(a.rank() - 1);
  int64_t k2 = b.dim(b.rank() - 2), n = b.dim(b.rank() - 1);
  if (k != k2)
    throw ShapeError("matmul: inner extents differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));

  Shape obatch;
  std::vector<int64_t> adims, bdims;
  detail::batch_layout(a.shape(), b.shape(), obatch, adims, bdims);
  int64_t nbatch = shape_numel(obatch);

  Shape oshape = obatch;
  oshape.push_back(m);
  oshape.push_back(n);
  Tensor<T> out(oshape);

  const T* ap = a.data();
  const T* bp = b.data();
  T* op = out.data();
  for (int64_t bi = 0; bi < nbatch; ++bi) {
    int64_t aoff, boff;
    detail::map_batch(bi, obatch, adims, bdims, aoff, boff);
    const T* A = ap + aoff * m * k;
    const T* B = bp + boff * k * n;
    T* C = op + bi * m * n;
    DSSM_OMP_FOR
    for (int64_t i = 0; i < m; ++i) {
      for (int64_t kk = 0; kk < k; ++kk) {
        T av = A[i * k + kk];
        if (av == T(0)) continue;
        const T* brow = B + kk * n;
        T* crow = C + i * n;
        for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  }

  bool track = tape && (a.requires_grad() || b.requires_grad());
  if (track) {
    out.set_requires_grad(true);
    Tensor<T> ac = a, bc = b, oc = out;
    tape->record([ac, bc, oc, obatch, adims, bdims, m, n, k, nbatch]() mutable {
      const T* g = oc.grad();
      for (int64_t bi = 0; bi < nbatch; ++bi) {
        int64_t aoff, boff;
        detail::map_batch(bi, obatch, adims, bdims, aoff, boff);
        const T* G = g + bi * m * n;
        const T* A = ac.data() + aoff * m * k;
        const T* B = bc.data() + boff * k * n;
        if (ac.requires_grad()) {
          T* GA = ac.grad() + aoff * m * k;
          for (int64_t i = 0; i < m; ++i)
            for (int64_t kk = 0; kk < k; ++kk) {
              T acc = T(0);
              const T* grow = G + i * n;
              const T* brow = B + kk * n;
              for (int64_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
              GA[i * k + kk] += acc;
            }
        }
        if (bc.requires_grad()) {
          T* GB = bc.grad() + boff * k * n;
          for (int64_t kk = 0; kk < k; ++kk)
            for (int64_t i = 0; i < m; ++i) {
              T av = A[i * k + kk];
              if (av == T(0)) continue;
              const T* grow = G + i * n;
              T* gbrow = GB + kk * n;
              for (int64_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
            }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// linear: y = x . W^T (+ bias). x: [..., in], W: [out, in], y: [..., out]
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, std::type_identity_t<Tape<T>*> tape = nullptr,
                 const Tensor<T>* bias = nullptr) {
  if (x.rank() < 1 || w.rank() != 2)
    throw ShapeError("linear: expected x [...,in], w [out,in]; got " + shape_str(x.shape()) + " and " +
                     shape_str(w.shape()));
  int64_t in = x.dim(x.rank() - 1);
  int64_t out_dim = w.dim(0);
  if (w.dim(1) != in)
    throw ShapeError("linear: input width " + shape_str(x.shape()) + " does not match weight " +
                     shape_str(w.shape()));
  if (bias && bias->size() != out_dim)
    throw ShapeError("linear: bias " + shape_str(bias->shape()) + " does not match out width " +
                     std::to_string(out_dim));
  int64_t rows = x.size() / in;

  Shape oshape = x.shape();
  oshape.back() = out_dim;
  Tensor<T> y(oshape);
  const T* xp = x.data();
  const T* wp = w.data();
  const T* bp = bias ? bias->data() : nullptr;
  T* yp = y.data();
  DSSM_OMP_FOR
  for (int64_t r = 0; r < rows; ++r) {
    const T* xr = xp + r * in;
    T* yr = yp + r * out_dim;
    for (int64_t o = 0; o < out_dim; ++o) {
      const T* wr = wp + o * in;
      T acc = bp ? bp[o] : T(0);
      for (int64_t i = 0; i < in; ++i) acc += xr[i] * wr[i];
      yr[o] = acc;
    }
  }

  bool track = tape && (x.requires_grad() || w.requires_grad() || (bias && bias->requires_grad()));
  if (track) {
    y.set_requires_grad(true);
    Tensor<T> xc = x, wc = w, yc = y;
    std::optional<Tensor<T>> bc;
    if (bias) bc = *bias;
    tape->record([xc, wc, yc, bc, rows, in, out_dim]() mutable {
      const T* g = yc.grad();
      if (xc.requires_grad()) {
        T* gx = xc.grad();
        const T* wp2 = wc.data();
        DSSM_OMP_FOR
        for (int64_t r = 0; r < rows; ++r) {
          const T* gr = g + r * out_dim;
          T* gxr = gx + r * in;
          for (int64_t o = 0; o < out_dim; ++o) {
            T go = gr[o];
            if (go == T(0)) continue;
            const T* wr = wp2 + o * in;
            for (int64_t i = 0; i < in; ++i) gxr[i] += go * wr[i];
          }
        }
      }
      if (wc.requires_grad()) {
        T* gw = wc.grad();
        const T* xp2 = xc.data();
        DSSM_OMP_FOR
        for (int64_t o = 0; o < out_dim; ++o) {
          T* gwr = gw + o * in;
          for (int64_t r = 0; r < rows; ++r) {
            T go = g[r * out_dim + o];
            if (go == T(0)) continue;
            const T* xr = xp2 + r * in;
            for (int64_t i = 0; i < in; ++i) gwr[i] += go * xr[i];
          }
        }
      }
      if (bc && bc->requires_grad()) {
        T* gb = bc->grad();
        for (int64_t r = 0; r < rows; ++r)
          for (int64_t o = 0; o < out_dim; ++o) gb[o] += g[r * out_dim + o];
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// pointwise: exp | softplus | sigmoid | silu
// ---------------------------------------------------------------------------

enum class PointwiseFn { Exp, Softplus, Sigmoid, Silu };

inline PointwiseFn pointwise_by_name(const std::string& name) {
  if (name == "exp") return PointwiseFn::Exp;
  if (name == "softplus") return PointwiseFn::Softplus;
  if (name == "sigmoid") return PointwiseFn::Sigmoid;
  if (name == "silu") return PointwiseFn::Silu;
  throw ConfigError("pointwise: unknown function '" + name + "'");
}

template <typename T>
Tensor<T> pointwise(PointwiseFn fn, const Tensor<T>& x, std::type_identity_t<Tape<T>*> tape = nullptr) {
  Tensor<T> y(x.shape());
  const T* xp = x.data();
  T* yp = y.data();
  int64_t n = x.size();
  switch (fn) {
    case PointwiseFn::Exp:
      DSSM_OMP_FOR
      for (int64_t i = 0; i < n; ++i) yp[i] = std::exp(xp[i]);
      break;
    case PointwiseFn::Softplus:
      DSSM_OMP_FOR
      for (int64_t i = 0; i < n; ++i) yp[i] = stable_softplus(xp[i]);
      break;
    case PointwiseFn::Sigmoid:
      DSSM_OMP_FOR
      for (int64_t i = 0; i < n; ++i) yp[i] = stable_sigmoid(xp[i]);
      break;
    case PointwiseFn::Silu:
      DSSM_OMP_FOR
      for (int64_t i = 0; i < n; ++i) yp[i] = xp[i] * stable_sigmoid(xp[i]);
      break;
  }
  if (tape && x.requires_grad()) {
    y.set_requires_grad(true);
    Tensor<T> xc = x, yc = y;
    tape->record([fn, xc, yc, n]() mutable {
      const T* g = yc.grad();
      const T* xv = xc.data();
      const T* yv = yc.data();
      T* gx = xc.grad();
      switch (fn) {
        case PointwiseFn::Exp:
          for (int64_t i = 0; i < n; ++i) gx[i] += g[i] * yv[i];
          break;
        case PointwiseFn::Softplus:
          for (int64_t i = 0; i < n; ++i) gx[i] += g[i] * stable_sigmoid(xv[i]);
          break;
        case PointwiseFn::Sigmoid:
          for (int64_t i = 0; i < n; ++i) gx[i] += g[i] * yv[i] * (T(1) - yv[i]);
          break;
        case PointwiseFn::Silu:
          for (int64_t i = 0; i < n; ++i) {
            T s = stable_sigmoid(xv[i]);
            gx[i] += g[i] * s * (T(1) + xv[i] * (T(1) - s));
          }
          break;
      }
    });
  }
  return y;
}

template <typename T>
Tensor<T> pointwise(const std::string& name, const Tensor<T>& x, std::type_identity_t<Tape<T>*> tape = nullptr) {
  return pointwise(pointwise_by_name(name), x, tape);
}

template <typename T>
Tensor<T> silu(const Tensor<T>& x, std::type_identity_t<Tape<T>*> tape = nullptr) {
  return pointwise(PointwiseFn::Silu, x, tape);
}
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x, std::type_identity_t<Tape<T>*> tape = nullptr) {
  return pointwise(PointwiseFn::Sigmoid, x, tape);
}
template <typename T>
Tensor<T> softplus(const Tensor<T>& x, std::type_identity_t<Tape<T>*> tape = nullptr) {
  return pointwise(PointwiseFn::Softplus, x, tape);
}
template <typename T>
Tensor<T> exp_op(const Tensor<T>& x, std::type_identity_t<Tape<T>*> tape = nullptr) {
  return pointwise(PointwiseFn::Exp, x, tape);
}

// ---------------------------------------------------------------------------
// softmax along an axis, max-subtracted
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis, std::type_identity_t<Tape<T>*> tape = nullptr) {
  int r = x.rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw ShapeError("softmax: axis out of range for " + shape_str(x.shape()));
  int64_t n = x.dim(axis);
  int64_t inner = 1, outer = 1;
  for (int i = axis + 1; i < r; ++i) inner *= x.dim(i);
  for (int i = 0; i < axis; ++i) outer *= x.dim(i);

  Tensor<T> y(x.shape());
  const T* xp = x.data();
  T* yp = y.data();
  DSSM_OMP_FOR
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t in = 0; in < inner; ++in) {
      const int64_t base = o * n * inner + in;
      T mx = xp[base];
      for (int64_t j = 1; j < n; ++j) mx = std::max(mx, xp[base + j * inner]);
      T sum = T(0);
      for (int64_t j = 0; j < n; ++j) {
        T e = std::exp(xp[base + j * inner] - mx);
        yp[base + j * inner] = e;
        sum += e;
      }
      T inv = T(1) / sum;
      for (int64_t j = 0; j < n; ++j) yp[base + j * inner] *= inv;
    }
  }

  if (tape && x.requires_grad()) {
    y.set_requires_grad(true);
    Tensor<T> xc = x, yc = y;
    tape->record([xc, yc, outer, inner, n]() mutable {
      const T* g = yc.grad();
      const T* yv = yc.data();
      T* gx = xc.grad();
      for (int64_t o = 0; o < outer; ++o)
        for (int64_t in = 0; in < inner; ++in) {
          const int64_t base = o * n * inner + in;
          T dot = T(0);
          for (int64_t j = 0; j < n; ++j) dot += g[base + j * inner] * yv[base + j * inner];
          for (int64_t j = 0; j < n; ++j) {
            int64_t k = base + j * inner;
            gx[k] += yv[k] * (g[k] - dot);
          }
        }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// rmsnorm over the last axis; `groups` splits the axis into equal groups that
// are normalized independently (group count 1 = plain RMSNorm)
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> rmsnorm(const Tensor<T>& x, const Tensor<T>& gain, T eps, std::type_identity_t<Tape<T>*> tape = nullptr,
                  int64_t groups = 1) {
  if (eps <= T(0)) throw ConfigError("rmsnorm: eps must be positive");
  int64_t d = x.dim(x.rank() - 1);
  if (gain.size() != d)
    throw ShapeError("rmsnorm: gain " + shape_str(gain.shape()) + " does not match last axis of " +
                     shape_str(x.shape()));
  if (groups < 1 || d % groups != 0)
    throw ConfigError("rmsnorm: group count " + std::to_string(groups) + " must divide width " +
                      std::to_string(d));
  int64_t gs = d / groups;
  int64_t rows = x.size() / d;

  Tensor<T> y(x.shape());
  const T* xp = x.data();
  const T* gp = gain.data();
  T* yp = y.data();
  DSSM_OMP_FOR
  for (int64_t r = 0; r < rows; ++r) {
    for (int64_t g0 = 0; g0 < groups; ++g0) {
      const T* xr = xp + r * d + g0 * gs;
      T* yr = yp + r * d + g0 * gs;
      const T* gr = gp + g0 * gs;
      T ms = T(0);
      for (int64_t i = 0; i < gs; ++i) ms += xr[i] * xr[i];
      ms /= static_cast<T>(gs);
      T inv = T(1) / std::sqrt(ms + eps);
      for (int64_t i = 0; i < gs; ++i) yr[i] = xr[i] * inv * gr[i];
    }
  }

  bool track = tape && (x.requires_grad() || gain.requires_grad());
  if (track) {
    y.set_requires_grad(true);
    Tensor<T> xc = x, gc = gain, yc = y;
    tape->record([xc, gc, yc, rows, d, groups, gs, eps]() mutable {
      const T* g = yc.grad();
      const T* xv = xc.data();
      const T* gv = gc.data();
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t g0 = 0; g0 < groups; ++g0) {
          const T* xr = xv + r * d + g0 * gs;
          const T* grad_r = g + r * d + g0 * gs;
          const T* gainr = gv + g0 * gs;
          T ms = T(0);
          for (int64_t i = 0; i < gs; ++i) ms += xr[i] * xr[i];
          ms /= static_cast<T>(gs);
          T inv = T(1) / std::sqrt(ms + eps);
          if (gc.requires_grad()) {
            T* gg = gc.grad() + g0 * gs;
            for (int64_t i = 0; i < gs; ++i) gg[i] += grad_r[i] * xr[i] * inv;
          }
          if (xc.requires_grad()) {
            T s = T(0);
            for (int64_t i = 0; i < gs; ++i) s += grad_r[i] * gainr[i] * xr[i];
            T c = inv * inv * inv * s / static_cast<T>(gs);
            T* gx = xc.grad() + r * d + g0 * gs;
            for (int64_t i = 0; i < gs; ++i) gx[i] += grad_r[i] * gainr[i] * inv - xr[i] * c;
          }
        }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// depthwise causal conv1d: y[t,d] = sum_k kernels[k,d] * x[t-K+1+k, d] + bias[d]
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> depthwise_causal_conv1d(const Tensor<T>& x, const Tensor<T>& kernels, const Tensor<T>& bias,
                                  std::type_identity_t<Tape<T>*> tape = nullptr) {
  if (x.rank() != 2 || kernels.rank() != 2)
    throw ShapeError("conv1d: expected x [L,D] and kernels [K,D], got " + shape_str(x.shape()) + " and " +
                     shape_str(kernels.shape()));
  int64_t L = x.dim(0), d = x.dim(1), k = kernels.dim(0);
  if (kernels.dim(1) != d || bias.size() != d)
    throw ShapeError("conv1d: channel mismatch between x " + shape_str(x.shape()) + ", kernels " +
                     shape_str(kernels.shape()) + ", bias " + shape_str(bias.shape()));

  Tensor<T> y(x.shape());
  const T* xp = x.data();
  const T* kp = kernels.data();
  const T* bp = bias.data();
  T* yp = y.data();
  DSSM_OMP_FOR
  for (int64_t t = 0; t < L; ++t) {
    for (int64_t c = 0; c < d; ++c) {
      T acc = bp[c];
      int64_t k0 = std::max<int64_t>(0, k - 1 - t);  // virtual left zero padding
      for (int64_t kk = k0; kk < k; ++kk) acc += kp[kk * d + c] * xp[(t - k + 1 + kk) * d + c];
      yp[t * d + c] = acc;
    }
  }

  bool track = tape && (x.requires_grad() || kernels.requires_grad() || bias.requires_grad());
  if (track) {
    y.set_requires_grad(true);
    Tensor<T> xc = x, kc = kernels, bc = bias, yc = y;
    tape->record([xc, kc, bc, yc, L, d, k]() mutable {
      const T* g = yc.grad();
      const T* xv = xc.data();
      const T* kv = kc.data();
      if (kc.requires_grad()) {
        T* gk = kc.grad();
        for (int64_t kk = 0; kk < k; ++kk)
          for (int64_t t = std::max<int64_t>(0, k - 1 - kk); t < L; ++t) {
            const T* gr = g + t * d;
            const T* xr = xv + (t - k + 1 + kk) * d;
            T* gkr = gk + kk * d;
            for (int64_t c = 0; c < d; ++c) gkr[c] += gr[c] * xr[c];
          }
      }
      if (bc.requires_grad()) {
        T* gb = bc.grad();
        for (int64_t t = 0; t < L; ++t)
          for (int64_t c = 0; c < d; ++c) gb[c] += g[t * d + c];
      }
      if (xc.requires_grad()) {
        T* gx = xc.grad();
        for (int64_t u = 0; u < L; ++u) {
          int64_t t1 = std::min(L - 1, u + k - 1);
          for (int64_t t = u; t <= t1; ++t) {
            int64_t kk = u - t + k - 1;
            const T* gr = g + t * d;
            const T* kr = kv + kk * d;
            T* gxr = gx + u * d;
            for (int64_t c = 0; c < d; ++c) gxr[c] += gr[c] * kr[c];
          }
        }
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// cross entropy: mean NLL over unmasked positions
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int32_t> targets,
                        std::type_identity_t<Tape<T>*> tape = nullptr, std::span<const uint8_t> mask = {}) {
  if (logits.rank() != 2) throw ShapeError("cross_entropy: logits must be [L,V], got " + shape_str(logits.shape()));
  int64_t L = logits.dim(0), v = logits.dim(1);
  if (static_cast<int64_t>(targets.size()) != L)
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " + std::to_string(L) +
                     " rows");
  if (!mask.empty() && static_cast<int64_t>(mask.size()) != L)
    throw ShapeError("cross_entropy: mask length mismatch");

  int64_t cnt = 0;
  double total = 0;
  const T* lp = logits.data();
  for (int64_t t = 0; t < L; ++t) {
    if (!mask.empty() && !mask[static_cast<size_t>(t)]) continue;
    int32_t tgt = targets[static_cast<size_t>(t)];
    if (tgt < 0 || tgt >= v)
      throw DataError("cross_entropy: target " + std::to_string(tgt) + " out of range [0," + std::to_string(v) +
                      ") at position " + std::to_string(t));
    const T* row = lp + t * v;
    T mx = row[0];
    for (int64_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
    double sum = 0;
    for (int64_t j = 0; j < v; ++j) sum += std::exp(static_cast<double>(row[j] - mx));
    total += std::log(sum) + static_cast<double>(mx) - static_cast<double>(row[tgt]);
    ++cnt;
  }
  if (cnt == 0) throw DataError("cross_entropy: no unmasked positions");
  Tensor<T> loss = Tensor<T>::scalar(static_cast<T>(total / static_cast<double>(cnt)));

  if (tape && logits.requires_grad()) {
    loss.set_requires_grad(true);
    Tensor<T> lc = logits, oc = loss;
    std::vector<int32_t> tg(targets.begin(), targets.end());
    std::vector<uint8_t> mk(mask.begin(), mask.end());
    tape->record([lc, oc, tg, mk, L, v, cnt]() mutable {
      T gl = oc.grad()[0];
      if (gl == T(0)) return;
      const T* lv = lc.data();
      T* gx = lc.grad();
      T scale = gl / static_cast<T>(cnt);
      for (int64_t t = 0; t < L; ++t) {
        if (!mk.empty() && !mk[static_cast<size_t>(t)]) continue;
        const T* row = lv + t * v;
        T* grow = gx + t * v;
        T mx = row[0];
        for (int64_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
        T sum = T(0);
        for (int64_t j = 0; j < v; ++j) sum += std::exp(row[j] - mx);
        T inv = T(1) / sum;
        for (int64_t j = 0; j < v; ++j) grow[j] += scale * std::exp(row[j] - mx) * inv;
        grow[tg[static_cast<size_t>(t)]] -= scale;
      }
    });
  }
  return loss;
}

// mean KL(target || softmax(logits)) over rows; targets are fixed
// distributions supplied as probabilities and log-probabilities
template <typename T>
Tensor<T> kl_from_logits(const Tensor<T>& target_probs, const Tensor<T>& target_logp, const Tensor<T>& logits,
                         std::type_identity_t<Tape<T>*> tape = nullptr) {
  if (target_probs.shape() != logits.shape() || target_logp.shape() != logits.shape())
    throw ShapeError("kl_from_logits: shape mismatch " + shape_str(target_probs.shape()) + " vs " +
                     shape_str(logits.shape()));
  int64_t v = logits.dim(logits.rank() - 1);
  int64_t rows = logits.size() / v;
  const T* pp = target_probs.data();
  const T* lp = target_logp.data();
  const T* xp = logits.data();
  double total = 0;
  for (int64_t r = 0; r < rows; ++r) {
    const T* row = xp + r * v;
    T mx = row[0];
    for (int64_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
    double sum = 0;
    for (int64_t j = 0; j < v; ++j) sum += std::exp(static_cast<double>(row[j] - mx));
    double lse = std::log(sum) + static_cast<double>(mx);
    for (int64_t j = 0; j < v; ++j) {
      double p = pp[r * v + j];
      if (p > 0) total += p * (static_cast<double>(lp[r * v + j]) - (static_cast<double>(row[j]) - lse));
    }
  }
  Tensor<T> loss = Tensor<T>::scalar(static_cast<T>(total / static_cast<double>(rows)));
  if (tape && logits.requires_grad()) {
    loss.set_requires_grad(true);
    Tensor<T> xc = logits, pc = target_probs, oc = loss;
    tape->record([xc, pc, oc, rows, v]() mutable {
      T g = oc.grad()[0];
      if (g == T(0)) return;
      T scale = g / static_cast<T>(rows);
      const T* xv = xc.data();
      const T* pv = pc.data();
      T* gx = xc.grad();
      for (int64_t r = 0; r < rows; ++r) {
        const T* row = xv + r * v;
        T mx = row[0];
        for (int64_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
        T sum = T(0);
        for (int64_t j = 0; j < v; ++j) sum += std::exp(row[j] - mx);
        T inv = T(1) / sum;
        for (int64_t j = 0; j < v; ++j)
          gx[r * v + j] += scale * (std::exp(row[j] - mx) * inv - pv[r * v + j]);
      }
    });
  }
  return loss;
}

// ---------------------------------------------------------------------------
// embedding lookup
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const int32_t> ids, std::type_identity_t<Tape<T>*> tape = nullptr) {
  if (table.rank() != 2) throw ShapeError("embedding: table must be [V,D]");
  int64_t v = table.dim(0), d = table.dim(1);
  int64_t L = static_cast<int64_t>(ids.size());
  Tensor<T> out(Shape{L, d});
  for (int64_t t = 0; t < L; ++t) {
    int32_t id = ids[static_cast<size_t>(t)];
    if (id < 0 || id >= v)
      throw DataError("embedding: token id " + std::to_string(id) + " out of range at position " +
                      std::to_string(t));
    std::memcpy(out.data() + t * d, table.data() + id * d, sizeof(T) * static_cast<size_t>(d));
  }
  if (tape && table.requires_grad()) {
    out.set_requires_grad(true);
    Tensor<T> tc = table, oc = out;
    std::vector<int32_t> idv(ids.begin(), ids.end());
    tape->record([tc, oc, idv, d]() mutable {
      const T* g = oc.grad();
      T* gt = tc.grad();
      for (size_t t = 0; t < idv.size(); ++t) {
        const T* gr = g + static_cast<int64_t>(t) * d;
        T* tr = gt + static_cast<int64_t>(idv[t]) * d;
        for (int64_t i = 0; i < d; ++i) tr[i] += gr[i];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// elementwise / shape utilities
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b, std::type_identity_t<Tape<T>*> tape = nullptr) {
  if (a.shape() != b.shape())
    throw ShapeError("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> y(a.shape());
  for (int64_t i = 0; i < a.size(); ++i) y.data()[i] = a.data()[i] + b.data()[i];
  if (tape && (a.requires_grad() || b.requires_grad())) {
    y.set_requires_grad(true);
    Tensor<T> ac = a, bc = b, yc = y;
    tape->record([ac, bc, yc]() mutable {
      const T* g = yc.grad();
      if (ac.requires_grad()) {
        T* ga = ac.grad();
        for (int64_t i = 0; i < yc.size(); ++i) ga[i] += g[i];
      }
      if (bc.requires_grad()) {
        T* gb = bc.grad();
        for (int64_t i = 0; i < yc.size(); ++i) gb[i] += g[i];
      }
    });
  }
  return y;
}

// x: [..., D], bias: [D]
template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias, std::type_identity_t<Tape<T>*> tape = nullptr) {
  int64_t d = x.dim(x.rank() - 1);
  if (bias.size() != d)
    throw ShapeError("add_bias: bias " + shape_str(bias.shape()) + " vs last axis of " + shape_str(x.shape()));
  Tensor<T> y(x.shape());
  int64_t rows = x.size() / d;
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t i = 0; i < d; ++i) y.data()[r * d + i] = x.data()[r * d + i] + bias.data()[i];
  if (tape && (x.requires_grad() || bias.requires_grad())) {
    y.set_requires_grad(true);
    Tensor<T> xc = x, bc = bias, yc = y;
    tape->record([xc, bc, yc, rows, d]() mutable {
      const T* g = yc.grad();
      if (xc.requires_grad()) {
        T* gx = xc.grad();
        for (int64_t i = 0; i < yc.size(); ++i) gx[i] += g[i];
      }
      if (bc.requires_grad()) {
        T* gb = bc.grad();
        for (int64_t r = 0; r < rows; ++r)
          for (int64_t i = 0; i < d; ++i) gb[i] += g[r * d + i];
      }
    });
  }
  return y;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b, std::type_identity_t<Tape<T>*> tape = nullptr) {
  if (a.shape() != b.shape())
    throw ShapeError("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> y(a.shape());
  for (int64_t i = 0; i < a.size(); ++i) y.data()[i] = a.data()[i] * b.data()[i];
  if (tape && (a.requires_grad() || b.requires_grad())) {
    y.set_requires_grad(true);
    Tensor<T> ac = a, bc = b, yc = y;
    tape->record([ac, bc, yc]() mutable {
      const T* g = yc.grad();
      if (ac.requires_grad()) {
        T* ga = ac.grad();
        const T* bv = bc.data();
        for (int64_t i = 0; i < yc.size(); ++i) ga[i] += g[i] * bv[i];
      }
      if (bc.requires_grad()) {
        T* gb = bc.grad();
        const T* av = ac.data();
        for (int64_t i = 0; i < yc.size(); ++i) gb[i] += g[i] * av[i];
      }
    });
  }
  return y;
}

// out = x - lam * y with lam a scalar tensor
template <typename T>
Tensor<T> sub_scaled(const Tensor<T>& x, const Tensor<T>& y, const Tensor<T>& lam, std::type_identity_t<Tape<T>*> tape = nullptr) {
  if (x.shape() != y.shape())
    throw ShapeError("sub_scaled: shape mismatch " + shape_str(x.shape()) + " vs " + shape_str(y.shape()));
  if (lam.size() != 1) throw ShapeError("sub_scaled: lambda must be scalar");
  T lv = lam.data()[0];
  Tensor<T> out(x.shape());
  for (int64_t i = 0; i < x.size(); ++i) out.data()[i] = x.data()[i] - lv * y.data()[i];
  if (tape && (x.requires_grad() || y.requires_grad() || lam.requires_grad())) {
    out.set_requires_grad(true);
    Tensor<T> xc = x, yc = y, lc = lam, oc = out;
    tape->record([xc, yc, lc, oc]() mutable {
      const T* g = oc.grad();
      T lv2 = lc.data()[0];
      if (xc.requires_grad()) {
        T* gx = xc.grad();
        for (int64_t i = 0; i < oc.size(); ++i) gx[i] += g[i];
      }
      if (yc.requires_grad()) {
        T* gy = yc.grad();
        for (int64_t i = 0; i < oc.size(); ++i) gy[i] -= lv2 * g[i];
      }
      if (lc.requires_grad()) {
        T acc = T(0);
        const T* yv = yc.data();
        for (int64_t i = 0; i < oc.size(); ++i) acc += g[i] * yv[i];
        lc.grad()[0] -= acc;
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale_const(const Tensor<T>& x, T c, std::type_identity_t<Tape<T>*> tape = nullptr) {
  Tensor<T> y(x.shape());
  for (int64_t i = 0; i < x.size(); ++i) y.data()[i] = x.data()[i] * c;
  if (tape && x.requires_grad()) {
    y.set_requires_grad(true);
    Tensor<T> xc = x, yc = y;
    tape->record([xc, yc, c]() mutable {
      const T* g = yc.grad();
      T* gx = xc.grad();
      for (int64_t i = 0; i < yc.size(); ++i) gx[i] += g[i] * c;
    });
  }
  return y;
}

template <typename T>
Tensor<T> add_const(const Tensor<T>& x, T c, std::type_identity_t<Tape<T>*> tape = nullptr) {
  Tensor<T> y(x.shape());
  for (int64_t i = 0; i < x.size(); ++i) y.data()[i] = x.data()[i] + c;
  if (tape && x.requires_grad()) {
    y.set_requires_grad(true);
    Tensor<T> xc = x, yc = y;
    tape->record([xc, yc]() mutable {
      const T* g = yc.grad();
      T* gx = xc.grad();
      for (int64_t i = 0; i < yc.size(); ++i) gx[i] += g[i];
    });
  }
  return y;
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x, std::type_identity_t<Tape<T>*> tape = nullptr) {
  T acc = T(0);
  for (int64_t i = 0; i < x.size(); ++i) acc += x.data()[i];
  Tensor<T> y = Tensor<T>::scalar(acc);
  if (tape && x.requires_grad()) {
    y.set_requires_grad(true);
    Tensor<T> xc = x, yc = y;
    tape->record([xc, yc]() mutable {
      T g = yc.grad()[0];
      T* gx = xc.grad();
      for (int64_t i = 0; i < xc.size(); ++i) gx[i] += g;
    });
  }
  return y;
}

template <typename T>
Tensor<T> dot(const Tensor<T>& a, const Tensor<T>& b, std::type_identity_t<Tape<T>*> tape = nullptr) {
  return sum_all(mul(a, b, tape), tape);
}

template <typename T>
Tensor<T> clamp(const Tensor<T>& x, T lo, T hi, std::type_identity_t<Tape<T>*> tape = nullptr) {
  Tensor<T> y(x.shape());
  for (int64_t i = 0; i < x.size(); ++i) y.data()[i] = std::min(hi, std::max(lo, x.data()[i]));
  if (tape && x.requires_grad()) {
    y.set_requires_grad(true);
    Tensor<T> xc = x, yc = y;
    tape->record([xc, yc, lo, hi]() mutable {
      const T* g = yc.grad();
      const T* xv = xc.data();
      T* gx = xc.grad();
      for (int64_t i = 0; i < yc.size(); ++i)
        if (xv[i] > lo && xv[i] < hi) gx[i] += g[i];
    });
  }
  return y;
}

// rank-2 row slice [r0,r1) — used to view per-path weights in fused layouts
template <typename T>
Tensor<T> slice_rows(const Tensor<T>& x, int64_t r0, int64_t r1, std::type_identity_t<Tape<T>*> tape = nullptr) {
  if (x.rank() != 2 || r0 < 0 || r1 > x.dim(0) || r0 >= r1)
    throw ShapeError("slice_rows: bad range [" + std::to_string(r0) + "," + std::to_string(r1) + ") for " +
                     shape_str(x.shape()));
  int64_t cols = x.dim(1);
  Tensor<T> y(Shape{r1 - r0, cols});
  std::memcpy(y.data(), x.data() + r0 * cols, sizeof(T) * static_cast<size_t>((r1 - r0) * cols));
  if (tape && x.requires_grad()) {
    y.set_requires_grad(true);
    Tensor<T> xc = x, yc = y;
    tape->record([xc, yc, r0, cols]() mutable {
      const T* g = yc.grad();
      T* gx = xc.grad() + r0 * cols;
      for (int64_t i = 0; i < yc.size(); ++i) gx[i] += g[i];
    });
  }
  return y;
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& x, int64_t c0, int64_t c1, std::type_identity_t<Tape<T>*> tape = nullptr) {
  if (x.rank() != 2 || c0 < 0 || c1 > x.dim(1) || c0 >= c1)
    throw ShapeError("slice_cols: bad range [" + std::to_string(c0) + "," + std::to_string(c1) + ") for " +
                     shape_str(x.shape()));
  int64_t rows = x.dim(0), cols = x.dim(1), w = c1 - c0;
  Tensor<T> y(Shape{rows, w});
  for (int64_t r = 0; r < rows; ++r)
    std::memcpy(y.data() + r * w, x.data() + r * cols + c0, sizeof(T) * static_cast<size_t>(w));
  if (tape && x.requires_grad()) {
    y.set_requires_grad(true);
    Tensor<T> xc = x, yc = y;
    tape->record([xc, yc, rows, cols, c0, w]() mutable {
      const T* g = yc.grad();
      T* gx = xc.grad();
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t i = 0; i < w; ++i) gx[r * cols + c0 + i] += g[r * w + i];
    });
  }
  return y;
}

// rank-1 slice [i0,i1)
template <typename T>
Tensor<T> slice_vec(const Tensor<T>& x, int64_t i0, int64_t i1, std::type_identity_t<Tape<T>*> tape = nullptr) {
  if (x.rank() != 1 || i0 < 0 || i1 > x.dim(0) || i0 >= i1)
    throw ShapeError("slice_vec: bad range [" + std::to_string(i0) + "," + std::to_string(i1) + ") for " +
                     shape_str(x.shape()));
  Tensor<T> y(Shape{i1 - i0});
  std::memcpy(y.data(), x.data() + i0, sizeof(T) * static_cast<size_t>(i1 - i0));
  if (tape && x.requires_grad()) {
    y.set_requires_grad(true);
    Tensor<T> xc = x, yc = y;
    tape->record([xc, yc, i0]() mutable {
      const T* g = yc.grad();
      T* gx = xc.grad() + i0;
      for (int64_t i = 0; i < yc.size(); ++i) gx[i] += g[i];
    });
  }
  return y;
}

template <typename T>
Tensor<T> concat_cols(const Tensor<T>& a, const Tensor<T>& b, std::type_identity_t<Tape<T>*> tape = nullptr) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(0) != b.dim(0))
    throw ShapeError("concat_cols: incompatible " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  int64_t rows = a.dim(0), ca = a.dim(1), cb = b.dim(1);
  Tensor<T> y(Shape{rows, ca + cb});
  for (int64_t r = 0; r < rows; ++r) {
    std::memcpy(y.data() + r * (ca + cb), a.data() + r * ca, sizeof(T) * static_cast<size_t>(ca));
    std::memcpy(y.data() + r * (ca + cb) + ca, b.data() + r * cb, sizeof(T) * static_cast<size_t>(cb));
  }
  if (tape && (a.requires_grad() || b.requires_grad())) {
    y.set_requires_grad(true);
    Tensor<T> ac = a, bc = b, yc = y;
    tape->record([ac, bc, yc, rows, ca, cb]() mutable {
      const T* g = yc.grad();
      if (ac.requires_grad()) {
        T* ga = ac.grad();
        for (int64_t r = 0; r < rows; ++r)
          for (int64_t i = 0; i < ca; ++i) ga[r * ca + i] += g[r * (ca + cb) + i];
      }
      if (bc.requires_grad()) {
        T* gb = bc.grad();
        for (int64_t r = 0; r < rows; ++r)
          for (int64_t i = 0; i < cb; ++i) gb[r * cb + i] += g[r * (ca + cb) + ca + i];
      }
    });
  }
  return y;
}

template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double rate, Rng& rng, std::type_identity_t<Tape<T>*> tape = nullptr) {
  if (rate <= 0.0) return x;
  if (rate >= 1.0) throw ConfigError("dropout: rate must be < 1");
  Tensor<T> y(x.shape());
  std::vector<uint8_t> keep(static_cast<size_t>(x.size()));
  T scale = T(1.0 / (1.0 - rate));
  for (int64_t i = 0; i < x.size(); ++i) {
    keep[static_cast<size_t>(i)] = rng.bernoulli(1.0 - rate) ? 1 : 0;
    y.data()[i] = keep[static_cast<size_t>(i)] ? x.data()[i] * scale : T(0);
  }
  if (tape && x.requires_grad()) {
    y.set_requires_grad(true);
    Tensor<T> xc = x, yc = y;
    tape->record([xc, yc, keep, scale]() mutable {
      const T* g = yc.grad();
      T* gx = xc.grad();
      for (int64_t i = 0; i < yc.size(); ++i)
        if (keep[static_cast<size_t>(i)]) gx[i] += g[i] * scale;
    });
  }
  return y;
}

}  // namespace dssm
