// Exact materialization of the causal L x L operators that selective-SSM
// layers apply to a fixed input: the data-controlled linear operator view.
// Used as a brute-force oracle against the recurrent forward paths and as the
// data source for operator inspection dumps.
//
// The Mamba-level operator composes, left to right: the gate diagonal, the
// S6 operator, the conv-activation sigmoid diagonal, and the banded conv
// matrix. It acts on the in-projected channel signal; the out-projection and
// residual are channel-mixing and stay outside the operator. Exact for
// zero conv bias (a bias adds an affine offset no L x L matrix represents).

#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "dssm/diff.hpp"
#include "dssm/mamba.hpp"
#include "dssm/s6.hpp"

namespace dssm {

enum class OperatorSource { S6, Mamba, DiffS6, DiffMamba };

inline constexpr int64_t kOperatorLengthCap = 512;

template <typename T>
struct ImplicitOperator {
  Tensor<T> matrix;  // [L, L], entries above the diagonal exactly zero
  int64_t channel = 0;
  OperatorSource source = OperatorSource::S6;
  std::optional<T> lambda;

  int64_t length() const { return matrix.dim(0); }

  // y = A v
  std::vector<T> apply(std::span<const T> v) const {
    int64_t l = length();
    if (static_cast<int64_t>(v.size()) != l)
      throw ShapeError("operator apply: vector length " + std::to_string(v.size()) + " vs operator " +
                       std::to_string(l));
    std::vector<T> y(static_cast<size_t>(l), T(0));
    const T* m = matrix.data();
    for (int64_t t = 0; t < l; ++t) {
      T acc = T(0);
      for (int64_t s = 0; s <= t; ++s) acc += m[t * l + s] * v[static_cast<size_t>(s)];
      y[static_cast<size_t>(t)] = acc;
    }
    return y;
  }
};

namespace detail {
inline void check_operator_cap(int64_t l, int64_t cap) {
  if (l > cap)
    throw ResourceError("operator materialization: length " + std::to_string(l) + " exceeds cap " +
                        std::to_string(cap) + " (O(L^2) cost)");
}
}  // namespace detail

// A[t,s] = C_t . (prod_{k=s+1..t} abar_k) . bbar_s for s <= t, built from the
// selective parameters the layer computes on this exact input.
template <typename T>
ImplicitOperator<T> materialize_s6(const Tensor<T>& x, const S6Parameters<T>& p, int64_t channel,
                                   int64_t cap = kOperatorLengthCap) {
  int64_t l = x.dim(0);
  detail::check_operator_cap(l, cap);
  if (channel < 0 || channel >= p.channels)
    throw ShapeError("materialize_s6: channel " + std::to_string(channel) + " out of range");
  SelectiveOuts<T> sel = selective_params(x, p, static_cast<Tape<T>*>(nullptr));
  Discretized<T> disc = discretize(p.A, sel.b, sel.delta, static_cast<Tape<T>*>(nullptr));
  int64_t d = p.channels, n = p.d_state;

  ImplicitOperator<T> op;
  op.source = OperatorSource::S6;
  op.channel = channel;
  op.matrix = Tensor<T>(Shape{l, l});
  T* m = op.matrix.data();
  const T* ab = disc.abar.data();
  const T* bb = disc.bbar.data();
  const T* cv = sel.c.data();
  std::vector<T> prod(static_cast<size_t>(n));
  for (int64_t t = 0; t < l; ++t) {
    const T* crow = cv + t * n;
    std::fill(prod.begin(), prod.end(), T(1));
    for (int64_t s = t; s >= 0; --s) {
      if (s < t) {
        const T* arow = ab + ((s + 1) * d + channel) * n;
        for (int64_t k = 0; k < n; ++k) prod[static_cast<size_t>(k)] *= arow[k];
      }
      const T* brow = bb + (s * d + channel) * n;
      T acc = T(0);
      for (int64_t k = 0; k < n; ++k) acc += crow[k] * prod[static_cast<size_t>(k)] * brow[k];
      m[t * l + s] = acc;
    }
  }
  return op;
}

// Operator of the full block path for one inner channel, acting on the
// in-projected signal v = (u W_in_x^T)[:, channel].
template <typename T>
ImplicitOperator<T> materialize_mamba(const Tensor<T>& u, const MambaBlockParams<T>& p, int64_t channel,
                                      int64_t cap = kOperatorLengthCap, bool unit_gate = false) {
  int64_t l = u.dim(0);
  detail::check_operator_cap(l, cap);
  if (channel < 0 || channel >= p.d_inner)
    throw ShapeError("materialize_mamba: channel " + std::to_string(channel) + " out of range");

  // forward values on this input (data side of the data-controlled operator)
  Tensor<T> x_pre = linear(u, p.w_in_x);
  Tensor<T> conv_out = depthwise_causal_conv1d(x_pre, p.conv_w, p.conv_b);
  Tensor<T> x_act = silu(conv_out);
  ImplicitOperator<T> s6_op = materialize_s6(x_act, p.s6, channel, cap);
  Tensor<T> z;
  if (!unit_gate) z = silu(linear(u, p.w_in_z));

  // banded conv matrix for this channel
  int64_t k = p.conv_k;
  std::vector<T> conv_band(static_cast<size_t>(k));
  for (int64_t kk = 0; kk < k; ++kk) conv_band[static_cast<size_t>(kk)] = p.conv_w.data()[kk * p.d_inner + channel];

  ImplicitOperator<T> op;
  op.source = OperatorSource::Mamba;
  op.channel = channel;
  op.matrix = Tensor<T>(Shape{l, l});
  T* m = op.matrix.data();
  const T* s6m = s6_op.matrix.data();

  // diag(gate) . s6 . diag(sigmoid(conv_out)) . M, all lower-triangular
  for (int64_t t = 0; t < l; ++t) {
    T gate = unit_gate ? T(1) : z.data()[t * p.d_inner + channel];
    for (int64_t s = 0; s <= t; ++s) {
      T acc = T(0);
      // r walks the s6 column index; conv connects r back to s when r-K+1 <= s <= r
      int64_t r1 = std::min(t, s + k - 1);
      for (int64_t r = s; r <= r1; ++r) {
        T sig = stable_sigmoid(conv_out.data()[r * p.d_inner + channel]);
        T band = conv_band[static_cast<size_t>(s - r + k - 1)];
        acc += s6m[t * l + r] * sig * band;
      }
      m[t * l + s] = gate * acc;
    }
  }
  return op;
}

template <typename T>
ImplicitOperator<T> materialize_diff(const ImplicitOperator<T>& op1, const ImplicitOperator<T>& op2, T lambda) {
  if (op1.matrix.shape() != op2.matrix.shape())
    throw ShapeError("materialize_diff: operator shapes differ: " + shape_str(op1.matrix.shape()) + " vs " +
                     shape_str(op2.matrix.shape()));
  if (op1.channel != op2.channel)
    throw ShapeError("materialize_diff: channel mismatch " + std::to_string(op1.channel) + " vs " +
                     std::to_string(op2.channel));
  ImplicitOperator<T> out;
  out.channel = op1.channel;
  out.source = (op1.source == OperatorSource::S6) ? OperatorSource::DiffS6 : OperatorSource::DiffMamba;
  out.lambda = lambda;
  out.matrix = Tensor<T>(op1.matrix.shape());
  for (int64_t i = 0; i < out.matrix.size(); ++i)
    out.matrix.data()[i] = op1.matrix.data()[i] - lambda * op2.matrix.data()[i];
  return out;
}

// ---------------------------------------------------------------------------
// Row statistics for inspection dumps
// ---------------------------------------------------------------------------

struct OperatorTarget {
  bool self = true;   // target position = the row index
  int64_t pos = 0;    // fixed target position otherwise
};

template <typename T>
struct OperatorStats {
  std::vector<T> row_mass;    // sum_s |A[t,s]|
  std::vector<T> entropy;     // of |A[t,.]| / row_mass; 0 for all-zero rows
  std::vector<T> off_target;  // 1 - |A[t,target]| / row_mass; 0 for all-zero rows
};

template <typename T>
OperatorStats<T> operator_stats(const ImplicitOperator<T>& op, OperatorTarget target = {}) {
  int64_t l = op.length();
  OperatorStats<T> st;
  st.row_mass.resize(static_cast<size_t>(l));
  st.entropy.resize(static_cast<size_t>(l));
  st.off_target.resize(static_cast<size_t>(l));
  const T* m = op.matrix.data();
  for (int64_t t = 0; t < l; ++t) {
    T mass = T(0);
    for (int64_t s = 0; s <= t; ++s) mass += std::abs(m[t * l + s]);
    st.row_mass[static_cast<size_t>(t)] = mass;
    if (mass == T(0)) {
      st.entropy[static_cast<size_t>(t)] = T(0);
      st.off_target[static_cast<size_t>(t)] = T(0);
      continue;
    }
    T ent = T(0);
    for (int64_t s = 0; s <= t; ++s) {
      T pr = std::abs(m[t * l + s]) / mass;
      if (pr > T(0)) ent -= pr * std::log(pr);
    }
    st.entropy[static_cast<size_t>(t)] = ent;
    int64_t tp = target.self ? t : target.pos;
    T at = (tp >= 0 && tp <= t) ? std::abs(m[t * l + tp]) : T(0);
    st.off_target[static_cast<size_t>(t)] = T(1) - at / mass;
  }
  return st;
}

}  // namespace dssm
