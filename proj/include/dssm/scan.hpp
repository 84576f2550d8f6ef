// First-order linear recurrence h_t = a_t * h_{t-1} + b_t as an associative
// scan. Elements compose as (a2*a1, a2*b1 + b2); the parallel path is the
// work-efficient Blelloch up-sweep/down-sweep over that monoid.

#pragma once

#include <cstdint>
#include <vector>

#include "dssm/tensor.hpp"

namespace dssm {

template <typename T>
struct ScanElement {
  T a;  // decay factor
  T b;  // driven term
};

template <typename T>
inline ScanElement<T> combine(const ScanElement<T>& e1, const ScanElement<T>& e2) {
  return {e2.a * e1.a, e2.a * e1.b + e2.b};
}

// In-place inclusive scan of one lane: on return a[t], b[t] hold the combined
// prefix e_t o ... o e_0 (so b[t] is h_t for h_{-1} = 0).
template <typename T>
void scan_lane_sequential(T* a, T* b, int64_t n) {
  for (int64_t t = 1; t < n; ++t) {
    b[t] = a[t] * b[t - 1] + b[t];
    a[t] = a[t] * a[t - 1];
  }
}

template <typename T>
void scan_lane_blelloch(T* a, T* b, int64_t n) {
  if (n <= 1) return;
  int64_t p = 1;
  while (p < n) p <<= 1;
  // pad with the identity element (1, 0)
  std::vector<ScanElement<T>> e(static_cast<size_t>(p), ScanElement<T>{T(1), T(0)});
  for (int64_t t = 0; t < n; ++t) e[static_cast<size_t>(t)] = {a[t], b[t]};
  std::vector<ScanElement<T>> orig(e);

  // up-sweep
  for (int64_t stride = 1; stride < p; stride <<= 1)
    for (int64_t i = 2 * stride - 1; i < p; i += 2 * stride)
      e[static_cast<size_t>(i)] = combine(e[static_cast<size_t>(i - stride)], e[static_cast<size_t>(i)]);

  // down-sweep: turns the tree into an exclusive scan
  e[static_cast<size_t>(p - 1)] = {T(1), T(0)};
  for (int64_t stride = p >> 1; stride >= 1; stride >>= 1)
    for (int64_t i = 2 * stride - 1; i < p; i += 2 * stride) {
      ScanElement<T> left = e[static_cast<size_t>(i - stride)];
      ScanElement<T> before = e[static_cast<size_t>(i)];
      e[static_cast<size_t>(i - stride)] = before;
      e[static_cast<size_t>(i)] = combine(before, left);
    }

  for (int64_t t = 0; t < n; ++t) {
    ScanElement<T> inc = combine(e[static_cast<size_t>(t)], orig[static_cast<size_t>(t)]);
    a[t] = inc.a;
    b[t] = inc.b;
  }
}

}  // namespace dssm
