// Central-difference validation harness. Runs in f64 only; every analytic
// backward in the project is expected to pass with max relative error <= 1e-5.

#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "dssm/ops.hpp"
#include "dssm/tensor.hpp"

namespace dssm {

// f must rebuild its graph from the current tensor values on every call and
// return a scalar. Checks d(f)/d(x) for every coordinate of every input.
inline double grad_check_multi(const std::function<Tensor<double>(Tape<double>&)>& f,
                               std::vector<Tensor<double>> inputs, double h = 1e-5) {
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  Tape<double> tape;
  Tensor<double> y = f(tape);
  if (y.size() != 1) throw ShapeError("grad_check: function must be scalar-valued");
  tape.backward(y);

  std::vector<std::vector<double>> analytic;
  analytic.reserve(inputs.size());
  for (auto& t : inputs) analytic.push_back(t.grad_vec());

  double max_rel = 0.0;
  for (size_t ti = 0; ti < inputs.size(); ++ti) {
    Tensor<double>& t = inputs[ti];
    for (int64_t i = 0; i < t.size(); ++i) {
      double orig = t.data()[i];
      t.data()[i] = orig + h;
      Tape<double> t1;
      double fp = f(t1).item();
      t.data()[i] = orig - h;
      Tape<double> t2;
      double fm = f(t2).item();
      t.data()[i] = orig;
      double numeric = (fp - fm) / (2.0 * h);
      double a = analytic[ti][static_cast<size_t>(i)];
      if (!std::isfinite(numeric) || !std::isfinite(a))
        throw NumericalError("grad_check: non-finite value at input " + std::to_string(ti) + " coordinate " +
                             std::to_string(i));
      double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-8});
      max_rel = std::max(max_rel, std::fabs(a - numeric) / denom);
    }
  }
  return max_rel;
}

// Single-input convenience form.
inline double grad_check(const std::function<Tensor<double>(const Tensor<double>&, Tape<double>&)>& f,
                         Tensor<double> x, double h = 1e-5) {
  return grad_check_multi([&](Tape<double>& tape) { return f(x, tape); }, {x}, h);
}

}  // namespace dssm
