#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "treecoder/autodiff.hpp"

namespace treecoder {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
  std::size_t coordinates = 0;
  bool passed = true;
};

inline double relative_error(double analytic, double numeric) {
  double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

// Compares reverse-mode gradients of the scalar `f` against central
// differences for every coordinate of every parameter. `f` is re-evaluated
// with each coordinate shifted by ±step and must be deterministic.
template <class T>
GradCheckResult grad_check(const std::function<Array<T>()>& f, std::span<const Array<T>> params,
                           double step, double tolerance) {
  std::vector<Array<T>> handles(params.begin(), params.end());
  for (auto& p : handles) p.zero_grad();
  std::vector<std::vector<double>> analytic;
  {
    Tape<T> tape;
    typename Tape<T>::Scope scope(&tape);
    Array<T> loss = f();
    if (!std::isfinite(static_cast<double>(loss.item())))
      throw NumericError("grad_check: non-finite loss");
    tape.backward(loss);
  }
  for (auto& p : handles) {
    std::vector<double> g(p.size(), 0.0);
    for (std::size_t i = 0; i < p.grad().size(); ++i) g[i] = static_cast<double>(p.grad()[i]);
    analytic.push_back(std::move(g));
  }

  NoGradScope<T> no_grad;
  auto eval = [&] {
    double v = static_cast<double>(f().item());
    if (!std::isfinite(v)) throw NumericError("grad_check: non-finite value under perturbation");
    return v;
  };
  GradCheckResult res;
  for (std::size_t pi = 0; pi < handles.size(); ++pi) {
    auto values = handles[pi].mutable_values();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const T original = values[i];
      values[i] = static_cast<T>(static_cast<double>(original) + step);
      double up = eval();
      values[i] = static_cast<T>(static_cast<double>(original) - step);
      double down = eval();
      values[i] = original;
      double numeric = (up - down) / (2.0 * step);
      double err = relative_error(analytic[pi][i], numeric);
      ++res.coordinates;
      if (err > res.max_rel_error || res.coordinates == 1) {
        res.max_rel_error = err;
        res.worst_param = pi;
        res.worst_index = i;
        res.analytic_at_worst = analytic[pi][i];
        res.numeric_at_worst = numeric;
      }
    }
  }
  res.passed = res.max_rel_error < tolerance;
  return res;
}

}  // namespace treecoder
