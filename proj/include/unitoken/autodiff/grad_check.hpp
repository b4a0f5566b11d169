#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <string>
#include <vector>

#include "unitoken/autodiff/tensor.hpp"
#include "unitoken/core/rng.hpp"

namespace unitoken {

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0.0;
  Index checked = 0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  bool deterministic = true;
  bool passed = false;
};

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  // Elements with |analytic| and |numeric| both below this are compared as if
  // their magnitude were `floor`, which bounds the absolute error at
  // floor·tolerance instead of dividing roundoff by a near-zero gradient.
  double floor = 1e-4;
  // Elements sampled per tensor; 0 checks all of them.
  Index max_elements = 0;
  std::uint64_t seed = 0;
};

/// Compares reverse-mode gradients of `loss_fn` against central differences
/// (f(x+h) − f(x−h)) / 2h, elementwise per tensor. `loss_fn` must rebuild the
/// loss on the tape it is given and be deterministic; a loss that changes
/// between two evaluations at the same point is flagged and fails the check.
inline GradCheckReport finite_diff_check(
    const std::function<Var<double>(Tape<double>&)>& loss_fn,
    const std::vector<std::pair<std::string, Tensor<double>*>>& params,
    const GradCheckOptions& opts = {}) {
  GradCheckReport report;
  report.tolerance = opts.tolerance;

  auto evaluate = [&]() {
    Tape<double> tape;
    return loss_fn(tape).value()(0, 0);
  };

  for (auto& [_, t] : params) t->zero_grad();
  {
    Tape<double> tape;
    auto loss = loss_fn(tape);
    tape.backward(loss);
  }

  const double base = evaluate();
  const double again = evaluate();
  if (std::memcmp(&base, &again, sizeof(double)) != 0) {
    report.deterministic = false;
    report.passed = false;
    return report;
  }

  Rng rng(opts.seed);
  for (auto& [name, t] : params) {
    GradCheckEntry entry{name, 0.0, 0};
    if (!t->has_grad()) throw UsageError("finite_diff_check: " + name + " has no gradient");
    const Matrix<double> analytic = t->grad();
    const Index n = t->size();
    std::vector<Index> picks;
    if (opts.max_elements == 0 || opts.max_elements >= n) {
      picks.resize(static_cast<std::size_t>(n));
      for (Index i = 0; i < n; ++i) picks[static_cast<std::size_t>(i)] = i;
    } else {
      for (Index i = 0; i < opts.max_elements; ++i) picks.push_back(static_cast<Index>(rng.below(static_cast<std::uint64_t>(n))));
    }
    double* data = t->value().data();
    for (Index i : picks) {
      const double saved = data[i];
      data[i] = saved + opts.step;
      const double up = evaluate();
      data[i] = saved - opts.step;
      const double down = evaluate();
      data[i] = saved;
      const double numeric = (up - down) / (2.0 * opts.step);
      const double a = analytic.data()[i];
      const double denom = std::max({std::abs(a), std::abs(numeric), opts.floor});
      entry.max_rel_error = std::max(entry.max_rel_error, std::abs(a - numeric) / denom);
      ++entry.checked;
    }
    report.max_rel_error = std::max(report.max_rel_error, entry.max_rel_error);
    report.entries.push_back(std::move(entry));
  }
  report.passed = report.max_rel_error <= opts.tolerance;
  return report;
}

}  // namespace unitoken
