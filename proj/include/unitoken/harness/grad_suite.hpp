#pragma once

#include <string>
#include <vector>

#include "unitoken/autodiff/grad_check.hpp"

namespace unitoken {

struct KernelCheck {
  std::string kernel;
  int seeds = 0;
  int passed_seeds = 0;
  double max_rel_error = 0.0;
  bool deterministic = true;

  bool passed() const { return seeds > 0 && passed_seeds == seeds && deterministic; }
};

/// Names of the kernels covered by run_gradient_suite, in run order. The
/// last entries are whole-model losses.
std::vector<std::string> gradient_suite_kernels();

/// Finite-difference check of every differentiable kernel at 64-bit on random
/// tensors with dimensions in [2, 8], once per seed 0..seeds-1, followed by
/// the toy LM loss (both tasks) and the VQ autoencoder path.
std::vector<KernelCheck> run_gradient_suite(int seeds = 20, double tolerance = 1e-4);

std::string format_gradient_table(const std::vector<KernelCheck>& checks);

}  // namespace unitoken
