#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "spotlight/tensor.hpp"

namespace spotlight {

struct GradCheckOptions {
  double step = 1e-4;
  // A coordinate whose one-sided slopes disagree by more than this
  // (relative to max(1, |slope|)) sits on a kink and is skipped.
  double kink_tolerance = 1e-2;
};

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t checked = 0;
  // Flattened coordinates (input index, element index) skipped as non-smooth.
  std::vector<std::pair<std::size_t, std::size_t>> excluded;
};

// Builds a scalar loss from tensors the caller captured. It must be
// deterministic: the checker evaluates it twice at the start and throws
// UnreliableCheckError when the values differ.
using LossFn = std::function<Tensor(GradTape&)>;

// Compares reverse-mode gradients of f with respect to every element of
// `inputs` against central differences (f(x+h) - f(x-h)) / 2h. The error
// per coordinate is |a - n| / max(1, |a|, |n|); the maximum is returned.
// Inputs are marked requires_grad and restored to their original values.
GradCheckResult grad_check(const LossFn& f, std::span<Tensor> inputs,
                           const GradCheckOptions& options = {});

GradCheckResult grad_check(const std::function<Tensor(GradTape&, const Tensor&)>& f, Tensor x,
                           const GradCheckOptions& options = {});

}  // namespace spotlight
