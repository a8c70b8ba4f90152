#pragma once

#include <functional>
#include <span>
#include <vector>

#include "ranlab/tape.hpp"

namespace ranlab {

/// Builds a scalar loss on `tape` from one leaf per parameter array.
using LossFn = std::function<Var(Tape& tape, std::span<const Var> params)>;

/// Evaluates `loss` at `params` and returns the reverse-mode gradients.
std::vector<Array> analytic_gradient(const LossFn& loss, const std::vector<Array>& params);

/// Central differences (f(x+h) - f(x-h)) / 2h, one coordinate at a time.
std::vector<Array> numeric_gradient(const LossFn& loss, const std::vector<Array>& params,
                                    double h);

/// max over coordinates of |analytic - central difference| / max(1, |analytic|).
/// Requires h > 0; a non-finite loss at any probe point is a NumericError.
double finite_diff_check(const LossFn& loss, const std::vector<Array>& params, double h = 1e-5);

}  // namespace ranlab
