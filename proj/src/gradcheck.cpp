#include "ranlab/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "ranlab/errors.hpp"

namespace ranlab {
namespace {

double evaluate(const LossFn& loss, const std::vector<Array>& params) {
  Tape tape;
  std::vector<Var> leaves;
  leaves.reserve(params.size());
  for (const Array& p : params) leaves.push_back(tape.constant(p));
  const Var out = loss(tape, leaves);
  RANLAB_REQUIRE(out.value().size() == 1, "loss function must return a scalar");
  const double v = out.value()[0];
  if (!std::isfinite(v)) throw NumericError("loss is non-finite at a probe point");
  return v;
}

}  // namespace

std::vector<Array> analytic_gradient(const LossFn& loss, const std::vector<Array>& params) {
  Tape tape;
  std::vector<Var> leaves;
  leaves.reserve(params.size());
  for (std::size_t i = 0; i < params.size(); ++i)
    leaves.push_back(tape.leaf(params[i], "param" + std::to_string(i)));
  const Var out = loss(tape, leaves);
  return tape.grad(out, leaves);
}

std::vector<Array> numeric_gradient(const LossFn& loss, const std::vector<Array>& params,
                                    double h) {
  RANLAB_REQUIRE(h > 0.0, "finite-difference step must be positive");
  std::vector<Array> probe = params;
  std::vector<Array> out;
  out.reserve(params.size());
  for (std::size_t p = 0; p < params.size(); ++p) {
    Array g(params[p].shape(), 0.0);
    for (std::size_t i = 0; i < params[p].size(); ++i) {
      const double x0 = params[p][i];
      probe[p][i] = x0 + h;
      const double fp = evaluate(loss, probe);
      probe[p][i] = x0 - h;
      const double fm = evaluate(loss, probe);
      probe[p][i] = x0;
      g[i] = (fp - fm) / (2.0 * h);
    }
    out.push_back(std::move(g));
  }
  return out;
}

double finite_diff_check(const LossFn& loss, const std::vector<Array>& params, double h) {
  RANLAB_REQUIRE(h > 0.0, "finite-difference step must be positive");
  const auto analytic = analytic_gradient(loss, params);
  const auto numeric = numeric_gradient(loss, params, h);
  double worst = 0.0;
  for (std::size_t p = 0; p < params.size(); ++p)
    for (std::size_t i = 0; i < params[p].size(); ++i) {
      const double a = analytic[p][i];
      const double err = std::abs(a - numeric[p][i]) / std::max(1.0, std::abs(a));
      worst = std::max(worst, err);
    }
  return worst;
}

}  // namespace ranlab
