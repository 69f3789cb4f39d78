#include "spotlight/grad_check.hpp"

#include <algorithm>
#include <cmath>

#include "spotlight/errors.hpp"

namespace spotlight {
namespace {

double evaluate(const LossFn& f) {
  GradTape tape;
  Tensor loss = f(tape);
  if (loss.numel() != 1) throw ContractError("grad_check: loss must be scalar");
  return loss.item();
}

}  // namespace

GradCheckResult grad_check(const LossFn& f, std::span<Tensor> inputs,
                           const GradCheckOptions& options) {
  if (!(options.step > 0.0)) throw ParameterError("grad_check step must be positive");
  for (Tensor& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }

  const double base = evaluate(f);
  if (evaluate(f) != base) {
    throw UnreliableCheckError("loss function is not deterministic; fix its seeds");
  }

  std::vector<std::vector<double>> analytic;
  {
    GradTape tape;
    Tensor loss = f(tape);
    tape.backward(loss);
    for (Tensor& t : inputs) {
      const auto g = t.grad();
      analytic.emplace_back(g.begin(), g.end());
    }
  }

  GradCheckResult result;
  const double h = options.step;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto values = inputs[k].values();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double original = values[i];
      values[i] = original + h;
      const double plus = evaluate(f);
      values[i] = original - h;
      const double minus = evaluate(f);
      values[i] = original;

      const double forward = (plus - base) / h;
      const double backward = (base - minus) / h;
      const double slope_scale = std::max({1.0, std::fabs(forward), std::fabs(backward)});
      if (std::fabs(forward - backward) > options.kink_tolerance * slope_scale) {
        result.excluded.emplace_back(k, i);
        continue;
      }
      const double numeric = (plus - minus) / (2.0 * h);
      const double a = analytic[k][i];
      const double denom = std::max({1.0, std::fabs(a), std::fabs(numeric)});
      result.max_relative_error = std::max(result.max_relative_error, std::fabs(a - numeric) / denom);
      ++result.checked;
    }
  }
  for (Tensor& t : inputs) t.zero_grad();
  return result;
}

GradCheckResult grad_check(const std::function<Tensor(GradTape&, const Tensor&)>& f, Tensor x,
                           const GradCheckOptions& options) {
  std::vector<Tensor> inputs{x};
  return grad_check([&](GradTape& tape) { return f(tape, x); }, inputs, options);
}

}  // namespace spotlight
