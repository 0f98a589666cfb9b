#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "lesionaware/rng.hpp"
#include "lesionaware/tensor.hpp"

namespace lesionaware::testing {

struct GradCheckResult {
  bool ok = true;
  double worst_rel_error = 0.0;
  std::string worst_at;
};

// Central finite differences against the recorded adjoints. `make_loss` must
// rebuild the scalar loss from the current leaf values on every call. Relative
// error uses a floor so near-zero gradients are held to an absolute 1e-7.
//
// An element that fails at the base step is retried at step/10 and step/100: a
// piecewise kink inside the difference window (ReLU sign change, pooling
// argmax tie) disappears once the step is below the distance to the crossing,
// while a genuine adjoint bug fails at every step.
inline GradCheckResult check_gradients(const std::vector<Tensor<double>>& leaves,
                                       const std::function<Tensor<double>()>& make_loss,
                                       double tol = 1e-5, double step = 1e-5) {
  GradCheckResult result;
  for (const auto& leaf : leaves) leaf.zero_grad();
  backward(make_loss());

  std::vector<std::vector<double>> analytic;
  for (const auto& leaf : leaves) analytic.push_back(leaf.grad());

  for (std::size_t l = 0; l < leaves.size(); ++l) {
    auto& values = leaves[l].node()->values;
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      const double a = analytic[l][i];
      const auto numeric_at = [&](double h) {
        NoGradGuard ng;
        values[i] = saved + h;
        const double lp = make_loss().item();
        values[i] = saved - h;
        const double lm = make_loss().item();
        values[i] = saved;
        return (lp - lm) / (2.0 * h);
      };
      const auto rel_err = [&](double numeric) {
        const double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-2});
        return std::fabs(a - numeric) / denom;
      };
      double numeric = numeric_at(step);
      double rel = rel_err(numeric);
      for (double h = step / 10.0; rel > tol && h >= step / 100.0; h /= 10.0) {
        numeric = numeric_at(h);
        rel = std::min(rel, rel_err(numeric));
      }
      if (rel > result.worst_rel_error) {
        result.worst_rel_error = rel;
        result.worst_at = "leaf " + std::to_string(l) + " element " + std::to_string(i) +
                          " analytic " + std::to_string(a) + " numeric " + std::to_string(numeric);
      }
      if (rel > tol) result.ok = false;
    }
  }
  for (const auto& leaf : leaves) leaf.zero_grad();
  return result;
}

inline Tensor<double> random_tensor(Rng& rng, const Shape& shape, double lo = -1.0, double hi = 1.0,
                                    bool requires_grad = true) {
  std::vector<double> values(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& v : values) v = rng.uniform(lo, hi);
  return Tensor<double>::from_vector(shape, std::move(values), requires_grad);
}

}  // namespace lesionaware::testing
