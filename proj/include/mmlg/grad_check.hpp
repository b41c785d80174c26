#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "mmlg/autodiff.hpp"
#include "mmlg/rng.hpp"

namespace mmlg {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t coords_checked = 0;
};

using NamedParam = std::pair<std::string, Parameter<double>*>;

// Compares reverse-mode gradients against central differences
// (f(p+eps) - f(p-eps)) / (2 eps), or with `five_point` the fourth-order
// stencil (8[f(p+eps) - f(p-eps)] - [f(p+2eps) - f(p-2eps)]) / (12 eps),
// whose small truncation error allows a larger eps and so less rounding
// noise on tiny gradients. Up to `coords_per_param` coordinates are
// sampled per parameter (all of them when the parameter is smaller). The
// relative error denominator is max(|analytic|, |numeric|, 1e-8).
//
// `loss_fn(Graph<double>&)` must build the loss from the same parameter
// objects and return its scalar node.
template <typename LossFn>
GradCheckResult grad_check(LossFn&& loss_fn, const std::vector<NamedParam>& params, double eps,
                           std::size_t coords_per_param = 64, std::uint64_t seed = 0, bool five_point = false) {
  for (const auto& [_, p] : params) p->zero_grad();
  {
    Graph<double> g;
    Var loss = loss_fn(g);
    if (!std::isfinite(g.value(loss).item())) throw NumericError("grad_check: non-finite loss");
    g.backward(loss);
  }

  auto evaluate = [&]() {
    Graph<double> g;
    const double v = g.value(loss_fn(g)).item();
    if (!std::isfinite(v)) throw NumericError("grad_check: non-finite loss under perturbation");
    return v;
  };

  GradCheckResult result;
  Rng rng(seed);
  for (const auto& [name, p] : params) {
    const std::size_t n = p->value.size();
    std::vector<std::size_t> coords;
    if (n <= coords_per_param) {
      for (std::size_t i = 0; i < n; ++i) coords.push_back(i);
    } else {
      auto perm = permutation(n, rng);
      coords.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(coords_per_param));
      std::sort(coords.begin(), coords.end());
    }
    for (std::size_t i : coords) {
      const double saved = p->value[i];
      auto at = [&](double offset) {
        p->value[i] = saved + offset;
        const double v = evaluate();
        p->value[i] = saved;
        return v;
      };
      double numeric = (at(eps) - at(-eps)) / (2.0 * eps);
      if (five_point) numeric = (8.0 * (2.0 * eps) * numeric - (at(2 * eps) - at(-2 * eps))) / (12.0 * eps);
      const double analytic = p->grad[i];
      const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
      const double rel = std::abs(analytic - numeric) / denom;
      ++result.coords_checked;
      if (result.worst_param.empty() || rel > result.max_rel_error) {
        result.max_rel_error = rel;
        result.worst_param = name;
        result.worst_index = i;
        result.worst_analytic = analytic;
        result.worst_numeric = numeric;
      }
    }
  }
  return result;
}

inline std::vector<NamedParam> all_params(ParamStore<double>& store) {
  std::vector<NamedParam> out;
  for (auto& [name, p] : store) out.emplace_back(name, &p);
  return out;
}

}  // namespace mmlg
