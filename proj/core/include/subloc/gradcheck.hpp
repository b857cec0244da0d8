#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "subloc/autodiff.hpp"
#include "subloc/tensor.hpp"

namespace subloc {

// Central-difference gradient estimate of a scalar function of the given
// parameters: (f(theta + eps*e) - f(theta - eps*e)) / (2*eps) per element.
// f must be deterministic. Intended for double precision.
template <typename T>
std::vector<Tensor<T>> finite_difference_grad(const std::function<T()>& f,
                                              std::vector<Parameter<T>>& params, T eps) {
  std::vector<Tensor<T>> grads;
  grads.reserve(params.size());
  for (auto& p : params) {
    Tensor<T> g(p.value().shape());
    for (std::int64_t i = 0; i < p.value().size(); ++i) {
      const T orig = p.value()[i];
      p.value()[i] = orig + eps;
      const T fp = f();
      p.value()[i] = orig - eps;
      const T fm = f();
      p.value()[i] = orig;
      g[i] = (fp - fm) / (T(2) * eps);
    }
    grads.push_back(std::move(g));
  }
  return grads;
}

// Largest elementwise error |a - n| / max(|a|, |n|, atol/rtol) over tensors.
// Passing means every element satisfies |a - n| <= atol + rtol*max(|a|,|n|).
template <typename T>
T max_relative_error(const Tensor<T>& analytic, const Tensor<T>& numeric, T rtol = T(1e-4),
                     T atol = T(1e-7)) {
  T worst = T(0);
  for (std::int64_t i = 0; i < analytic.size(); ++i) {
    const T a = analytic[i];
    const T n = numeric[i];
    const T scale = std::max({std::abs(a), std::abs(n), atol / rtol});
    const T rel = std::abs(a - n) / scale;
    if (rel > worst) worst = rel;
  }
  return worst;
}

}  // namespace subloc
