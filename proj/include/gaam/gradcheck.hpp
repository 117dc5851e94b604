#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "gaam/autograd.hpp"

namespace gaam {

// Largest coordinate-wise disagreement between the recorded gradient and a
// central difference:  |analytic - (f(x+h e_i) - f(x-h e_i)) / 2h| / max(1, |analytic|).
// `f` must rebuild its graph from the current values of `inputs` on every call.
template <typename T>
T grad_check(const std::function<Var<T>()>& f, std::vector<Var<T>> inputs, T h) {
  for (auto& in : inputs) {
    if (!in.requires_grad()) throw ContractError("grad_check: every probed input must require grad");
    if (!in.value().all_finite()) throw NumericError("grad_check: non-finite input");
    in.zero_grad();
  }
  const Var<T> y = f();
  if (y.size() != 1) throw ContractError("grad_check: f must be scalar-valued");
  backward(y);

  T worst = T(0);
  for (auto& in : inputs) {
    const Array<T> analytic = in.has_grad() ? in.grad() : Array<T>(in.shape(), T(0));
    Array<T>& v = in.mutable_value();
    for (std::size_t i = 0; i < v.size(); ++i) {
      const T saved = v[i];
      v[i] = saved + h;
      const T plus = f().item();
      v[i] = saved - h;
      const T minus = f().item();
      v[i] = saved;
      const T numeric = (plus - minus) / (T(2) * h);
      if (!std::isfinite(numeric)) throw NumericError("grad_check: non-finite finite difference");
      worst = std::max(worst, std::abs(analytic[i] - numeric) / std::max(T(1), std::abs(analytic[i])));
    }
  }
  return worst;
}

// Single-input convenience form: f maps x to a scalar.
template <typename T>
T grad_check(const std::function<Var<T>(const Var<T>&)>& f, const Var<T>& x, T h) {
  Var<T> probe = x.requires_grad() ? x : Var<T>(x.value(), true);
  return grad_check<T>([&] { return f(probe); }, {probe}, h);
}

}  // namespace gaam
