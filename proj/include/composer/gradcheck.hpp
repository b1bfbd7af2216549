#pragma once

#include <cmath>
#include <functional>

#include "composer/errors.hpp"
#include "composer/tensor.hpp"

namespace composer {

// Compares the analytic gradient of a scalar-valued function against central
// finite differences at x and returns the max over coordinates of
//   |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
// Meant to run in 64-bit shadow mode (T = double) for tight tolerances.
template <typename T>
T grad_check(const std::function<TensorT<T>(const TensorT<T>&)>& f,
             TensorT<T> x, T h = T(1e-3)) {
  x.set_requires_grad(true);
  x.zero_grad();
  TensorT<T> loss = f(x);
  if (loss.numel() != 1) throw ContractError("grad_check: f must be scalar-valued");
  loss.backward();
  std::vector<T> analytic = x.grad();

  T max_rel = T(0);
  NoGradGuard ng;
  for (int64_t i = 0; i < x.numel(); ++i) {
    T orig = x.ptr()[i];
    x.ptr()[i] = orig + h;
    T fp = f(x).item();
    x.ptr()[i] = orig - h;
    T fm = f(x).item();
    x.ptr()[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw NumericError("grad_check: f non-finite at perturbed point");
    T numeric = (fp - fm) / (T(2) * h);
    T a = analytic[static_cast<size_t>(i)];
    T rel = std::abs(a - numeric) /
            std::max(T(1e-8), std::abs(a) + std::abs(numeric));
    max_rel = std::max(max_rel, rel);
  }
  return max_rel;
}

// Finite-difference check against an externally provided analytic gradient,
// for losses over many tensors where only selected coordinates are probed.
template <typename T>
T grad_check_coords(const std::function<T()>& eval, T* coord, T analytic,
                    T h = T(1e-3)) {
  T orig = *coord;
  *coord = orig + h;
  T fp = eval();
  *coord = orig - h;
  T fm = eval();
  *coord = orig;
  if (!std::isfinite(fp) || !std::isfinite(fm))
    throw NumericError("grad_check_coords: non-finite evaluation");
  T numeric = (fp - fm) / (T(2) * h);
  return std::abs(analytic - numeric) /
         std::max(T(1e-8), std::abs(analytic) + std::abs(numeric));
}

}  // namespace composer
