#pragma once

#include <functional>

#include "transnetr/tensor.hpp"

namespace transnetr {

// Compares the autodiff gradient of a scalar-valued f against central finite
// differences, coordinate by coordinate. Returns the maximum relative error
// with denominator max(|analytic|, |numeric|, 1e-8). f must be pure: it is
// re-evaluated ~2*numel times on perturbed copies of x.
template <class T>
T finite_diff_check(const std::function<TensorT<T>(const TensorT<T>&)>& f, const TensorT<T>& x, T eps);

}  // namespace transnetr
