#pragma once

#include <functional>

#include "hypermoe/tensor.hpp"

namespace hypermoe {

/// Central-difference gradient of a scalar function: each entry is
/// (f(x + h e_i) - f(x - h e_i)) / 2h. `x` is left unchanged.
Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f,
                        const Tensor& x, double step = 1e-5);

/// Same estimate for a tensor that `f` reads implicitly (a model parameter).
/// The tensor is perturbed in place and restored bit-exactly afterwards.
Tensor finite_diff_grad_inplace(const std::function<double()>& f, Tensor& x,
                                double step = 1e-5);

/// max_i |a_i - n_i| / max(max_i |a_i|, max_i |n_i|, floor). Scale-relative
/// so entries with vanishing gradient do not dominate the comparison.
double gradient_relative_error(const Tensor& analytic, const Tensor& numeric,
                               double floor = 1e-10);

}  // namespace hypermoe
