#include "hypermoe/grad_check.hpp"

#include <algorithm>
#include <cmath>

#include "hypermoe/errors.hpp"

namespace hypermoe {

Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f,
                        const Tensor& x, double step) {
  Tensor probe = x.detach();
  return finite_diff_grad_inplace([&] { return f(probe); }, probe, step);
}

Tensor finite_diff_grad_inplace(const std::function<double()>& f, Tensor& x,
                                double step) {
  if (!(step > 0.0)) throw ContractError("finite difference step must be > 0");
  std::vector<double> out(x.size());
  auto values = x.mutable_data();
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double saved = values[i];
    values[i] = saved + step;
    const double up = f();
    values[i] = saved - step;
    const double down = f();
    values[i] = saved;
    out[i] = (up - down) / (2.0 * step);
  }
  return Tensor::from(x.shape(), std::move(out));
}

double gradient_relative_error(const Tensor& analytic, const Tensor& numeric,
                               double floor) {
  if (analytic.shape() != numeric.shape()) {
    throw DimensionError("gradient shapes differ: " +
                         shape_to_string(analytic.shape()) + " vs " +
                         shape_to_string(numeric.shape()));
  }
  double worst = 0.0, scale = floor;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    worst = std::max(worst, std::abs(analytic.at(i) - numeric.at(i)));
    scale = std::max({scale, std::abs(analytic.at(i)), std::abs(numeric.at(i))});
  }
  return worst / scale;
}

}  // namespace hypermoe
