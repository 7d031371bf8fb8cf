#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "eave/tensor.hpp"

namespace eave {

struct NamedTensor {
  std::string name;
  Tensor<double> tensor;
};

struct GradCheckOptions {
  double step = 1e-3;
  // 0 checks every coordinate; otherwise a seeded random subsample.
  std::size_t max_coordinates = 0;
  std::uint64_t seed = 0;
};

struct CoordinateCheck {
  std::string coordinate;  // "name[index]"
  double analytic = 0.0;
  double numeric = 0.0;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  double mean_rel_error = 0.0;
  std::size_t coordinates = 0;
  std::string worst_coordinate;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::vector<CoordinateCheck> samples;
};

// Relative error with denominator max(|a|, |b|, 1e-8).
double relative_error(double analytic, double numeric);

// Compares backward() gradients of loss_fn against central differences
// (f(x+h) - f(x-h)) / 2h. loss_fn must rebuild the graph from the current
// parameter values on every call and be deterministic.
GradCheckReport finite_diff_check(const std::function<Tensor<double>()>& loss_fn,
                                  const std::vector<NamedTensor>& params,
                                  const GradCheckOptions& options = {});

}  // namespace eave
