#include "eave/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "eave/rng.hpp"

namespace eave {

double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

GradCheckReport finite_diff_check(const std::function<Tensor<double>()>& loss_fn,
                                  const std::vector<NamedTensor>& params,
                                  const GradCheckOptions& options) {
  for (const auto& p : params) p.tensor.node()->grad.clear();
  {
    auto loss = loss_fn();
    backward(loss);
  }

  struct Coord {
    std::size_t param;
    std::size_t index;
  };
  std::vector<Coord> coords;
  for (std::size_t p = 0; p < params.size(); ++p) {
    for (std::size_t i = 0; i < params[p].tensor.numel(); ++i) coords.push_back({p, i});
  }
  if (options.max_coordinates != 0 && coords.size() > options.max_coordinates) {
    Rng rng(options.seed);
    rng.shuffle(coords.begin(), coords.end());
    coords.resize(options.max_coordinates);
  }

  GradCheckReport report;
  NoGradGuard no_grad;
  double total = 0.0;
  for (const auto& c : coords) {
    auto tensor = params[c.param].tensor;
    const double analytic = tensor.has_grad() ? tensor.node()->grad[c.index] : 0.0;
    auto values = tensor.mutable_data();
    const double saved = values[c.index];
    values[c.index] = saved + options.step;
    const double plus = loss_fn().item();
    values[c.index] = saved - options.step;
    const double minus = loss_fn().item();
    values[c.index] = saved;
    const double numeric = (plus - minus) / (2.0 * options.step);
    const double err = relative_error(analytic, numeric);
    auto name = params[c.param].name + "[" + std::to_string(c.index) + "]";
    total += err;
    if (err > report.max_rel_error || report.coordinates == 0) {
      report.max_rel_error = std::max(report.max_rel_error, err);
      report.worst_coordinate = name;
      report.worst_analytic = analytic;
      report.worst_numeric = numeric;
    }
    report.samples.push_back({std::move(name), analytic, numeric});
    ++report.coordinates;
  }
  report.mean_rel_error = coords.empty() ? 0.0 : total / static_cast<double>(coords.size());
  return report;
}

}  // namespace eave
