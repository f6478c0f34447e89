#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "dspert/ops.hpp"
#include "dspert/tensor.hpp"

namespace dspert {

inline constexpr double kGradCheckFloor = 1e-8;

inline double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), kGradCheckFloor});
  return std::abs(analytic - numeric) / denom;
}

/// Worst relative error between the autodiff gradient of scalar f at x and
/// central differences (f(x+h) - f(x-h)) / 2h.
inline double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                                double h = 1e-5) {
  if (!(h > 0.0)) throw ContractError("finite_diff_check: step must be positive");
  Tensor probe = Tensor(x.shape(), x.data(), true);
  {
    Tensor y = f(probe);
    if (y.size() != 1) throw ContractError("finite_diff_check: f must be scalar-valued");
    backward(y);
  }
  const std::vector<double> analytic = probe.grad();

  NoGradGuard no_grad;
  double worst = 0.0;
  std::vector<double> point = x.data();
  for (std::size_t i = 0; i < point.size(); ++i) {
    const double saved = point[i];
    point[i] = saved + h;
    const double up = f(Tensor(x.shape(), point)).item();
    point[i] = saved - h;
    const double down = f(Tensor(x.shape(), point)).item();
    point[i] = saved;
    worst = std::max(worst, relative_error(analytic[i], (up - down) / (2.0 * h)));
  }
  return worst;
}

struct ParamCheck {
  std::string name;
  double max_relative_error = 0.0;  // worst single coordinate
  double norm_relative_error = 0.0; // |a - n| / max(|a|, |n|) over the whole tensor
};

/// Same comparison for a loss closure over leaf parameters that are perturbed
/// in place. Gradients of the parameters are reset by this call.
inline std::vector<ParamCheck> finite_diff_check_params(
    const std::function<Tensor()>& loss, std::vector<std::pair<std::string, Tensor>> params,
    double h = 1e-5) {
  for (auto& [name, p] : params) p.zero_grad();
  backward(loss());
  std::vector<ParamCheck> report;
  NoGradGuard no_grad;
  for (auto& [name, p] : params) {
    ParamCheck check{name, 0.0, 0.0};
    const std::vector<double> analytic = p.grad();
    double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
    auto& values = p.mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + h;
      const double up = loss().item();
      values[i] = saved - h;
      const double down = loss().item();
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      check.max_relative_error = std::max(check.max_relative_error, relative_error(analytic[i], numeric));
      diff2 += (analytic[i] - numeric) * (analytic[i] - numeric);
      a2 += analytic[i] * analytic[i];
      n2 += numeric * numeric;
    }
    check.norm_relative_error = std::sqrt(diff2) / std::max({std::sqrt(a2), std::sqrt(n2), kGradCheckFloor});
    report.push_back(check);
  }
  for (auto& [name, p] : params) p.zero_grad();
  return report;
}

}  // namespace dspert
