#pragma once

#include <magic/graph.hpp>

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace magic {

struct GradCheckReport {
  bool pass = true;
  double max_rel_err = 0.0;
  std::size_t coords_checked = 0;
  std::string worst;  // "param <i> coord <j>: analytic A numeric N"
};

// Central-difference check of a scalar-valued graph against backprop. `fn`
// rebuilds the graph from the current parameter values on every call. The
// relative error uses a 1e-3 floor in the denominator so near-zero gradient
// pairs are compared absolutely rather than amplified.
inline GradCheckReport grad_check(const std::function<NodePtr<double>()>& fn,
                                  const std::vector<NodePtr<double>>& params, double h = 1e-5,
                                  double tol = 1e-4) {
  GradCheckReport report;
  for (auto& p : params) p->grad.fill(0.0);
  auto root = fn();
  backward(root);
  std::vector<Tensor<double>> analytic;
  analytic.reserve(params.size());
  for (auto& p : params) analytic.push_back(p->grad);

  auto eval = [&] {
    const auto node = fn();
    const double v = node->value.data[0];
    if (!std::isfinite(v)) throw std::runtime_error("grad_check: non-finite value while probing");
    return v;
  };

  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& value = params[pi]->value;
    for (std::size_t ci = 0; ci < value.numel(); ++ci) {
      const double saved = value.data[ci];
      value.data[ci] = saved + h;
      const double f_plus = eval();
      value.data[ci] = saved - h;
      const double f_minus = eval();
      value.data[ci] = saved;
      const double numeric = (f_plus - f_minus) / (2.0 * h);
      const double a = analytic[pi].data[ci];
      const double rel =
          std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-3});
      ++report.coords_checked;
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst = "param " + std::to_string(pi) + " coord " + std::to_string(ci) +
                       ": analytic " + std::to_string(a) + " numeric " + std::to_string(numeric);
      }
    }
  }
  report.pass = report.max_rel_err < tol;
  return report;
}

}  // namespace magic
