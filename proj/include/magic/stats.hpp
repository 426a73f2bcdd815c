#pragma once

#include <vector>

namespace magic {

struct WelchResult {
  double t = 0, df = 0, p = 1;
};

// Welch's unpaired two-tailed t-test. Requires at least two samples per side
// and a nonzero variance on at least one side.
WelchResult welch_t_test(const std::vector<double>& a, const std::vector<double>& b);

struct MeanStd {
  double mean = 0, std = 0;
};

// Mean and sample (n-1) standard deviation; a single sample has std 0.
MeanStd aggregate_seeds(const std::vector<double>& xs);

// Regularized incomplete beta I_x(a, b) via the Lentz continued fraction.
double reg_incomplete_beta(double a, double b, double x);

}  // namespace magic
