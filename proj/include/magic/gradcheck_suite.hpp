#pragma once

#include <string>
#include <utility>
#include <vector>

#include "magic/gradcheck.hpp"

namespace magic {

// Central-difference checks (f64) for every differentiable op and for the
// loss of a full hidden-8, single-layer model with positions and the
// contrastive term enabled. Used by the gradcheck subcommand and the
// acceptance suite.
std::vector<std::pair<std::string, GradCheckReport>> gradcheck_suite(double h = 1e-5,
                                                                     double tol = 1e-4);

}  // namespace magic
