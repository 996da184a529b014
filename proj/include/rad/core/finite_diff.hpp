#pragma once

#include <span>
#include <string_view>
#include <vector>

#include "rad/core/graph.hpp"

namespace rad {

struct FiniteDiffReport {
  double max_rel_error = 0.0;
  bool pass = true;
  std::size_t checked = 0;
  // Components whose one-sided differences disagree (kinks such as relu at 0).
  std::vector<std::size_t> nondifferentiable;
};

// Compares the analytic gradient of `scalar` with respect to leaf `wrt` against
// central differences evaluated by a double-precision reference interpreter
// of the same graph. Components whose derivative magnitude is at most 1e-6
// are skipped, as are components flagged nondifferentiable. `components`
// restricts the check to the listed flat indices (all when empty).
FiniteDiffReport finite_diff_check(const Graph& graph, const Bindings& bindings, NodeId scalar, std::string_view wrt,
                                   float step, double tol, std::span<const std::size_t> components = {});

}  // namespace rad
