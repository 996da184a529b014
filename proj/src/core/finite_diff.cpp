#include "rad/core/finite_diff.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "rad/core/error.hpp"
#include "reference_eval.hpp"

namespace rad {

FiniteDiffReport finite_diff_check(const Graph& graph, const Bindings& bindings, NodeId scalar, std::string_view wrt,
                                   float step, double tol, std::span<const std::size_t> components) {
  if (!(step > 0.0f)) throw UsageError("finite difference step must be positive");
  const NodeId leaf = graph.leaf(wrt);
  if (bindings.find(wrt) == bindings.end())
    throw UsageError("finite difference leaf '" + std::string(wrt) + "' is not bound");
  const Tensor analytic = graph.gradient(graph.evaluate(bindings), scalar, leaf);
  const double f0 = detail::evaluate_reference(graph, bindings, scalar, {}).at(0);

  std::vector<std::size_t> all;
  if (components.empty()) {
    all.resize(analytic.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    components = all;
  }

  FiniteDiffReport report;
  const double h = step;
  for (std::size_t idx : components) {
    if (idx >= analytic.size()) throw UsageError("finite difference component out of range");
    const double fp = detail::evaluate_reference(graph, bindings, scalar, {leaf, idx, h}).at(0);
    const double fm = detail::evaluate_reference(graph, bindings, scalar, {leaf, idx, -h}).at(0);

    const double central = (fp - fm) / (2.0 * h);
    const double forward = (fp - f0) / h;
    const double backward = (f0 - fm) / h;
    const double a = analytic[idx];
    const double scale = std::max(std::fabs(a), std::fabs(central));
    if (scale <= 1e-6) continue;

    // A kink inside [x-h, x+h] shows up as disagreeing one-sided slopes or as a
    // central difference that moves when the step is halved.
    const double fp2 = detail::evaluate_reference(graph, bindings, scalar, {leaf, idx, h / 2}).at(0);
    const double fm2 = detail::evaluate_reference(graph, bindings, scalar, {leaf, idx, -h / 2}).at(0);
    const double central_half = (fp2 - fm2) / h;
    const double one_sided = std::max(std::fabs(forward), std::fabs(backward));
    if ((one_sided > 1e-6 && std::fabs(forward - backward) > 0.1 * one_sided) ||
        std::fabs(central - central_half) > 0.5 * tol * scale) {
      report.nondifferentiable.push_back(idx);
      continue;
    }
    ++report.checked;
    report.max_rel_error = std::max(report.max_rel_error, std::fabs(a - central) / scale);
  }
  report.pass = report.max_rel_error <= tol;
  return report;
}

}  // namespace rad
