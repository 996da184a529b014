#pragma once

// Double-precision interpreter for recorded graphs. Straight loops, no GEMM
// lowering and no SIMD: an independent forward path for finite differences.

#include <vector>

#include "rad/core/graph.hpp"

namespace rad::detail {

struct Perturbation {
  NodeId leaf;
  std::size_t index = 0;
  double delta = 0.0;
};

// Value of `target` with the leaves bound from `bindings` (promoted to double)
// and one component of one leaf shifted by `delta`.
std::vector<double> evaluate_reference(const Graph& graph, const Bindings& bindings, NodeId target,
                                       const Perturbation& perturbation);

}  // namespace rad::detail
