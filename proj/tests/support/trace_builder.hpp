#pragma once

#include <cstdint>
#include <vector>

#include "moesim/workload.hpp"

namespace moesim::testing {

/// Hand-built single-group trace: the gate of each layer is uniform over its
/// active experts.
inline ActivationTrace manual_trace(std::uint32_t experts_per_layer,
                                    const std::vector<std::vector<std::uint32_t>>& actual) {
  ActivationTrace tr;
  tr.batch.token_ids = {0};
  tr.token_group = {0};
  for (const auto& a : actual) {
    std::vector<double> p(experts_per_layer, 0.0);
    for (auto e : a) p[e] = 1.0 / static_cast<double>(a.size());
    auto gate = GateDistribution::from_probs(p);
    tr.per_layer_actual.push_back(a);
    tr.per_layer_gate.push_back(gate);
    tr.group_gate.push_back({gate});
    tr.group_actual.push_back({a});
  }
  return tr;
}

}  // namespace moesim::testing
