#pragma once

#include <string>
#include <vector>

#include "mpq/hessian.hpp"
#include "mpq/quant.hpp"

namespace mpq {

struct PrecisionAssignment {
    BitMap bits;
    /// Parameter-weighted over the assigned clusters.
    double average_bits = 0.0;
    double total_omega = 0.0;
    /// Filled by attach_size; 0 until then.
    double size_mb = 0.0;
    double compression_ratio = 0.0;
};

/// Clusters above this count use the dynamic program instead of enumeration.
inline constexpr std::size_t kExhaustiveClusterLimit = 12;

/// Bit-widths minimizing the summed omega subject to a parameter-weighted
/// average width <= budget, over the widths every cluster in `report` lists.
/// Ties prefer the smaller average width, then the lexicographically smaller
/// width vector in report order. Throws InfeasibleBudgetError when even the
/// narrowest widths exceed the budget.
PrecisionAssignment allocate_bits(const SensitivityReport& report, double budget);

/// Summed omega and average width of a given assignment.
PrecisionAssignment score_assignment(const SensitivityReport& report, const BitMap& bits);

/// Fills size_mb and compression_ratio for `model` quantized per the
/// assignment; clusters it does not cover must be in `extra_bits`.
void attach_size(PrecisionAssignment& assignment, const TransformerLM& model, const std::vector<ClusterSpec>& clusters,
                 const BitMap& extra_bits = {});

}  // namespace mpq
