#pragma once

// Brute-force bit allocation: every width vector is scored and compared with
// the full tie rule (omega, then average width, then lexicographic order).

#include <cmath>
#include <optional>
#include <vector>

#include "mpq/hessian.hpp"

namespace mpq::oracle {

struct BruteAllocation {
    std::vector<int> bits;  // report order
    double omega = INFINITY;
    double average = 0.0;
};

inline std::optional<BruteAllocation> brute_allocate(const SensitivityReport& r, double budget,
                                                     const std::vector<int>& widths) {
    const std::size_t n = r.clusters.size();
    double total = 0.0;
    for (const auto& c : r.clusters) total += static_cast<double>(c.size);
    std::optional<BruteAllocation> best;
    std::vector<std::size_t> idx(n, 0);
    while (true) {
        BruteAllocation cand;
        double omega = 0.0, weighted = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const int b = widths[idx[i]];
            cand.bits.push_back(b);
            omega += r.clusters[i].omega.at(b);
            weighted += static_cast<double>(r.clusters[i].size) * b;
        }
        cand.omega = omega;
        cand.average = weighted / total;
        if (weighted <= budget * total * (1 + 1e-12)) {
            const bool take = !best || omega < best->omega ||
                              (omega == best->omega && (cand.average < best->average ||
                                                        (cand.average == best->average && cand.bits < best->bits)));
            if (take) best = cand;
        }
        std::size_t k = n;
        while (k > 0 && idx[k - 1] + 1 == widths.size()) idx[--k] = 0;
        if (k == 0) break;
        ++idx[k - 1];
    }
    return best;
}

}  // namespace mpq::oracle
