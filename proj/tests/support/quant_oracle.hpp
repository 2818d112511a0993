#pragma once

// Exhaustive oracles for the quantizer. They enumerate every grid level or
// scan scales densely instead of using any closed form.

#include <cmath>
#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "mpq/quant.hpp"
#include "mpq/random.hpp"

namespace mpq::oracle {

inline std::vector<std::int32_t> grid_levels(const QuantTable& t) {
    if (t.n_bits == 1) return {-1, 1};
    std::vector<std::int32_t> out;
    const std::int32_t m = (1 << (t.n_bits - 1)) - 1;
    for (std::int32_t q = -m; q <= m; ++q) out.push_back(q);
    return out;
}

// Full scan; ties prefer smaller magnitude, then the positive level.
inline std::int32_t scan_level(double theta, const QuantTable& t) {
    std::int32_t best = 0;
    double best_d = INFINITY;
    for (std::int32_t q : grid_levels(t)) {
        const double d = std::abs(theta - t.alpha * q);
        const bool better = d < best_d || (d == best_d && (std::abs(q) < std::abs(best) ||
                                                           (std::abs(q) == std::abs(best) && q > best)));
        if (better) {
            best = q;
            best_d = d;
        }
    }
    return best;
}

// A random (theta, table) with roughly one in eight thetas placed exactly on
// a midpoint between two levels to exercise the tie rule.
inline std::pair<double, QuantTable> random_triple(Rng& rng) {
    static constexpr int kWidths[] = {1, 2, 4, 8};
    QuantTable t{kWidths[rng.below(4)], std::exp(rng.uniform(std::log(1e-3), std::log(10.0)))};
    const double span = t.alpha * (t.n_bits == 1 ? 2.0 : (1 << (t.n_bits - 1)));
    double theta = rng.uniform(-1.3 * span, 1.3 * span);
    if (rng.below(8) == 0) {
        const double j = std::floor(theta / t.alpha);
        theta = t.alpha * (j + 0.5);
    }
    return {theta, t};
}

inline double objective(std::span<const float> w, const QuantTable& t) {
    double s = 0.0;
    for (float x : w) {
        const double e = x - t.alpha * scan_level(x, t);
        s += e * e;
    }
    return s;
}

// Minimum objective over `points` scales spread log-uniformly across every
// scale at which a level of the grid can reach the largest weight.
inline double dense_scan_objective(std::span<const float> w, int n_bits, int points) {
    double amax = 0.0;
    for (float x : w) amax = std::max(amax, std::abs(static_cast<double>(x)));
    const double m = n_bits == 1 ? 1.0 : (1 << (n_bits - 1)) - 1;
    const double lo = amax / (4.0 * m), hi = 2.0 * amax;
    double best = INFINITY;
    for (int i = 0; i < points; ++i) {
        const double a = lo * std::pow(hi / lo, static_cast<double>(i) / (points - 1));
        best = std::min(best, objective(w, {n_bits, a}));
    }
    return best;
}

inline double dense_scan_alpha(std::span<const float> w, int n_bits, double lo, double hi, int points) {
    double best = INFINITY, best_a = lo;
    for (int i = 0; i < points; ++i) {
        const double a = lo + (hi - lo) * i / (points - 1);
        const double obj = objective(w, {n_bits, a});
        if (obj < best) {
            best = obj;
            best_a = a;
        }
    }
    return best_a;
}

}  // namespace mpq::oracle
