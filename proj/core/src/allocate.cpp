#include "mpq/allocate.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>

#include "mpq/errors.hpp"

namespace mpq {

namespace {

struct Problem {
    std::vector<int> widths;  // ascending, common to every cluster
    std::vector<std::uint64_t> sizes;
    std::vector<std::vector<double>> omega;  // [cluster][width index]
    std::uint64_t capacity = 0;              // max sum of size * width
    std::uint64_t total = 0;
};

Problem make_problem(const SensitivityReport& report, double budget) {
    if (report.clusters.empty()) throw ConfigError("allocate_bits: report has no clusters");
    if (!(budget > 0.0) || !std::isfinite(budget)) throw InfeasibleBudgetError("allocate_bits: budget must be positive");
    Problem p;
    for (const auto& [b, o] : report.clusters.front().omega) {
        bool everywhere = true;
        for (const auto& c : report.clusters) everywhere = everywhere && c.omega.count(b);
        if (everywhere) p.widths.push_back(b);
    }
    if (p.widths.empty()) throw ConfigError("allocate_bits: clusters share no candidate bit-width");
    for (const auto& c : report.clusters) {
        if (c.size == 0) throw ConfigError("allocate_bits: cluster '" + c.id + "' is empty");
        p.sizes.push_back(c.size);
        p.total += c.size;
        std::vector<double> row;
        for (int b : p.widths) row.push_back(c.omega.at(b));
        p.omega.push_back(std::move(row));
    }
    // A relative slack of 1e-12 keeps budgets like 1.9 from rounding below an
    // exactly representable total.
    p.capacity = static_cast<std::uint64_t>(std::floor(budget * static_cast<double>(p.total) * (1.0 + 1e-12)));
    if (p.capacity < p.total * static_cast<std::uint64_t>(p.widths.front())) {
        throw InfeasibleBudgetError("allocate_bits: budget " + std::to_string(budget) + " is below the narrowest width " +
                                    std::to_string(p.widths.front()));
    }
    return p;
}

struct Candidate {
    double omega = std::numeric_limits<double>::infinity();
    std::uint64_t used = 0;
    std::vector<std::size_t> choice;
};

// Strictly better: smaller omega, then fewer bits. Enumeration runs in
// lexicographic order, so the first of several equal candidates is kept.
bool better(double omega, std::uint64_t used, const Candidate& best) {
    return omega < best.omega || (omega == best.omega && used < best.used);
}

void enumerate(const Problem& p, std::size_t i, double omega, std::uint64_t used, std::uint64_t min_rest,
               std::vector<std::size_t>& choice, Candidate& best) {
    if (i == p.sizes.size()) {
        if (better(omega, used, best)) best = {omega, used, choice};
        return;
    }
    const std::uint64_t rest = min_rest - p.sizes[i] * static_cast<std::uint64_t>(p.widths.front());
    for (std::size_t k = 0; k < p.widths.size(); ++k) {
        const std::uint64_t u = used + p.sizes[i] * static_cast<std::uint64_t>(p.widths[k]);
        if (u + rest > p.capacity) break;
        choice[i] = k;
        enumerate(p, i + 1, omega + p.omega[i][k], u, rest, choice, best);
    }
}

Candidate solve_exhaustive(const Problem& p) {
    Candidate best;
    std::vector<std::size_t> choice(p.sizes.size());
    enumerate(p, 0, 0.0, 0, p.total * static_cast<std::uint64_t>(p.widths.front()), choice, best);
    return best;
}

// Knapsack over the width budget in units of the gcd of cluster sizes. Grids
// finer than kMaxCells are coarsened with weights rounded up, which keeps
// every answer feasible.
Candidate solve_dp(const Problem& p) {
    constexpr std::uint64_t kMaxCells = 1u << 20;
    std::uint64_t unit = 0;
    for (auto s : p.sizes) unit = std::gcd(unit, s);
    std::uint64_t cells = p.capacity / unit;
    if (cells > kMaxCells) {
        unit *= (cells + kMaxCells - 1) / kMaxCells;
        cells = p.capacity / unit;
    }
    const std::size_t n = p.sizes.size(), w = p.widths.size();
    struct Cell {
        double omega;
        std::uint64_t used;
    };
    const Cell empty{std::numeric_limits<double>::infinity(), 0};
    std::vector<Cell> prev(cells + 1, empty), next(cells + 1);
    prev[0] = {0.0, 0};
    std::vector<std::vector<std::uint8_t>> pick(n, std::vector<std::uint8_t>(cells + 1, 0));
    for (std::size_t i = 0; i < n; ++i) {
        std::fill(next.begin(), next.end(), empty);
        for (std::size_t k = 0; k < w; ++k) {
            const std::uint64_t bits = p.sizes[i] * static_cast<std::uint64_t>(p.widths[k]);
            const std::uint64_t cost = (bits + unit - 1) / unit;
            for (std::uint64_t c = cost; c <= cells; ++c) {
                const Cell& from = prev[c - cost];
                if (std::isinf(from.omega)) continue;
                const double o = from.omega + p.omega[i][k];
                const std::uint64_t u = from.used + bits;
                if (o < next[c].omega || (o == next[c].omega && u < next[c].used)) {
                    next[c] = {o, u};
                    pick[i][c] = static_cast<std::uint8_t>(k);
                }
            }
        }
        std::swap(prev, next);
    }
    std::uint64_t at = 0;
    for (std::uint64_t c = 1; c <= cells; ++c) {
        if (prev[c].omega < prev[at].omega || (prev[c].omega == prev[at].omega && prev[c].used < prev[at].used)) at = c;
    }
    Candidate best{prev[at].omega, prev[at].used, std::vector<std::size_t>(n)};
    for (std::size_t i = n; i-- > 0;) {
        const std::size_t k = pick[i][at];
        best.choice[i] = k;
        at -= (p.sizes[i] * static_cast<std::uint64_t>(p.widths[k]) + unit - 1) / unit;
    }
    return best;
}

}  // namespace

PrecisionAssignment score_assignment(const SensitivityReport& report, const BitMap& bits) {
    PrecisionAssignment a;
    double weighted = 0.0, total = 0.0;
    for (const auto& c : report.clusters) {
        auto it = bits.find(c.id);
        if (it == bits.end()) throw ConfigError("assignment has no bit-width for cluster '" + c.id + "'");
        auto o = c.omega.find(it->second);
        if (o == c.omega.end()) {
            throw ConfigError("cluster '" + c.id + "' has no sensitivity at " + std::to_string(it->second) + " bits");
        }
        a.bits[c.id] = it->second;
        a.total_omega += o->second;
        weighted += static_cast<double>(c.size) * it->second;
        total += static_cast<double>(c.size);
    }
    a.average_bits = weighted / total;
    return a;
}

PrecisionAssignment allocate_bits(const SensitivityReport& report, double budget) {
    const Problem p = make_problem(report, budget);
    const Candidate best = p.sizes.size() <= kExhaustiveClusterLimit ? solve_exhaustive(p) : solve_dp(p);
    BitMap bits;
    for (std::size_t i = 0; i < p.sizes.size(); ++i) bits[report.clusters[i].id] = p.widths[best.choice[i]];
    return score_assignment(report, bits);
}

void attach_size(PrecisionAssignment& assignment, const TransformerLM& model, const std::vector<ClusterSpec>& clusters,
                 const BitMap& extra_bits) {
    BitMap bits = extra_bits;
    for (const auto& [id, b] : assignment.bits) bits[id] = b;
    assignment.size_mb = planned_size_mb(model, clusters, bits);
    assignment.compression_ratio = compression_ratio(model_size_mb(model), assignment.size_mb);
}

}  // namespace mpq
