#pragma once

// Shared builders for unit and acceptance tests: tiny hand cases plus a
// seeded random-connected-case generator.

#include <random>
#include <vector>

#include "cascid/grid_model.hpp"

namespace cascid::testing {

/// 2-bus case: generator at bus 1 injecting `p` pu, load at bus 2, one branch
/// with admittance `y`.
inline GridCase two_bus(double y = 10.0, double p = 1.0, double bound = 2.0) {
    std::vector<Bus> buses{
        {1, p, -bound, bound, 2.0 * bound},
        {2, -p, -bound, bound, 0.0},
    };
    std::vector<Branch> branches{{1, 1, 2, y, std::nullopt}};
    return GridCase(100.0, buses, branches);
}

/// Triangle: gen at bus 1, loads at 2 and 3; branches (1,2), (2,3), (1,3).
inline GridCase triangle(double y = 5.0, double p2 = -0.4, double p3 = -0.6) {
    std::vector<Bus> buses{
        {1, -(p2 + p3), -2.0, 2.0, 3.0},
        {2, p2, -2.0, 2.0, 0.0},
        {3, p3, -2.0, 2.0, 0.0},
    };
    std::vector<Branch> branches{
        {1, 1, 2, y, std::nullopt},
        {2, 2, 3, y, std::nullopt},
        {3, 1, 3, y, std::nullopt},
    };
    return GridCase(100.0, buses, branches);
}

/// 4-bus / 5-branch mesh used by the identification tests: generators at
/// buses 1 and 2, loads at 3 and 4.
inline GridCase four_bus() {
    std::vector<Bus> buses{
        {1, 1.1, -0.5, 3.0, 3.0},
        {2, 0.9, -0.5, 2.0, 2.0},
        {3, -1.2, -1.2, 0.0, 0.0},
        {4, -0.8, -0.8, 0.0, 0.0},
    };
    std::vector<Branch> branches{
        {1, 1, 2, 5.0, std::nullopt},
        {2, 1, 3, 10.0, std::nullopt},
        {3, 2, 3, 4.0, std::nullopt},
        {4, 2, 4, 8.0, std::nullopt},
        {5, 3, 4, 5.0, std::nullopt},
    };
    return GridCase(100.0, buses, branches);
}

/// Random connected case: spanning tree plus extra edges, strictly positive
/// admittances, balanced injections with one generator-heavy bus.
inline GridCase random_case(std::mt19937_64& rng, int max_buses = 10, int max_extra = 6) {
    std::uniform_int_distribution<int> mdist(2, max_buses);
    const int m = mdist(rng);
    std::uniform_real_distribution<double> ydist(0.5, 10.0);
    std::uniform_real_distribution<double> pdist(-1.0, 1.0);

    std::vector<Branch> branches;
    int next_id = 1;
    for (int i = 2; i <= m; ++i) {
        std::uniform_int_distribution<int> prev(1, i - 1);
        branches.push_back({next_id++, prev(rng), i, ydist(rng), std::nullopt});
    }
    std::uniform_int_distribution<int> extra_dist(0, max_extra);
    int extra = extra_dist(rng);
    for (int e = 0; e < extra; ++e) {
        std::uniform_int_distribution<int> pick(1, m);
        int a = pick(rng), b = pick(rng);
        if (a == b) continue;
        branches.push_back({next_id++, a, b, ydist(rng), std::nullopt});
    }

    std::vector<Bus> buses;
    double total = 0.0;
    for (int i = 1; i <= m; ++i) {
        double p = pdist(rng);
        total += p;
        buses.push_back({i, p, 0.0, 0.0, 0.0});
    }
    // balance onto bus 1 and make it the biggest generator
    buses[0].p_injection -= total;
    for (Bus& b : buses) {
        b.p_min = std::min(b.p_injection, 0.0) - 2.0;
        b.p_max = std::max(b.p_injection, 0.0) + 2.0;
        b.gen_capacity = b.p_injection > 0.0 ? b.p_injection + 1.0 : 0.0;
    }
    buses[0].gen_capacity = 10.0;

    return GridCase(100.0, buses, branches);
}

/// Hand-built 4-bus / 5-branch cascade case for the identification
/// self-consistency checks: generators at buses 1 and 2, loads at 3 and 4,
/// thresholds 40% above base flows. Severing any of the first four branches
/// triggers secondary damage, yet every branch's worst case sits at an
/// interior severance-type root that the multi-start finds reliably.
inline GridCase acceptance_four_bus() {
    const double p1 = 0.76, p2 = 0.20;
    const double p3 = -(p1 + p2) * 0.65, p4 = -(p1 + p2) * 0.35;
    std::vector<Bus> buses{
        {1, p1, -1.0, 3.0, 3.0},
        {2, p2, -1.0, 2.0, 2.0},
        {3, p3, p3, 0.0, 0.0},
        {4, p4, p4, 0.0, 0.0},
    };
    std::vector<Branch> branches{
        {1, 1, 2, 2.0, std::nullopt},
        {2, 1, 3, 2.1, std::nullopt},
        {3, 2, 3, 2.2, std::nullopt},
        {4, 2, 4, 3.2, std::nullopt},
        {5, 3, 4, 3.6, std::nullopt},
    };
    return GridCase(100.0, buses, branches);
}

/// Moderately scaled connected case for derivative cross-checks at sharp
/// sigma: admittances of a few per unit and sub-unit flows keep the finite
/// differences of the relay numerically meaningful.
inline GridCase band_scale_case(std::mt19937_64& rng) {
    GridCase g = random_case(rng, 6, 3);
    std::vector<Bus> buses = g.buses();
    std::vector<Branch> branches = g.branches();
    for (Bus& b : buses) {
        b.p_injection *= 0.25;
        b.p_min = std::min(b.p_injection, 0.0) - 2.0;
        b.p_max = std::max(b.p_injection, 0.0) + 2.0;
        if (b.gen_capacity > 0.0) b.gen_capacity = std::max(b.gen_capacity, b.p_injection + 0.5);
    }
    std::uniform_real_distribution<double> ydist(0.4, 1.2);
    for (Branch& br : branches) br.susceptance = ydist(rng);
    return GridCase(g.base_mva(), buses, branches);
}

}  // namespace cascid::testing
