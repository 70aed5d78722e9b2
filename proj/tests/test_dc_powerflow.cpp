#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "cascid/dc_powerflow.hpp"
#include "test_util.hpp"

using namespace cascid;

TEST_CASE("two-bus hand solve") {
    GridCase g = testing::two_bus(10.0, 1.0);
    FlowSolution sol = solve_dc(g, g.susceptances(), g.injections());
    CHECK(sol.theta[0] == 0.0);  // slack grounded exactly
    CHECK(sol.theta[1] == doctest::Approx(-0.1).epsilon(1e-12));
    CHECK(sol.branch_flows[0] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(sol.imbalance[0] == doctest::Approx(0.0));
}

TEST_CASE("zero injections give zero angles and flows") {
    GridCase g = testing::triangle();
    FlowSolution sol = solve_dc(g, g.susceptances(), Eigen::VectorXd::Zero(3));
    CHECK(sol.theta.isZero(0.0));
    CHECK(sol.branch_flows.isZero(0.0));
}

TEST_CASE("generator-less island carries no flow and records the imbalance") {
    std::vector<Bus> buses{
        {1, 0.5, -1.0, 1.0, 1.0},
        {2, -0.5, -1.0, 1.0, 0.0},
        {3, -0.5, -1.0, 1.0, 0.0},
        {4, 0.0, -1.0, 1.0, 0.0},
    };
    std::vector<Branch> branches{
        {1, 1, 2, 5.0, std::nullopt},
        {2, 3, 4, 5.0, std::nullopt},  // island {3,4}: loads only
    };
    GridCase g(100.0, buses, branches);
    FlowSolution sol = solve_dc(g, g.susceptances(), g.injections());
    int isl = sol.islands.island_of[2];
    CHECK_FALSE(sol.islands.has_generation[isl]);
    CHECK(sol.branch_flows[1] == 0.0);
    CHECK(sol.theta[2] == 0.0);
    CHECK(sol.imbalance[isl] == doctest::Approx(0.5));
}

TEST_CASE("triangle hand computation") {
    GridCase g = testing::triangle(5.0, -0.4, -0.6);
    FlowSolution sol = solve_dc(g, g.susceptances(), g.injections());
    CHECK(sol.theta[1] == doctest::Approx(-7.0 / 75.0).epsilon(1e-12));
    CHECK(sol.theta[2] == doctest::Approx(-8.0 / 75.0).epsilon(1e-12));
    CHECK(sol.branch_flows[0] == doctest::Approx(7.0 / 15.0).epsilon(1e-12));
    CHECK(sol.branch_flows[1] == doctest::Approx(1.0 / 15.0).epsilon(1e-12));
    CHECK(sol.branch_flows[2] == doctest::Approx(8.0 / 15.0).epsilon(1e-12));
}

TEST_CASE("branch_flow basics") {
    GridCase g = testing::two_bus(10.0);
    Eigen::VectorXd theta(2);
    theta << 0.1, 0.0;
    Eigen::VectorXd y(1);
    y << 10.0;
    CHECK(branch_flow(g, y, theta)[0] == doctest::Approx(1.0));
    y[0] = 0.0;
    CHECK(branch_flow(g, y, theta)[0] == 0.0);
}

TEST_CASE("flow sensitivity: two-bus and dead branch") {
    GridCase g = testing::two_bus(10.0);
    Eigen::MatrixXd S = flow_sensitivity(g, g.susceptances());
    CHECK(S(0, 0) == 0.0);  // slack column
    CHECK(S(0, 1) == doctest::Approx(-1.0).epsilon(1e-12));

    Eigen::VectorXd dead = Eigen::VectorXd::Zero(1);
    CHECK(flow_sensitivity(g, dead).row(0).isZero(0.0));
}

TEST_CASE("flow sensitivity matches finite differences") {
    std::mt19937_64 rng(123);
    for (int trial = 0; trial < 10; ++trial) {
        GridCase g = testing::random_case(rng, 7);
        FlowContext ctx(g, g.susceptances());
        const Eigen::MatrixXd& S = ctx.sensitivity();
        Eigen::VectorXd p = g.injections();
        const double step = 1e-6;
        for (int j = 0; j < g.bus_count(); ++j) {
            Eigen::VectorXd pp = p, pm = p;
            pp[j] += step;
            pm[j] -= step;
            Eigen::VectorXd fd = (ctx.solve(pp).branch_flows - ctx.solve(pm).branch_flows) / (2.0 * step);
            CHECK((fd - S.col(j)).cwiseAbs().maxCoeff() < 1e-6);
        }
    }
}

TEST_CASE("conservation, slack absorption, homogeneity, sensitivity consistency") {
    std::mt19937_64 rng(4242);
    for (int trial = 0; trial < 50; ++trial) {
        GridCase g = testing::random_case(rng, 10);
        FlowContext ctx(g, g.susceptances());
        Eigen::VectorXd p = g.injections();
        FlowSolution sol = ctx.solve(p);
        const IslandPartition& part = sol.islands;

        // per-bus balance at non-slack buses; slack absorbs its own injection
        // plus the island imbalance
        for (int i = 0; i < g.bus_count(); ++i) {
            double net = 0.0;
            for (int b = 0; b < g.branch_count(); ++b) {
                const Branch& br = g.branch(b);
                if (g.bus_index(br.from_bus) == i) net += sol.branch_flows[b];
                if (g.bus_index(br.to_bus) == i) net -= sol.branch_flows[b];
            }
            int isl = part.island_of[i];
            if (!part.has_generation[isl]) continue;
            if (i == *part.slack_bus[isl]) {
                CHECK(std::abs(net - (p[i] + sol.imbalance[isl])) < 1e-9);
            } else {
                CHECK(std::abs(net - p[i]) < 1e-9);
            }
        }

        // homogeneity
        const double alpha = 3.25;
        FlowSolution scaled = ctx.solve(alpha * p);
        CHECK((scaled.branch_flows - alpha * sol.branch_flows).cwiseAbs().maxCoeff() < 1e-12);

        // sensitivity reproduces flows for balanced injections
        Eigen::VectorXd balanced = p;
        // make each island sum to zero by dumping the residual on its slack
        for (int isl = 0; isl < part.island_count; ++isl) {
            if (!part.has_generation[isl]) continue;
            double s = 0.0;
            for (int i = 0; i < g.bus_count(); ++i)
                if (part.island_of[i] == isl) s += balanced[i];
            balanced[*part.slack_bus[isl]] -= s;
        }
        Eigen::VectorXd via_sens = ctx.sensitivity() * balanced;
        Eigen::VectorXd direct = ctx.solve(balanced).branch_flows;
        CHECK((via_sens - direct).cwiseAbs().maxCoeff() < 1e-9);
    }
}

TEST_CASE("transfer matrix is symmetric within islands") {
    std::mt19937_64 rng(55);
    GridCase g = testing::random_case(rng, 8);
    FlowContext ctx(g, g.susceptances());
    const Eigen::MatrixXd& K = ctx.transfer();
    CHECK((K - K.transpose()).cwiseAbs().maxCoeff() < 1e-10);
}
