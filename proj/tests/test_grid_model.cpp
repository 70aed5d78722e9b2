#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <random>

#include <Eigen/Eigenvalues>

#include "cascid/cases.hpp"
#include "cascid/grid_model.hpp"
#include "test_util.hpp"

using namespace cascid;

namespace {

const char* kMinimalCase =
    "BASE_MVA 100\n"
    "BUS 1 100 -200 200 300\n"
    "BUS 2 -100 -200 200 0\n"
    "BRANCH 1 1 2 0.1\n";

}  // namespace

TEST_CASE("parse minimal two-bus case") {
    GridCase g = parse_case(kMinimalCase);
    CHECK(g.bus_count() == 2);
    CHECK(g.branch_count() == 1);
    CHECK(g.base_mva() == doctest::Approx(100.0));
    CHECK(g.bus(0).p_injection == doctest::Approx(1.0));  // per unit
    CHECK(g.branch(0).susceptance == doctest::Approx(10.0));
    CHECK_FALSE(g.branch(0).flow_limit.has_value());
}

TEST_CASE("parse embedded RTS-24 case") {
    GridCase g = parse_case(rts24_case_text());
    CHECK(g.bus_count() == 24);
    CHECK(g.branch_count() == 38);
    // balanced snapshot
    CHECK(g.injections().sum() == doctest::Approx(0.0).epsilon(1e-12));
    // largest generating station
    int best = 0;
    for (int i = 0; i < g.bus_count(); ++i)
        if (g.bus(i).gen_capacity > g.bus(best).gen_capacity) best = i;
    CHECK(g.bus(best).id == 23);
}

TEST_CASE("parse errors carry location and kind") {
    CHECK_THROWS_AS(parse_case("BASE_MVA 100\nBUS 1 0 0 0 0\nBUS 2 0 0 0 0\nBRANCH 1 1 99 0.1\n"),
                    validation_error);  // dangling bus reference
    CHECK_THROWS_WITH_AS(parse_case("BASE_MVA 100\nBUS 1 0 0 0 zero\n"),
                         doctest::Contains("line 2"), parse_error);
    CHECK_THROWS_AS(parse_case("BASE_MVA 100\nBUS 1 0 0 0 0\nBUS 2 0 0 0 0\nBRANCH 1 1 2 -0.5\n"),
                    parse_error);  // nonpositive reactance
    CHECK_THROWS_AS(parse_case("BASE_MVA 100\nBUS 1 0 5 -5 0\nBUS 2 0 0 0 0\nBRANCH 1 1 2 0.1\n"),
                    validation_error);  // p_min > p_max
    CHECK_THROWS_AS(parse_case("BUS 1 0 0 0 0\nBUS 2 0 0 0 0\nBRANCH 1 1 2 0.1\n"),
                    parse_error);  // missing BASE_MVA
    CHECK_THROWS_AS(parse_case("BASE_MVA 100\nBUS 1 0 0 0 0\nBUS 2 0 0 0 0\nBRANCH 1 1 1 0.1\n"),
                    validation_error);  // self loop
}

TEST_CASE("incidence rows are +1/-1 with zero sums") {
    GridCase two = testing::two_bus();
    IncidenceMatrix A = incidence(two);
    CHECK(A.entries.rows() == 1);
    CHECK(A.entries(0, 0) == 1.0);
    CHECK(A.entries(0, 1) == -1.0);

    GridCase tri = testing::triangle();
    IncidenceMatrix At = incidence(tri);
    for (int b = 0; b < 3; ++b) CHECK(At.entries.row(b).sum() == 0.0);

    GridCase rts = parse_case(rts24_case_text());
    IncidenceMatrix Ar = incidence(rts);
    CHECK(Ar.entries.rows() == 38);
    CHECK(Ar.entries.cols() == 24);
    for (int b = 0; b < 38; ++b) CHECK(Ar.entries.row(b).sum() == 0.0);
}

TEST_CASE("bus admittance matrix") {
    GridCase two = testing::two_bus(10.0);
    IncidenceMatrix A = incidence(two);
    Eigen::VectorXd y(1);
    y << 10.0;
    Eigen::MatrixXd Yb = bus_admittance(y, A);
    CHECK(Yb(0, 0) == doctest::Approx(10.0));
    CHECK(Yb(0, 1) == doctest::Approx(-10.0));
    CHECK(Yb(1, 0) == doctest::Approx(-10.0));
    CHECK(Yb(1, 1) == doctest::Approx(10.0));

    CHECK(bus_admittance(Eigen::VectorXd::Zero(1), A).isZero(0.0));

    // triangle with y = [1, 2, 3] on branches (1,2), (2,3), (1,3)
    GridCase tri = testing::triangle();
    Eigen::VectorXd yt(3);
    yt << 1.0, 2.0, 3.0;
    Eigen::MatrixXd L = bus_admittance(yt, incidence(tri));
    Eigen::MatrixXd expect(3, 3);
    expect << 4, -1, -3,
              -1, 3, -2,
              -3, -2, 5;
    CHECK((L - expect).cwiseAbs().maxCoeff() == doctest::Approx(0.0));
}

TEST_CASE("bus admittance is a PSD Laplacian on random cases") {
    std::mt19937_64 rng(20240811);
    for (int trial = 0; trial < 40; ++trial) {
        GridCase g = testing::random_case(rng, 8);
        IncidenceMatrix A = incidence(g);
        Eigen::VectorXd y(g.branch_count());
        std::uniform_real_distribution<double> ydist(0.0, 10.0);
        for (int b = 0; b < g.branch_count(); ++b) y[b] = ydist(rng);
        Eigen::MatrixXd L = bus_admittance(y, A);
        CHECK((L - L.transpose()).cwiseAbs().maxCoeff() < 1e-12);
        for (int i = 0; i < g.bus_count(); ++i) CHECK(std::abs(L.row(i).sum()) < 1e-12);
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(L);
        CHECK(eig.eigenvalues().minCoeff() > -1e-9);
    }
}

TEST_CASE("island detection") {
    GridCase rts = parse_case(rts24_case_text());
    Eigen::VectorXd y = rts.susceptances();

    IslandPartition whole = find_islands(rts, y);
    CHECK(whole.island_count == 1);
    CHECK(whole.has_generation[0]);
    CHECK(rts.bus(*whole.slack_bus[0]).id == 23);

    // severing branch 11 (7-8) leaves bus 7 alone
    y[rts.branch_index(11)] = 0.0;
    IslandPartition split = find_islands(rts, y);
    CHECK(split.island_count == 2);
    int island7 = split.island_of[rts.bus_index(7)];
    int members = 0;
    for (int i = 0; i < rts.bus_count(); ++i)
        if (split.island_of[i] == island7) ++members;
    CHECK(members == 1);
    CHECK(split.has_generation[island7]);  // bus 7 hosts a plant
    CHECK(rts.bus(*split.slack_bus[island7]).id == 7);
}

TEST_CASE("load-only island has no slack") {
    // bus 3 is an isolated load: gens on 1, nothing on 3
    std::vector<Bus> buses{
        {1, 0.5, -1.0, 1.0, 1.0},
        {2, -0.5, -1.0, 1.0, 0.0},
        {3, -0.5, -1.0, 1.0, 0.0},
    };
    std::vector<Branch> branches{{1, 1, 2, 5.0, std::nullopt}, {2, 2, 3, 5.0, std::nullopt}};
    GridCase g(100.0, buses, branches);
    Eigen::VectorXd y = g.susceptances();
    y[1] = 0.0;
    IslandPartition part = find_islands(g, y);
    CHECK(part.island_count == 2);
    int isl3 = part.island_of[2];
    CHECK_FALSE(part.has_generation[isl3]);
    CHECK_FALSE(part.slack_bus[isl3].has_value());
}

TEST_CASE("island detection is invariant to branch order and bus relabeling") {
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 20; ++trial) {
        GridCase g = testing::random_case(rng, 8);
        Eigen::VectorXd y = g.susceptances();
        // kill a random subset
        std::uniform_real_distribution<double> coin(0.0, 1.0);
        for (int b = 0; b < g.branch_count(); ++b)
            if (coin(rng) < 0.4) y[b] = 0.0;
        IslandPartition base = find_islands(g, y);

        // shuffle branches and relabel buses with an offset
        std::vector<int> perm(g.branch_count());
        for (int b = 0; b < g.branch_count(); ++b) perm[b] = b;
        std::shuffle(perm.begin(), perm.end(), rng);
        std::vector<Branch> branches;
        for (int b : perm) {
            Branch br = g.branch(b);
            br.from_bus += 100;
            br.to_bus += 100;
            branches.push_back(br);
        }
        std::vector<Bus> buses = g.buses();
        for (Bus& bus : buses) bus.id += 100;
        GridCase g2(g.base_mva(), buses, branches);
        Eigen::VectorXd y2(g.branch_count());
        for (int i = 0; i < g.branch_count(); ++i) y2[i] = y[perm[i]];
        IslandPartition mapped = find_islands(g2, y2);

        CHECK(mapped.island_count == base.island_count);
        for (int i = 0; i < g.bus_count(); ++i)
            for (int j = 0; j < g.bus_count(); ++j)
                CHECK(base.same_island(i, j) == mapped.same_island(i, j));
    }
}

TEST_CASE("serialize round trip is the identity on the canonical form") {
    std::mt19937_64 rng(99);
    std::vector<GridCase> cases;
    cases.push_back(parse_case(rts24_case_text()));
    for (int i = 0; i < 20; ++i) cases.push_back(testing::random_case(rng, 8));
    for (const GridCase& g : cases) {
        std::string s1 = serialize_case(g);
        GridCase g2 = parse_case(s1);
        std::string s2 = serialize_case(g2);
        CHECK(s1 == s2);
        REQUIRE(g2.bus_count() == g.bus_count());
        REQUIRE(g2.branch_count() == g.branch_count());
    }
}
