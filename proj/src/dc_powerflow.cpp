#include "cascid/dc_powerflow.hpp"

#include <cmath>

#include "cascid/errors.hpp"

namespace cascid {

namespace {

struct IslandSystem {
    std::vector<int> reduced_of;  // bus index -> position in the reduced system, -1 if slack/other island
    std::vector<int> bus_of;      // reduced position -> bus index
    Eigen::PartialPivLU<Eigen::MatrixXd> lu;
    bool solvable = false;        // has generation and at least one non-slack bus
};

}  // namespace

struct FlowContext::Impl {
    std::vector<IslandSystem> systems;                 // per island
    mutable std::unique_ptr<Eigen::MatrixXd> sens;     // n x m, lazy
    mutable std::unique_ptr<Eigen::MatrixXd> angle;    // n x m, lazy
    mutable std::unique_ptr<Eigen::MatrixXd> transfer; // n x n, lazy
};

FlowContext::FlowContext(const GridCase& grid, const Eigen::VectorXd& y_p)
    : grid_(&grid), y_p_(y_p), alive_(alive_mask(grid, y_p)), impl_(std::make_unique<Impl>()) {
    if (y_p_.size() != grid.branch_count()) throw validation_error("admittance vector length mismatch");
    if (!y_p_.allFinite()) throw solve_error("non-finite admittance vector");
    islands_ = find_islands(grid, alive_);

    const int m = grid.bus_count();
    impl_->systems.resize(islands_.island_count);

    for (int isl = 0; isl < islands_.island_count; ++isl) {
        IslandSystem& sys = impl_->systems[isl];
        sys.reduced_of.assign(m, -1);
        if (!islands_.has_generation[isl]) continue;
        const int slack = *islands_.slack_bus[isl];
        for (int i = 0; i < m; ++i) {
            if (islands_.island_of[i] != isl || i == slack) continue;
            sys.reduced_of[i] = static_cast<int>(sys.bus_of.size());
            sys.bus_of.push_back(i);
        }
        if (sys.bus_of.empty()) continue;  // single-bus island: nothing to solve

        const int r = static_cast<int>(sys.bus_of.size());
        Eigen::MatrixXd B = Eigen::MatrixXd::Zero(r, r);
        for (int b = 0; b < grid.branch_count(); ++b) {
            if (!alive_[b]) continue;
            const Branch& br = grid.branch(b);
            int i = grid.bus_index(br.from_bus);
            int j = grid.bus_index(br.to_bus);
            if (islands_.island_of[i] != isl) continue;
            int ri = sys.reduced_of[i];
            int rj = sys.reduced_of[j];
            double y = y_p_[b];
            if (ri >= 0) B(ri, ri) += y;
            if (rj >= 0) B(rj, rj) += y;
            if (ri >= 0 && rj >= 0) {
                B(ri, rj) -= y;
                B(rj, ri) -= y;
            }
        }
        sys.lu.compute(B);
        // A connected island gives a nonsingular reduced Laplacian; anything
        // else signals an island/tolerance mismatch.
        const double scale = B.cwiseAbs().maxCoeff();
        if (!(scale > 0.0) || !std::isfinite(scale))
            throw solve_error("reduced admittance matrix is degenerate");
        Eigen::VectorXd probe = sys.lu.solve(Eigen::VectorXd::Ones(r));
        if (!probe.allFinite() || (B * probe - Eigen::VectorXd::Ones(r)).cwiseAbs().maxCoeff() > 1e-8 * std::max(1.0, scale))
            throw solve_error("singular reduced admittance matrix (inconsistent island detection)");
        sys.solvable = true;
    }
}

FlowContext::~FlowContext() = default;
FlowContext::FlowContext(FlowContext&&) noexcept = default;
FlowContext& FlowContext::operator=(FlowContext&&) noexcept = default;

Eigen::VectorXd FlowContext::theta(const Eigen::VectorXd& p) const {
    const GridCase& grid = *grid_;
    if (p.size() != grid.bus_count()) throw validation_error("injection vector length mismatch");
    if (!p.allFinite()) throw solve_error("non-finite injection vector");

    Eigen::VectorXd th = Eigen::VectorXd::Zero(grid.bus_count());
    for (const IslandSystem& sys : impl_->systems) {
        if (!sys.solvable) continue;
        const int r = static_cast<int>(sys.bus_of.size());
        Eigen::VectorXd rhs(r);
        for (int k = 0; k < r; ++k) rhs[k] = p[sys.bus_of[k]];
        Eigen::VectorXd sol = sys.lu.solve(rhs);
        if (!sol.allFinite()) throw solve_error("non-finite power flow solution");
        for (int k = 0; k < r; ++k) th[sys.bus_of[k]] = sol[k];
    }
    return th;
}

FlowSolution FlowContext::solve(const Eigen::VectorXd& p) const {
    FlowSolution out;
    out.theta = theta(p);
    out.branch_flows = branch_flow(*grid_, y_p_, out.theta);
    out.islands = islands_;
    out.imbalance = Eigen::VectorXd::Zero(islands_.island_count);
    for (int i = 0; i < grid_->bus_count(); ++i) out.imbalance[islands_.island_of[i]] -= p[i];
    return out;
}

const Eigen::MatrixXd& FlowContext::angle_sensitivity() const {
    if (impl_->angle) return *impl_->angle;
    const GridCase& grid = *grid_;
    const int n = grid.branch_count();
    const int m = grid.bus_count();
    auto T = std::make_unique<Eigen::MatrixXd>(Eigen::MatrixXd::Zero(n, m));
    for (int b = 0; b < n; ++b) {
        if (!alive_[b]) continue;
        const Branch& br = grid.branch(b);
        int i = grid.bus_index(br.from_bus);
        int j = grid.bus_index(br.to_bus);
        int isl = islands_.island_of[i];
        const IslandSystem& sys = impl_->systems[isl];
        if (!sys.solvable) continue;
        const int r = static_cast<int>(sys.bus_of.size());
        Eigen::VectorXd rhs = Eigen::VectorXd::Zero(r);
        if (sys.reduced_of[i] >= 0) rhs[sys.reduced_of[i]] += 1.0;
        if (sys.reduced_of[j] >= 0) rhs[sys.reduced_of[j]] -= 1.0;
        Eigen::VectorXd t = sys.lu.solve(rhs);
        for (int k = 0; k < r; ++k) (*T)(b, sys.bus_of[k]) = t[k];
    }
    impl_->angle = std::move(T);
    return *impl_->angle;
}

const Eigen::MatrixXd& FlowContext::sensitivity() const {
    if (impl_->sens) return *impl_->sens;
    impl_->sens = std::make_unique<Eigen::MatrixXd>(y_p_.asDiagonal() * angle_sensitivity());
    // dead branches keep exactly zero rows even if y_p is slightly above zero
    for (int b = 0; b < grid_->branch_count(); ++b)
        if (!alive_[b]) impl_->sens->row(b).setZero();
    return *impl_->sens;
}

const Eigen::MatrixXd& FlowContext::transfer() const {
    if (impl_->transfer) return *impl_->transfer;
    const GridCase& grid = *grid_;
    const int n = grid.branch_count();
    const Eigen::MatrixXd& T = angle_sensitivity();
    auto K = std::make_unique<Eigen::MatrixXd>(Eigen::MatrixXd::Zero(n, n));
    for (int a = 0; a < n; ++a) {
        if (!alive_[a]) continue;
        for (int b = 0; b < n; ++b) {
            if (!alive_[b]) continue;
            const Branch& br = grid.branch(b);
            (*K)(a, b) = T(a, grid.bus_index(br.from_bus)) - T(a, grid.bus_index(br.to_bus));
        }
    }
    impl_->transfer = std::move(K);
    return *impl_->transfer;
}

FlowSolution solve_dc(const GridCase& grid, const Eigen::VectorXd& y_p, const Eigen::VectorXd& p) {
    return FlowContext(grid, y_p).solve(p);
}

Eigen::VectorXd branch_flow(const GridCase& grid, const Eigen::VectorXd& y_p, const Eigen::VectorXd& theta) {
    Eigen::VectorXd flows(grid.branch_count());
    for (int b = 0; b < grid.branch_count(); ++b) {
        const Branch& br = grid.branch(b);
        flows[b] = y_p[b] * (theta[grid.bus_index(br.from_bus)] - theta[grid.bus_index(br.to_bus)]);
    }
    return flows;
}

Eigen::MatrixXd flow_sensitivity(const GridCase& grid, const Eigen::VectorXd& y_p) {
    return FlowContext(grid, y_p).sensitivity();
}

}  // namespace cascid
