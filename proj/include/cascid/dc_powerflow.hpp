#pragma once

#include <memory>
#include <vector>

#include <Eigen/Dense>

#include "cascid/grid_model.hpp"

namespace cascid {

/// Result of one DC power-flow solve.
struct FlowSolution {
    Eigen::VectorXd theta;         ///< m, radians; exactly 0 at each island's slack bus
    Eigen::VectorXd branch_flows;  ///< n, per unit, positive from from_bus to to_bus
    IslandPartition islands;
    Eigen::VectorXd imbalance;     ///< per island: -sum of island injections, absorbed by the slack
};

/// Reusable solver state for one network topology (one admittance vector).
///
/// Per island with generation the slack angle is grounded and the reduced
/// Laplacian (alive branches only) is factorized once; every quantity below
/// is then cheap per injection vector. Islands without generation have all
/// angles and flows pinned to zero. This grounded reduced solve is the
/// generalized inverse used throughout.
class FlowContext {
public:
    FlowContext(const GridCase& grid, const Eigen::VectorXd& y_p);
    ~FlowContext();
    FlowContext(FlowContext&&) noexcept;
    FlowContext& operator=(FlowContext&&) noexcept;

    const GridCase& grid() const noexcept { return *grid_; }
    const Eigen::VectorXd& y_p() const noexcept { return y_p_; }
    const IslandPartition& islands() const noexcept { return islands_; }
    const std::vector<bool>& alive() const noexcept { return alive_; }

    /// Bus angles for injection vector p (slack entries 0).
    Eigen::VectorXd theta(const Eigen::VectorXd& p) const;
    FlowSolution solve(const Eigen::VectorXd& p) const;

    /// d(branch_flows)/d(injections): row b = y_b * (reduced inverse applied to
    /// e_i - e_j), zero in slack columns, zero rows for dead branches and for
    /// branches in islands without generation. (n x m)
    const Eigen::MatrixXd& sensitivity() const;

    /// Angle-difference sensitivity T: row b = reduced-inverse image of the
    /// branch's incidence row, so theta_i - theta_j = T.row(b) * p. (n x m)
    const Eigen::MatrixXd& angle_sensitivity() const;

    /// Branch-pair transfer matrix K_ab = a_a^T Bred^-1 a_b (a_b = signed
    /// incidence row); zero across islands and for dead branches. (n x n)
    const Eigen::MatrixXd& transfer() const;

private:
    const GridCase* grid_;
    Eigen::VectorXd y_p_;
    std::vector<bool> alive_;
    IslandPartition islands_;
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

/// One-shot DC power flow (see FlowContext for the per-island rules).
FlowSolution solve_dc(const GridCase& grid, const Eigen::VectorXd& y_p, const Eigen::VectorXd& p);

/// Flow per branch from angles: y_b * (theta_i - theta_j).
Eigen::VectorXd branch_flow(const GridCase& grid, const Eigen::VectorXd& y_p, const Eigen::VectorXd& theta);

/// One-shot n x m flow-vs-injection Jacobian at fixed topology.
Eigen::MatrixXd flow_sensitivity(const GridCase& grid, const Eigen::VectorXd& y_p);

}  // namespace cascid
