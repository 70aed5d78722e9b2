#pragma once

#include <vector>

#include <Eigen/Dense>

#include "cascid/grid_model.hpp"

namespace cascid {

/// Load-shedding / generation-dispatch instance at one cascade step:
/// minimize ||P - p0||^2 subject to box bounds on P and |flow(P)| <= c,
/// with flow(P) = sensitivity * P at the fixed step topology.
struct ProtectionProblem {
    Eigen::VectorXd p0;           ///< original injections (m)
    Eigen::VectorXd p_min;        ///< lower injection bounds (m)
    Eigen::VectorXd p_max;        ///< upper injection bounds (m)
    Eigen::VectorXd flow_limits;  ///< per-branch limits c (n)
    Eigen::VectorXd y_p_l;        ///< admittance state at the protection step (n)
    Eigen::MatrixXd sensitivity;  ///< d(flows)/d(injections) at y_p_l (n x m)
    std::vector<bool> alive;      ///< branches whose flow constraints are live; dead rows are vacuous

    int bus_count() const { return static_cast<int>(p0.size()); }
    int branch_count() const { return static_cast<int>(flow_limits.size()); }
    Eigen::VectorXd flows(const Eigen::VectorXd& p) const { return sensitivity * p; }

    void validate() const;
};

/// Adjusted injections plus the full certificate: multipliers and the squared
/// slacks of the equation system the multiplier conditions come from.
struct ProtectionSolution {
    Eigen::VectorXd p_l;           ///< adjusted injections (m)
    Eigen::VectorXd mu_upper;      ///< bound multipliers (m)
    Eigen::VectorXd mu_lower;
    Eigen::VectorXd lambda_upper;  ///< flow multipliers (n)
    Eigen::VectorXd lambda_lower;
    Eigen::VectorXd slack_x_upper;  ///< primal bound slacks (m)
    Eigen::VectorXd slack_x_lower;
    Eigen::VectorXd slack_y_upper;  ///< primal flow slacks (n)
    Eigen::VectorXd slack_y_lower;
    Eigen::VectorXd slack_z_upper;  ///< dual bound slacks (m)
    Eigen::VectorXd slack_z_lower;
    Eigen::VectorXd slack_w_upper;  ///< dual flow slacks (n)
    Eigen::VectorXd slack_w_lower;
    double kkt_residual = 0.0;      ///< max-norm of assemble_kkt at this point
    double objective = 0.0;         ///< ||p_l - p0||^2
    bool certified = false;         ///< solver converged and kkt_residual <= tol
    int iterations = 0;
};

/// Stacked first-order-condition residuals, 7m+6n entries in this order:
///   [0,m)                stationarity
///   [m,3m)+[.,+2n)       primal feasibility with squared slacks
///                        (upper bounds, lower bounds, flow upper, flow lower)
///   next 2m+2n           complementary slackness (same constraint order)
///   next 2m+2n           dual feasibility with squared slacks (same order)
Eigen::VectorXd assemble_kkt(const ProtectionProblem& problem, const ProtectionSolution& candidate);

/// Variable layout of the squared-slack system; block offsets into the packed
/// vector. Residual blocks of assemble_kkt use the same order.
struct KktLayout {
    int m = 0, n = 0;
    int size() const { return 7 * m + 6 * n; }
    int p() const { return 0; }
    int mu_u() const { return m; }
    int mu_l() const { return 2 * m; }
    int lam_u() const { return 3 * m; }
    int lam_l() const { return 3 * m + n; }
    int x_u() const { return 3 * m + 2 * n; }
    int x_l() const { return 4 * m + 2 * n; }
    int y_u() const { return 5 * m + 2 * n; }
    int y_l() const { return 5 * m + 3 * n; }
    int z_u() const { return 5 * m + 4 * n; }
    int z_l() const { return 6 * m + 4 * n; }
    int w_u() const { return 7 * m + 4 * n; }
    int w_l() const { return 7 * m + 5 * n; }
};

Eigen::VectorXd kkt_pack(const KktLayout& layout, const ProtectionSolution& s);
ProtectionSolution kkt_unpack(const KktLayout& layout, const Eigen::VectorXd& v);

/// Jacobian of assemble_kkt with respect to the packed unknowns.
Eigen::MatrixXd kkt_jacobian(const ProtectionProblem& problem, const ProtectionSolution& candidate);

/// Direct convex-QP path (dual active set via an NNLS reduction). Exact
/// active-set arithmetic; throws infeasible_error (with a Farkas certificate
/// in the message) when the constraint set is empty. If the iteration cap is
/// hit, the best iterate is returned with certified = false.
ProtectionSolution solve_protection_qp(const ProtectionProblem& problem, double tol = 1e-9);

/// Squared-slack equation path: damped Newton on the 7m+6n system. Returns
/// certified = true only if the max-norm residual reaches tol. Non-convergence
/// is reported through the flag, not an exception, so callers can decide how
/// to proceed mid-cascade.
ProtectionSolution solve_kkt_squared_slack(const ProtectionProblem& problem,
                                           const ProtectionSolution* initial_guess,
                                           double tol = 1e-10,
                                           int max_iter = 60);

/// Consistent squared-slack start: primal at p0, multipliers at 0, primal
/// slacks at sqrt|constraint slack|, dual slacks at 0.
ProtectionSolution kkt_initial_guess(const ProtectionProblem& problem);

}  // namespace cascid
