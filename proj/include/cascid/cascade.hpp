#pragma once

#include <functional>
#include <optional>
#include <vector>

#include <Eigen/Dense>

#include "cascid/dc_powerflow.hpp"
#include "cascid/grid_model.hpp"
#include "cascid/protection.hpp"

namespace cascid {

struct RelayConfig {
    double sigma = 5e4;  ///< transition sharpness; larger = closer to a step
};

enum class TerminalCost {
    Quadratic,  ///< ||y||^2 / 2 (default)
    Linear,     ///< sum of components
};

struct CostConfig {
    double epsilon = 1e-4;  ///< control-energy weight
    int horizon = 10;       ///< number of cascade steps h (>= 2)
    TerminalCost terminal = TerminalCost::Quadratic;
};

/// Smooth circuit-breaker status: 1 in service, 0 tripped, sinusoidal
/// transition of width ~pi/(2*sigma*c) around |flow| = c.
/// Requires c^2 > pi/(2*sigma) so the in-service region is nonempty.
double relay_g(double p_ij, double c_ij, double sigma);
/// d(relay_g)/d(flow): zero outside the transition band.
double relay_g_prime(double p_ij, double c_ij, double sigma);
/// Second derivative, needed by the identification Jacobians.
double relay_g_second(double p_ij, double c_ij, double sigma);

double terminal_cost(TerminalCost kind, const Eigen::VectorXd& y);
Eigen::VectorXd terminal_gradient(TerminalCost kind, const Eigen::VectorXd& y);

/// One cascade step: y_next[b] = g(flow_b, c_b) * y[b] + [b == branch] * u.
/// Flows are computed from (y_k, p_k). Pass branch = -1 for no disturbance.
Eigen::VectorXd cascade_step(const GridCase& grid, const Eigen::VectorXd& y_k,
                             const Eigen::VectorXd& p_k, double sigma,
                             int branch = -1, double u = 0.0);

/// Solver strategy for the protection step; throws on hard failure, returns a
/// flagged (certified = false) best iterate on plain non-convergence.
using ProtectionHook = std::function<ProtectionSolution(const ProtectionProblem&)>;

ProtectionHook qp_protection_hook(double tol = 1e-9);
ProtectionHook kkt_protection_hook(double tol = 1e-10, int max_iter = 60);

ProtectionProblem build_protection_problem(const GridCase& grid, const FlowContext& ctx);

struct SimulationConfig {
    RelayConfig relay;
    CostConfig cost;
    int protect_step = 0;  ///< step l at which injections are adjusted; 0 disables protection
};

struct CascadeTrajectory {
    std::vector<Eigen::VectorXd> y_p;      ///< h+1 admittance states, y_p[0] = case susceptances (+u at step 1)
    std::vector<Eigen::VectorXd> p;        ///< injections used at step k (h entries)
    std::vector<Eigen::VectorXd> flows;    ///< branch flows driving step k (h entries)
    std::vector<Eigen::VectorXd> g_values; ///< relay statuses at step k (h entries)
    std::optional<ProtectionSolution> protection;
    bool protection_applied = false;
    bool protection_failed = false;  ///< solver did not certify; non-certified iterates are applied,
                                     ///< hard failures leave injections unchanged
    int protect_step = 0;
    int branch = -1;   ///< disturbed branch index, -1 if none
    double u0 = 0.0;
    double cost = 0.0;      ///< terminal + epsilon * u0^2
    double terminal = 0.0;  ///< terminal cost at y_p[h]
};

/// Run the cascade for config.cost.horizon steps. The disturbance u0 enters
/// only at step 0 on `branch`; at step protect_step the injections are
/// replaced by the hook's solution (before computing that step's flows) and
/// frozen thereafter.
CascadeTrajectory simulate(const GridCase& grid, int branch, double u0,
                           const SimulationConfig& config,
                           const ProtectionHook* hook = nullptr);

/// J = terminal(y_h) + epsilon * u0^2.
double cascade_cost(const CascadeTrajectory& traj, double u0, const CostConfig& config);

/// Checked variant for a full control sequence: throws validation_error if
/// any entry past the first is nonzero (disturbances act only at step 0).
double cascade_cost(const CascadeTrajectory& traj, const std::vector<double>& u_sequence,
                    const CostConfig& config);

/// gamma = J_with / J_zero; throws validation_error when J_zero is 0.
double gamma_index(double j_with_u, double j_zero);

/// Floor applied to derived thresholds so the relay precondition holds for
/// zero-flow branches.
inline constexpr double kThresholdFloor = 0.05;

/// c_b = max(factor * |base flow_b|, floor) for every branch; factor > 1.
GridCase derive_thresholds(const GridCase& grid, double factor, double floor = kThresholdFloor);

}  // namespace cascid
