#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "cascid/cascade.hpp"

namespace cascid {

enum class JacobianMode {
    Analytic,    ///< reduced-inverse differentiation (default)
    FiniteDiff,  ///< central differences with sigma-aware steps (cross-check)
};

/// Multi-start policy for the necessary-condition solver. The disturbance box
/// defaults to [-y0(branch), 0]: disturbances weaken or sever, never
/// strengthen; widen_box extends it to [-y0, +y0].
struct MultiStartConfig {
    int restarts = 10;
    bool widen_box = false;
    std::uint64_t rng_seed = 0;
    double newton_tol = 1e-10;
    int newton_max_iter = 60;
    double polish_tol = 1e-9;    ///< on the scalar stationarity value
    int polish_max_iter = 40;
    int oracle_grid_points = 400;
    JacobianMode jacobian_mode = JacobianMode::Analytic;
    bool literal_product_form = false;  ///< evaluate the control term as an explicit
                                        ///< transition-matrix product instead of the
                                        ///< adjoint sweep (same value, kept for checks)
};

/// Cascade + protection solver knobs shared by every branch of a sweep.
struct IdentifySetup {
    SimulationConfig sim;
    double kkt_tol = 1e-10;  ///< protection equation path (used when sim.protect_step > 0)
    int kkt_max_iter = 60;
    double qp_tol = 1e-9;    ///< protection QP path (oracle side)
};

/// n x n transition Jacobian d y_next / d y of the map
/// y -> G(flows(y, p)) .* y at fixed injections.
Eigen::MatrixXd state_jacobian(const GridCase& grid, const Eigen::VectorXd& y_k,
                               const Eigen::VectorXd& p_k, double sigma,
                               JacobianMode mode = JacobianMode::Analytic);

/// Adjoint quantities along a trajectory: per-step transition Jacobians and
/// the backward costate recursion lambda_k = J_k^T lambda_{k+1} with
/// lambda_h = grad terminal(y_h). Injections are treated as fixed data per
/// step; the recursion does not differentiate through the protection solve.
struct CostateTrajectory {
    std::vector<Eigen::MatrixXd> jacobians;  ///< J_k for k = 1..h-1
    std::vector<Eigen::VectorXd> lambdas;    ///< lambda_1..lambda_h
};

CostateTrajectory costate_sweep(const GridCase& grid, const CascadeTrajectory& traj,
                                const SimulationConfig& config,
                                JacobianMode mode = JacobianMode::Analytic);

/// Stationarity relation for the step-0 disturbance: u0 = -lambda_1(branch)/(2 epsilon).
double control_from_costate(const CostateTrajectory& costate, int branch, double epsilon);

struct IdentificationResult {
    int branch = -1;  ///< branch index into the case
    double u0 = 0.0;
    double cost_j = 0.0;
    double gamma = 1.0;
    double stationarity_residual = 0.0;  ///< |2 eps u0 + lambda_1(branch)| on the final trajectory
    double integrated_residual = 0.0;    ///< max-norm of the stacked necessary-condition system
    int restarts_used = 0;               ///< converged restarts that fed the best-of selection
    bool converged = false;              ///< at least one restart reached a polished root
    enum class Method { Newton, Oracle } method = Method::Newton;
    bool protection_enabled = false;
    bool protection_failed = false;  ///< final trajectory carried a non-certified or failed adjustment
    double wall_ms = 0.0;            ///< filled only when timing is requested
};

/// Stacked necessary-condition residual evaluated on the forward simulation at
/// a given disturbance: h state-equation blocks (with the step-0 control term
/// eliminated through the costate) followed, when protection is on, by the
/// 7m+6n protection-equation block. Diagnostic surface for tests and reports.
Eigen::VectorXd integrated_residual_at(const GridCase& grid, int branch, double u0,
                                       const IdentifySetup& setup,
                                       const MultiStartConfig& config);

/// Multi-start damped Newton on the integrated system over the trajectory
/// unknowns (plus the protection-equation unknowns when enabled). Falls back
/// to the shooting oracle when no restart converges.
IdentificationResult solve_integrated_system(const GridCase& grid, int branch,
                                             const IdentifySetup& setup,
                                             const MultiStartConfig& config);

/// Brute-force validator: grid scan of J(u0) over the disturbance box by full
/// forward simulation (protection via the QP path), refined around the best
/// point by golden-section search.
IdentificationResult shooting_oracle(const GridCase& grid, int branch,
                                     const IdentifySetup& setup,
                                     const MultiStartConfig& config);

/// Per-branch identification over all branches, parallel across a worker
/// pool; deterministic for a fixed rng_seed regardless of thread count.
/// Results are ordered by branch index.
std::vector<IdentificationResult> sweep_all_branches(const GridCase& grid,
                                                     const IdentifySetup& setup,
                                                     const MultiStartConfig& config,
                                                     bool use_oracle = false,
                                                     int threads = 0,
                                                     bool timing = false);

/// Baseline cost J(u0 = 0); the gamma denominator.
double baseline_cost(const GridCase& grid, const IdentifySetup& setup);

}  // namespace cascid
