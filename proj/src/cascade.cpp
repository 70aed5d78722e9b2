#include "cascid/cascade.hpp"

#include <cmath>

#include "cascid/errors.hpp"

namespace cascid {

namespace {

constexpr double kPi = 3.14159265358979323846;

void check_band(double c_ij, double sigma) {
    if (!(sigma > 0.0)) throw validation_error("sigma must be positive");
    if (!(c_ij * c_ij > kPi / (2.0 * sigma)))
        throw validation_error("flow threshold too small for sigma: need c^2 > pi/(2*sigma)");
}

}  // namespace

double relay_g(double p_ij, double c_ij, double sigma) {
    check_band(c_ij, sigma);
    const double half_band = kPi / (2.0 * sigma);
    const double gap = p_ij * p_ij - c_ij * c_ij;
    if (gap >= half_band) return 0.0;
    if (gap <= -half_band) return 1.0;
    return 0.5 * (1.0 - std::sin(sigma * gap));
}

double relay_g_prime(double p_ij, double c_ij, double sigma) {
    check_band(c_ij, sigma);
    const double half_band = kPi / (2.0 * sigma);
    const double gap = p_ij * p_ij - c_ij * c_ij;
    if (gap >= half_band || gap <= -half_band) return 0.0;
    return -sigma * p_ij * std::cos(sigma * gap);
}

double relay_g_second(double p_ij, double c_ij, double sigma) {
    check_band(c_ij, sigma);
    const double half_band = kPi / (2.0 * sigma);
    const double gap = p_ij * p_ij - c_ij * c_ij;
    if (gap >= half_band || gap <= -half_band) return 0.0;
    return -sigma * std::cos(sigma * gap) + 2.0 * sigma * sigma * p_ij * p_ij * std::sin(sigma * gap);
}

double terminal_cost(TerminalCost kind, const Eigen::VectorXd& y) {
    switch (kind) {
        case TerminalCost::Quadratic: return 0.5 * y.squaredNorm();
        case TerminalCost::Linear: return y.sum();
    }
    throw validation_error("unknown terminal cost kind");
}

Eigen::VectorXd terminal_gradient(TerminalCost kind, const Eigen::VectorXd& y) {
    switch (kind) {
        case TerminalCost::Quadratic: return y;
        case TerminalCost::Linear: return Eigen::VectorXd::Ones(y.size());
    }
    throw validation_error("unknown terminal cost kind");
}

Eigen::VectorXd cascade_step(const GridCase& grid, const Eigen::VectorXd& y_k,
                             const Eigen::VectorXd& p_k, double sigma, int branch, double u) {
    const Eigen::VectorXd limits = grid.flow_limits();
    FlowContext ctx(grid, y_k);
    Eigen::VectorXd flows = ctx.solve(p_k).branch_flows;
    Eigen::VectorXd next(grid.branch_count());
    for (int b = 0; b < grid.branch_count(); ++b)
        next[b] = relay_g(flows[b], limits[b], sigma) * y_k[b];
    if (branch >= 0) next[branch] += u;
    return next;
}

ProtectionHook qp_protection_hook(double tol) {
    return [tol](const ProtectionProblem& pb) { return solve_protection_qp(pb, tol); };
}

ProtectionHook kkt_protection_hook(double tol, int max_iter) {
    return [tol, max_iter](const ProtectionProblem& pb) {
        return solve_kkt_squared_slack(pb, nullptr, tol, max_iter);
    };
}

ProtectionProblem build_protection_problem(const GridCase& grid, const FlowContext& ctx) {
    ProtectionProblem pb;
    pb.p0 = grid.injections();
    pb.p_min = grid.injection_lower();
    pb.p_max = grid.injection_upper();
    pb.flow_limits = grid.flow_limits();
    pb.y_p_l = ctx.y_p();
    pb.sensitivity = ctx.sensitivity();
    pb.alive = ctx.alive();
    return pb;
}

CascadeTrajectory simulate(const GridCase& grid, int branch, double u0,
                           const SimulationConfig& config, const ProtectionHook* hook) {
    const int h = config.cost.horizon;
    const int l = config.protect_step;
    if (h < 2) throw validation_error("horizon must be at least 2");
    if (l != 0 && (l < 1 || l >= h)) throw validation_error("protection step must satisfy 1 <= l < h");
    if (branch < -1 || branch >= grid.branch_count()) throw validation_error("invalid branch index");
    if (branch < 0 && u0 != 0.0) throw validation_error("disturbance requires a branch");
    if (l != 0 && hook == nullptr) throw validation_error("protection step set but no solver hook given");

    const Eigen::VectorXd limits = grid.flow_limits();
    const double sigma = config.relay.sigma;
    for (int b = 0; b < grid.branch_count(); ++b) check_band(limits[b], sigma);

    CascadeTrajectory traj;
    traj.protect_step = l;
    traj.branch = branch;
    traj.u0 = u0;
    traj.y_p.reserve(h + 1);
    traj.y_p.push_back(grid.susceptances());
    traj.p.reserve(h);
    traj.flows.reserve(h);
    traj.g_values.reserve(h);

    Eigen::VectorXd p_cur = grid.injections();
    for (int k = 0; k < h; ++k) {
        const Eigen::VectorXd& y_k = traj.y_p.back();
        FlowContext ctx(grid, y_k);

        if (l != 0 && k == l) {
            try {
                ProtectionSolution sol = (*hook)(build_protection_problem(grid, ctx));
                if (sol.p_l.allFinite()) {
                    p_cur = sol.p_l;
                    traj.protection_applied = true;
                    traj.protection_failed = !sol.certified;
                    traj.protection = std::move(sol);
                } else {
                    traj.protection_failed = true;
                }
            } catch (const std::exception&) {
                // hard failure: proceed with unadjusted injections
                traj.protection_failed = true;
            }
        }

        Eigen::VectorXd flows = ctx.solve(p_cur).branch_flows;
        Eigen::VectorXd g(grid.branch_count());
        Eigen::VectorXd next(grid.branch_count());
        for (int b = 0; b < grid.branch_count(); ++b) {
            g[b] = relay_g(flows[b], limits[b], sigma);
            next[b] = g[b] * y_k[b];
        }
        if (k == 0 && branch >= 0) next[branch] += u0;

        traj.p.push_back(p_cur);
        traj.flows.push_back(std::move(flows));
        traj.g_values.push_back(std::move(g));
        traj.y_p.push_back(std::move(next));
    }

    traj.terminal = terminal_cost(config.cost.terminal, traj.y_p.back());
    traj.cost = traj.terminal + config.cost.epsilon * u0 * u0;
    return traj;
}

double cascade_cost(const CascadeTrajectory& traj, double u0, const CostConfig& config) {
    return terminal_cost(config.terminal, traj.y_p.back()) + config.epsilon * u0 * u0;
}

double cascade_cost(const CascadeTrajectory& traj, const std::vector<double>& u_sequence,
                    const CostConfig& config) {
    for (std::size_t k = 1; k < u_sequence.size(); ++k)
        if (u_sequence[k] != 0.0)
            throw validation_error("disturbances are restricted to step 0 (nonzero u at step " +
                                   std::to_string(k) + ")");
    const double u0 = u_sequence.empty() ? 0.0 : u_sequence.front();
    return cascade_cost(traj, u0, config);
}

double gamma_index(double j_with_u, double j_zero) {
    if (!(j_zero > 0.0)) throw validation_error("gamma is undefined for a zero baseline cost");
    return j_with_u / j_zero;
}

GridCase derive_thresholds(const GridCase& grid, double factor, double floor) {
    if (!(factor > 1.0)) throw validation_error("threshold factor must exceed 1");
    if (!(floor > 0.0)) throw validation_error("threshold floor must be positive");
    Eigen::VectorXd flows = solve_dc(grid, grid.susceptances(), grid.injections()).branch_flows;
    Eigen::VectorXd limits = (factor * flows.cwiseAbs()).cwiseMax(floor);
    return grid.with_flow_limits(limits);
}

}  // namespace cascid
