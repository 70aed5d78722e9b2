#include "cascid/csv.hpp"

#include <cstdio>

namespace cascid {

std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

void write_metadata(std::ostream& out, const Metadata& meta) {
    for (const auto& [key, value] : meta) out << "# " << key << "=" << value << "\n";
}

void write_trajectory_csv(std::ostream& out, const GridCase& grid, const CascadeTrajectory& traj,
                          const Metadata& meta) {
    write_metadata(out, meta);
    out << "step,branch_id,y_p,flow,g\n";
    const int h = static_cast<int>(traj.y_p.size()) - 1;
    for (int k = 0; k <= h; ++k) {
        for (int b = 0; b < grid.branch_count(); ++b) {
            out << k << ',' << grid.branch(b).id << ',' << format_double(traj.y_p[k][b]) << ',';
            if (k < h)
                out << format_double(traj.flows[k][b]) << ',' << format_double(traj.g_values[k][b]);
            else
                out << ',';
            out << "\n";
        }
    }
}

void write_protection_csv(std::ostream& out, const GridCase& grid, const ProtectionProblem& problem,
                          const ProtectionSolution& solution, const Metadata& meta) {
    write_metadata(out, meta);
    out << "kind,id,p0,p_l,mu_upper,mu_lower,flow,limit,lambda_upper,lambda_lower\n";
    for (int i = 0; i < grid.bus_count(); ++i) {
        out << "bus," << grid.bus(i).id << ',' << format_double(problem.p0[i]) << ','
            << format_double(solution.p_l[i]) << ',' << format_double(solution.mu_upper[i]) << ','
            << format_double(solution.mu_lower[i]) << ",,,,\n";
    }
    Eigen::VectorXd flow = problem.flows(solution.p_l);
    for (int b = 0; b < grid.branch_count(); ++b) {
        out << "branch," << grid.branch(b).id << ",,,,," << format_double(flow[b]) << ','
            << format_double(problem.flow_limits[b]) << ',' << format_double(solution.lambda_upper[b])
            << ',' << format_double(solution.lambda_lower[b]) << "\n";
    }
}

void write_results_csv(std::ostream& out, const GridCase& grid,
                       const std::vector<IdentificationResult>& rows, const Metadata& meta) {
    write_metadata(out, meta);
    out << "branch_id,u0,abs_u0,J,gamma,stationarity_residual,integrated_residual,method,"
           "protection_enabled,protection_failed,restarts_used,wall_ms\n";
    for (const IdentificationResult& r : rows) {
        out << grid.branch(r.branch).id << ',' << format_double(r.u0) << ','
            << format_double(std::abs(r.u0)) << ',' << format_double(r.cost_j) << ','
            << format_double(r.gamma) << ',' << format_double(r.stationarity_residual) << ','
            << format_double(r.integrated_residual) << ','
            << (r.method == IdentificationResult::Method::Newton ? "newton" : "oracle") << ','
            << (r.protection_enabled ? 1 : 0) << ',' << (r.protection_failed ? 1 : 0) << ','
            << r.restarts_used << ',' << format_double(r.wall_ms) << "\n";
    }
}

}  // namespace cascid
