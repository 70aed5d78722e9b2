#pragma once

// Test-only brute-force oracle for the protection problem: accelerated
// projected gradient ascent on the dual of
//     min ||P - p0||^2  s.t.  A P <= b.
// Entirely independent of the production solver path.

#include <Eigen/Dense>

#include "cascid/protection.hpp"

namespace cascid::testing {

struct OracleResult {
    Eigen::VectorXd p;
    double objective;
    bool feasible;  // primal feasibility of the returned point within 1e-8
};

inline OracleResult qp_oracle(const ProtectionProblem& pb, int max_iter = 400000) {
    const int m = pb.bus_count();

    std::vector<Eigen::VectorXd> rows;
    std::vector<double> rhs;
    for (int i = 0; i < m; ++i) {
        rows.push_back(Eigen::VectorXd::Unit(m, i));
        rhs.push_back(pb.p_max[i]);
        rows.push_back(-Eigen::VectorXd::Unit(m, i));
        rhs.push_back(-pb.p_min[i]);
    }
    for (int b = 0; b < pb.branch_count(); ++b) {
        if (!pb.alive[b]) continue;
        rows.push_back(pb.sensitivity.row(b).transpose());
        rhs.push_back(pb.flow_limits[b]);
        rows.push_back(-pb.sensitivity.row(b).transpose());
        rhs.push_back(pb.flow_limits[b]);
    }
    const int q = static_cast<int>(rows.size());
    Eigen::MatrixXd A(q, m);
    Eigen::VectorXd b(q);
    for (int j = 0; j < q; ++j) {
        A.row(j) = rows[j].transpose();
        b[j] = rhs[j];
    }

    // dual: minimize f(mu) = 1/4 mu' Q mu - d' mu over mu >= 0
    Eigen::MatrixXd Q = A * A.transpose();
    Eigen::VectorXd d = A * pb.p0 - b;
    double L = 0.5 * Q.operatorNorm() + 1e-12;

    Eigen::VectorXd mu = Eigen::VectorXd::Zero(q);
    Eigen::VectorXd yv = mu;
    double t = 1.0;
    double fprev = 0.0;
    for (int it = 0; it < max_iter; ++it) {
        Eigen::VectorXd grad = 0.5 * (Q * yv) - d;
        Eigen::VectorXd mu_next = (yv - grad / L).cwiseMax(0.0);
        double tn = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
        Eigen::VectorXd y_next = mu_next + ((t - 1.0) / tn) * (mu_next - mu);
        double f = 0.25 * mu_next.dot(Q * mu_next) - d.dot(mu_next);
        if (it > 0 && f > fprev) {  // adaptive restart
            y_next = mu_next;
            tn = 1.0;
        }
        double move = (mu_next - mu).cwiseAbs().maxCoeff();
        mu = mu_next;
        yv = y_next;
        t = tn;
        fprev = f;
        if (move < 1e-14 && it > 100) break;
    }

    OracleResult out;
    out.p = pb.p0 - 0.5 * A.transpose() * mu;
    out.objective = (out.p - pb.p0).squaredNorm();
    out.feasible = ((A * out.p - b).maxCoeff() <= 1e-8);
    return out;
}

}  // namespace cascid::testing
