#include "cascid/protection.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "cascid/errors.hpp"

namespace cascid {

namespace {

Eigen::VectorXd sqrt_abs(const Eigen::VectorXd& v) {
    return v.array().abs().sqrt().matrix();
}

struct NnlsResult {
    Eigen::VectorXd x;
    bool converged = false;
    int iterations = 0;
};

// Lawson-Hanson nonnegative least squares: min ||E x - f||, x >= 0.
// Finite termination on exact arithmetic; iteration caps guard roundoff.
NnlsResult nnls(const Eigen::MatrixXd& E, const Eigen::VectorXd& f, int max_outer) {
    const int q = static_cast<int>(E.cols());
    NnlsResult res;
    res.x = Eigen::VectorXd::Zero(q);
    std::vector<char> passive(q, 0);
    std::vector<int> pset;

    const double wscale = std::max(1.0, (E.transpose() * f).cwiseAbs().maxCoeff());
    const double wtol = 1e-12 * wscale;

    auto solve_passive = [&](Eigen::VectorXd& s) {
        Eigen::MatrixXd Ep(E.rows(), pset.size());
        for (std::size_t k = 0; k < pset.size(); ++k) Ep.col(k) = E.col(pset[k]);
        s = Ep.colPivHouseholderQr().solve(f);
    };

    while (true) {
        Eigen::VectorXd w = E.transpose() * (f - E * res.x);
        int jbest = -1;
        double wbest = wtol;
        for (int j = 0; j < q; ++j)
            if (!passive[j] && w[j] > wbest) {
                wbest = w[j];
                jbest = j;
            }
        if (jbest < 0) {
            res.converged = true;
            break;
        }
        if (++res.iterations > max_outer) break;
        passive[jbest] = 1;
        pset.push_back(jbest);

        for (int inner = 0; inner <= q + 1; ++inner) {
            Eigen::VectorXd s;
            solve_passive(s);
            bool all_positive = true;
            for (int k = 0; k < s.size(); ++k)
                if (s[k] <= 0.0) {
                    all_positive = false;
                    break;
                }
            if (all_positive) {
                res.x.setZero();
                for (std::size_t k = 0; k < pset.size(); ++k) res.x[pset[k]] = s[k];
                break;
            }
            double alpha = 1.0;
            for (std::size_t k = 0; k < pset.size(); ++k) {
                if (s[k] <= 0.0) {
                    double xk = res.x[pset[k]];
                    double denom = xk - s[k];
                    if (denom > 0.0) alpha = std::min(alpha, xk / denom);
                }
            }
            for (std::size_t k = 0; k < pset.size(); ++k)
                res.x[pset[k]] += alpha * (s[k] - res.x[pset[k]]);
            std::vector<int> keep;
            for (int j : pset) {
                if (res.x[j] > 1e-13) {
                    keep.push_back(j);
                } else {
                    res.x[j] = 0.0;
                    passive[j] = 0;
                }
            }
            pset = std::move(keep);
            if (pset.empty()) break;
        }
    }
    return res;
}

enum class ConstraintKind { BoundUpper, BoundLower, FlowUpper, FlowLower };

struct ConstraintRef {
    ConstraintKind kind;
    int index;  // bus or branch index
};

}  // namespace

void ProtectionProblem::validate() const {
    const int m = bus_count();
    const int n = branch_count();
    if (p_min.size() != m || p_max.size() != m) throw validation_error("bound vector length mismatch");
    if (y_p_l.size() != n) throw validation_error("admittance vector length mismatch");
    if (sensitivity.rows() != n || sensitivity.cols() != m)
        throw validation_error("sensitivity matrix shape mismatch");
    if (static_cast<int>(alive.size()) != n) throw validation_error("alive mask length mismatch");
    if (((p_max - p_min).array() < 0.0).any()) throw validation_error("p_min exceeds p_max");
    if (((p0 - p_min).array() < -1e-12).any() || ((p_max - p0).array() < -1e-12).any())
        throw validation_error("p0 outside [p_min, p_max]");
    if ((flow_limits.array() <= 0.0).any()) throw validation_error("flow limits must be positive");
}

Eigen::VectorXd assemble_kkt(const ProtectionProblem& pb, const ProtectionSolution& c) {
    const int m = pb.bus_count();
    const int n = pb.branch_count();
    Eigen::VectorXd flow = pb.flows(c.p_l);
    Eigen::VectorXd r(7 * m + 6 * n);

    r.segment(0, m) = 2.0 * (c.p_l - pb.p0) + c.mu_upper - c.mu_lower +
                      pb.sensitivity.transpose() * (c.lambda_upper - c.lambda_lower);
    r.segment(m, m) = c.p_l - pb.p_max + c.slack_x_upper.cwiseProduct(c.slack_x_upper);
    r.segment(2 * m, m) = pb.p_min - c.p_l + c.slack_x_lower.cwiseProduct(c.slack_x_lower);
    r.segment(3 * m, n) = flow - pb.flow_limits + c.slack_y_upper.cwiseProduct(c.slack_y_upper);
    r.segment(3 * m + n, n) = flow + pb.flow_limits - c.slack_y_lower.cwiseProduct(c.slack_y_lower);
    r.segment(3 * m + 2 * n, m) = c.mu_upper.cwiseProduct(c.p_l - pb.p_max);
    r.segment(4 * m + 2 * n, m) = c.mu_lower.cwiseProduct(c.p_l - pb.p_min);
    r.segment(5 * m + 2 * n, n) = (flow - pb.flow_limits).cwiseProduct(c.lambda_upper);
    r.segment(5 * m + 3 * n, n) = (flow + pb.flow_limits).cwiseProduct(c.lambda_lower);
    r.segment(5 * m + 4 * n, m) = c.mu_upper - c.slack_z_upper.cwiseProduct(c.slack_z_upper);
    r.segment(6 * m + 4 * n, m) = c.mu_lower - c.slack_z_lower.cwiseProduct(c.slack_z_lower);
    r.segment(7 * m + 4 * n, n) = c.lambda_upper - c.slack_w_upper.cwiseProduct(c.slack_w_upper);
    r.segment(7 * m + 5 * n, n) = c.lambda_lower - c.slack_w_lower.cwiseProduct(c.slack_w_lower);
    return r;
}

namespace {

// Fills the derived slack fields from primal/dual values, recomputes the
// residual norm and objective.
void finish_solution(const ProtectionProblem& pb, ProtectionSolution& s, double tol, bool converged) {
    Eigen::VectorXd flow = pb.flows(s.p_l);
    s.slack_x_upper = sqrt_abs(pb.p_max - s.p_l).cwiseMax(0.0);
    s.slack_x_lower = sqrt_abs(s.p_l - pb.p_min).cwiseMax(0.0);
    s.slack_y_upper = sqrt_abs(pb.flow_limits - flow);
    s.slack_y_lower = sqrt_abs(flow + pb.flow_limits);
    s.slack_z_upper = sqrt_abs(s.mu_upper);
    s.slack_z_lower = sqrt_abs(s.mu_lower);
    s.slack_w_upper = sqrt_abs(s.lambda_upper);
    s.slack_w_lower = sqrt_abs(s.lambda_lower);
    // squared slacks must close the primal equations exactly where feasible;
    // clip the tiny negative gaps roundoff produces
    for (int i = 0; i < pb.bus_count(); ++i) {
        if (pb.p_max[i] - s.p_l[i] < 0.0) s.slack_x_upper[i] = 0.0;
        if (s.p_l[i] - pb.p_min[i] < 0.0) s.slack_x_lower[i] = 0.0;
    }
    for (int b = 0; b < pb.branch_count(); ++b) {
        if (pb.flow_limits[b] - flow[b] < 0.0) s.slack_y_upper[b] = 0.0;
        if (flow[b] + pb.flow_limits[b] < 0.0) s.slack_y_lower[b] = 0.0;
    }
    s.objective = (s.p_l - pb.p0).squaredNorm();
    s.kkt_residual = assemble_kkt(pb, s).cwiseAbs().maxCoeff();
    s.certified = converged && s.kkt_residual <= tol;
}

}  // namespace

ProtectionSolution solve_protection_qp(const ProtectionProblem& pb, double tol) {
    pb.validate();
    const int m = pb.bus_count();
    const int n = pb.branch_count();

    std::vector<ConstraintRef> refs;
    std::vector<Eigen::VectorXd> rows;
    std::vector<double> rhs;
    for (int i = 0; i < m; ++i) {
        refs.push_back({ConstraintKind::BoundUpper, i});
        rows.push_back(Eigen::VectorXd::Unit(m, i));
        rhs.push_back(pb.p_max[i]);
    }
    for (int i = 0; i < m; ++i) {
        refs.push_back({ConstraintKind::BoundLower, i});
        rows.push_back(-Eigen::VectorXd::Unit(m, i));
        rhs.push_back(-pb.p_min[i]);
    }
    for (int b = 0; b < n; ++b) {
        if (!pb.alive[b]) continue;
        refs.push_back({ConstraintKind::FlowUpper, b});
        rows.push_back(pb.sensitivity.row(b).transpose());
        rhs.push_back(pb.flow_limits[b]);
        refs.push_back({ConstraintKind::FlowLower, b});
        rows.push_back(-pb.sensitivity.row(b).transpose());
        rhs.push_back(pb.flow_limits[b]);
    }
    const int q = static_cast<int>(refs.size());

    // Least-distance problem in z = P - p0:  min ||z||  s.t.  -A z >= A p0 - b.
    // Reduced to NNLS on E = [(-A)^T ; h^T], f = e_{m+1}.
    Eigen::MatrixXd E(m + 1, q);
    for (int j = 0; j < q; ++j) {
        E.col(j).head(m) = -rows[j];
        E(m, j) = rows[j].dot(pb.p0) - rhs[j];
    }
    Eigen::VectorXd f = Eigen::VectorXd::Zero(m + 1);
    f[m] = 1.0;

    NnlsResult nn = nnls(E, f, 3 * q + 30);
    Eigen::VectorXd r = E * nn.x - f;

    if (r.norm() <= 1e-10) {
        std::ostringstream msg;
        msg << "protection constraints are infeasible; Farkas certificate weights:";
        for (int j = 0; j < q; ++j) {
            if (nn.x[j] <= 1e-12) continue;
            const char* kind = refs[j].kind == ConstraintKind::BoundUpper   ? "bound_upper"
                               : refs[j].kind == ConstraintKind::BoundLower ? "bound_lower"
                               : refs[j].kind == ConstraintKind::FlowUpper  ? "flow_upper"
                                                                            : "flow_lower";
            msg << ' ' << kind << '[' << refs[j].index << "]=" << nn.x[j];
        }
        throw infeasible_error(msg.str());
    }

    ProtectionSolution sol;
    sol.p_l = pb.p0 - r.head(m) / r[m];
    Eigen::VectorXd mu = -2.0 * nn.x / r[m];
    sol.mu_upper = Eigen::VectorXd::Zero(m);
    sol.mu_lower = Eigen::VectorXd::Zero(m);
    sol.lambda_upper = Eigen::VectorXd::Zero(n);
    sol.lambda_lower = Eigen::VectorXd::Zero(n);
    for (int j = 0; j < q; ++j) {
        switch (refs[j].kind) {
            case ConstraintKind::BoundUpper: sol.mu_upper[refs[j].index] = mu[j]; break;
            case ConstraintKind::BoundLower: sol.mu_lower[refs[j].index] = mu[j]; break;
            case ConstraintKind::FlowUpper: sol.lambda_upper[refs[j].index] = mu[j]; break;
            case ConstraintKind::FlowLower: sol.lambda_lower[refs[j].index] = mu[j]; break;
        }
    }
    sol.iterations = nn.iterations;
    finish_solution(pb, sol, tol, nn.converged);
    return sol;
}

ProtectionSolution kkt_initial_guess(const ProtectionProblem& pb) {
    const int m = pb.bus_count();
    const int n = pb.branch_count();
    ProtectionSolution s;
    s.p_l = pb.p0;
    s.mu_upper = Eigen::VectorXd::Zero(m);
    s.mu_lower = Eigen::VectorXd::Zero(m);
    s.lambda_upper = Eigen::VectorXd::Zero(n);
    s.lambda_lower = Eigen::VectorXd::Zero(n);
    Eigen::VectorXd flow = pb.flows(pb.p0);
    s.slack_x_upper = sqrt_abs(pb.p_max - pb.p0);
    s.slack_x_lower = sqrt_abs(pb.p0 - pb.p_min);
    s.slack_y_upper = sqrt_abs(pb.flow_limits - flow);
    s.slack_y_lower = sqrt_abs(flow + pb.flow_limits);
    s.slack_z_upper = Eigen::VectorXd::Zero(m);
    s.slack_z_lower = Eigen::VectorXd::Zero(m);
    s.slack_w_upper = Eigen::VectorXd::Zero(n);
    s.slack_w_lower = Eigen::VectorXd::Zero(n);
    return s;
}

Eigen::VectorXd kkt_pack(const KktLayout& L, const ProtectionSolution& s) {
    Eigen::VectorXd v(L.size());
    v.segment(L.p(), L.m) = s.p_l;
    v.segment(L.mu_u(), L.m) = s.mu_upper;
    v.segment(L.mu_l(), L.m) = s.mu_lower;
    v.segment(L.lam_u(), L.n) = s.lambda_upper;
    v.segment(L.lam_l(), L.n) = s.lambda_lower;
    v.segment(L.x_u(), L.m) = s.slack_x_upper;
    v.segment(L.x_l(), L.m) = s.slack_x_lower;
    v.segment(L.y_u(), L.n) = s.slack_y_upper;
    v.segment(L.y_l(), L.n) = s.slack_y_lower;
    v.segment(L.z_u(), L.m) = s.slack_z_upper;
    v.segment(L.z_l(), L.m) = s.slack_z_lower;
    v.segment(L.w_u(), L.n) = s.slack_w_upper;
    v.segment(L.w_l(), L.n) = s.slack_w_lower;
    return v;
}

ProtectionSolution kkt_unpack(const KktLayout& L, const Eigen::VectorXd& v) {
    ProtectionSolution s;
    s.p_l = v.segment(L.p(), L.m);
    s.mu_upper = v.segment(L.mu_u(), L.m);
    s.mu_lower = v.segment(L.mu_l(), L.m);
    s.lambda_upper = v.segment(L.lam_u(), L.n);
    s.lambda_lower = v.segment(L.lam_l(), L.n);
    s.slack_x_upper = v.segment(L.x_u(), L.m);
    s.slack_x_lower = v.segment(L.x_l(), L.m);
    s.slack_y_upper = v.segment(L.y_u(), L.n);
    s.slack_y_lower = v.segment(L.y_l(), L.n);
    s.slack_z_upper = v.segment(L.z_u(), L.m);
    s.slack_z_lower = v.segment(L.z_l(), L.m);
    s.slack_w_upper = v.segment(L.w_u(), L.n);
    s.slack_w_lower = v.segment(L.w_l(), L.n);
    return s;
}

Eigen::MatrixXd kkt_jacobian(const ProtectionProblem& pb, const ProtectionSolution& s) {
    // Block derivatives of assemble_kkt in the kkt_pack ordering.
    const KktLayout L{pb.bus_count(), pb.branch_count()};
    const int m = L.m;
    const int n = L.n;
    const Eigen::MatrixXd& S = pb.sensitivity;
    Eigen::VectorXd flow = pb.flows(s.p_l);
    Eigen::MatrixXd J = Eigen::MatrixXd::Zero(L.size(), L.size());

    auto I_m = Eigen::MatrixXd::Identity(m, m);

    // stationarity
    J.block(0, L.p(), m, m) = 2.0 * I_m;
    J.block(0, L.mu_u(), m, m) = I_m;
    J.block(0, L.mu_l(), m, m) = -I_m;
    J.block(0, L.lam_u(), m, n) = S.transpose();
    J.block(0, L.lam_l(), m, n) = -S.transpose();
    // primal feasibility
    J.block(m, L.p(), m, m) = I_m;
    J.block(m, L.x_u(), m, m) = (2.0 * s.slack_x_upper).asDiagonal();
    J.block(2 * m, L.p(), m, m) = -I_m;
    J.block(2 * m, L.x_l(), m, m) = (2.0 * s.slack_x_lower).asDiagonal();
    J.block(3 * m, L.p(), n, m) = S;
    J.block(3 * m, L.y_u(), n, n) = (2.0 * s.slack_y_upper).asDiagonal();
    J.block(3 * m + n, L.p(), n, m) = S;
    J.block(3 * m + n, L.y_l(), n, n) = (-2.0 * s.slack_y_lower).asDiagonal();
    // complementary slackness
    J.block(3 * m + 2 * n, L.p(), m, m) = s.mu_upper.asDiagonal();
    J.block(3 * m + 2 * n, L.mu_u(), m, m) = (s.p_l - pb.p_max).asDiagonal();
    J.block(4 * m + 2 * n, L.p(), m, m) = s.mu_lower.asDiagonal();
    J.block(4 * m + 2 * n, L.mu_l(), m, m) = (s.p_l - pb.p_min).asDiagonal();
    J.block(5 * m + 2 * n, L.p(), n, m) = s.lambda_upper.asDiagonal() * S;
    J.block(5 * m + 2 * n, L.lam_u(), n, n) = (flow - pb.flow_limits).asDiagonal();
    J.block(5 * m + 3 * n, L.p(), n, m) = s.lambda_lower.asDiagonal() * S;
    J.block(5 * m + 3 * n, L.lam_l(), n, n) = (flow + pb.flow_limits).asDiagonal();
    // dual feasibility
    J.block(5 * m + 4 * n, L.mu_u(), m, m) = I_m;
    J.block(5 * m + 4 * n, L.z_u(), m, m) = (-2.0 * s.slack_z_upper).asDiagonal();
    J.block(6 * m + 4 * n, L.mu_l(), m, m) = I_m;
    J.block(6 * m + 4 * n, L.z_l(), m, m) = (-2.0 * s.slack_z_lower).asDiagonal();
    J.block(7 * m + 4 * n, L.lam_u(), n, n) = Eigen::MatrixXd::Identity(n, n);
    J.block(7 * m + 4 * n, L.w_u(), n, n) = (-2.0 * s.slack_w_upper).asDiagonal();
    J.block(7 * m + 5 * n, L.lam_l(), n, n) = Eigen::MatrixXd::Identity(n, n);
    J.block(7 * m + 5 * n, L.w_l(), n, n) = (-2.0 * s.slack_w_lower).asDiagonal();
    return J;
}

namespace {

struct KktRun {
    Eigen::VectorXd v;
    double residual_inf = 0.0;
    int iterations = 0;
    bool converged = false;
};

// Damped Newton on the squared-slack system from one starting point.
// Minimum-norm least-squares steps cover the structural rank deficiency
// (a vanished multiplier together with its slack zeroes a Jacobian column);
// a short Levenberg-Marquardt fallback handles rejected steps.
KktRun kkt_newton(const ProtectionProblem& pb, const KktLayout& L, Eigen::VectorXd v,
                  double tol, int max_iter) {
    Eigen::VectorXd r = assemble_kkt(pb, kkt_unpack(L, v));
    double rnorm2 = r.squaredNorm();

    KktRun run;
    run.v = v;
    run.residual_inf = r.cwiseAbs().maxCoeff();
    run.converged = run.residual_inf <= tol;

    for (int it = 0; it < max_iter && !run.converged; ++it) {
        run.iterations = it + 1;
        Eigen::MatrixXd J = kkt_jacobian(pb, kkt_unpack(L, v));
        Eigen::VectorXd dv = J.completeOrthogonalDecomposition().solve(-r);

        bool accepted = false;
        if (dv.allFinite()) {
            double alpha = 1.0;
            for (int half = 0; half <= 30; ++half) {
                Eigen::VectorXd trial = v + alpha * dv;
                Eigen::VectorXd rt = assemble_kkt(pb, kkt_unpack(L, trial));
                if (rt.allFinite() && rt.squaredNorm() < rnorm2) {
                    v = trial;
                    r = rt;
                    rnorm2 = rt.squaredNorm();
                    accepted = true;
                    break;
                }
                alpha *= 0.5;
            }
        }
        if (!accepted) {
            Eigen::MatrixXd JtJ = J.transpose() * J;
            Eigen::VectorXd g = J.transpose() * r;
            double damping = 1e-6;
            for (int tries = 0; tries < 8; ++tries) {
                Eigen::MatrixXd A = JtJ;
                A.diagonal().array() += damping * (1.0 + JtJ.diagonal().array());
                Eigen::VectorXd dlm = Eigen::LLT<Eigen::MatrixXd>(A).solve(-g);
                if (dlm.allFinite()) {
                    Eigen::VectorXd trial = v + dlm;
                    Eigen::VectorXd rt = assemble_kkt(pb, kkt_unpack(L, trial));
                    if (rt.allFinite() && rt.squaredNorm() < rnorm2) {
                        v = trial;
                        r = rt;
                        rnorm2 = rt.squaredNorm();
                        accepted = true;
                        break;
                    }
                }
                damping *= 30.0;
            }
        }
        if (!accepted) break;

        double rinf = r.cwiseAbs().maxCoeff();
        if (rinf < run.residual_inf) {
            run.residual_inf = rinf;
            run.v = v;
        }
        run.converged = rinf <= tol;
    }
    return run;
}

}  // namespace

// Central-path globalization. The damped Newton of kkt_newton cannot leave
// the cold start whenever a constraint must activate (the corresponding dual
// slack column is zero), so we trace the relaxed system
//     stationarity = 0,   nu_j * g_j = -tau   (constraints written g_j <= 0)
// from a large tau down to ~0 in the natural (P, multiplier) variables where
// the slacks eliminate exactly, then hand the completed squared-slack point
// back to kkt_newton for certification on the true system.
namespace {

struct PathConstraint {
    Eigen::VectorXd grad;  // of g_j with respect to P
    double offset;         // g_j(P) = grad . P + offset
    int slot;              // index into the multiplier blocks
    int block;             // 0 mu_u, 1 mu_l, 2 lam_u, 3 lam_l
};

bool central_path_start(const ProtectionProblem& pb, ProtectionSolution& out, double tol) {
    const int m = pb.bus_count();
    const int n = pb.branch_count();

    // movable buses only; pinned injections (p_min == p_max) have no interior
    std::vector<int> movable;
    for (int i = 0; i < m; ++i)
        if (pb.p_max[i] - pb.p_min[i] > 1e-12) movable.push_back(i);
    const int mv = static_cast<int>(movable.size());
    std::vector<int> col_of(m, -1);
    for (int k = 0; k < mv; ++k) col_of[movable[k]] = k;

    std::vector<PathConstraint> cons;
    for (int k = 0; k < mv; ++k) {
        int i = movable[k];
        Eigen::VectorXd e = Eigen::VectorXd::Unit(mv, k);
        cons.push_back({e, -pb.p_max[i], i, 0});
        cons.push_back({-e, pb.p_min[i], i, 1});
    }
    for (int b = 0; b < n; ++b) {
        if (!pb.alive[b]) continue;
        Eigen::VectorXd s(mv);
        double fixed = 0.0;
        for (int i = 0; i < m; ++i) {
            if (col_of[i] >= 0)
                s[col_of[i]] = pb.sensitivity(b, i);
            else
                fixed += pb.sensitivity(b, i) * pb.p0[i];
        }
        cons.push_back({s, fixed - pb.flow_limits[b], b, 2});
        cons.push_back({-s, -fixed - pb.flow_limits[b], b, 3});
    }
    const int q = static_cast<int>(cons.size());
    if (q == 0) return false;

    auto gap = [&](const Eigen::VectorXd& xx, const PathConstraint& c) { return c.grad.dot(xx) + c.offset; };

    Eigen::VectorXd p0v(mv);
    for (int k = 0; k < mv; ++k) p0v[k] = pb.p0[movable[k]];

    // infeasible start: explicit slacks sv = -g kept positive; primal starts at p0
    Eigen::VectorXd x = p0v;
    double tau = 1.0;
    Eigen::VectorXd sv(q), nu(q);
    for (int j = 0; j < q; ++j) {
        sv[j] = std::max(0.5, -gap(x, cons[j]) * 1.1);
        nu[j] = tau / sv[j];
    }

    // residual blocks: stationarity (mv), nu.s - tau (q), s + g(x) (q)
    auto residual = [&](const Eigen::VectorXd& xx, const Eigen::VectorXd& nn,
                        const Eigen::VectorXd& ss, double tt) {
        Eigen::VectorXd r(mv + 2 * q);
        Eigen::VectorXd stat = 2.0 * (xx - p0v);
        for (int j = 0; j < q; ++j) stat += nn[j] * cons[j].grad;
        r.head(mv) = stat;
        for (int j = 0; j < q; ++j) {
            r[mv + j] = nn[j] * ss[j] - tt;
            r[mv + q + j] = ss[j] + gap(xx, cons[j]);
        }
        return r;
    };

    while (tau > 3e-15) {
        tau *= 0.12;
        for (int it = 0; it < 30; ++it) {
            Eigen::VectorXd r = residual(x, nu, sv, tau);
            if (r.cwiseAbs().maxCoeff() <= std::max(1e-13, 1e-2 * tau)) break;
            // condensed Newton step: eliminate ds_j = -r_p_j - grad_j.dx and
            // dnu_j = (-r_c_j + nu_j r_p_j)/s_j + (nu_j/s_j) grad_j.dx, leaving
            //   [2I + sum (nu_j/s_j) grad_j grad_j^T] dx
            //       = -r_stat + sum ((r_c_j - nu_j r_p_j)/s_j) grad_j
            Eigen::MatrixXd M = 2.0 * Eigen::MatrixXd::Identity(mv, mv);
            Eigen::VectorXd rhs = -r.head(mv);
            for (int j = 0; j < q; ++j) {
                double rc = r[mv + j];
                double rp = r[mv + q + j];
                M.noalias() += (nu[j] / sv[j]) * cons[j].grad * cons[j].grad.transpose();
                rhs += ((rc - nu[j] * rp) / sv[j]) * cons[j].grad;
            }
            Eigen::LLT<Eigen::MatrixXd> llt(M);
            if (llt.info() != Eigen::Success) return false;
            Eigen::VectorXd dx = llt.solve(rhs);
            Eigen::VectorXd ds(q), dnu(q);
            for (int j = 0; j < q; ++j) {
                double rp = r[mv + q + j];
                double rc = r[mv + j];
                ds[j] = -rp - cons[j].grad.dot(dx);
                dnu[j] = (-rc - nu[j] * ds[j]) / sv[j];
            }
            // fraction to boundary on s and nu
            double alpha = 1.0;
            for (int j = 0; j < q; ++j) {
                if (ds[j] < 0.0) alpha = std::min(alpha, 0.95 * sv[j] / (-ds[j]));
                if (dnu[j] < 0.0) alpha = std::min(alpha, 0.95 * nu[j] / (-dnu[j]));
            }
            double base = r.squaredNorm();
            bool ok = false;
            for (int half = 0; half < 25; ++half) {
                Eigen::VectorXd xt = x + alpha * dx;
                Eigen::VectorXd st = sv + alpha * ds;
                Eigen::VectorXd nt = nu + alpha * dnu;
                Eigen::VectorXd rt = residual(xt, nt, st, tau);
                if (rt.allFinite() && rt.squaredNorm() < base) {
                    x = xt;
                    sv = st;
                    nu = nt;
                    ok = true;
                    break;
                }
                alpha *= 0.5;
            }
            if (!ok) break;
        }
        if (!x.allFinite() || !nu.allFinite()) return false;
    }

    // expand to the full variable set and complete the squared slacks
    out = kkt_initial_guess(pb);
    for (int k = 0; k < mv; ++k) out.p_l[movable[k]] = x[k];
    out.mu_upper.setZero();
    out.mu_lower.setZero();
    out.lambda_upper.setZero();
    out.lambda_lower.setZero();
    for (int j = 0; j < q; ++j) {
        switch (cons[j].block) {
            case 0: out.mu_upper[cons[j].slot] = nu[j]; break;
            case 1: out.mu_lower[cons[j].slot] = nu[j]; break;
            case 2: out.lambda_upper[cons[j].slot] = nu[j]; break;
            case 3: out.lambda_lower[cons[j].slot] = nu[j]; break;
        }
    }
    // pinned buses: resolve their bound multipliers from stationarity
    Eigen::VectorXd stat_rest = 2.0 * (out.p_l - pb.p0) +
                                pb.sensitivity.transpose() * (out.lambda_upper - out.lambda_lower);
    for (int i = 0; i < m; ++i) {
        if (pb.p_max[i] - pb.p_min[i] > 1e-12) continue;
        double t = stat_rest[i];
        out.mu_upper[i] = std::max(0.0, -t);
        out.mu_lower[i] = std::max(0.0, t);
    }
    finish_solution(pb, out, tol, true);
    return out.p_l.allFinite();
}

}  // namespace

ProtectionSolution solve_kkt_squared_slack(const ProtectionProblem& pb,
                                           const ProtectionSolution* initial_guess,
                                           double tol,
                                           int max_iter) {
    pb.validate();
    const KktLayout L{pb.bus_count(), pb.branch_count()};

    // The consistent cold start first (or the caller's warm start). On its
    // own it only reaches roots with an empty active set: activating any
    // inequality means escaping a rank-deficient column, which the damped
    // iteration cannot do. The central-path pass covers exactly that case,
    // and a flow-infeasible p0 goes straight there.
    Eigen::VectorXd flow0 = pb.flows(pb.p0);
    bool p0_feasible = true;
    for (int b = 0; b < pb.branch_count() && p0_feasible; ++b)
        if (std::abs(flow0[b]) > pb.flow_limits[b]) p0_feasible = false;

    KktRun best;
    best.residual_inf = std::numeric_limits<double>::infinity();
    int total_iters = 0;
    if (initial_guess || p0_feasible) {
        Eigen::VectorXd v0 =
            initial_guess ? kkt_pack(L, *initial_guess) : kkt_pack(L, kkt_initial_guess(pb));
        best = kkt_newton(pb, L, v0, tol, initial_guess ? max_iter : std::min(max_iter, 12));
        total_iters = best.iterations;
    } else {
        best.v = kkt_pack(L, kkt_initial_guess(pb));
        Eigen::VectorXd r0 = assemble_kkt(pb, kkt_unpack(L, best.v));
        best.residual_inf = r0.cwiseAbs().maxCoeff();
        best.converged = best.residual_inf <= tol;
    }

    if (!best.converged && !initial_guess) {
        ProtectionSolution path;
        if (central_path_start(pb, path, tol)) {
            KktRun polish = kkt_newton(pb, L, kkt_pack(L, path), tol, max_iter);
            total_iters += polish.iterations;
            if (polish.residual_inf < best.residual_inf) best = polish;
        }
    }

    ProtectionSolution out = kkt_unpack(L, best.v);
    out.iterations = total_iters;
    out.objective = (out.p_l - pb.p0).squaredNorm();
    out.kkt_residual = best.residual_inf;
    out.certified = best.converged && best.residual_inf <= tol;
    return out;
}

}  // namespace cascid
