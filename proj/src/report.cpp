#include "cascid/report.hpp"

#include <cmath>

#include "cascid/errors.hpp"

namespace cascid {

CompareReport compare_report(const std::vector<IdentificationResult>& without_protection,
                             const std::vector<IdentificationResult>& with_protection,
                             double gamma_tol, double u0_tol) {
    if (without_protection.size() != with_protection.size())
        throw validation_error("comparison needs identical branch sets");
    CompareReport rep;
    rep.rows.reserve(without_protection.size());
    for (std::size_t i = 0; i < without_protection.size(); ++i) {
        const IdentificationResult& a = without_protection[i];
        const IdentificationResult& b = with_protection[i];
        if (a.branch != b.branch) throw validation_error("comparison needs identical branch sets");

        BranchComparison row;
        row.branch = a.branch;
        row.abs_u0_without = std::abs(a.u0);
        row.abs_u0_with = std::abs(b.u0);
        row.delta_abs_u0 = row.abs_u0_with - row.abs_u0_without;
        row.gamma_without = a.gamma;
        row.gamma_with = b.gamma;
        row.delta_gamma = b.gamma - a.gamma;
        row.protection_failed = b.protection_failed;
        if (row.delta_gamma < -gamma_tol) {
            row.cls = BranchComparison::Class::Anomalous;
            ++rep.anomalous;
            if (b.protection_failed) ++rep.anomalies_with_failed_protection;
        } else if (row.delta_gamma > gamma_tol) {
            row.cls = BranchComparison::Class::Improved;
            ++rep.improved;
        } else {
            row.cls = BranchComparison::Class::Equal;
            ++rep.equal;
        }
        if (row.delta_abs_u0 >= -u0_tol) ++rep.larger_or_equal_disturbance;
        rep.rows.push_back(row);
    }
    return rep;
}

void write_summary_csv(std::ostream& out, const GridCase& grid, const CompareReport& report,
                       const Metadata& meta) {
    write_metadata(out, meta);
    out << "branch_id,abs_u0_without,abs_u0_with,delta_abs_u0,gamma_without,gamma_with,"
           "delta_gamma,class,protection_failed\n";
    for (const BranchComparison& r : report.rows) {
        const char* cls = r.cls == BranchComparison::Class::Improved   ? "improved"
                          : r.cls == BranchComparison::Class::Equal    ? "equal"
                                                                       : "anomalous";
        out << grid.branch(r.branch).id << ',' << format_double(r.abs_u0_without) << ','
            << format_double(r.abs_u0_with) << ',' << format_double(r.delta_abs_u0) << ','
            << format_double(r.gamma_without) << ',' << format_double(r.gamma_with) << ','
            << format_double(r.delta_gamma) << ',' << cls << ',' << (r.protection_failed ? 1 : 0)
            << "\n";
    }
}

}  // namespace cascid
