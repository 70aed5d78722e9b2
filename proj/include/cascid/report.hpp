#pragma once

#include <ostream>
#include <vector>

#include "cascid/csv.hpp"
#include "cascid/identify.hpp"

namespace cascid {

/// Per-branch outcome of the protection-on vs protection-off comparison.
struct BranchComparison {
    int branch = -1;  ///< branch index
    double abs_u0_without = 0.0, abs_u0_with = 0.0, delta_abs_u0 = 0.0;
    double gamma_without = 0.0, gamma_with = 0.0, delta_gamma = 0.0;
    enum class Class { Improved, Equal, Anomalous } cls = Class::Equal;
    bool protection_failed = false;  ///< from the protected run
};

struct CompareReport {
    std::vector<BranchComparison> rows;  ///< ordered by branch index
    int improved = 0;   ///< gamma_with > gamma_without (protection softened the cascade)
    int equal = 0;      ///< gammas equal within tolerance (directly-severed class)
    int anomalous = 0;  ///< gamma_with < gamma_without
    int anomalies_with_failed_protection = 0;
    int larger_or_equal_disturbance = 0;  ///< |u0|_with >= |u0|_without - tol
};

/// Pair up two sweeps over the same case and branch set; throws
/// validation_error on mismatched branch sets.
CompareReport compare_report(const std::vector<IdentificationResult>& without_protection,
                             const std::vector<IdentificationResult>& with_protection,
                             double gamma_tol = 1e-9, double u0_tol = 1e-9);

/// Summary block: per-branch deltas plus the classification.
void write_summary_csv(std::ostream& out, const GridCase& grid, const CompareReport& report,
                       const Metadata& meta);

}  // namespace cascid
