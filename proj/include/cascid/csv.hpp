#pragma once

#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "cascid/cascade.hpp"
#include "cascid/identify.hpp"

namespace cascid {

/// key=value pairs emitted as '#'-prefixed header lines; every writer below
/// prepends them so a run can be reproduced from its artifact alone.
using Metadata = std::vector<std::pair<std::string, std::string>>;

/// Shortest-exact textual form of a double ("%.17g"); identical inputs give
/// identical bytes, which the determinism contract relies on.
std::string format_double(double v);

void write_metadata(std::ostream& out, const Metadata& meta);

/// Columns: step, branch_id, y_p, flow, g. Steps 0..h-1 carry the flows and
/// relay statuses that drove them; the terminal state h has those blank.
void write_trajectory_csv(std::ostream& out, const GridCase& grid, const CascadeTrajectory& traj,
                          const Metadata& meta);

/// Audit dump of one protection solve. Bus rows fill p0/p_l and the bound
/// multipliers; branch rows fill flow/limit and the flow multipliers.
void write_protection_csv(std::ostream& out, const GridCase& grid, const ProtectionProblem& problem,
                          const ProtectionSolution& solution, const Metadata& meta);

/// Identification results table; one row per entry, in the given order.
void write_results_csv(std::ostream& out, const GridCase& grid,
                       const std::vector<IdentificationResult>& rows, const Metadata& meta);

}  // namespace cascid
