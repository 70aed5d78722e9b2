#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "cascid/errors.hpp"

namespace cascid {

/// Relative connectivity floor: a branch counts as connected while its
/// admittance stays above this fraction of its nominal value. The smooth
/// relay produces small-but-nonzero admittances mid-transition, so island
/// detection needs a floor that scales with the branch itself.
inline constexpr double kConnectivityRel = 1e-6;

struct Bus {
    int id = 0;                 ///< external label from the case file
    double p_injection = 0.0;   ///< net injection, per unit (load negative)
    double p_min = 0.0;         ///< lower injection bound, per unit
    double p_max = 0.0;         ///< upper injection bound, per unit
    double gen_capacity = 0.0;  ///< installed generating capacity, per unit (0 = pure load)
};

struct Branch {
    int id = 0;  ///< external label from the case file
    int from_bus = 0;
    int to_bus = 0;
    double susceptance = 0.0;               ///< 1/x, per unit; the cascade state variable at full health
    std::optional<double> flow_limit{};     ///< per unit; may be derived later from the base flow
};

/// Static network description. Immutable after construction; safe to share
/// across worker threads.
class GridCase {
public:
    GridCase(double base_mva, std::vector<Bus> buses, std::vector<Branch> branches);

    double base_mva() const noexcept { return base_mva_; }
    int bus_count() const noexcept { return static_cast<int>(buses_.size()); }
    int branch_count() const noexcept { return static_cast<int>(branches_.size()); }

    const std::vector<Bus>& buses() const noexcept { return buses_; }
    const std::vector<Branch>& branches() const noexcept { return branches_; }
    const Bus& bus(int index) const { return buses_.at(index); }
    const Branch& branch(int index) const { return branches_.at(index); }

    /// Internal index of the bus with external label `id`; throws validation_error if unknown.
    int bus_index(int id) const;
    /// Internal index of the branch with external label `id`; throws validation_error if unknown.
    int branch_index(int id) const;

    /// Nominal branch admittance vector y0 (length n).
    const Eigen::VectorXd& susceptances() const noexcept { return susceptance_; }
    /// Net injection vector p0 (length m).
    const Eigen::VectorXd& injections() const noexcept { return injection_; }
    Eigen::VectorXd injection_lower() const;
    Eigen::VectorXd injection_upper() const;
    /// Flow limits as a vector; throws validation_error if any branch has none.
    Eigen::VectorXd flow_limits() const;
    bool all_limits_set() const noexcept;

    /// Copy with the flow limit of every branch replaced.
    GridCase with_flow_limits(const Eigen::VectorXd& limits) const;

private:
    double base_mva_;
    std::vector<Bus> buses_;
    std::vector<Branch> branches_;
    std::vector<std::pair<int, int>> bus_lookup_;     // (id, index), sorted by id
    std::vector<std::pair<int, int>> branch_lookup_;  // (id, index), sorted by id
    Eigen::VectorXd susceptance_;
    Eigen::VectorXd injection_;
};

/// Signed branch-bus incidence matrix: +1 at the from bus, -1 at the to bus,
/// one row per branch in case order.
struct IncidenceMatrix {
    Eigen::MatrixXd entries;  // n x m
};

/// Connected components of the surviving network.
struct IslandPartition {
    std::vector<int> island_of;                 ///< bus index -> island id (0-based, ordered by lowest member bus index)
    int island_count = 0;
    std::vector<bool> has_generation;           ///< per island
    std::vector<std::optional<int>> slack_bus;  ///< per island, bus *index*; empty when no generation

    bool same_island(int bus_a, int bus_b) const { return island_of[bus_a] == island_of[bus_b]; }
};

/// Parse the native case format (see README). All MW quantities are converted
/// to per unit on BASE_MVA. Throws parse_error / validation_error.
GridCase parse_case(std::string_view text);

/// Canonical textual form; parse_case(serialize_case(c)) reproduces c.
std::string serialize_case(const GridCase& grid);

IncidenceMatrix incidence(const GridCase& grid);

/// Nodal admittance (Laplacian) matrix A^T diag(y_p) A. Requires y_p >= 0.
Eigen::MatrixXd bus_admittance(const Eigen::VectorXd& y_p, const IncidenceMatrix& A);

/// Branch b is treated as connected iff alive[b] is true.
IslandPartition find_islands(const GridCase& grid, const std::vector<bool>& alive);

/// Absolute threshold variant: connected iff y_p[b] > tol.
IslandPartition find_islands(const GridCase& grid, const Eigen::VectorXd& y_p, double tol);

/// Default policy: connected iff y_p[b] > kConnectivityRel * y0[b].
IslandPartition find_islands(const GridCase& grid, const Eigen::VectorXd& y_p);

/// Alive mask under the default relative-floor policy.
std::vector<bool> alive_mask(const GridCase& grid, const Eigen::VectorXd& y_p);

}  // namespace cascid
