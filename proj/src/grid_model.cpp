#include "cascid/grid_model.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstdio>
#include <sstream>

namespace cascid {

namespace {

std::string fmt_full(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

struct Token {
    std::string_view text;
    int column;  // 1-based
};

// Whitespace-separated tokens of one line, with the comment tail stripped.
std::vector<Token> tokenize(std::string_view line) {
    std::vector<Token> out;
    std::size_t i = 0;
    while (i < line.size()) {
        if (std::isspace(static_cast<unsigned char>(line[i]))) {
            ++i;
            continue;
        }
        if (line[i] == '#') break;
        std::size_t start = i;
        while (i < line.size() && !std::isspace(static_cast<unsigned char>(line[i])) && line[i] != '#') ++i;
        out.push_back({line.substr(start, i - start), static_cast<int>(start) + 1});
    }
    return out;
}

double parse_double(const Token& tok, int line_no, const char* what) {
    double value = 0.0;
    auto [ptr, ec] = std::from_chars(tok.text.data(), tok.text.data() + tok.text.size(), value);
    if (ec != std::errc{} || ptr != tok.text.data() + tok.text.size())
        throw parse_error(std::string("expected a number for ") + what + ", got '" + std::string(tok.text) + "'",
                          line_no, tok.column);
    return value;
}

int parse_int(const Token& tok, int line_no, const char* what) {
    int value = 0;
    auto [ptr, ec] = std::from_chars(tok.text.data(), tok.text.data() + tok.text.size(), value);
    if (ec != std::errc{} || ptr != tok.text.data() + tok.text.size())
        throw parse_error(std::string("expected an integer for ") + what + ", got '" + std::string(tok.text) + "'",
                          line_no, tok.column);
    return value;
}

}  // namespace

GridCase::GridCase(double base_mva, std::vector<Bus> buses, std::vector<Branch> branches)
    : base_mva_(base_mva), buses_(std::move(buses)), branches_(std::move(branches)) {
    if (base_mva_ <= 0.0) throw validation_error("BASE_MVA must be positive");
    if (buses_.size() < 2) throw validation_error("a case needs at least 2 buses");
    if (branches_.empty()) throw validation_error("a case needs at least 1 branch");

    bus_lookup_.reserve(buses_.size());
    for (std::size_t i = 0; i < buses_.size(); ++i) {
        const Bus& b = buses_[i];
        if (b.gen_capacity < 0.0)
            throw validation_error("bus " + std::to_string(b.id) + ": negative generating capacity");
        if (b.p_min > b.p_max)
            throw validation_error("bus " + std::to_string(b.id) + ": p_min exceeds p_max");
        if (b.p_injection < b.p_min || b.p_injection > b.p_max)
            throw validation_error("bus " + std::to_string(b.id) + ": injection outside [p_min, p_max]");
        bus_lookup_.emplace_back(b.id, static_cast<int>(i));
    }
    std::sort(bus_lookup_.begin(), bus_lookup_.end());
    for (std::size_t i = 1; i < bus_lookup_.size(); ++i)
        if (bus_lookup_[i - 1].first == bus_lookup_[i].first)
            throw validation_error("duplicate bus id " + std::to_string(bus_lookup_[i].first));

    branch_lookup_.reserve(branches_.size());
    for (std::size_t i = 0; i < branches_.size(); ++i) {
        const Branch& br = branches_[i];
        bus_index(br.from_bus);  // throws on dangling reference
        bus_index(br.to_bus);
        if (br.from_bus == br.to_bus)
            throw validation_error("branch " + std::to_string(br.id) + ": connects bus " +
                                   std::to_string(br.from_bus) + " to itself");
        if (!(br.susceptance > 0.0))
            throw validation_error("branch " + std::to_string(br.id) + ": susceptance must be positive");
        if (br.flow_limit && !(*br.flow_limit > 0.0))
            throw validation_error("branch " + std::to_string(br.id) + ": flow limit must be positive");
        branch_lookup_.emplace_back(br.id, static_cast<int>(i));
    }
    std::sort(branch_lookup_.begin(), branch_lookup_.end());
    for (std::size_t i = 1; i < branch_lookup_.size(); ++i)
        if (branch_lookup_[i - 1].first == branch_lookup_[i].first)
            throw validation_error("duplicate branch id " + std::to_string(branch_lookup_[i].first));

    susceptance_.resize(branch_count());
    for (int b = 0; b < branch_count(); ++b) susceptance_[b] = branches_[b].susceptance;
    injection_.resize(bus_count());
    for (int i = 0; i < bus_count(); ++i) injection_[i] = buses_[i].p_injection;
}

int GridCase::bus_index(int id) const {
    auto it = std::lower_bound(bus_lookup_.begin(), bus_lookup_.end(), std::pair<int, int>{id, -1});
    if (it == bus_lookup_.end() || it->first != id)
        throw validation_error("unknown bus id " + std::to_string(id));
    return it->second;
}

int GridCase::branch_index(int id) const {
    auto it = std::lower_bound(branch_lookup_.begin(), branch_lookup_.end(), std::pair<int, int>{id, -1});
    if (it == branch_lookup_.end() || it->first != id)
        throw validation_error("unknown branch id " + std::to_string(id));
    return it->second;
}

Eigen::VectorXd GridCase::injection_lower() const {
    Eigen::VectorXd v(bus_count());
    for (int i = 0; i < bus_count(); ++i) v[i] = buses_[i].p_min;
    return v;
}

Eigen::VectorXd GridCase::injection_upper() const {
    Eigen::VectorXd v(bus_count());
    for (int i = 0; i < bus_count(); ++i) v[i] = buses_[i].p_max;
    return v;
}

Eigen::VectorXd GridCase::flow_limits() const {
    Eigen::VectorXd v(branch_count());
    for (int b = 0; b < branch_count(); ++b) {
        if (!branches_[b].flow_limit)
            throw validation_error("branch " + std::to_string(branches_[b].id) +
                                   " has no flow limit; derive thresholds first");
        v[b] = *branches_[b].flow_limit;
    }
    return v;
}

bool GridCase::all_limits_set() const noexcept {
    return std::all_of(branches_.begin(), branches_.end(),
                       [](const Branch& b) { return b.flow_limit.has_value(); });
}

GridCase GridCase::with_flow_limits(const Eigen::VectorXd& limits) const {
    if (limits.size() != branch_count()) throw validation_error("flow limit vector has wrong length");
    std::vector<Branch> br = branches_;
    for (int b = 0; b < branch_count(); ++b) br[b].flow_limit = limits[b];
    return GridCase(base_mva_, buses_, std::move(br));
}

GridCase parse_case(std::string_view text) {
    std::optional<double> base_mva;
    std::vector<Bus> buses;
    std::vector<Branch> branches;

    int line_no = 0;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        std::size_t eol = text.find('\n', pos);
        std::string_view line = text.substr(pos, eol == std::string_view::npos ? text.size() - pos : eol - pos);
        pos = eol == std::string_view::npos ? text.size() + 1 : eol + 1;
        ++line_no;

        auto toks = tokenize(line);
        if (toks.empty()) continue;
        std::string_view kw = toks[0].text;

        if (kw == "BASE_MVA") {
            if (toks.size() != 2) throw parse_error("BASE_MVA takes exactly one value", line_no, toks[0].column);
            if (base_mva) throw parse_error("duplicate BASE_MVA", line_no, toks[0].column);
            base_mva = parse_double(toks[1], line_no, "BASE_MVA");
        } else if (kw == "BUS") {
            if (toks.size() != 6)
                throw parse_error("BUS takes <id> <p_injection_MW> <p_min_MW> <p_max_MW> <gen_capacity_MW>",
                                  line_no, toks[0].column);
            Bus b;
            b.id = parse_int(toks[1], line_no, "bus id");
            b.p_injection = parse_double(toks[2], line_no, "p_injection_MW");
            b.p_min = parse_double(toks[3], line_no, "p_min_MW");
            b.p_max = parse_double(toks[4], line_no, "p_max_MW");
            b.gen_capacity = parse_double(toks[5], line_no, "gen_capacity_MW");
            buses.push_back(b);
        } else if (kw == "BRANCH") {
            if (toks.size() != 5 && toks.size() != 6)
                throw parse_error("BRANCH takes <id> <from> <to> <reactance_pu> [flow_limit_MW]",
                                  line_no, toks[0].column);
            Branch br;
            br.id = parse_int(toks[1], line_no, "branch id");
            br.from_bus = parse_int(toks[2], line_no, "from bus");
            br.to_bus = parse_int(toks[3], line_no, "to bus");
            double x = parse_double(toks[4], line_no, "reactance_pu");
            if (!(x > 0.0)) throw parse_error("reactance must be positive", line_no, toks[4].column);
            br.susceptance = 1.0 / x;
            if (toks.size() == 6) br.flow_limit = parse_double(toks[5], line_no, "flow_limit_MW");
            branches.push_back(br);
        } else {
            throw parse_error("unknown record '" + std::string(kw) + "'", line_no, toks[0].column);
        }
    }

    if (!base_mva) throw parse_error("missing BASE_MVA record", line_no);

    const double base = *base_mva;
    if (!(base > 0.0)) throw validation_error("BASE_MVA must be positive");
    for (Bus& b : buses) {
        b.p_injection /= base;
        b.p_min /= base;
        b.p_max /= base;
        b.gen_capacity /= base;
    }
    for (Branch& br : branches)
        if (br.flow_limit) *br.flow_limit /= base;

    return GridCase(base, buses, branches);
}

std::string serialize_case(const GridCase& grid) {
    std::ostringstream out;
    const double base = grid.base_mva();
    out << "BASE_MVA " << fmt_full(base) << "\n";
    for (const Bus& b : grid.buses()) {
        out << "BUS " << b.id << ' ' << fmt_full(b.p_injection * base) << ' ' << fmt_full(b.p_min * base)
            << ' ' << fmt_full(b.p_max * base) << ' ' << fmt_full(b.gen_capacity * base) << "\n";
    }
    for (const Branch& br : grid.branches()) {
        out << "BRANCH " << br.id << ' ' << br.from_bus << ' ' << br.to_bus << ' '
            << fmt_full(1.0 / br.susceptance);
        if (br.flow_limit) out << ' ' << fmt_full(*br.flow_limit * base);
        out << "\n";
    }
    return out.str();
}

IncidenceMatrix incidence(const GridCase& grid) {
    Eigen::MatrixXd A = Eigen::MatrixXd::Zero(grid.branch_count(), grid.bus_count());
    for (int b = 0; b < grid.branch_count(); ++b) {
        const Branch& br = grid.branch(b);
        A(b, grid.bus_index(br.from_bus)) = 1.0;
        A(b, grid.bus_index(br.to_bus)) = -1.0;
    }
    return IncidenceMatrix{std::move(A)};
}

Eigen::MatrixXd bus_admittance(const Eigen::VectorXd& y_p, const IncidenceMatrix& A) {
    if (y_p.size() != A.entries.rows()) throw validation_error("admittance vector length mismatch");
    if ((y_p.array() < 0.0).any()) throw validation_error("bus_admittance requires y_p >= 0");
    return A.entries.transpose() * y_p.asDiagonal() * A.entries;
}

IslandPartition find_islands(const GridCase& grid, const std::vector<bool>& alive) {
    const int m = grid.bus_count();
    if (static_cast<int>(alive.size()) != grid.branch_count())
        throw validation_error("alive mask length mismatch");

    // Union-find over bus indices.
    std::vector<int> parent(m);
    for (int i = 0; i < m; ++i) parent[i] = i;
    auto find = [&](int i) {
        while (parent[i] != i) {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        return i;
    };
    for (int b = 0; b < grid.branch_count(); ++b) {
        if (!alive[b]) continue;
        const Branch& br = grid.branch(b);
        int ra = find(grid.bus_index(br.from_bus));
        int rb = find(grid.bus_index(br.to_bus));
        if (ra != rb) parent[std::max(ra, rb)] = std::min(ra, rb);
    }

    IslandPartition part;
    part.island_of.assign(m, -1);
    for (int i = 0; i < m; ++i) {
        int root = find(i);
        if (part.island_of[root] < 0) part.island_of[root] = part.island_count++;
        part.island_of[i] = part.island_of[root];
    }

    part.has_generation.assign(part.island_count, false);
    part.slack_bus.assign(part.island_count, std::nullopt);
    for (int i = 0; i < m; ++i) {
        const Bus& bus = grid.bus(i);
        if (bus.gen_capacity <= 0.0) continue;
        int isl = part.island_of[i];
        part.has_generation[isl] = true;
        // Largest generating capacity wins the slack role; ties go to the lowest bus id.
        if (!part.slack_bus[isl]) {
            part.slack_bus[isl] = i;
        } else {
            const Bus& cur = grid.bus(*part.slack_bus[isl]);
            if (bus.gen_capacity > cur.gen_capacity ||
                (bus.gen_capacity == cur.gen_capacity && bus.id < cur.id))
                part.slack_bus[isl] = i;
        }
    }
    return part;
}

IslandPartition find_islands(const GridCase& grid, const Eigen::VectorXd& y_p, double tol) {
    if (tol < 0.0) throw validation_error("connectivity tolerance must be >= 0");
    std::vector<bool> alive(grid.branch_count());
    for (int b = 0; b < grid.branch_count(); ++b) alive[b] = y_p[b] > tol;
    return find_islands(grid, alive);
}

IslandPartition find_islands(const GridCase& grid, const Eigen::VectorXd& y_p) {
    return find_islands(grid, alive_mask(grid, y_p));
}

std::vector<bool> alive_mask(const GridCase& grid, const Eigen::VectorXd& y_p) {
    std::vector<bool> alive(grid.branch_count());
    for (int b = 0; b < grid.branch_count(); ++b)
        alive[b] = y_p[b] > kConnectivityRel * grid.susceptances()[b];
    return alive;
}

}  // namespace cascid
