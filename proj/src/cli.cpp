#include "cascid/cli.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>

#include <CLI11.hpp>

#include "cascid/cases.hpp"
#include "cascid/csv.hpp"
#include "cascid/errors.hpp"
#include "cascid/identify.hpp"
#include "cascid/report.hpp"
#include "cascid/version.hpp"

namespace cascid {

namespace {

// flag combinations CLI11's per-option checks cannot express
struct usage_error : std::runtime_error {
    explicit usage_error(const std::string& msg) : std::runtime_error(msg) {}
};

struct RunConfig {
    std::string case_path = "rts24";
    double sigma = 5e4;
    double epsilon = 1e-4;
    int horizon = 10;
    int protect_step = 4;  // 0 disables protection
    double threshold_factor = 1.1;
    int restarts = 10;
    int branch = 0;  // branch id (case label)
    double u0 = 0.0;
    std::uint64_t seed = 0;
    std::string out_path;
    bool oracle = false;
    std::string jacobian_mode = "analytic";
    int threads = 0;
    bool timing = false;
    double newton_tol = 1e-10;
    double kkt_tol = 1e-10;
    double qp_tol = 1e-9;
    std::string protect_path = "qp";
};

void add_common_options(CLI::App* cmd, RunConfig& cfg, bool with_solver) {
    cmd->add_option("--case", cfg.case_path, "case file path, or 'rts24' for the embedded system");
    cmd->add_option("--sigma", cfg.sigma, "relay transition sharpness")->check(CLI::PositiveNumber);
    cmd->add_option("--epsilon", cfg.epsilon, "control-energy weight")->check(CLI::PositiveNumber);
    cmd->add_option("--horizon", cfg.horizon, "cascade steps h")->check(CLI::Range(2, 1000));
    cmd->add_option("--protect-step", cfg.protect_step,
                    "cascade step of the injection adjustment; 0 disables protection")
        ->check(CLI::Range(0, 1000));
    cmd->add_option("--threshold-factor", cfg.threshold_factor,
                    "flow limit as a multiple of the base flow (used when the case file "
                    "carries no limits)");
    cmd->add_option("--seed", cfg.seed, "random seed for the multi-start draws");
    cmd->add_option("--out", cfg.out_path, "output CSV path ('-' = stdout)");
    cmd->add_option("--kkt-tol", cfg.kkt_tol, "protection equation-path tolerance")
        ->check(CLI::PositiveNumber);
    cmd->add_option("--qp-tol", cfg.qp_tol, "protection QP-path certification tolerance")
        ->check(CLI::PositiveNumber);
    if (with_solver) {
        cmd->add_option("--restarts", cfg.restarts, "multi-start count")->check(CLI::Range(1, 10000));
        cmd->add_option("--newton-tol", cfg.newton_tol, "integrated-system residual tolerance")
            ->check(CLI::PositiveNumber);
        cmd->add_flag("--oracle", cfg.oracle, "use the brute-force shooting oracle instead of "
                                              "the necessary-condition solver");
        cmd->add_option("--jacobian-mode", cfg.jacobian_mode, "analytic | finite-diff")
            ->check(CLI::IsMember({"analytic", "finite-diff"}));
        cmd->add_option("--threads", cfg.threads,
                        "sweep worker threads (default: CASCADE_IDENT_THREADS or logical cores)");
        cmd->add_flag("--timing", cfg.timing,
                      "record wall_ms per branch (forfeits byte-identical reruns)");
    }
}

GridCase load_case(const RunConfig& cfg) {
    std::string text;
    if (cfg.case_path == "rts24") {
        text = std::string(rts24_case_text());
    } else {
        std::ifstream in(cfg.case_path);
        if (!in) throw validation_error("cannot read case file '" + cfg.case_path + "'");
        std::ostringstream ss;
        ss << in.rdbuf();
        text = ss.str();
    }
    GridCase g = parse_case(text);
    if (!g.all_limits_set()) {
        if (!(cfg.threshold_factor > 1.0))
            throw validation_error("threshold factor must exceed 1");
        g = derive_thresholds(g, cfg.threshold_factor);
    }
    return g;
}

IdentifySetup setup_from(const RunConfig& cfg) {
    IdentifySetup s;
    s.sim.relay.sigma = cfg.sigma;
    s.sim.cost.epsilon = cfg.epsilon;
    s.sim.cost.horizon = cfg.horizon;
    s.sim.protect_step = cfg.protect_step;
    s.kkt_tol = cfg.kkt_tol;
    s.qp_tol = cfg.qp_tol;
    return s;
}

MultiStartConfig multistart_from(const RunConfig& cfg) {
    MultiStartConfig m;
    m.restarts = cfg.restarts;
    m.rng_seed = cfg.seed;
    m.newton_tol = cfg.newton_tol;
    m.jacobian_mode =
        cfg.jacobian_mode == "finite-diff" ? JacobianMode::FiniteDiff : JacobianMode::Analytic;
    return m;
}

int resolve_threads(const RunConfig& cfg) {
    if (cfg.threads > 0) return cfg.threads;
    if (const char* env = std::getenv("CASCADE_IDENT_THREADS")) {
        int n = std::atoi(env);
        if (n > 0) return n;
    }
    return 0;  // sweep picks hardware concurrency
}

Metadata base_metadata(const RunConfig& cfg, const std::string& subcommand) {
    Metadata m;
    m.emplace_back("tool", "cascid " + std::string(kVersion));
    m.emplace_back("subcommand", subcommand);
    m.emplace_back("case", cfg.case_path);
    m.emplace_back("sigma", format_double(cfg.sigma));
    m.emplace_back("epsilon", format_double(cfg.epsilon));
    m.emplace_back("horizon", std::to_string(cfg.horizon));
    m.emplace_back("protect_step", std::to_string(cfg.protect_step));
    m.emplace_back("threshold_factor", format_double(cfg.threshold_factor));
    m.emplace_back("restarts", std::to_string(cfg.restarts));
    m.emplace_back("seed", std::to_string(cfg.seed));
    m.emplace_back("oracle", cfg.oracle ? "1" : "0");
    m.emplace_back("jacobian_mode", cfg.jacobian_mode);
    m.emplace_back("newton_tol", format_double(cfg.newton_tol));
    m.emplace_back("kkt_tol", format_double(cfg.kkt_tol));
    m.emplace_back("qp_tol", format_double(cfg.qp_tol));
    m.emplace_back("timing", cfg.timing ? "1" : "0");
    return m;
}

// writes through a file or stdout, depending on the configured path
class OutputTarget {
public:
    OutputTarget(const std::string& path, std::ostream& fallback) : fallback_(fallback) {
        if (!path.empty() && path != "-") {
            file_.open(path);
            if (!file_) throw validation_error("cannot write output file '" + path + "'");
            use_file_ = true;
        }
    }
    std::ostream& stream() { return use_file_ ? file_ : fallback_; }

private:
    std::ofstream file_;
    std::ostream& fallback_;
    bool use_file_ = false;
};

ProtectionHook hook_for(const RunConfig& cfg, bool kkt_path) {
    return kkt_path ? kkt_protection_hook(cfg.kkt_tol) : qp_protection_hook(cfg.qp_tol);
}

int cmd_simulate(const RunConfig& cfg, std::ostream& out) {
    GridCase g = load_case(cfg);
    IdentifySetup setup = setup_from(cfg);
    int branch = g.branch_index(cfg.branch);
    ProtectionHook hook = hook_for(cfg, cfg.protect_path == "kkt");
    CascadeTrajectory traj = simulate(g, branch, cfg.u0, setup.sim,
                                      setup.sim.protect_step > 0 ? &hook : nullptr);
    double j0 = baseline_cost(g, setup);
    double gamma = gamma_index(traj.cost, j0);

    Metadata meta = base_metadata(cfg, "simulate");
    meta.emplace_back("branch", std::to_string(cfg.branch));
    meta.emplace_back("u0", format_double(cfg.u0));
    OutputTarget target(cfg.out_path, out);
    write_trajectory_csv(target.stream(), g, traj, meta);
    out << "branch=" << cfg.branch << " u0=" << format_double(cfg.u0)
        << " J=" << format_double(traj.cost) << " terminal=" << format_double(traj.terminal)
        << " gamma=" << format_double(gamma)
        << " protection_applied=" << (traj.protection_applied ? 1 : 0)
        << " protection_failed=" << (traj.protection_failed ? 1 : 0) << "\n";
    return kExitOk;
}

int cmd_protect(const RunConfig& cfg, std::ostream& out) {
    if (cfg.protect_step < 1) throw usage_error("protect needs --protect-step >= 1");
    GridCase g = load_case(cfg);
    IdentifySetup setup = setup_from(cfg);
    int branch = g.branch_index(cfg.branch);

    // run the cascade up to the protection step without adjustment, then
    // solve the requested path at that state
    SimulationConfig pre = setup.sim;
    pre.protect_step = 0;
    pre.cost.horizon = std::max(2, cfg.protect_step);
    CascadeTrajectory traj = simulate(g, branch, cfg.u0, pre);
    FlowContext ctx(g, traj.y_p[cfg.protect_step]);
    ProtectionProblem problem = build_protection_problem(g, ctx);
    ProtectionSolution sol = cfg.protect_path == "kkt"
                                 ? solve_kkt_squared_slack(problem, nullptr, cfg.kkt_tol)
                                 : solve_protection_qp(problem, cfg.qp_tol);

    Metadata meta = base_metadata(cfg, "protect");
    meta.emplace_back("branch", std::to_string(cfg.branch));
    meta.emplace_back("u0", format_double(cfg.u0));
    meta.emplace_back("path", cfg.protect_path);
    OutputTarget target(cfg.out_path, out);
    write_protection_csv(target.stream(), g, problem, sol, meta);
    out << "objective=" << format_double(sol.objective)
        << " kkt_residual=" << format_double(sol.kkt_residual)
        << " certified=" << (sol.certified ? 1 : 0) << " iterations=" << sol.iterations << "\n";
    return sol.certified ? kExitOk : kExitNonConverged;
}

int cmd_identify(const RunConfig& cfg, std::ostream& out) {
    GridCase g = load_case(cfg);
    IdentifySetup setup = setup_from(cfg);
    MultiStartConfig ms = multistart_from(cfg);
    int branch = g.branch_index(cfg.branch);
    IdentificationResult r = cfg.oracle ? shooting_oracle(g, branch, setup, ms)
                                        : solve_integrated_system(g, branch, setup, ms);

    Metadata meta = base_metadata(cfg, "identify");
    meta.emplace_back("branch", std::to_string(cfg.branch));
    OutputTarget target(cfg.out_path, out);
    write_results_csv(target.stream(), g, {r}, meta);
    out << "branch=" << cfg.branch << " u0=" << format_double(r.u0)
        << " J=" << format_double(r.cost_j) << " gamma=" << format_double(r.gamma) << " method="
        << (r.method == IdentificationResult::Method::Newton ? "newton" : "oracle")
        << " restarts_used=" << r.restarts_used
        << " protection_failed=" << (r.protection_failed ? 1 : 0) << "\n";
    return (cfg.oracle || r.converged) ? kExitOk : kExitNonConverged;
}

int cmd_sweep(const RunConfig& cfg, std::ostream& out) {
    if (cfg.protect_step < 1)
        throw usage_error("sweep compares protection on/off; --protect-step must be >= 1");
    if (cfg.out_path == "-" || cfg.out_path.empty())
        throw usage_error("sweep needs --out FILE (it also writes FILE's _summary sibling)");
    GridCase g = load_case(cfg);
    IdentifySetup with = setup_from(cfg);
    IdentifySetup without = with;
    without.sim.protect_step = 0;
    MultiStartConfig ms = multistart_from(cfg);
    const int threads = resolve_threads(cfg);

    std::vector<IdentificationResult> off =
        sweep_all_branches(g, without, ms, cfg.oracle, threads, cfg.timing);
    std::vector<IdentificationResult> on =
        sweep_all_branches(g, with, ms, cfg.oracle, threads, cfg.timing);
    CompareReport report = compare_report(off, on);

    Metadata meta = base_metadata(cfg, "sweep");
    meta.emplace_back("threads", std::to_string(threads));
    {
        OutputTarget target(cfg.out_path, out);
        std::vector<IdentificationResult> rows = off;
        rows.insert(rows.end(), on.begin(), on.end());
        write_results_csv(target.stream(), g, rows, meta);
    }
    std::string summary_path = cfg.out_path;
    std::string::size_type dot = summary_path.rfind('.');
    summary_path = dot == std::string::npos ? summary_path + "_summary"
                                            : summary_path.substr(0, dot) + "_summary" +
                                                  summary_path.substr(dot);
    {
        OutputTarget target(summary_path, out);
        write_summary_csv(target.stream(), g, report, meta);
    }

    int non_converged = 0;
    for (const auto& r : off)
        if (!r.converged && !cfg.oracle) ++non_converged;
    for (const auto& r : on)
        if (!r.converged && !cfg.oracle) ++non_converged;

    out << "branches=" << g.branch_count() << " improved=" << report.improved
        << " equal=" << report.equal << " anomalous=" << report.anomalous
        << " anomalous_with_failed_protection=" << report.anomalies_with_failed_protection
        << " larger_or_equal_disturbance=" << report.larger_or_equal_disturbance
        << " non_converged=" << non_converged << "\n";
    out << "results=" << cfg.out_path << " summary=" << summary_path << "\n";
    return non_converged == 0 ? kExitOk : kExitNonConverged;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    RunConfig cfg;
    CLI::App app{"cascading-failure disturbance identification for DC-modeled power grids"};
    app.set_version_flag("--version", "cascid " + std::string(kVersion));
    app.require_subcommand(1);

    CLI::App* sim = app.add_subcommand("simulate", "run one cascade and export the trajectory");
    add_common_options(sim, cfg, false);
    sim->add_option("--branch", cfg.branch, "disturbed branch id")->required();
    sim->add_option("--u0", cfg.u0, "initial admittance disturbance")->required();
    sim->add_option("--path", cfg.protect_path, "protection solver: qp | kkt")
        ->check(CLI::IsMember({"qp", "kkt"}));

    CLI::App* prot = app.add_subcommand("protect", "solve the injection adjustment at the "
                                                   "protection step and dump its certificate");
    add_common_options(prot, cfg, false);
    prot->add_option("--branch", cfg.branch, "disturbed branch id")->required();
    prot->add_option("--u0", cfg.u0, "initial admittance disturbance")->required();
    prot->add_option("--path", cfg.protect_path, "protection solver: qp | kkt")
        ->check(CLI::IsMember({"qp", "kkt"}));

    CLI::App* ident = app.add_subcommand("identify", "worst-case disturbance for one branch");
    add_common_options(ident, cfg, true);
    ident->add_option("--branch", cfg.branch, "branch id")->required();

    CLI::App* sweep = app.add_subcommand("sweep", "per-branch worst cases, protection off vs on");
    add_common_options(sweep, cfg, true);

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e, out, err);
        return code == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (sim->parsed()) return cmd_simulate(cfg, out);
        if (prot->parsed()) return cmd_protect(cfg, out);
        if (ident->parsed()) return cmd_identify(cfg, out);
        return cmd_sweep(cfg, out);
    } catch (const usage_error& e) {
        err << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const infeasible_error& e) {
        err << "error: " << e.what() << "\n";
        return kExitNonConverged;
    } catch (const solve_error& e) {
        err << "error: " << e.what() << "\n";
        return kExitNonConverged;
    } catch (const parse_error& e) {
        err << "error: " << e.what() << "\n";
        return kExitData;
    } catch (const validation_error& e) {
        err << "error: " << e.what() << "\n";
        return kExitData;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitData;
    }
}

}  // namespace cascid
