#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <fstream>
#include <sstream>

#include "cascid/cli.hpp"
#include "cascid/grid_model.hpp"
#include "test_util.hpp"

using namespace cascid;

namespace {

int run(const std::vector<std::string>& args, std::string* out_text = nullptr,
        std::string* err_text = nullptr) {
    std::ostringstream out, err;
    int code = run_cli(args, out, err);
    if (out_text) *out_text = out.str();
    if (err_text) *err_text = err.str();
    return code;
}

std::string write_temp_case(const GridCase& g, const std::string& name) {
    std::string path = "cli_" + name + ".case";
    std::ofstream f(path);
    f << serialize_case(g);
    return path;
}

std::string slurp(const std::string& path) {
    std::ifstream f(path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

}  // namespace

TEST_CASE("usage errors exit with code 1") {
    CHECK(run({"frobnicate"}) == kExitUsage);
    CHECK(run({"simulate", "--no-such-flag"}) == kExitUsage);
    CHECK(run({"sweep", "--protect-step", "0", "--out", "x.csv"}) == kExitUsage);  // range check
    CHECK(run({}) == kExitUsage);
}

TEST_CASE("data errors exit with code 2") {
    std::string err;
    CHECK(run({"simulate", "--case", "/no/such/file.case", "--branch", "1", "--u0", "0"},
              nullptr, &err) == kExitData);
    CHECK(err.find("error:") != std::string::npos);

    std::ofstream bad("cli_bad.case");
    bad << "BASE_MVA 100\nBUS 1 0 0 0 0\nBUS 2 0 0 0 0\nBRANCH 1 1 99 0.1\n";
    bad.close();
    CHECK(run({"simulate", "--case", "cli_bad.case", "--branch", "1", "--u0", "0"}) == kExitData);
}

TEST_CASE("simulate with zero disturbance reports gamma exactly 1") {
    std::string out;
    int code = run({"simulate", "--case", "rts24", "--branch", "11", "--u0", "0", "--out",
                    "cli_traj.csv"},
                   &out);
    CHECK(code == kExitOk);
    CHECK(out.find("gamma=1 ") != std::string::npos);
    std::string csv = slurp("cli_traj.csv");
    CHECK(csv.find("step,branch_id,y_p,flow,g") != std::string::npos);
    CHECK(csv.find("# seed=0") != std::string::npos);
}

TEST_CASE("protect dumps a certificate table") {
    std::string path = write_temp_case(testing::triangle(5.0, -0.9, -0.1), "tri");
    std::string out;
    int code = run({"protect", "--case", path, "--branch", "3", "--u0", "-5", "--protect-step",
                    "1", "--horizon", "4", "--out", "cli_prot.csv"},
                   &out);
    CHECK(code == kExitOk);
    CHECK(out.find("certified=1") != std::string::npos);
    std::string csv = slurp("cli_prot.csv");
    CHECK(csv.find("kind,id,p0,p_l,mu_upper,mu_lower,flow,limit,lambda_upper,lambda_lower") !=
          std::string::npos);
    CHECK(csv.find("bus,1,") != std::string::npos);
    CHECK(csv.find("branch,3,") != std::string::npos);
}

TEST_CASE("identify writes a single result row") {
    std::string path = write_temp_case(testing::two_bus(10.0, 1.0), "two");
    std::string out;
    int code = run({"identify", "--case", path, "--branch", "1", "--protect-step", "0",
                    "--horizon", "4", "--restarts", "3", "--seed", "9", "--out", "cli_row.csv"},
                   &out);
    CHECK(code == kExitOk);
    std::string csv = slurp("cli_row.csv");
    CHECK(csv.find("branch_id,u0,abs_u0,J,gamma,") != std::string::npos);
    // exactly one data row
    int rows = 0;
    std::istringstream ss(csv);
    std::string line;
    while (std::getline(ss, line))
        if (!line.empty() && line[0] != '#' && line.find("branch_id") == std::string::npos) ++rows;
    CHECK(rows == 1);
}

TEST_CASE("sweep is deterministic and writes the paired table plus the summary") {
    std::string path = write_temp_case(testing::four_bus(), "four");
    std::vector<std::string> args{"sweep",        "--case",    path, "--horizon", "5",
                                  "--protect-step", "2",       "--restarts", "4",
                                  "--seed",       "7",         "--threads",  "2",
                                  "--out",        "cli_sw.csv"};
    std::string out1, out2;
    CHECK(run(args, &out1) == kExitOk);
    std::string results1 = slurp("cli_sw.csv");
    std::string summary1 = slurp("cli_sw_summary.csv");
    CHECK(run(args, &out2) == kExitOk);
    CHECK(slurp("cli_sw.csv") == results1);
    CHECK(slurp("cli_sw_summary.csv") == summary1);
    CHECK(out1 == out2);

    // paired table: 5 branches x 2 runs
    int rows = 0;
    std::istringstream ss(results1);
    std::string line;
    while (std::getline(ss, line))
        if (!line.empty() && line[0] != '#' && line.find("branch_id") == std::string::npos) ++rows;
    CHECK(rows == 10);
    CHECK(out1.find("larger_or_equal_disturbance=") != std::string::npos);

    // a single-threaded rerun produces the same data rows (the metadata
    // header records the thread count, so compare past the comments)
    auto data_rows = [](const std::string& text) {
        std::string kept;
        std::istringstream stream(text);
        std::string l;
        while (std::getline(stream, l))
            if (!l.empty() && l[0] != '#') kept += l + "\n";
        return kept;
    };
    args[args.size() - 3] = "1";  // --threads value
    std::string out3;
    CHECK(run(args, &out3) == kExitOk);
    CHECK(data_rows(slurp("cli_sw.csv")) == data_rows(results1));
}
