#pragma once

#include <stdexcept>
#include <string>

namespace cascid {

/// Malformed case-file text (carries 1-based line, 1-based column when known).
class parse_error : public std::runtime_error {
public:
    parse_error(std::string msg, int line, int column = 0)
        : std::runtime_error("parse error at line " + std::to_string(line) +
                             (column > 0 ? ", column " + std::to_string(column) : std::string{}) +
                             ": " + msg),
          line_(line),
          column_(column) {}

    int line() const noexcept { return line_; }
    int column() const noexcept { return column_; }

private:
    int line_;
    int column_;
};

/// Structurally valid input that violates a model invariant
/// (dangling bus reference, nonpositive reactance, inverted bounds, ...).
class validation_error : public std::runtime_error {
public:
    explicit validation_error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Numerical failure: singular reduced system, non-finite result.
class solve_error : public std::runtime_error {
public:
    explicit solve_error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Empty feasible set, reported together with a Farkas-type certificate.
class infeasible_error : public std::runtime_error {
public:
    explicit infeasible_error(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace cascid
