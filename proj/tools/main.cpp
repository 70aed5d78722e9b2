#include <iostream>
#include <vector>

#include "cascid/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return cascid::run_cli(args, std::cout, std::cerr);
}
