#include <iostream>

#include "cbfe_cli.hpp"

int main(int argc, char** argv) { return cbfe::cli::run(argc, argv, std::cout, std::cerr); }
