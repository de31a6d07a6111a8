#include <iostream>

#include "pmss/cli/commands.hpp"

int main(int argc, char** argv) { return pmss::cli::run(argc, argv, std::cout, std::cerr); }
