#include <iostream>

#include "rad/cli/cli.hpp"

int main(int argc, char** argv) { return rad::cli::run(argc, argv, std::cout, std::cerr); }
