#include <iostream>

#include "r2p/cli.hpp"

int main(int argc, char** argv) { return r2p::cli::run(argc, argv, std::cout, std::cerr); }
