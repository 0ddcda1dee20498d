#include <iostream>

#include "pnrcal/cli.hpp"

int main(int argc, char** argv) { return pnrcal::cli::run(argc, argv, std::cout, std::cerr); }
