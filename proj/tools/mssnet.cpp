#include "mssnet/cli.hpp"

#include <iostream>

int main(int argc, char** argv) { return mssnet::cli::run(argc, argv, std::cout, std::cerr); }
