#include <iostream>

#include "feathernet/cli.hpp"

int main(int argc, char** argv) { return feathernet::run_cli(argc, argv, std::cout, std::cerr); }
