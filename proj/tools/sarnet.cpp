#include <iostream>

#include "sarnet/cli.hpp"

int main(int argc, char** argv) { return sarnet::run_cli(argc, argv, std::cout, std::cerr); }
