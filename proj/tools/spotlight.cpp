#include <iostream>

#include "spotlight/cli.hpp"

int main(int argc, char** argv) { return spotlight::run_cli(argc, argv, std::cout, std::cerr); }
