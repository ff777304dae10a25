#include <iostream>

#include "refusalguard/cli.hpp"

int main(int argc, char** argv) {
  return rg::run_cli(std::vector<std::string>(argv, argv + argc), std::cout, std::cerr);
}
