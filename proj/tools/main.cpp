#include <iostream>
#include <string>
#include <vector>

#include "planrag/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return planrag::cli::run_cli(args, std::cout, std::cerr);
}
