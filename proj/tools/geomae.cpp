#include <iostream>
#include <string>
#include <vector>

#include "geomae/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return geomae::cli::run_command(args, std::cout, std::cerr);
}
