#include <iostream>
#include <string>
#include <vector>

#include "shaplora/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return shaplora::run_cli(args, std::cout, std::cerr);
}
