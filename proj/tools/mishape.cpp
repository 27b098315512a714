#include <iostream>
#include <string>
#include <vector>

#include "cli.hpp"
#include "mishape/platform.hpp"

int main(int argc, char** argv) {
  mishape::tune_allocator();
  std::vector<std::string> args(argv + 1, argv + argc);
  return mishape::cli::run_cli(args, std::cout, std::cerr);
}
