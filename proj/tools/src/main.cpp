#include <iostream>
#include <string>
#include <vector>

#include "tdt/runtime.hpp"
#include "tdt_cli/commands.hpp"

int main(int argc, char** argv) {
  tdt::tune_allocator();
  return tdt::cli::run_cli(std::vector<std::string>(argv, argv + argc), std::cout, std::cerr);
}
