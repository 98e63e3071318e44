#include <iostream>

#include "roundfit/cli.hpp"

int main(int argc, char** argv) {
  return roundfit::run_cli(std::vector<std::string>(argv, argv + argc), std::cout, std::cerr);
}
