#include <iostream>
#include <string>
#include <vector>

#include "plate/cli.hpp"

int main(int argc, char** argv) {
  return plate::cli::run(std::vector<std::string>(argv, argv + argc), std::cout, std::cerr);
}
