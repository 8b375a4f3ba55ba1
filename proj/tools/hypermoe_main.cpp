#include <iostream>

#include "hypermoe/cli.hpp"

int main(int argc, char** argv) {
  return hypermoe::run_cli(argc, argv, std::cout, std::cerr);
}
