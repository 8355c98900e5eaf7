#include <string>
#include <vector>

#include "sleepdg/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return sleepdg::cli::run(args);
}
