#include <string>
#include <vector>

#include "metatest/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return metatest::cli::run(args);
}
