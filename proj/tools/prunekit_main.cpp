#include <string>
#include <vector>

#include "prunekit/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return prunekit::run_cli(args);
}
