#include <cstdio>

#include "twinflow/version.hpp"

int main() {
  std::printf("twinflow %s\n", twinflow::kVersion);
  return 0;
}
