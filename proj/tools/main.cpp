#include <cstdio>

int main() {
  std::puts("lowmode cli: not wired up yet");
  return 1;
}
