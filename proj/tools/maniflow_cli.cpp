#include <cstdio>

int main() {
  std::puts("maniflow: placeholder");
  return 0;
}
