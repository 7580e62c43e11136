#include <iostream>

int main() {
  std::cout << "tempo\n";
  return 0;
}
