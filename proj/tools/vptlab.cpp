#include <vector>

#include "vpt/experiment.hpp"

int main(int argc, char** argv) {
  return vptlab::vptlab_main(std::vector<std::string>(argv + 1, argv + argc));
}
