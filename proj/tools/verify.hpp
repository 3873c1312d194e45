#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace linattn::verify {

struct Check {
  std::string suite;
  std::string name;
  bool pass = false;
  std::string detail;  // inputs and seed on failure, empty otherwise
};

// suite: attention | gradcheck | inference | parallel | all
std::vector<Check> run_suite(const std::string& suite, std::uint64_t seed);

}  // namespace linattn::verify
