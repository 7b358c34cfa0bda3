// SPDX-License-Identifier: Apache-2.0
#include "awaker/rng.hpp"

#include <sstream>

#include "awaker/error.hpp"

namespace awaker {

std::string Rng::state() const {
  std::ostringstream os;
  os << engine_;
  return os.str();
}

void Rng::restore(std::string_view state) {
  std::istringstream is{std::string(state)};
  is >> engine_;
  if (!is) throw CheckpointError("malformed RNG state");
}

}  // namespace awaker
