#pragma once

#include "ksc/ks_env.hpp"

namespace ksc {

// One controlled trajectory: states.size() == actions.size() + 1, rewards
// aligned with actions.
struct Episode {
  std::vector<GridField> states;
  std::vector<Action> actions;
  std::vector<double> rewards;

  int steps() const { return static_cast<int>(actions.size()); }
};

using Dataset = std::vector<Episode>;

}  // namespace ksc
