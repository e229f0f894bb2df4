#pragma once

#include <ostream>

namespace avasr {

// Condensed gradient/oracle suite behind the `selfcheck` subcommand. Prints
// one line per check; returns true when everything passed. `quick` trims the
// trial counts.
bool run_selfcheck(std::ostream& out, bool quick = false);

}  // namespace avasr
