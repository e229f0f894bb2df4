#pragma once

namespace avasr {

// Entry point behind tools/avasr. Exit codes: 0 ok, 1 runtime failure,
// 2 usage error.
int cli_run(int argc, const char* const* argv);

}  // namespace avasr
