// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <iosfwd>

namespace awaker {

/// Exit codes: 0 success, 2 configuration or input problem (including
/// unknown flags), 3 numeric or invariant failure.
inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitInvariant = 3;

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace awaker
