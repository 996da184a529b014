#pragma once

// The `rad` command line: gen-data, train, attack, eval, transfer and
// relevance-dump. Every subcommand accepts --config FILE.json whose keys are
// the long flag names; explicit flags win. Subcommands that write an --out
// directory also store the resolved parameters there as config.json (without
// --out and --jobs), so `rad <cmd> --config out/config.json --out other/`
// reproduces the run.

#include <exception>
#include <iosfwd>

namespace rad::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitIo = 3;
inline constexpr int kExitNumeric = 4;

// Exit code for an exception escaping a subcommand.
int exit_code_for(const std::exception& e);

// Parses argv and runs one subcommand. Diagnostics go to `err` as one line.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace rad::cli
