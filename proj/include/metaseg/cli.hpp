#pragma once

namespace metaseg {

/// Dispatches the metaseg subcommands. Exit codes: 0 ok, 2 config, 3 numeric
/// abort, 4 checkpoint/file format, 5 missing data.
int run_cli(int argc, const char* const* argv);

}  // namespace metaseg
