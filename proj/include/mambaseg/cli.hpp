#pragma once

namespace mambaseg::cli {

/// Top-level command dispatch. Returns the process exit code:
/// 0 on success, 1 on config/runtime errors (with a diagnostic line on
/// stderr), 2 for an unknown subcommand (with usage text).
int dispatch(int argc, const char* const* argv);

}  // namespace mambaseg::cli
