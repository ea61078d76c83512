#ifndef ISCOM_CLI_HPP
#define ISCOM_CLI_HPP

#include <iosfwd>
#include <string>
#include <vector>

#include "json.hpp"

namespace iscom::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

/// Every tunable with its default, keyed by dotted name (roi.*, codec.*,
/// scheduler.*, sim.*, paths.*, seed).
nlohmann::json default_config();

/// Overlays a JSON config (dotted keys or nested objects) on the defaults.
/// Unknown keys and type mismatches throw InvalidArgument.
nlohmann::json merge_config(const nlohmann::json& base, const nlohmann::json& overrides);

/// Runs the command line; returns the process exit code.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

std::string version();

}  // namespace iscom::cli

#endif  // ISCOM_CLI_HPP
