#pragma once

#include <string>
#include <vector>

#include <json.hpp>

namespace prunekit {

enum ExitCode : int {
  kExitOk = 0,
  kExitOther = 1,
  kExitConfig = 2,
  kExitModel = 3,
  kExitEvaluator = 4,
};

/// Environment variable naming the default output directory.
inline constexpr const char* kOutputDirEnv = "PRUNEKIT_OUT";

/// Every recognized configuration key with its default value. Null entries
/// are optional paths or strings.
nlohmann::json default_run_config();

/// Overlays `patch` onto `base`, rejecting keys absent from `base` and
/// values whose JSON type differs from the default's.
void merge_config(nlohmann::json& base, const nlohmann::json& patch, const std::string& prefix = "");

/// Applies one dotted override "a.b=value". The value is parsed as JSON
/// when possible, otherwise taken as a string.
void apply_override(nlohmann::json& config, const std::string& assignment);

/// Builds the effective configuration: defaults, then --config file, then
/// dotted overrides. `args` excludes the program name.
nlohmann::json resolve_config(const std::vector<std::string>& args);

/// Entry point shared by the executable and the tests.
int run_cli(const std::vector<std::string>& args);

}  // namespace prunekit
