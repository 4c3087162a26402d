#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>

#include "r2p/encoder.hpp"
#include "r2p/errors.hpp"
#include "r2p/inference.hpp"
#include "r2p/vlm.hpp"

namespace r2p::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitDomain = 2;
inline constexpr int kExitUsage = 64;

struct CliConfig {
  std::filesystem::path db_path;
  EncoderBackendConfig encoder;
  VlmBackendConfig vlm;
  PipelineConfig pipeline;
  std::string log_level = "warn";
};

using EnvLookup = std::function<std::optional<std::string>(const std::string&)>;

// Process environment.
std::optional<std::string> process_env(const std::string& name);

// Applies r2p.toml settings; relative paths are resolved against the file's directory.
// Throws kIoFailure / kInvalidArgument.
void apply_config_file(CliConfig& config, const std::filesystem::path& path);

// Applies R2P_VLM_BASE_URL, R2P_VLM_API_KEY_ENV and R2P_EMBED_BASE_URL.
void apply_environment(CliConfig& config, const EnvLookup& env);

// Exit status for an error raised while running a command.
int exit_code_for(ErrorCode code);

// Parses argv, runs one subcommand and returns its exit status. Results go to
// `out` as JSON; diagnostics go to `err`.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err,
        const EnvLookup& env = process_env);

}  // namespace r2p::cli
