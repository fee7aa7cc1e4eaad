#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

namespace dirnet::cli {

inline constexpr const char* kVersion = "dirnet 0.1.0";

enum ExitCode : int {
  kOk = 0,
  kOther = 1,
  kConfig = 2,
  kData = 3,
  kNumeric = 4,
  kFormat = 5,
};

/// Hex SHA-1 of the git blob object holding `content`.
std::string git_blob_sha1(const std::string& content);

/// Parses "CxN" into class count and samples per class.
std::pair<std::size_t, std::size_t> parse_synthetic(const std::string& text);

/// Writes run.json: command, start time (UTC), seed, config hash and the
/// version hash.
void write_run_manifest(const std::filesystem::path& dir, const std::string& command,
                        const std::string& started_utc, std::uint64_t seed,
                        const std::string& effective_config);

std::string utc_now();

}  // namespace dirnet::cli
