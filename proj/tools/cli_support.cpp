#include "cli_support.hpp"

#include <openssl/evp.h>

#include <chrono>
#include <ctime>
#include <fstream>
#include <regex>

#include "dirnet/error.hpp"
#include "json.hpp"

namespace dirnet::cli {

std::string git_blob_sha1(const std::string& content) {
  const std::string object = "blob " + std::to_string(content.size()) + '\0' + content;
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(object.data(), object.size(), digest, &len, EVP_sha1(), nullptr) != 1) {
    throw Error("SHA-1 digest failed");
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string hex;
  for (unsigned int i = 0; i < len; ++i) {
    hex += kHex[digest[i] >> 4];
    hex += kHex[digest[i] & 0xf];
  }
  return hex;
}

std::pair<std::size_t, std::size_t> parse_synthetic(const std::string& text) {
  static const std::regex re(R"((\d+)[xX](\d+))");
  std::smatch m;
  if (!std::regex_match(text, m, re)) throw ConfigError("--synthetic expects CxN, got '" + text + "'");
  const std::size_t classes = std::stoul(m[1].str());
  const std::size_t per_class = std::stoul(m[2].str());
  if (classes < 1 || classes > 16) throw ConfigError("--synthetic class count must be in [1, 16]");
  if (per_class < 1) throw ConfigError("--synthetic needs at least one sample per class");
  return {classes, per_class};
}

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void write_run_manifest(const std::filesystem::path& dir, const std::string& command,
                        const std::string& started_utc, std::uint64_t seed,
                        const std::string& effective_config) {
  nlohmann::ordered_json j;
  j["command"] = command;
  j["started_utc"] = started_utc;
  j["seed"] = seed;
  j["config_sha1"] = git_blob_sha1(effective_config);
  j["version"] = kVersion;
  j["version_sha1"] = git_blob_sha1(kVersion);
  std::ofstream os(dir / "run.json", std::ios::trunc);
  if (!os) throw Error("cannot write " + (dir / "run.json").string());
  os << j.dump(2) << '\n';
}

}  // namespace dirnet::cli
