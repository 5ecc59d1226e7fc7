#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

namespace unibf::cli {

/// Environment variable naming the directory relative --out paths resolve
/// against.
inline constexpr const char* kOutDirEnv = "UNIBF_OUT_DIR";

/// Exit codes: 0 success, 1 runtime failure, 2 usage error.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, char** argv);

std::filesystem::path resolve_out(const std::string& out);

/// <out> with its extension replaced by ".manifest.json".
std::filesystem::path manifest_path(const std::filesystem::path& out);
/// <out> with its extension replaced by ".log.csv".
std::filesystem::path log_path(const std::filesystem::path& out);

std::string code_fingerprint();

}  // namespace unibf::cli
