#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace slmt::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kData = 2, kNumerical = 3 };

// Parses argv and runs the selected subcommand; returns the process exit code.
int run(int argc, char** argv);

// Hex fnv1a64 of a file's bytes.
std::string file_digest(const std::filesystem::path& path);

}  // namespace slmt::cli
