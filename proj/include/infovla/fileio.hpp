#pragma once

#include <string>

namespace infovla {

// Writes via a temp file in the same directory and renames into place, so
// interrupted runs never leave truncated artifacts.
void write_file_atomic(const std::string& path, const std::string& contents);

std::string read_file(const std::string& path);

}  // namespace infovla
