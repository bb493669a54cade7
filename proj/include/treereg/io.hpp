#pragma once

#include <string>

namespace treereg {

// Writes via a temp file in the same directory then renames, so readers never
// observe a half-written file. Creates parent directories as needed.
void atomic_write_file(const std::string& path, const std::string& contents);

std::string read_file(const std::string& path);

}  // namespace treereg
