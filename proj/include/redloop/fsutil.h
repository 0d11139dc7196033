#pragma once

#include <filesystem>
#include <string>

namespace redloop {

// Writes to a sibling temp file, flushes, then renames over `path`.
void write_file_atomic(const std::filesystem::path& path, const std::string& content);

// Throws NotFoundError when the file cannot be opened.
std::string read_file(const std::filesystem::path& path);

}  // namespace redloop
