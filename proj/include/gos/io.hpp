#pragma once

#include <filesystem>
#include <string>
#include <string_view>

namespace gos {

// Throws MissingArtifactError when the file cannot be opened.
std::string read_file(const std::filesystem::path& path);
// Writes to a sibling temporary file and renames it over `path`, so readers
// never observe a partially written artifact.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);

// Lowercase 16-hex-digit FNV-1a digest.
std::string fnv1a_hex(std::string_view bytes);

}  // namespace gos
