#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace parenting {

/// Writes through a temporary file and renames it into place. Throws IoError.
void write_text_file(const std::filesystem::path& path, std::string_view content);
/// Throws IoError when the file cannot be read.
std::string read_text_file(const std::filesystem::path& path);
std::vector<std::string> read_lines(const std::filesystem::path& path);

std::vector<std::string> split_fields(std::string_view line, char delimiter);
/// Strict numeric parsing; trailing characters raise InputError.
int parse_int(std::string_view text);
long long parse_int64(std::string_view text);
double parse_double(std::string_view text);

}  // namespace parenting
