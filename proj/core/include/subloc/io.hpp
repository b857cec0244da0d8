#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

namespace subloc::io {

// Raw little-endian float32 blobs (the on-disk tensor format).
void write_f32_blob(const std::filesystem::path& path, const float* data, std::size_t count);
std::vector<float> read_f32_blob(const std::filesystem::path& path, std::size_t expected_count);

void write_text_file(const std::filesystem::path& path, const std::string& content);
std::string read_text_file(const std::filesystem::path& path);

// Fixed-format float for CSV/log output: shortest round-trip decimal.
std::string format_value(double v);
std::string format_value(float v);

}  // namespace subloc::io
