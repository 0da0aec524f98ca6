#pragma once

#include <filesystem>
#include <string>
#include <string_view>

namespace bbgc {

// Lower-case hex SHA-256.
std::string sha256_hex(std::string_view bytes);
std::string sha256_file(const std::filesystem::path& path);

// Standard alphabet with padding, no line breaks.
std::string base64_encode(std::string_view bytes);
std::string base64_decode(std::string_view text);

}  // namespace bbgc
