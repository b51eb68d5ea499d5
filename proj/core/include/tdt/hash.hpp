#pragma once

#include <span>
#include <string>
#include <string_view>

namespace tdt {

std::string sha256_hex(std::span<const unsigned char> bytes);
std::string sha256_hex(std::string_view text);
// Throws IoError when the file cannot be read.
std::string sha256_file(const std::string& path);

}  // namespace tdt
