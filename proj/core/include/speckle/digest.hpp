#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>

namespace speckle {

using Digest = std::array<std::uint8_t, 32>;

Digest sha256(std::span<const std::uint8_t> bytes);
Digest sha256(const std::string& text);
Digest sha256_file(const std::filesystem::path& path);
std::string hex(const Digest& d);

}  // namespace speckle
