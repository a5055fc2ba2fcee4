#pragma once

// Small file and encoding helpers shared by the serialisers.

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace rsp {

/// Lowercase hex SHA-256 digest.
std::string sha256_hex(std::string_view data);

std::string base64_encode(std::span<const std::uint8_t> bytes);
/// Throws FormatError on malformed input.
std::vector<std::uint8_t> base64_decode(std::string_view text);

/// Whole file as a string; throws Error naming the path on failure.
std::string read_file(const std::string& path);
/// Writes via a temporary file and rename.
void write_file(const std::string& path, std::string_view contents);

/// Current UTC time as YYYY-MM-DDTHH:MM:SSZ.
std::string utc_timestamp();

}  // namespace rsp
