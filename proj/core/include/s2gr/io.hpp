#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace s2gr::io {

// Little-endian primitives for the binary formats (EMB1, checkpoints).
void write_u32(std::ostream& out, std::uint32_t v);
void write_f32(std::ostream& out, float v);
void write_bytes(std::ostream& out, std::string_view bytes);
std::uint32_t read_u32(std::istream& in);
float read_f32(std::istream& in);
std::string read_bytes(std::istream& in, std::size_t n);

std::string read_text(const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, std::string_view text);

// Splits on a single delimiter character, keeping empty fields.
std::vector<std::string_view> split(std::string_view line, char delim);
std::string_view trim(std::string_view s);

// Hex-encoded SHA-256.
std::string sha256_hex(std::string_view data);
std::string sha256_file(const std::filesystem::path& path);

}  // namespace s2gr::io
