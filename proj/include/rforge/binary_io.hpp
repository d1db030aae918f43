#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>

// Little-endian primitives shared by the PTCHK1 and PSET1 formats.
namespace rforge::io {

void write_u64(std::ostream& os, std::uint64_t v);
void write_f64(std::ostream& os, double v);
void write_bytes(std::ostream& os, std::string_view bytes);

std::uint64_t read_u64(std::istream& is);
double read_f64(std::istream& is);
std::string read_bytes(std::istream& is, std::size_t count);

std::ofstream open_out(const std::filesystem::path& path);
std::ifstream open_in(const std::filesystem::path& path);

// Throws std::runtime_error naming the file unless the stream is good.
void check_stream(const std::ios& s, const std::filesystem::path& path, std::string_view what);

}  // namespace rforge::io
