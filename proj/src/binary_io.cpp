#include "rforge/binary_io.hpp"

#include <array>
#include <bit>
#include <stdexcept>

namespace rforge::io {

void write_u64(std::ostream& os, std::uint64_t v) {
  std::array<char, 8> buf{};
  for (int i = 0; i < 8; ++i) buf[static_cast<std::size_t>(i)] = static_cast<char>((v >> (8 * i)) & 0xFF);
  os.write(buf.data(), buf.size());
}

void write_f64(std::ostream& os, double v) { write_u64(os, std::bit_cast<std::uint64_t>(v)); }

void write_bytes(std::ostream& os, std::string_view bytes) {
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

std::uint64_t read_u64(std::istream& is) {
  std::array<unsigned char, 8> buf{};
  is.read(reinterpret_cast<char*>(buf.data()), buf.size());
  if (!is) throw std::runtime_error("unexpected end of file");
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | buf[static_cast<std::size_t>(i)];
  return v;
}

double read_f64(std::istream& is) { return std::bit_cast<double>(read_u64(is)); }

std::string read_bytes(std::istream& is, std::size_t count) {
  std::string s(count, '\0');
  is.read(s.data(), static_cast<std::streamsize>(count));
  if (!is) throw std::runtime_error("unexpected end of file");
  return s;
}

std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  check_stream(os, path, "cannot open for writing");
  return os;
}

std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  check_stream(is, path, "cannot open for reading");
  return is;
}

void check_stream(const std::ios& s, const std::filesystem::path& path, std::string_view what) {
  if (!s.good()) throw std::runtime_error(path.string() + ": " + std::string(what));
}

}  // namespace rforge::io
