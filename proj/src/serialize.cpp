#include "bigtex/serialize.hpp"

#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "bigtex/errors.hpp"

namespace bigtex {

void write_u32(std::ostream& out, std::uint32_t v) {
  unsigned char bytes[4] = {static_cast<unsigned char>(v & 0xff),
                            static_cast<unsigned char>((v >> 8) & 0xff),
                            static_cast<unsigned char>((v >> 16) & 0xff),
                            static_cast<unsigned char>((v >> 24) & 0xff)};
  out.write(reinterpret_cast<const char*>(bytes), 4);
}

std::uint32_t read_u32(std::istream& in, const std::string& context) {
  unsigned char bytes[4];
  if (!in.read(reinterpret_cast<char*>(bytes), 4)) {
    throw LoadError(context + ": truncated file");
  }
  return static_cast<std::uint32_t>(bytes[0]) |
         (static_cast<std::uint32_t>(bytes[1]) << 8) |
         (static_cast<std::uint32_t>(bytes[2]) << 16) |
         (static_cast<std::uint32_t>(bytes[3]) << 24);
}

void write_f32_array(std::ostream& out, const float* data, std::size_t count) {
  static_assert(sizeof(float) == 4);
  for (std::size_t i = 0; i < count; ++i) {
    std::uint32_t bits;
    std::memcpy(&bits, &data[i], 4);
    write_u32(out, bits);
  }
}

void read_f32_array(std::istream& in, float* data, std::size_t count,
                    const std::string& context) {
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint32_t bits = read_u32(in, context);
    std::memcpy(&data[i], &bits, 4);
  }
}

void write_f32_matrix(const std::string& path, const std::array<char, 4>& magic,
                      const F32Matrix& m) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw LoadError("cannot write " + path);
  out.write(magic.data(), 4);
  write_u32(out, static_cast<std::uint32_t>(m.rows));
  write_u32(out, static_cast<std::uint32_t>(m.cols));
  write_f32_array(out, m.data.data(), m.data.size());
  if (!out) throw LoadError("short write to " + path);
}

F32Matrix read_f32_matrix(const std::string& path, const std::array<char, 4>& magic) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot read " + path);
  std::array<char, 4> got{};
  if (!in.read(got.data(), 4) || got != magic) {
    throw LoadError(path + ": bad magic (expected " +
                    std::string(magic.data(), 4) + ")");
  }
  F32Matrix m;
  m.rows = read_u32(in, path);
  m.cols = read_u32(in, path);
  m.data.resize(m.rows * m.cols);
  read_f32_array(in, m.data.data(), m.data.size(), path);
  return m;
}

}  // namespace bigtex
