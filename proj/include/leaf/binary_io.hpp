#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <string_view>

#include "leaf/error.hpp"
#include "leaf/numerics.hpp"

// Little-endian primitives shared by the cache, encoder and trainer formats.
namespace leaf::binary {

template <typename UInt>
void write_le(std::ostream& out, UInt value) {
  std::array<char, sizeof(UInt)> bytes{};
  for (std::size_t i = 0; i < sizeof(UInt); ++i) bytes[i] = static_cast<char>((value >> (8 * i)) & 0xFF);
  out.write(bytes.data(), bytes.size());
}

template <typename UInt>
UInt read_le(std::istream& in) {
  std::array<unsigned char, sizeof(UInt)> bytes{};
  in.read(reinterpret_cast<char*>(bytes.data()), bytes.size());
  if (!in) throw Error(ErrorKind::Format, "unexpected end of file");
  UInt value = 0;
  for (std::size_t i = 0; i < sizeof(UInt); ++i) value |= static_cast<UInt>(bytes[i]) << (8 * i);
  return value;
}

inline void write_u8(std::ostream& out, std::uint8_t v) { write_le<std::uint8_t>(out, v); }
inline void write_u32(std::ostream& out, std::uint32_t v) { write_le(out, v); }
inline void write_u64(std::ostream& out, std::uint64_t v) { write_le(out, v); }
inline void write_f32(std::ostream& out, float v) { write_le(out, std::bit_cast<std::uint32_t>(v)); }
inline void write_f64(std::ostream& out, double v) { write_le(out, std::bit_cast<std::uint64_t>(v)); }

inline std::uint8_t read_u8(std::istream& in) { return read_le<std::uint8_t>(in); }
inline std::uint32_t read_u32(std::istream& in) { return read_le<std::uint32_t>(in); }
inline std::uint64_t read_u64(std::istream& in) { return read_le<std::uint64_t>(in); }
inline float read_f32(std::istream& in) { return std::bit_cast<float>(read_le<std::uint32_t>(in)); }
inline double read_f64(std::istream& in) { return std::bit_cast<double>(read_le<std::uint64_t>(in)); }

inline void write_magic(std::ostream& out, std::string_view magic) { out.write(magic.data(), 4); }

inline void expect_magic(std::istream& in, std::string_view magic) {
  std::array<char, 4> got{};
  in.read(got.data(), 4);
  if (!in || std::string_view(got.data(), 4) != magic) {
    throw Error(ErrorKind::Format, "bad magic, expected '" + std::string(magic) + "'");
  }
}

inline void write_string(std::ostream& out, std::string_view s) {
  write_u32(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& in, std::size_t limit = 1u << 24) {
  const std::uint32_t n = read_u32(in);
  if (n > limit) throw Error(ErrorKind::Format, "string length " + std::to_string(n) + " exceeds limit");
  std::string s(n, '\0');
  in.read(s.data(), n);
  if (!in) throw Error(ErrorKind::Format, "unexpected end of file in string");
  return s;
}

// Row-major float block, no shape header.
inline void write_floats(std::ostream& out, const Tensor2& m) {
  for (Eigen::Index i = 0; i < m.size(); ++i) write_f32(out, m.data()[i]);
}

inline void read_floats(std::istream& in, Tensor2& m) {
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = read_f32(in);
}

}  // namespace leaf::binary
