#pragma once

#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <string>

namespace magic::wire {

// explicit little-endian encoding, independent of host byte order

inline void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(char(v & 0xff));
  out.push_back(char((v >> 8) & 0xff));
}
inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}
inline void put_f32(std::string& out, float f) {
  std::uint32_t u;
  std::memcpy(&u, &f, 4);
  put_u32(out, u);
}

struct Cursor {
  const std::string& buf;
  const char* what;  // label for truncation errors
  std::size_t pos = 0;

  void need(std::size_t n) const {
    if (n > buf.size() - pos) throw std::runtime_error(std::string(what) + ": truncated file");
  }
  std::uint64_t get_uint(std::size_t bytes) {
    need(bytes);
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < bytes; ++i)
      v |= std::uint64_t(std::uint8_t(buf[pos + i])) << (8 * i);
    pos += bytes;
    return v;
  }
  float get_f32() {
    const auto u = std::uint32_t(get_uint(4));
    float f;
    std::memcpy(&f, &u, 4);
    return f;
  }
  std::string get_bytes(std::size_t n) {
    need(n);
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
  bool done() const { return pos == buf.size(); }
};

}  // namespace magic::wire
