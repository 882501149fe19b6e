#pragma once

#include <cstdint>
#include <cstring>
#include <span>
#include <string>

namespace duet {

// FNV-1a over raw bytes; stable across platforms (little-endian id encoding
// is done explicitly by callers).
inline std::uint64_t fnv1a64(const void* data, std::size_t len,
                             std::uint64_t seed = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = seed;
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t hash_ids(std::span<const std::int32_t> ids) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::int32_t id : ids) {
    unsigned char b[4];
    const auto u = static_cast<std::uint32_t>(id);
    b[0] = static_cast<unsigned char>(u & 0xff);
    b[1] = static_cast<unsigned char>((u >> 8) & 0xff);
    b[2] = static_cast<unsigned char>((u >> 16) & 0xff);
    b[3] = static_cast<unsigned char>((u >> 24) & 0xff);
    h = fnv1a64(b, 4, h);
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<std::size_t>(i)] = digits[v & 0xf];
    v >>= 4;
  }
  return s;
}

inline std::uint64_t parse_hex64(const std::string& s) {
  std::uint64_t v = 0;
  for (char c : s) {
    v <<= 4;
    if (c >= '0' && c <= '9')
      v |= static_cast<std::uint64_t>(c - '0');
    else if (c >= 'a' && c <= 'f')
      v |= static_cast<std::uint64_t>(c - 'a' + 10);
    else if (c >= 'A' && c <= 'F')
      v |= static_cast<std::uint64_t>(c - 'A' + 10);
  }
  return v;
}

}  // namespace duet
