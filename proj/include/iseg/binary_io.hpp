#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>

#include "iseg/error.hpp"

// Little-endian primitive encoding shared by the ISEG1 and ISNN1 container formats.
namespace iseg::bin {

inline void put_u8(std::ostream& os, std::uint8_t v) { os.put(static_cast<char>(v)); }

inline void put_u32(std::ostream& os, std::uint32_t v) {
    std::array<char, 4> b{};
    for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xffu);
    os.write(b.data(), 4);
}

inline void put_f32(std::ostream& os, float v) { put_u32(os, std::bit_cast<std::uint32_t>(v)); }

inline void put_string(std::ostream& os, const std::string& s) {
    put_u32(os, static_cast<std::uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::uint8_t get_u8(std::istream& is) {
    const int c = is.get();
    if (c == std::char_traits<char>::eof()) throw FormatError("unexpected end of file");
    return static_cast<std::uint8_t>(c);
}

inline std::uint32_t get_u32(std::istream& is) {
    std::array<unsigned char, 4> b{};
    if (!is.read(reinterpret_cast<char*>(b.data()), 4)) throw FormatError("unexpected end of file");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(b[i]) << (8 * i);
    return v;
}

inline float get_f32(std::istream& is) { return std::bit_cast<float>(get_u32(is)); }

inline std::string get_string(std::istream& is, std::uint32_t max_len = 1u << 24) {
    const std::uint32_t n = get_u32(is);
    if (n > max_len) throw FormatError("string length " + std::to_string(n) + " exceeds limit");
    std::string s(n, '\0');
    if (n && !is.read(s.data(), n)) throw FormatError("unexpected end of file");
    return s;
}

/// Reads and checks a 4-byte magic plus version byte.
inline void expect_magic(std::istream& is, const char (&magic)[5], std::uint8_t version, const char* format) {
    char got[4] = {};
    if (!is.read(got, 4) || std::memcmp(got, magic, 4) != 0) {
        throw FormatError(std::string("bad magic: not an ") + format + " file");
    }
    const int v = is.get();
    if (v != version) {
        throw FormatError(std::string("unsupported ") + format + " version " + std::to_string(v));
    }
}

}  // namespace iseg::bin
