#pragma once

// Little-endian primitives shared by the checkpoint, feature and store formats.

#include <bit>
#include <cstdint>
#include <istream>
#include <ostream>
#include <string>
#include <string_view>

#include "msgcel/types.hpp"

namespace msgcel::io {

template <typename UInt>
void write_le(std::ostream& os, UInt value) {
    static_assert(std::is_unsigned_v<UInt>);
    char bytes[sizeof(UInt)];
    for (std::size_t i = 0; i < sizeof(UInt); ++i) {
        bytes[i] = static_cast<char>((value >> (8 * i)) & 0xFFu);
    }
    os.write(bytes, sizeof(UInt));
}

template <typename UInt>
UInt read_le(std::istream& is) {
    static_assert(std::is_unsigned_v<UInt>);
    unsigned char bytes[sizeof(UInt)];
    if (!is.read(reinterpret_cast<char*>(bytes), sizeof(UInt))) {
        throw ParseError("unexpected end of binary stream");
    }
    UInt value = 0;
    for (std::size_t i = 0; i < sizeof(UInt); ++i) {
        value |= static_cast<UInt>(bytes[i]) << (8 * i);
    }
    return value;
}

inline void write_u32(std::ostream& os, std::uint32_t v) { write_le(os, v); }
inline void write_u64(std::ostream& os, std::uint64_t v) { write_le(os, v); }
inline void write_f64(std::ostream& os, double v) { write_le(os, std::bit_cast<std::uint64_t>(v)); }
inline void write_f32(std::ostream& os, float v) { write_le(os, std::bit_cast<std::uint32_t>(v)); }
inline void write_i64(std::ostream& os, std::int64_t v) { write_le(os, static_cast<std::uint64_t>(v)); }

inline std::uint32_t read_u32(std::istream& is) { return read_le<std::uint32_t>(is); }
inline std::uint64_t read_u64(std::istream& is) { return read_le<std::uint64_t>(is); }
inline double read_f64(std::istream& is) { return std::bit_cast<double>(read_le<std::uint64_t>(is)); }
inline float read_f32(std::istream& is) { return std::bit_cast<float>(read_le<std::uint32_t>(is)); }
inline std::int64_t read_i64(std::istream& is) { return static_cast<std::int64_t>(read_le<std::uint64_t>(is)); }

inline void write_magic(std::ostream& os, std::string_view magic) { os.write(magic.data(), static_cast<std::streamsize>(magic.size())); }

/// Throws ParseError("<magic> expected") when the next bytes differ.
inline void expect_magic(std::istream& is, std::string_view magic) {
    std::string got(magic.size(), '\0');
    if (!is.read(got.data(), static_cast<std::streamsize>(got.size())) || got != magic) {
        throw ParseError(std::string(magic) + " expected");
    }
}

inline void write_string(std::ostream& os, std::string_view s) {
    write_u32(os, static_cast<std::uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& is) {
    const auto n = read_u32(is);
    std::string s(n, '\0');
    if (n > 0 && !is.read(s.data(), n)) {
        throw ParseError("unexpected end of binary stream");
    }
    return s;
}

/// Shortest decimal text that parses back to the same double.
std::string format_double(double v);

/// FNV-1a, used for config fingerprints stored in checkpoints.
std::uint64_t fnv1a64(std::string_view bytes);

}  // namespace msgcel::io

namespace msgcel {

/// splitmix64 finalizer over (a, b); derives independent per-step seeds.
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
    std::uint64_t z = a + 0x9E3779B97F4A7C15ull * (b + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

}  // namespace msgcel
