#pragma once

#include <charconv>
#include <cmath>
#include <cstdint>
#include <string>

namespace mhc {

// Shortest round-trip decimal form, locale independent (reproducible output).
inline std::string fmt_double(double v) {
    if (std::isnan(v)) return "nan";
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return {buf, res.ptr};
}

inline std::string fmt_fixed(double v, int precision) {
    if (std::isnan(v)) return "nan";
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::fixed, precision);
    return {buf, res.ptr};
}

inline std::string fmt_hex64(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<std::size_t>(i)] = digits[v & 0xf];
        v >>= 4;
    }
    return out;
}

}  // namespace mhc
