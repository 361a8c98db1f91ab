#pragma once

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace groundling {

// ----------------------------- error taxonomy -----------------------------
// Exit-code contract for the CLI: usage/config -> 2, numeric -> 3, corrupt -> 4.

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ShapeError : Error { using Error::Error; };
struct ConfigError : Error { using Error::Error; };
struct VocabError : Error { using Error::Error; };
struct GenerationError : Error { using Error::Error; };
struct ConsistencyError : Error { using Error::Error; };
struct PreconditionError : Error { using Error::Error; };
struct InputError : Error { using Error::Error; };
struct NumericError : Error { using Error::Error; };
struct DeterminismError : Error { using Error::Error; };
struct IoError : Error { using Error::Error; };
struct CorruptArtifactError : Error { using Error::Error; };

// ----------------------------- small helpers -----------------------------

inline std::string shape_str(const std::vector<int64_t>& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) os << "x";
        os << s[i];
    }
    os << "]";
    return os.str();
}

// FNV-1a, used for config hashes and seed derivation. Stable across platforms.
inline uint64_t fnv1a64(std::string_view bytes, uint64_t h = 0xcbf29ce484222325ull) {
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::string hex64(uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<size_t>(i)] = digits[v & 0xf];
        v >>= 4;
    }
    return out;
}

inline std::vector<std::string> split_str(std::string_view s, char sep) {
    std::vector<std::string> out;
    size_t start = 0;
    while (start <= s.size()) {
        size_t end = s.find(sep, start);
        if (end == std::string_view::npos) {
            out.emplace_back(s.substr(start));
            break;
        }
        out.emplace_back(s.substr(start, end - start));
        start = end + 1;
    }
    return out;
}

inline std::string trim_str(std::string_view s) {
    size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return std::string(s.substr(b, e - b));
}

}  // namespace groundling
