#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace ccs {

// Error taxonomy mirrored by the CLI exit codes: usage=2, schema=3, numeric=4.
enum class errc { usage = 2, schema = 3, numeric = 4, internal = 1 };

class Error : public std::runtime_error {
public:
    Error(errc code, const std::string& msg) : std::runtime_error(msg), code_(code) {}
    errc code() const { return code_; }

private:
    errc code_;
};

[[noreturn]] inline void fail_schema(const std::string& msg) { throw Error(errc::schema, msg); }
[[noreturn]] inline void fail_usage(const std::string& msg) { throw Error(errc::usage, msg); }
[[noreturn]] inline void fail_numeric(const std::string& msg) { throw Error(errc::numeric, msg); }

// FNV-1a, used to stamp artifact files with the producing config.
inline uint64_t fnv1a64(const std::string& s) {
    uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

inline std::string hash_hex(const std::string& s) {
    static const char* digits = "0123456789abcdef";
    uint64_t h = fnv1a64(s);
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[i] = digits[h & 0xf];
        h >>= 4;
    }
    return out;
}

inline constexpr int kSchemaVersion = 1;

}  // namespace ccs
