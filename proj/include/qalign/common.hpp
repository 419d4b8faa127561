#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace qalign {

// Error taxonomy. The CLI maps these onto its exit-code contract:
// invariant violations -> 1, usage/format -> 2, data hygiene -> 3.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shape or dimension mismatch between tensors.
struct DimensionError : Error {
    using Error::Error;
};

// Invalid configuration value (bad rank, bad hyperparameter, ...).
struct ConfigError : Error {
    using Error::Error;
};

// Problems in datasets or model inputs (non-finite values, empty spans, ...).
struct DataError : Error {
    using Error::Error;
};

// Corrupted or inconsistent on-disk artifacts, or violated internal invariants.
struct IntegrityError : Error {
    using Error::Error;
};

// Malformed files or bad command usage.
struct UsageError : Error {
    using Error::Error;
};

// Train/eval overlap detected by the disjointness check.
struct DisjointnessError : Error {
    using Error::Error;
};

struct IoError : Error {
    using Error::Error;
};

// FNV-1a 64-bit. Used for config fingerprints and parameter checksums;
// not cryptographic.
inline std::uint64_t fnv1a64(const void* bytes, std::size_t len,
                             std::uint64_t seed = 14695981039346656037ull) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    std::uint64_t h = seed;
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

inline std::uint64_t fnv1a64(const std::string& s) {
    return fnv1a64(s.data(), s.size());
}

inline std::string hex64(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<std::size_t>(i)] = digits[v & 0xf];
        v >>= 4;
    }
    return out;
}

}  // namespace qalign
