#pragma once

#include <charconv>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace subnetkit {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shape/conformance violations in tensor primitives.
struct DimensionError : Error {
    using Error::Error;
};

// Invalid argument values (bad ranges, empty inputs, unknown ids).
struct ArgumentError : Error {
    using Error::Error;
};

// API contract violations (e.g. backward on a non-scalar).
struct ContractError : Error {
    using Error::Error;
};

// NaN/Inf where finite values are required.
struct NumericError : Error {
    using Error::Error;
};

// Bad configuration (missing means, unknown keys, invalid combinations).
struct ConfigError : Error {
    using Error::Error;
};

// Malformed input data (jsonl records, vocab files).
struct DataError : Error {
    using Error::Error;
};

struct IoError : Error {
    using Error::Error;
};

inline std::string shape_str(const std::vector<long>& shape) {
    std::string s = "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

// Shortest round-trip decimal representation; locale-free and deterministic.
inline std::string num_str(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

inline std::string num_str(long v) { return std::to_string(v); }

template <class... Args>
std::string cat(const Args&... args) {
    std::ostringstream os;
    (os << ... << args);
    return os.str();
}

}  // namespace subnetkit
