#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>

namespace subnetkit {

// Counter-based random streams. Every random decision in the toolkit is a
// pure function of (seed, stream, counters...), so runs are reproducible,
// resumable from any step, and parallelizable across seeds without shared
// generator state.

inline std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

constexpr std::uint64_t stream_id(const char* name) {
    std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
    for (const char* p = name; *p; ++p) {
        h ^= static_cast<std::uint64_t>(*p);
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::uint64_t rng_u64(std::initializer_list<std::uint64_t> keys) {
    std::uint64_t h = 0x243f6a8885a308d3ULL;
    for (std::uint64_t k : keys) h = mix64(h ^ mix64(k));
    return h;
}

// Uniform in [0,1), 53-bit resolution.
inline double rng_unit(std::initializer_list<std::uint64_t> keys) {
    return static_cast<double>(rng_u64(keys) >> 11) * 0x1.0p-53;
}

// Uniform strictly inside (0,1).
inline double rng_open(std::initializer_list<std::uint64_t> keys) {
    return (static_cast<double>(rng_u64(keys) >> 11) + 0.5) * 0x1.0p-53;
}

// Standard normal via Box-Muller on two derived counters.
inline double rng_normal(std::initializer_list<std::uint64_t> keys) {
    std::uint64_t base = rng_u64(keys);
    double u1 = (static_cast<double>(mix64(base) >> 11) + 0.5) * 0x1.0p-53;
    double u2 = (static_cast<double>(mix64(base ^ 0x5bf0363546e95b3dULL) >> 11) + 0.5) * 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

// Unbiased-enough index draw for batch sampling (modulo bias is < 2^-40 here).
inline std::size_t rng_index(std::initializer_list<std::uint64_t> keys, std::size_t n) {
    return static_cast<std::size_t>(rng_u64(keys) % static_cast<std::uint64_t>(n));
}

}  // namespace subnetkit
