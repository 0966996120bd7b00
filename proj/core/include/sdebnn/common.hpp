#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace sdebnn {

// ---------------------------------------------------------------------------
// Error taxonomy. Thrown by core operations; the CLI maps these to exit codes.
// ---------------------------------------------------------------------------

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Operand shapes do not agree (matmul inner dims, conv kernel vs input, ...).
struct ShapeError : Error {
    using Error::Error;
};

/// A documented precondition was violated by the caller.
struct ContractError : Error {
    using Error::Error;
};

/// Numeric-domain violation (non-finite input, singular time factor, sigma=0).
struct NumericDomainError : Error {
    using Error::Error;
};

/// Invalid or inconsistent configuration (bad key, bad preset, bad geometry).
struct ConfigError : Error {
    using Error::Error;
};

/// Malformed external file (IDX magic, truncated payload, bad checkpoint).
struct FormatError : Error {
    using Error::Error;
};

/// Filesystem / network failure.
struct IoError : Error {
    using Error::Error;
};

/// The solver state became non-finite; carries the failing time.
struct DivergenceError : Error {
    double t;
    explicit DivergenceError(double time, const std::string& what)
        : Error(what), t(time) {}
};

/// The solver exceeded its drift-evaluation budget.
struct NfeBudgetError : Error {
    using Error::Error;
};

// ---------------------------------------------------------------------------
// Counter-based RNG primitives. All stochastic pieces of the artifact
// (Brownian tree, dataset synthesis, parameter init) derive values as pure
// functions of integer keys so results are independent of query order.
// ---------------------------------------------------------------------------

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t hash_mix(std::uint64_t a, std::uint64_t b) {
    return splitmix64(a ^ splitmix64(b));
}

inline std::uint64_t hash_mix(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
    return hash_mix(hash_mix(a, b), c);
}

inline std::uint64_t hash_mix(std::uint64_t a, std::uint64_t b, std::uint64_t c,
                              std::uint64_t d) {
    return hash_mix(hash_mix(a, b, c), d);
}

/// Uniform in (0, 1); never returns exactly 0 so log() is safe.
inline double uniform01(std::uint64_t bits) {
    return (static_cast<double>(bits >> 11) + 0.5) * (1.0 / 9007199254740992.0);
}

/// One standard normal from two integer-keyed uniforms (Box-Muller).
inline double normal_from_key(std::uint64_t key, std::uint64_t counter) {
    const double u1 = uniform01(hash_mix(key, 2 * counter));
    const double u2 = uniform01(hash_mix(key, 2 * counter + 1));
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
}

}  // namespace sdebnn
