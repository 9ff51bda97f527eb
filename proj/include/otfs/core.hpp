#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <complex>
#include <cstddef>
#include <numbers>
#include <stdexcept>
#include <string>
#include <string_view>

namespace otfs {

using cx = std::complex<double>;
using CMatrix = Eigen::MatrixXcd;
using CVector = Eigen::VectorXcd;

inline constexpr double kPi = std::numbers::pi;
inline constexpr cx kJ{0.0, 1.0};

// ============================================================================
// Errors
// ============================================================================

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A dimension is zero or two shapes disagree.
class InvalidDimension : public Error {
public:
    using Error::Error;
};

/// Frame configuration and channel model are inconsistent (prefix too short, delay too large, ...).
class ConfigurationError : public Error {
public:
    using Error::Error;
};

/// The requested path has no closed form for the given input (e.g. fractional Doppler).
class UnsupportedError : public Error {
public:
    using Error::Error;
};

/// A matrix that must be invertible is not.
class SingularMatrixError : public Error {
public:
    using Error::Error;
};

/// A matrix does not have the structure an operation requires.
class StructuralError : public Error {
public:
    using Error::Error;
};

/// An iterative algorithm produced non-finite values.
class NumericalFailure : public Error {
public:
    using Error::Error;
};

/// Malformed serialized input (JSON documents, experiment configs).
class ParseError : public Error {
public:
    using Error::Error;
};

// ============================================================================
// Frame configuration
// ============================================================================

/// Prefix/suffix arrangement of an OTFS frame.
enum class FrameKind { RCP, RZP, FCP, FZS, RFCP };

inline std::string_view to_string(FrameKind kind) {
    switch (kind) {
        case FrameKind::RCP: return "RCP";
        case FrameKind::RZP: return "RZP";
        case FrameKind::FCP: return "FCP";
        case FrameKind::FZS: return "FZS";
        case FrameKind::RFCP: return "RFCP";
    }
    return "?";
}

inline FrameKind frame_kind_from_string(std::string_view name) {
    if (name == "RCP") return FrameKind::RCP;
    if (name == "RZP") return FrameKind::RZP;
    if (name == "FCP") return FrameKind::FCP;
    if (name == "FZS") return FrameKind::FZS;
    if (name == "RFCP") return FrameKind::RFCP;
    throw ParseError("unknown frame kind '" + std::string(name) + "'");
}

/**
 * Shape of one OTFS frame.
 *
 * M delay bins (samples per subsymbol), N Doppler bins (subsymbols),
 * a prefix of `cp_len` samples and, for FZS, `zs_len` zeroed delay rows.
 */
struct FrameConfig {
    FrameKind kind = FrameKind::RCP;
    std::size_t M = 0;
    std::size_t N = 0;
    std::size_t cp_len = 0;
    std::size_t zs_len = 0;

    std::size_t MN() const { return M * N; }

    /// Samples on air for one frame, prefixes and padding included.
    std::size_t frame_samples() const {
        switch (kind) {
            case FrameKind::RCP:
            case FrameKind::RZP: return M * N + cp_len;
            case FrameKind::FCP: return (M + cp_len) * N;
            case FrameKind::FZS: return M * N;
            case FrameKind::RFCP: return (M + cp_len) * N + cp_len;
        }
        return 0;
    }

    /// Number of delay rows that carry data (FZS reserves the last `zs_len`).
    std::size_t data_rows() const { return kind == FrameKind::FZS ? M - zs_len : M; }

    /// Throws when the configuration is not well formed on its own.
    void validate() const {
        if (M == 0 || N == 0) throw InvalidDimension("frame needs M >= 1 and N >= 1");
        if (kind == FrameKind::FZS && zs_len >= M)
            throw ConfigurationError("FZS requires zs_len < M");
        if ((kind == FrameKind::RZP || kind == FrameKind::RCP) && cp_len > M * N)
            throw ConfigurationError("reduced prefix longer than the frame");
        if ((kind == FrameKind::FCP || kind == FrameKind::RFCP) && cp_len > M)
            throw ConfigurationError("full CP longer than a subsymbol");
    }

    friend bool operator==(const FrameConfig&, const FrameConfig&) = default;
};

inline FrameConfig make_config(FrameKind kind, std::size_t M, std::size_t N, std::size_t cp_len = 0,
                               std::size_t zs_len = 0) {
    FrameConfig cfg{kind, M, N, cp_len, zs_len};
    cfg.validate();
    return cfg;
}

/// Non-negative remainder.
inline std::ptrdiff_t wrap(std::ptrdiff_t value, std::ptrdiff_t modulus) {
    std::ptrdiff_t r = value % modulus;
    return r < 0 ? r + modulus : r;
}

/// exp(j * 2pi * numerator / denominator) with the ratio reduced first, so large integer
/// exponents keep full precision.
inline cx unit_phase(double numerator, double denominator) {
    double turns = std::fmod(numerator, denominator) / denominator;
    return std::polar(1.0, 2.0 * kPi * turns);
}

}  // namespace otfs
