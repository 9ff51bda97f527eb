#pragma once

#include "otfs/core.hpp"
#include "otfs/grid.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <vector>

namespace otfs {

// ============================================================================
// Channel model
// ============================================================================

/// Which frame length the Doppler bins of a model are counted on.
enum class DopplerGrid {
    RCP,  // M*N samples
    FCP,  // (M + cp_len)*N samples
};

inline std::string_view to_string(DopplerGrid grid) { return grid == DopplerGrid::RCP ? "RCP" : "FCP"; }

/// One propagation path: complex gain, integer delay in samples, Doppler in bins.
struct ChannelTap {
    cx gain{1.0, 0.0};
    std::size_t delay = 0;
    double doppler = 0.0;
};

/**
 * Doubly-dispersive channel h(tau, nu) = sum_i h_i delta(tau - tau_i) delta(nu - nu_i).
 *
 * Doppler values are expressed in bins of the declared grid: a tap with
 * doppler k advances its phase by 2 pi k / frame_len per sample, where
 * frame_len is M*N for DopplerGrid::RCP and (M + cp_len)*N for DopplerGrid::FCP.
 */
struct ChannelModel {
    std::vector<ChannelTap> taps;
    DopplerGrid grid = DopplerGrid::RCP;
    bool normalized = false;

    std::size_t max_delay() const {
        std::size_t d = 0;
        for (const auto& t : taps) d = std::max(d, t.delay);
        return d;
    }

    double power() const {
        double p = 0.0;
        for (const auto& t : taps) p += std::norm(t.gain);
        return p;
    }
};

/// Receiver noise. The variance is relative to unit average symbol energy.
struct NoiseSpec {
    double snr_db = 0.0;
    bool enabled = false;

    double variance() const { return enabled ? std::pow(10.0, -snr_db / 10.0) : 0.0; }
};

/// Frame length (in samples) that Doppler bins of `grid` refer to under `cfg`.
inline std::size_t grid_frame_len(DopplerGrid grid, const FrameConfig& cfg) {
    return grid == DopplerGrid::RCP ? cfg.M * cfg.N : (cfg.M + cfg.cp_len) * cfg.N;
}

/// The grid on which a configuration's closed forms count Doppler.
inline DopplerGrid native_grid(const FrameConfig& cfg) {
    return (cfg.kind == FrameKind::FCP || cfg.kind == FrameKind::RFCP) ? DopplerGrid::FCP : DopplerGrid::RCP;
}

/// Re-expresses the model's Doppler values in bins of another grid (same physical shift).
inline ChannelModel rebase(const ChannelModel& model, const FrameConfig& cfg, DopplerGrid target) {
    ChannelModel out = model;
    const double scale = static_cast<double>(grid_frame_len(target, cfg)) /
                         static_cast<double>(grid_frame_len(model.grid, cfg));
    for (auto& t : out.taps) t.doppler *= scale;
    out.grid = target;
    return out;
}

/// z_i = exp(j 2 pi k_i / frame_len); fractional k_i allowed.
inline cx per_sample_phase(const ChannelTap& tap, std::size_t frame_len) {
    if (frame_len == 0) throw InvalidDimension("frame length must be positive");
    return std::polar(1.0, 2.0 * kPi * tap.doppler / static_cast<double>(frame_len));
}

/// Throws ConfigurationError when the prefix/suffix cannot absorb the delay spread.
inline void check_compatible(const ChannelModel& model, const FrameConfig& cfg) {
    cfg.validate();
    if (model.taps.empty()) throw ConfigurationError("channel model has no taps");
    for (const auto& t : model.taps) {
        if (!std::isfinite(t.gain.real()) || !std::isfinite(t.gain.imag()) || !std::isfinite(t.doppler))
            throw ConfigurationError("channel tap has a non-finite gain or Doppler");
    }
    const std::size_t d = model.max_delay();
    if (d >= cfg.M) throw ConfigurationError("tap delay " + std::to_string(d) + " >= M");
    if (cfg.kind == FrameKind::FZS) {
        if (d > cfg.zs_len)
            throw ConfigurationError("FZS suffix " + std::to_string(cfg.zs_len) + " shorter than delay " +
                                     std::to_string(d));
    } else if (d > cfg.cp_len) {
        throw ConfigurationError("prefix " + std::to_string(cfg.cp_len) + " shorter than delay " +
                                 std::to_string(d));
    }
}

/// Tap with its Doppler as an integer bin on the configuration's native grid.
struct IntegerTap {
    cx gain;
    std::ptrdiff_t delay;
    std::ptrdiff_t doppler;
};

/// Integer-bin view used by every closed-form path; fractional Doppler is rejected.
inline std::vector<IntegerTap> integer_taps(const ChannelModel& model, const FrameConfig& cfg) {
    const ChannelModel native = rebase(model, cfg, native_grid(cfg));
    std::vector<IntegerTap> out;
    out.reserve(native.taps.size());
    for (const auto& t : native.taps) {
        const double k = std::round(t.doppler);
        if (std::abs(k - t.doppler) > 1e-9)
            throw UnsupportedError("fractional Doppler " + std::to_string(t.doppler) +
                                   " has no closed form; use propagate()");
        out.push_back({t.gain, static_cast<std::ptrdiff_t>(t.delay), static_cast<std::ptrdiff_t>(k)});
    }
    return out;
}

// ============================================================================
// Time-domain channel matrices
// ============================================================================

/// Linear map from the prefix-free transmit frame to the prefix-stripped receive frame.
struct TimeChannelMatrix {
    CMatrix matrix;

    CVector apply(const CVector& s) const { return matrix * s; }
};

namespace detail {

/// Calls emit(row, col, value) for every path contribution of the time channel matrix.
template <typename Emit>
std::ptrdiff_t time_channel_entries(const ChannelModel& model, const FrameConfig& cfg, Emit&& emit) {
    check_compatible(model, cfg);
    const auto taps = integer_taps(model, cfg);
    const auto M = static_cast<std::ptrdiff_t>(cfg.M);
    const auto N = static_cast<std::ptrdiff_t>(cfg.N);
    const auto L = static_cast<std::ptrdiff_t>(cfg.cp_len);

    switch (cfg.kind) {
        case FrameKind::RCP:
        case FrameKind::RZP:
        case FrameKind::RFCP: {
            const std::ptrdiff_t rows = cfg.kind == FrameKind::RFCP ? M + L : M;
            const std::ptrdiff_t len = rows * N;
            for (const auto& t : taps)
                for (std::ptrdiff_t n = 0; n < len; ++n) {
                    const std::ptrdiff_t src = wrap(n - t.delay, len);
                    emit(n, src, t.gain * unit_phase(double(t.doppler * src), double(len)));
                }
            return len;
        }
        case FrameKind::FCP:
        case FrameKind::FZS: {
            const bool zs = cfg.kind == FrameKind::FZS;
            const std::ptrdiff_t prefix = zs ? 0 : L;
            const double len = double((M + prefix) * N);
            for (const auto& t : taps)
                for (std::ptrdiff_t n = 0; n < N; ++n)
                    for (std::ptrdiff_t l = 0; l < M; ++l) {
                        if (zs && l < t.delay) continue;
                        const std::ptrdiff_t exponent = n * (M + prefix) + prefix + l - t.delay;
                        emit(n * M + l, n * M + wrap(l - t.delay, M), t.gain * unit_phase(double(t.doppler * exponent), len));
                    }
            return M * N;
        }
    }
    throw ConfigurationError("unknown frame kind");
}

}  // namespace detail

/**
 * Exact time-domain channel matrix for a configuration (integer Doppler only).
 *
 * RCP/RZP: sum_i h_i Pi^{l_i} Delta^{k_i} on the M*N grid.
 * FCP: block-diagonal after CP removal, block n entry (l, [l - l_i]_M) =
 *      h_i z_i^{n(M+L)+L+l-l_i} with the exponent left unwrapped.
 * FZS: the FCP blocks at L = 0, lower triangle (diagonal kept).
 * RFCP: the RCP matrix of the extended (M + L)-row frame, acting on the
 *       FCP-framed samples left after the outer prefix is removed.
 */
inline TimeChannelMatrix build_time_channel(const ChannelModel& model, const FrameConfig& cfg) {
    const auto len = Eigen::Index(cfg.kind == FrameKind::RFCP ? (cfg.M + cfg.cp_len) * cfg.N : cfg.MN());
    CMatrix H = CMatrix::Zero(len, len);
    detail::time_channel_entries(model, cfg, [&](std::ptrdiff_t r, std::ptrdiff_t c, cx v) { H(r, c) += v; });
    return {H};
}

// ============================================================================
// Framing
// ============================================================================

namespace detail {

inline CVector fcp_frame(const CVector& s, std::size_t M, std::size_t N, std::size_t L) {
    CVector out(Eigen::Index((M + L) * N));
    for (std::size_t n = 0; n < N; ++n) {
        const auto block = s.segment(Eigen::Index(n * M), Eigen::Index(M));
        const auto base = Eigen::Index(n * (M + L));
        out.segment(base, Eigen::Index(L)) = block.tail(Eigen::Index(L));
        out.segment(base + Eigen::Index(L), Eigen::Index(M)) = block;
    }
    return out;
}

inline CVector with_cyclic_prefix(const CVector& s, std::size_t L) {
    CVector out(s.size() + Eigen::Index(L));
    out.head(Eigen::Index(L)) = s.tail(Eigen::Index(L));
    out.tail(s.size()) = s;
    return out;
}

}  // namespace detail

/// Inserts the configuration's prefixes/padding into an M*N-sample frame.
inline TimeFrame add_framing(const TimeFrame& s, const FrameConfig& cfg) {
    cfg.validate();
    if (s.size() != cfg.MN()) throw InvalidDimension("add_framing expects M*N samples");
    const std::size_t L = cfg.cp_len;
    switch (cfg.kind) {
        case FrameKind::RCP: return {detail::with_cyclic_prefix(s.samples, L)};
        case FrameKind::RZP: {
            CVector out = CVector::Zero(s.samples.size() + Eigen::Index(L));
            out.head(s.samples.size()) = s.samples;
            return {out};
        }
        case FrameKind::FCP: return {detail::fcp_frame(s.samples, cfg.M, cfg.N, L)};
        case FrameKind::FZS: return s;
        case FrameKind::RFCP:
            return {detail::with_cyclic_prefix(detail::fcp_frame(s.samples, cfg.M, cfg.N, L), L)};
    }
    throw ConfigurationError("unknown frame kind");
}

/**
 * Undoes add_framing on a received stream.
 *
 * RCP drops the prefix, RZP folds the leaked tail onto the frame start,
 * FCP drops every per-block prefix, FZS keeps the first M*N samples.
 * RFCP only drops the outer prefix and returns the (M + L)*N FCP frame.
 */
inline TimeFrame strip_framing(const TimeFrame& r, const FrameConfig& cfg) {
    cfg.validate();
    const auto MN = Eigen::Index(cfg.MN());
    const auto L = Eigen::Index(cfg.cp_len);
    const auto have = Eigen::Index(r.size());
    auto need = [&](Eigen::Index n) {
        if (have < n)
            throw InvalidDimension("received frame has " + std::to_string(have) + " samples, need " +
                                   std::to_string(n));
    };
    switch (cfg.kind) {
        case FrameKind::RCP: need(MN + L); return {r.samples.segment(L, MN)};
        case FrameKind::RZP: {
            need(MN);
            const Eigen::Index tail = have - MN;
            if (tail > MN) throw InvalidDimension("RZP tail longer than the frame");
            CVector out = r.samples.head(MN);
            out.head(tail) += r.samples.tail(tail);
            return {out};
        }
        case FrameKind::FCP: {
            const auto M = Eigen::Index(cfg.M);
            const auto N = Eigen::Index(cfg.N);
            need((M + L) * N);
            CVector out(MN);
            for (Eigen::Index n = 0; n < N; ++n) out.segment(n * M, M) = r.samples.segment(n * (M + L) + L, M);
            return {out};
        }
        case FrameKind::FZS: need(MN); return {r.samples.head(MN)};
        case FrameKind::RFCP: {
            const auto inner = Eigen::Index((cfg.M + cfg.cp_len) * cfg.N);
            need(L + inner);
            return {r.samples.segment(L, inner)};
        }
    }
    throw ConfigurationError("unknown frame kind");
}

// ============================================================================
// Sample-level propagation
// ============================================================================

/// Index of the first sample after the outer (reduced) prefix; Doppler phases count from here.
inline std::size_t time_origin(const FrameConfig& cfg) {
    return (cfg.kind == FrameKind::RCP || cfg.kind == FrameKind::RFCP) ? cfg.cp_len : 0;
}

/// Circular complex Gaussian samples with unit variance (1/2 per component), seeded deterministically.
inline CVector unit_noise(std::size_t len, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, std::sqrt(0.5));
    CVector w(static_cast<Eigen::Index>(len));
    for (auto& v : w) {
        const double re = gauss(rng);
        v = cx(re, gauss(rng));
    }
    return w;
}

/**
 * Passes a framed signal through the channel sample by sample.
 *
 * r[n] = sum_i h_i exp(j 2 pi k_i (t - l_i) / frame_len) s[n - l_i] + w[n],
 * with t = n - time_origin(cfg). The output has the input's length: energy
 * delayed past the last sample is dropped (RZP keeps it inside its padding).
 * Noise is circular Gaussian with variance NoiseSpec::variance(), seeded
 * deterministically.
 */
inline TimeFrame propagate(const TimeFrame& s, const ChannelModel& model, const FrameConfig& cfg,
                           const NoiseSpec& noise, std::uint64_t seed) {
    if (model.taps.empty()) throw ConfigurationError("channel model has no taps");
    const auto len = Eigen::Index(s.size());
    const double frame_len = double(grid_frame_len(model.grid, cfg));
    const auto origin = Eigen::Index(time_origin(cfg));
    CVector r = CVector::Zero(len);
    for (const auto& t : model.taps) {
        const auto d = Eigen::Index(t.delay);
        for (Eigen::Index n = d; n < len; ++n) {
            const double exponent = t.doppler * double(n - origin - d);
            r(n) += t.gain * unit_phase(exponent, frame_len) * s.samples(n - d);
        }
    }
    if (noise.enabled) r += std::sqrt(noise.variance()) * unit_noise(std::size_t(len), seed);
    return {r};
}

// ============================================================================
// Random channels
// ============================================================================

/// Monte Carlo channel draw parameters.
struct RandomChannelSpec {
    std::size_t paths = 4;
    std::size_t max_delay = 4;
    int k_max = 2;
    DopplerGrid grid = DopplerGrid::RCP;
};

/**
 * Draws L taps with i.i.d. CN(0, 1/L) gains, distinct delays from
 * [0, max_delay] and integer Doppler bins uniform on [-k_max, k_max].
 */
inline ChannelModel random_model(const RandomChannelSpec& spec, std::mt19937_64& rng) {
    if (spec.paths == 0) throw ConfigurationError("random channel needs at least one path");
    if (spec.paths > spec.max_delay + 1)
        throw ConfigurationError("cannot draw " + std::to_string(spec.paths) + " distinct delays from [0, " +
                                 std::to_string(spec.max_delay) + "]");
    std::vector<std::size_t> delays(spec.max_delay + 1);
    std::iota(delays.begin(), delays.end(), std::size_t{0});
    std::shuffle(delays.begin(), delays.end(), rng);

    std::normal_distribution<double> gauss(0.0, std::sqrt(0.5 / double(spec.paths)));
    std::uniform_int_distribution<int> doppler(-spec.k_max, spec.k_max);
    ChannelModel model;
    model.grid = spec.grid;
    model.normalized = true;
    for (std::size_t i = 0; i < spec.paths; ++i) {
        ChannelTap tap;
        tap.gain = cx(gauss(rng), gauss(rng));
        tap.delay = delays[i];
        tap.doppler = double(doppler(rng));
        model.taps.push_back(tap);
    }
    return model;
}

}  // namespace otfs
