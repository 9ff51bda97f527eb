#pragma once

#include "otfs/channel.hpp"
#include "otfs/core.hpp"
#include "otfs/grid.hpp"

#include <cmath>
#include <cstdint>
#include <set>
#include <utility>
#include <vector>

namespace otfs {

// ============================================================================
// Capacity and power
// ============================================================================

/// Fraction of the frame that carries data symbols.
inline double spectral_efficiency_factor(const FrameConfig& cfg) {
    cfg.validate();
    const double M = double(cfg.M), N = double(cfg.N), L = double(cfg.cp_len);
    switch (cfg.kind) {
        case FrameKind::RCP:
        case FrameKind::RZP: return M * N / (M * N + L);
        case FrameKind::FCP: return M / (M + L);
        case FrameKind::FZS: return (M - double(cfg.zs_len)) / M;
        case FrameKind::RFCP: return M * N / ((M + L) * N + L);
    }
    return 0.0;
}

/// C = factor * log2(1 + gamma) for a linear SNR gamma.
inline double capacity(const FrameConfig& cfg, double gamma) {
    if (!(gamma >= 0.0)) throw ConfigurationError("capacity needs gamma >= 0");
    return spectral_efficiency_factor(cfg) * std::log2(1.0 + gamma);
}

/// Average transmitted energy per frame for average sample power `symbol_power`.
inline double tx_power(const FrameConfig& cfg, double symbol_power) {
    cfg.validate();
    if (!(symbol_power > 0.0)) throw ConfigurationError("tx_power needs a positive symbol power");
    const double M = double(cfg.M), N = double(cfg.N), L = double(cfg.cp_len);
    switch (cfg.kind) {
        case FrameKind::RCP: return (M * N + L) * symbol_power;
        case FrameKind::RZP:
        case FrameKind::FZS: return M * N * symbol_power;
        case FrameKind::FCP: return N * (M + L) * symbol_power;
        case FrameKind::RFCP: return ((M + L) * N + L) * symbol_power;
    }
    return 0.0;
}

struct EfficiencyReport {
    double capacity = 0.0;
    double tx_power = 0.0;
    double spectral_eff_factor = 0.0;
    double power_eff_factor = 0.0;  // M*N*P_s / tx_power
};

inline EfficiencyReport efficiency(const FrameConfig& cfg, double gamma, double symbol_power = 1.0) {
    EfficiencyReport r;
    r.capacity = capacity(cfg, gamma);
    r.tx_power = tx_power(cfg, symbol_power);
    r.spectral_eff_factor = spectral_efficiency_factor(cfg);
    r.power_eff_factor = double(cfg.MN()) * symbol_power / r.tx_power;
    return r;
}

inline double db_to_linear(double db) { return std::pow(10.0, db / 10.0); }

// ============================================================================
// Bit error rate
// ============================================================================

struct BerCounter {
    std::uint64_t errors = 0;
    std::uint64_t bits = 0;

    double ber() const { return bits ? double(errors) / double(bits) : 0.0; }
    double std_error() const {
        if (!bits) return 0.0;
        const double p = ber();
        return std::sqrt(p * (1.0 - p) / double(bits));
    }

    void add(std::uint64_t e, std::uint64_t b) {
        errors += e;
        bits += b;
    }
    BerCounter& merge(const BerCounter& other) {
        add(other.errors, other.bits);
        return *this;
    }
};

inline std::uint64_t count_bit_errors(const std::vector<std::uint8_t>& tx, const std::vector<std::uint8_t>& rx) {
    if (tx.size() != rx.size()) throw InvalidDimension("bit streams differ in length");
    std::uint64_t e = 0;
    for (std::size_t i = 0; i < tx.size(); ++i) e += (tx[i] & 1u) != (rx[i] & 1u);
    return e;
}

struct BerResult {
    double ber = 0.0;
    double std_error = 0.0;
};

inline BerResult ber(const std::vector<std::uint8_t>& tx, const std::vector<std::uint8_t>& rx) {
    BerCounter c;
    c.add(count_bit_errors(tx, rx), tx.size());
    return {c.ber(), c.std_error()};
}

// ============================================================================
// Doppler leakage
// ============================================================================

/// Nearest integer bin, ties toward the lower bin.
inline std::ptrdiff_t nearest_bin(double k) { return std::ptrdiff_t(std::ceil(k - 0.5)); }

/// 1 - (energy on the listed (l, k) bins) / (total energy). Duplicate bins count once.
inline double doppler_leakage(const DelayDopplerFrame& cir, const std::vector<std::pair<std::size_t, std::size_t>>& bins) {
    const double total = cir.data.squaredNorm();
    if (!(total > 0.0)) throw InvalidDimension("doppler_leakage: zero-energy response");
    std::set<std::pair<std::size_t, std::size_t>> unique(bins.begin(), bins.end());
    double inside = 0.0;
    for (const auto& [l, k] : unique) {
        if (l >= cir.M() || k >= cir.N()) throw InvalidDimension("doppler_leakage: bin outside the grid");
        inside += std::norm(cir(l, k));
    }
    return std::max(0.0, 1.0 - inside / total);
}

/**
 * Leakage of a pilot response: tap i is expected at ([l_p + l_i], [k_p + k_i]) on the
 * cir's grid, with k_i rounded to the nearest bin of the configuration's native grid.
 */
inline double doppler_leakage(const DelayDopplerFrame& cir, const ChannelModel& model, const FrameConfig& cfg,
                              std::size_t pilot_l, std::size_t pilot_k) {
    const ChannelModel native = rebase(model, cfg, native_grid(cfg));
    const auto rows = std::ptrdiff_t(cir.M());
    const auto cols = std::ptrdiff_t(cir.N());
    std::vector<std::pair<std::size_t, std::size_t>> bins;
    for (const auto& t : native.taps)
        bins.emplace_back(std::size_t(wrap(std::ptrdiff_t(pilot_l + t.delay), rows)),
                          std::size_t(wrap(std::ptrdiff_t(pilot_k) + nearest_bin(t.doppler), cols)));
    return doppler_leakage(cir, bins);
}

}  // namespace otfs
