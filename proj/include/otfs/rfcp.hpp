#pragma once

#include "otfs/channel.hpp"
#include "otfs/core.hpp"
#include "otfs/effective.hpp"
#include "otfs/grid.hpp"
#include "otfs/metrics.hpp"

#include <cmath>
#include <cstdlib>
#include <vector>

namespace otfs {

// ============================================================================
// Frame construction
// ============================================================================

/// (M + L) x N grid with the last L delay rows repeated on top, plus the outer prefix length.
struct RfcpFrame {
    CMatrix extended_grid;
    std::size_t outer_cp_len = 0;
};

/// Applies the CP-addition matrix to the delay axis.
inline RfcpFrame extend(const DelayDopplerFrame& X, std::size_t cp_len) {
    if (cp_len > X.M()) throw ConfigurationError("prefix longer than the delay axis");
    return RfcpFrame{detail::repeat_tail_rows(X.data, cp_len), cp_len};
}

/// Heisenberg transform of the extended grid with the outer reduced prefix prepended.
inline TimeFrame build_rfcp(const DelayDopplerFrame& X, const FrameConfig& cfg) {
    if (cfg.kind != FrameKind::RFCP) throw ConfigurationError("build_rfcp needs an RFCP configuration");
    cfg.validate();
    if (X.M() != cfg.M || X.N() != cfg.N) throw InvalidDimension("frame does not match the configuration");
    const auto frame = extend(X, cfg.cp_len);
    const CVector inner = otfs_modulate(DelayDopplerFrame(frame.extended_grid)).samples;
    return {detail::with_cyclic_prefix(inner, cfg.cp_len)};
}

// ============================================================================
// Reception
// ============================================================================

struct RfcpBlocks {
    DelayDopplerFrame extended;    // (M + L) x N
    DelayDopplerFrame data_block;  // rows L .. M + L - 1
    DelayDopplerFrame cp_block;    // rows 0 .. L - 1
};

/**
 * Demodulates the (M + L) x N grid and splits it into CP and data blocks.
 *
 * RFCP drops the outer prefix first. An FCP configuration demodulates its
 * (M + L) N samples as they are, which gives the CP block of a frame without
 * the outer prefix.
 */
inline RfcpBlocks rfcp_receive(const TimeFrame& r, const FrameConfig& cfg) {
    if (cfg.kind != FrameKind::RFCP && cfg.kind != FrameKind::FCP)
        throw ConfigurationError("rfcp_receive needs an RFCP or FCP configuration");
    cfg.validate();
    const std::size_t L = cfg.cp_len;
    const std::size_t inner = (cfg.M + L) * cfg.N;
    const std::size_t outer = cfg.kind == FrameKind::RFCP ? L : 0;
    if (r.size() != inner + outer)
        throw InvalidDimension("received frame has " + std::to_string(r.size()) + " samples, expected " +
                               std::to_string(inner + outer));
    const CVector body = r.samples.segment(Eigen::Index(outer), Eigen::Index(inner));
    RfcpBlocks out;
    out.extended = otfs_demodulate(TimeFrame{body}, cfg.M + L, cfg.N);
    out.cp_block = DelayDopplerFrame(out.extended.data.topRows(Eigen::Index(L)));
    out.data_block = DelayDopplerFrame(out.extended.data.bottomRows(Eigen::Index(cfg.M)));
    return out;
}

// ============================================================================
// Pilot
// ============================================================================

/**
 * Single pilot on the data grid. Taps are read at rows l_p .. l_p + delay_span
 * and Doppler columns k_p - doppler_span .. k_p + doppler_span. The Doppler guard
 * is three spans wide on each side: data spreads at most one span inward, which
 * leaves the ring span+1 .. 2 span free for the noise-floor estimate.
 */
struct PilotSpec {
    std::size_t l_p = 0;
    std::size_t k_p = 0;
    double amplitude = 1.0;
    std::size_t delay_span = 0;
    std::size_t doppler_span = 0;
    bool at_end = false;  // delay guard only before the pilot (RFCP)

    std::size_t guard_delay_before() const { return delay_span; }
    std::size_t guard_delay_after() const { return at_end ? 0 : delay_span; }
    std::size_t guard_doppler() const { return 3 * doppler_span; }
};

/**
 * Pilot at the last data row and the middle Doppler column. Only RFCP gets the
 * halved delay guard: its readout wraps into the CP block, which repeats guard
 * rows, while other frames wrap into data rows 0 .. max_delay - 1.
 */
inline PilotSpec make_pilot_spec(const FrameConfig& cfg, std::size_t max_delay, std::size_t k_max,
                                 double amplitude = 1.0) {
    cfg.validate();
    PilotSpec p;
    p.l_p = cfg.data_rows() - 1;
    p.k_p = cfg.N / 2;
    p.amplitude = amplitude;
    p.delay_span = max_delay;
    p.doppler_span = k_max;
    p.at_end = cfg.kind == FrameKind::RFCP;
    const std::size_t delay_guard = p.at_end ? max_delay + 1 : 2 * max_delay + 1;
    if (delay_guard > cfg.data_rows() || 6 * k_max + 1 > cfg.N)
        throw ConfigurationError("pilot guard does not fit the grid");
    return p;
}

/// True on the guard region (pilot included) of an M x N data grid.
inline Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic> pilot_support(const PilotSpec& p, std::size_t M,
                                                                         std::size_t N) {
    const auto before = std::ptrdiff_t(p.guard_delay_before());
    const auto after = std::ptrdiff_t(p.guard_delay_after());
    const auto dk = std::ptrdiff_t(p.guard_doppler());
    if (before + after + 1 > std::ptrdiff_t(M) || 2 * dk + 1 > std::ptrdiff_t(N) || p.l_p >= M || p.k_p >= N)
        throw ConfigurationError("pilot region is clipped by the grid");
    Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic> mask =
        Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic>::Constant(Eigen::Index(M), Eigen::Index(N), false);
    for (std::ptrdiff_t dl = -before; dl <= after; ++dl)
        for (std::ptrdiff_t dd = -dk; dd <= dk; ++dd)
            mask(wrap(std::ptrdiff_t(p.l_p) + dl, std::ptrdiff_t(M)), wrap(std::ptrdiff_t(p.k_p) + dd, std::ptrdiff_t(N))) =
                true;
    return mask;
}

/// Clears the guard region of X and places the pilot.
inline DelayDopplerFrame embed_pilot(const DelayDopplerFrame& X, const PilotSpec& p) {
    const auto mask = pilot_support(p, X.M(), X.N());
    DelayDopplerFrame out = X;
    for (Eigen::Index l = 0; l < mask.rows(); ++l)
        for (Eigen::Index k = 0; k < mask.cols(); ++k)
            if (mask(l, k)) out.data(l, k) = 0.0;
    out(p.l_p, p.k_p) = p.amplitude;
    return out;
}

/**
 * Reads the pilot response of a received grid back into a tap list.
 *
 * `Y` is either the M x N grid of the configuration or, for RFCP, the extended
 * (M + L) x N grid, where the pilot sits L rows further down. Cells above
 * max(3 x guard RMS, 1e-9 x amplitude) become taps; the known pilot amplitude
 * and Gamma phase are divided out. Doppler is reported on the native grid.
 */
inline ChannelModel pilot_cir(const DelayDopplerFrame& Y, const PilotSpec& p, const FrameConfig& cfg) {
    cfg.validate();
    const bool extended = cfg.kind == FrameKind::RFCP;
    const std::size_t rows = extended ? cfg.M + cfg.cp_len : cfg.M;
    if (Y.M() != rows || Y.N() != cfg.N) throw InvalidDimension("pilot_cir: grid does not match the configuration");
    if (p.delay_span + 1 > rows || 2 * p.doppler_span + 1 > cfg.N || p.l_p >= cfg.M || p.k_p >= cfg.N)
        throw ConfigurationError("pilot region is clipped by the grid");
    if (!(p.amplitude > 0.0)) throw ConfigurationError("pilot amplitude must be positive");

    const auto R = std::ptrdiff_t(rows);
    const auto C = std::ptrdiff_t(cfg.N);
    const std::ptrdiff_t lp = std::ptrdiff_t(p.l_p + (extended ? cfg.cp_len : 0));
    const auto kp = std::ptrdiff_t(p.k_p);
    const auto D = std::ptrdiff_t(p.delay_span);
    const auto K = std::ptrdiff_t(p.doppler_span);

    // Noise floor from the guard cells between the readout window and the guard edge.
    double floor_energy = 0.0;
    std::size_t floor_cells = 0;
    for (std::ptrdiff_t d = 0; d <= D; ++d)
        for (std::ptrdiff_t kk = K + 1; kk <= 2 * K; ++kk)
            for (const std::ptrdiff_t s : {-kk, kk}) {
                floor_energy += std::norm(Y.data(wrap(lp + d, R), wrap(kp + s, C)));
                ++floor_cells;
            }
    const double rms = floor_cells ? std::sqrt(floor_energy / double(floor_cells)) : 0.0;
    const double threshold = std::max(3.0 * rms, 1e-9 * p.amplitude);

    ChannelModel model;
    model.grid = native_grid(cfg);
    for (std::ptrdiff_t d = 0; d <= D; ++d)
        for (std::ptrdiff_t kk = -K; kk <= K; ++kk) {
            const std::ptrdiff_t l = wrap(lp + d, R);
            const std::ptrdiff_t k = wrap(kp + kk, C);
            const cx v = Y.data(l, k);
            if (std::abs(v) <= threshold) continue;
            ChannelTap tap{cx(1.0), std::size_t(d), double(kk)};
            const auto g = gamma(cfg, tap, model.grid, std::size_t(l), std::size_t(k));
            if (!g.in_support) continue;
            tap.gain = v / (p.amplitude * g.value);
            model.taps.push_back(tap);
        }
    return model;
}

/**
 * Leakage of the L x N CP block when the pilot sits on the last delay row.
 * A tap with delay l_i >= 1 lands on CP row l_i - 1 (wrapped from the pilot);
 * a zero-delay tap lands on row L - 1 (the pilot's copy in the prefix).
 */
inline double cp_block_leakage(const DelayDopplerFrame& cp_block, const ChannelModel& model, const FrameConfig& cfg,
                               std::size_t pilot_k) {
    const std::size_t L = cfg.cp_len;
    if (cp_block.M() != L || cp_block.N() != cfg.N) throw InvalidDimension("cp_block_leakage: block is not L x N");
    const ChannelModel native = rebase(model, cfg, native_grid(cfg));
    std::vector<std::pair<std::size_t, std::size_t>> bins;
    for (const auto& t : native.taps) {
        if (t.delay > L) throw ConfigurationError("cp_block_leakage: tap delay exceeds the prefix");
        const std::size_t row = t.delay == 0 ? L - 1 : t.delay - 1;
        bins.emplace_back(row, std::size_t(wrap(std::ptrdiff_t(pilot_k) + nearest_bin(t.doppler), std::ptrdiff_t(cfg.N))));
    }
    return doppler_leakage(cp_block, bins);
}

}  // namespace otfs
