#pragma once

#include <otfs/channel.hpp>
#include <otfs/core.hpp>

#include "support/oracles.hpp"

#include <random>
#include <vector>

namespace fixture {

using namespace otfs;

/// Two-path model of the worked example: h0 = 1 at (0, 0), h1 = 0.5 at (1, 1).
inline ChannelModel example_model(DopplerGrid grid = DopplerGrid::RCP) {
    ChannelModel m;
    m.grid = grid;
    m.taps = {{cx(1.0), 0, 0.0}, {cx(0.5), 1, 1.0}};
    return m;
}

/// Random integer-Doppler model with `paths` distinct delays in [0, max_delay].
inline ChannelModel random_integer_model(std::mt19937_64& rng, std::size_t paths, std::size_t max_delay, int k_max,
                                         DopplerGrid grid) {
    std::vector<std::size_t> delays(max_delay + 1);
    for (std::size_t i = 0; i <= max_delay; ++i) delays[i] = i;
    std::shuffle(delays.begin(), delays.end(), rng);
    std::normal_distribution<double> g(0.0, 1.0);
    std::uniform_int_distribution<int> kd(-k_max, k_max);
    ChannelModel m;
    m.grid = grid;
    for (std::size_t i = 0; i < paths && i < delays.size(); ++i) m.taps.push_back({cx(g(rng), g(rng)), delays[i], double(kd(rng))});
    return m;
}

inline std::vector<oracle::Path> as_paths(const ChannelModel& m) {
    std::vector<oracle::Path> out;
    for (const auto& t : m.taps) out.push_back({t.gain, int(t.delay), t.doppler});
    return out;
}

/// Delay-Doppler frame with the FZS suffix rows zeroed.
inline CMatrix random_frame(const FrameConfig& cfg, std::mt19937_64& rng) {
    CMatrix X = oracle::random_matrix(Eigen::Index(cfg.M), Eigen::Index(cfg.N), rng);
    if (cfg.kind == FrameKind::FZS) X.bottomRows(Eigen::Index(cfg.zs_len)).setZero();
    return X;
}

inline const std::vector<FrameKind>& all_kinds() {
    static const std::vector<FrameKind> kinds{FrameKind::RCP, FrameKind::RZP, FrameKind::FCP, FrameKind::FZS,
                                              FrameKind::RFCP};
    return kinds;
}

/// Configuration of the given kind with a guard of `guard` samples (prefix or suffix as applicable).
inline FrameConfig config_for(FrameKind kind, std::size_t M, std::size_t N, std::size_t guard) {
    if (kind == FrameKind::FZS) return make_config(kind, M, N, 0, guard);
    return make_config(kind, M, N, guard, 0);
}

}  // namespace fixture
