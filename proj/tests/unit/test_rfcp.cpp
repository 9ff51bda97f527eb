#include <catch_amalgamated.hpp>

#include <otfs/rfcp.hpp>
#include <otfs/serialize.hpp>

#include "support/fixtures.hpp"
#include "support/oracles.hpp"

using namespace otfs;

namespace {

TimeFrame transmit(const DelayDopplerFrame& X, const ChannelModel& m, const FrameConfig& cfg) {
    return propagate(add_framing(otfs_modulate(X), cfg), m, cfg, NoiseSpec{}, 0);
}

ChannelModel four_taps(std::mt19937_64& rng, int k_max) {
    ChannelModel m = fixture::random_integer_model(rng, 4, 3, k_max, DopplerGrid::FCP);
    for (auto& t : m.taps)
        if (std::abs(t.gain) < 0.2) t.gain *= 0.2 / std::abs(t.gain);
    return m;
}

void check_same_taps(ChannelModel estimate, ChannelModel truth, double tol) {
    auto key = [](const ChannelTap& a, const ChannelTap& b) {
        return a.delay != b.delay ? a.delay < b.delay : a.doppler < b.doppler;
    };
    std::sort(estimate.taps.begin(), estimate.taps.end(), key);
    std::sort(truth.taps.begin(), truth.taps.end(), key);
    REQUIRE(estimate.taps.size() == truth.taps.size());
    for (std::size_t i = 0; i < truth.taps.size(); ++i) {
        CHECK(estimate.taps[i].delay == truth.taps[i].delay);
        CHECK(estimate.taps[i].doppler == truth.taps[i].doppler);
        CHECK(std::abs(estimate.taps[i].gain - truth.taps[i].gain) <= tol);
    }
}

}  // namespace

TEST_CASE("extend repeats the last delay rows on top", "[frame]") {
    CMatrix X(2, 2);
    X << 1, 2, 3, 4;
    const RfcpFrame f = extend(DelayDopplerFrame(X), 1);
    CMatrix expected(3, 2);
    expected << 3, 4, 1, 2, 3, 4;
    CHECK(f.extended_grid == expected);
    CHECK(f.outer_cp_len == 1);

    std::mt19937_64 rng(31);
    const CMatrix Y = oracle::random_matrix(8, 4, rng);
    const RfcpFrame g = extend(DelayDopplerFrame(Y), 3);
    CHECK(g.extended_grid.topRows(3) == Y.bottomRows(3));
    CHECK(g.extended_grid.bottomRows(8) == Y);
    CHECK_THROWS_AS(extend(DelayDopplerFrame(Y), 9), ConfigurationError);
}

TEST_CASE("build_rfcp composes full CP framing with an outer prefix", "[frame]") {
    std::mt19937_64 rng(32);
    const DelayDopplerFrame X(oracle::random_matrix(8, 4, rng));
    const FrameConfig cfg = make_config(FrameKind::RFCP, 8, 4, 3);
    const TimeFrame s = build_rfcp(X, cfg);
    CHECK(s.size() == (8 + 3) * 4 + 3);
    CHECK(double(s.size()) == tx_power(cfg, 1.0));

    const CVector fcp = add_framing(otfs_modulate(X), make_config(FrameKind::FCP, 8, 4, 3)).samples;
    CHECK(oracle::max_abs(s.samples.tail(fcp.size()) - fcp) <= 1e-14);
    CHECK(oracle::max_abs(s.samples.head(3) - fcp.tail(3)) <= 1e-14);
    CHECK(oracle::max_abs(s.samples - add_framing(otfs_modulate(X), cfg).samples) <= 1e-14);

    const TimeFrame plain = build_rfcp(X, make_config(FrameKind::RFCP, 8, 4, 0));
    CHECK(oracle::max_abs(plain.samples - otfs_modulate(X).samples) <= 1e-14);

    CHECK_THROWS_AS(build_rfcp(X, make_config(FrameKind::FCP, 8, 4, 3)), ConfigurationError);
    CHECK_THROWS_AS(build_rfcp(X, make_config(FrameKind::RFCP, 4, 4, 1)), InvalidDimension);
}

TEST_CASE("identity channel returns the frame and its repeated rows", "[receive]") {
    std::mt19937_64 rng(33);
    const FrameConfig cfg = make_config(FrameKind::RFCP, 8, 4, 2);
    const DelayDopplerFrame X(oracle::random_matrix(8, 4, rng));
    ChannelModel id;
    id.taps = {{cx(1.0), 0, 0.0}};
    id.grid = DopplerGrid::FCP;
    const RfcpBlocks b = rfcp_receive(transmit(X, id, cfg), cfg);
    CHECK(oracle::max_abs(b.data_block.data - X.data) <= 1e-13);
    CHECK(oracle::max_abs(b.cp_block.data - X.data.bottomRows(2)) <= 1e-13);
    CHECK(b.extended.M() == 10);

    CHECK_THROWS_AS(rfcp_receive(TimeFrame{CVector::Zero(10)}, cfg), InvalidDimension);
    CHECK_THROWS_AS(rfcp_receive(TimeFrame{CVector::Zero(10)}, make_config(FrameKind::RCP, 8, 4, 2)),
                    ConfigurationError);
}

TEST_CASE("data block follows the RCP model on the extended grid", "[receive]") {
    std::mt19937_64 rng(34);
    for (int trial = 0; trial < 20; ++trial) {
        const FrameConfig cfg = make_config(FrameKind::RFCP, 8, 8, 3);
        const ChannelModel m = fixture::random_integer_model(rng, 2, 3, 3, DopplerGrid::FCP);
        const DelayDopplerFrame X(oracle::random_matrix(8, 8, rng));
        const RfcpBlocks b = rfcp_receive(transmit(X, m, cfg), cfg);

        ChannelModel on_ext = m;
        on_ext.grid = DopplerGrid::RCP;
        const FrameConfig ext = extended_config(cfg);
        const DelayDopplerFrame Xe(extend(X, 3).extended_grid);
        const CMatrix expected = io_response(Xe, on_ext, ext).data;
        CHECK(oracle::max_abs(b.extended.data - expected) <= 1e-12);
        CHECK(oracle::max_abs(b.data_block.data - expected.bottomRows(8)) <= 1e-12);
        CHECK(oracle::max_abs(b.extended.data - io_response(X, m, cfg).data) <= 1e-12);

        // Same samples through an RCP pipeline of the extended size.
        const TimeFrame r = transmit(Xe, on_ext, ext);
        const CMatrix rcp = otfs_demodulate(strip_framing(r, ext), 11, 8).data;
        CHECK(oracle::max_abs(b.data_block.data - rcp.bottomRows(8)) <= 1e-12);
    }
}

TEST_CASE("cp block rows repeat data rows up to the known phases", "[receive]") {
    std::mt19937_64 rng(35);
    const FrameConfig cfg = make_config(FrameKind::RFCP, 8, 8, 3);
    for (std::size_t delay : {0u, 1u, 2u})
        for (double k : {-2.0, 0.0, 3.0}) {
            const ChannelTap tap{cx(0.7, -0.4), delay, k};
            ChannelModel m{{tap}, DopplerGrid::FCP, false};
            const DelayDopplerFrame X(oracle::random_matrix(8, 8, rng));
            const RfcpBlocks b = rfcp_receive(transmit(X, m, cfg), cfg);
            for (std::size_t l = delay; l < 3; ++l)
                for (std::size_t kk = 0; kk < 8; ++kk) {
                    const cx g_cp = gamma(cfg, tap, l, kk).value;
                    const cx g_data = gamma(cfg, tap, l + 8, kk).value;
                    CHECK(std::abs(b.cp_block(l, kk) / g_cp - b.extended(l + 8, kk) / g_data) <= 1e-12);
                }
        }
}

TEST_CASE("pilot guard layout", "[pilot]") {
    const FrameConfig cfg = make_config(FrameKind::RFCP, 16, 16, 4);
    const PilotSpec p = make_pilot_spec(cfg, 3, 2, 5.0);
    CHECK(p.l_p == 15);
    CHECK(p.k_p == 8);
    CHECK(p.guard_delay_before() == 3);
    CHECK(p.guard_delay_after() == 0);
    CHECK(p.guard_doppler() == 6);

    const auto mask = pilot_support(p, 16, 16);
    CHECK(mask.count() == 4 * 13);
    CHECK(mask(12, 2));
    CHECK_FALSE(mask(11, 8));
    CHECK_FALSE(mask(15, 1));
    CHECK_FALSE(mask(0, 8));

    // Without the decodable prefix the readout wraps into rows 0 .. D - 1, which stay guarded.
    const PilotSpec q = make_pilot_spec(make_config(FrameKind::RCP, 16, 16, 4), 3, 2);
    CHECK_FALSE(q.at_end);
    const auto rcp_mask = pilot_support(q, 16, 16);
    CHECK(rcp_mask(0, 8));
    CHECK(rcp_mask(2, 8));
    CHECK_FALSE(rcp_mask(3, 8));

    const DelayDopplerFrame X(CMatrix::Ones(16, 16));
    const DelayDopplerFrame P = embed_pilot(X, p);
    CHECK(P(15, 8) == cx(5.0));
    CHECK(P(14, 8) == cx(0.0));
    CHECK(P(0, 0) == cx(1.0));

    CHECK_THROWS_AS(make_pilot_spec(cfg, 3, 4), ConfigurationError);
    CHECK_THROWS_AS(make_pilot_spec(cfg, 16, 1), ConfigurationError);
    PilotSpec wide = p;
    wide.doppler_span = 5;
    CHECK_THROWS_AS(pilot_support(wide, 16, 16), ConfigurationError);
}

TEST_CASE("pilot_cir recovers a single tap", "[pilot]") {
    const FrameConfig cfg = make_config(FrameKind::RCP, 8, 8, 2);
    const PilotSpec p = make_pilot_spec(cfg, 0, 0);
    ChannelModel id;
    id.taps = {{cx(1.0), 0, 0.0}};
    const DelayDopplerFrame X = embed_pilot(DelayDopplerFrame::zeros(8, 8), p);
    const TimeFrame r = transmit(X, id, cfg);
    const ChannelModel est = pilot_cir(otfs_demodulate(strip_framing(r, cfg), 8, 8), p, cfg);
    check_same_taps(est, id, 1e-12);
}

TEST_CASE("pilot_cir recovers four taps", "[pilot]") {
    std::mt19937_64 rng(36);
    for (auto kind : {FrameKind::RFCP, FrameKind::RCP, FrameKind::FCP}) {
        const FrameConfig cfg = make_config(kind, 16, 16, 4);
        for (int trial = 0; trial < 10; ++trial) {
            ChannelModel m = four_taps(rng, 2);
            m.grid = native_grid(cfg);
            const PilotSpec p = make_pilot_spec(cfg, 3, 2, 3.0);
            const DelayDopplerFrame X = embed_pilot(DelayDopplerFrame::zeros(16, 16), p);
            const TimeFrame r = transmit(X, m, cfg);
            const DelayDopplerFrame Y = kind == FrameKind::RFCP ? rfcp_receive(r, cfg).extended
                                                                : otfs_demodulate(strip_framing(r, cfg), 16, 16);
            check_same_taps(pilot_cir(Y, p, cfg), m, 1e-8);
        }
    }
}

TEST_CASE("pilot_cir survives data outside the guard", "[pilot]") {
    std::mt19937_64 rng(37);
    const FrameConfig cfg = make_config(FrameKind::RFCP, 16, 16, 4);
    const ChannelModel m = four_taps(rng, 2);
    const PilotSpec p = make_pilot_spec(cfg, 3, 2, 4.0);
    const DelayDopplerFrame X = embed_pilot(DelayDopplerFrame(oracle::random_matrix(16, 16, rng)), p);
    const RfcpBlocks b = rfcp_receive(transmit(X, m, cfg), cfg);
    const auto mask = pilot_support(p, 16, 16);
    for (Eigen::Index k = 0; k < 16; ++k)
        if (!mask(15, k)) CHECK(std::abs(X(15, k)) > 0.0);
    check_same_taps(pilot_cir(b.extended, p, cfg), m, 1e-8);
}

TEST_CASE("pilot_cir rejects clipped regions and bad input", "[pilot]") {
    const FrameConfig cfg = make_config(FrameKind::RCP, 8, 8, 2);
    PilotSpec p = make_pilot_spec(cfg, 2, 1);
    p.doppler_span = 4;
    CHECK_THROWS_AS(pilot_cir(DelayDopplerFrame::zeros(8, 8), p, cfg), ConfigurationError);
    p = make_pilot_spec(cfg, 2, 1);
    CHECK_THROWS_AS(pilot_cir(DelayDopplerFrame::zeros(7, 8), p, cfg), InvalidDimension);
    p.amplitude = 0.0;
    CHECK_THROWS_AS(pilot_cir(DelayDopplerFrame::zeros(8, 8), p, cfg), ConfigurationError);
}

TEST_CASE("cp block is clean under RFCP and leaks without the outer prefix", "[pilot]") {
    std::mt19937_64 rng(38);
    for (int trial = 0; trial < 10; ++trial) {
        const FrameConfig rfcp = make_config(FrameKind::RFCP, 16, 16, 4);
        const FrameConfig fcp = make_config(FrameKind::FCP, 16, 16, 4);
        ChannelModel m = four_taps(rng, 2);
        m.taps[0].doppler = trial % 2 ? 2.0 : -1.0;
        const PilotSpec p = make_pilot_spec(rfcp, 3, 2);
        const DelayDopplerFrame X = embed_pilot(DelayDopplerFrame::zeros(16, 16), p);

        const RfcpBlocks with_prefix = rfcp_receive(transmit(X, m, rfcp), rfcp);
        const RfcpBlocks without = rfcp_receive(transmit(X, m, fcp), fcp);
        const double clean = cp_block_leakage(with_prefix.cp_block, m, rfcp, p.k_p);
        const double leaky = cp_block_leakage(without.cp_block, m, fcp, p.k_p);
        INFO("trial " << trial << ": RFCP " << clean << ", FCP only " << leaky);
        CHECK(clean <= 1e-10);
        CHECK(leaky > clean);
        CHECK(leaky > 1e-3);
    }
}

TEST_CASE("cir estimates export with the channel model schema", "[pilot]") {
    std::mt19937_64 rng(39);
    const FrameConfig cfg = make_config(FrameKind::RFCP, 16, 16, 4);
    ChannelModel m = four_taps(rng, 2);
    const PilotSpec p = make_pilot_spec(cfg, 3, 2);
    const DelayDopplerFrame X = embed_pilot(DelayDopplerFrame::zeros(16, 16), p);
    const ChannelModel est = pilot_cir(rfcp_receive(transmit(X, m, cfg), cfg).extended, p, cfg);
    const ChannelModel back = channel_model_from_string(to_json_string(est));
    check_same_taps(back, est, 0.0);
    CHECK(back.grid == DopplerGrid::FCP);
}
