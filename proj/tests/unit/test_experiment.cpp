#include <catch_amalgamated.hpp>

#include <otfs/experiment.hpp>

#include <algorithm>
#include <filesystem>
#include <sstream>

using namespace otfs;

namespace {

std::string csv_of(const ExperimentResult& r) {
    std::ostringstream os;
    r.write_csv(os);
    return os.str();
}

json small_sweep(std::size_t trials, std::uint64_t seed = 5) {
    json j = json::parse(R"({
      "experiment": "ber_sweep",
      "frames": [{"kind": "RCP", "M": 8, "N": 8, "Lcp": 2}, {"kind": "FZS", "M": 8, "N": 8, "Lzs": 2}],
      "channel": {"random": {"L": 2, "max_delay": 2, "k_max": 1}},
      "snr_db": [4],
      "detectors": ["ZF", "MMSE", "MP"]
    })");
    j["trials"] = trials;
    j["master_seed"] = seed;
    return j;
}

std::string expect_parse_error(const std::string& text) {
    try {
        experiment_config_from_string(text);
    } catch (const ParseError& e) {
        return e.what();
    } catch (const ConfigurationError& e) {
        return std::string("configuration: ") + e.what();
    }
    FAIL("no error for: " << text);
    return {};
}

}  // namespace

TEST_CASE("splitmix64 reference values", "[seed]") {
    CHECK(splitmix64(0) == 0xe220a8397b1dcdafULL);
    CHECK(trial_seed(0, 0) == 0x6e789e6aa1b965f4ULL);
    CHECK(trial_seed(1, 0) == 0xbeeb8da1658eec67ULL);
    CHECK(trial_seed(42, 7) == 0x5705b8770b3d7dd5ULL);
    CHECK(trial_seed(~0ULL, 123456) == 0x08fce1c287212465ULL);
}

TEST_CASE("trial seeds do not collide over a million indices", "[seed]") {
    for (std::uint64_t master : {0ULL, 12345ULL}) {
        std::vector<std::uint64_t> seeds(1000000);
        for (std::uint64_t i = 0; i < seeds.size(); ++i) seeds[i] = trial_seed(master, i);
        CHECK(trial_seed(master, 0) == seeds[0]);
        std::sort(seeds.begin(), seeds.end());
        CHECK(std::adjacent_find(seeds.begin(), seeds.end()) == seeds.end());
    }
}

TEST_CASE("config defaults", "[config]") {
    const auto cfg = experiment_config_from_string(R"({"experiment": "capacity_table",
        "frames": [{"kind": "RCP", "M": 32, "N": 32, "Lcp": 8}], "gamma_db": [0, 10]})");
    CHECK(cfg.experiment == ExperimentKind::CapacityTable);
    CHECK(cfg.frames.size() == 1);
    CHECK(cfg.frames[0] == make_config(FrameKind::RCP, 32, 32, 8));
    CHECK(cfg.trials == 1);
    CHECK(cfg.master_seed == 1);
    CHECK(cfg.threads == 1);
    CHECK(cfg.constellation == "4QAM");
    CHECK(cfg.detectors == std::vector<DetectorKind>{DetectorKind::MMSE});
    CHECK(cfg.gamma_db == std::vector<double>{0.0, 10.0});
    CHECK(cfg.channel.random.paths == 4);
    CHECK(cfg.mp.max_iterations == 30);
}

TEST_CASE("config accepts every documented field", "[config]") {
    const auto cfg = experiment_config_from_string(R"({
      "experiment": "ber_sweep",
      "frame": {"kind": "FZS", "M": 16, "N": 16, "Lzs": 4},
      "channel": {"random": {"L": 3, "max_delay": 4, "k_max": 1, "seed": 99}, "doppler_frame_len": 352},
      "snr_db": 12, "trials": 10, "detector": "MP", "constellation": "16QAM",
      "master_seed": 18446744073709551615, "output_path": "out", "threads": 4,
      "mp": {"max_iterations": 12, "damping": 0.5, "convergence_tol": 1e-3},
      "pilot_amplitude": 2.5
    })");
    CHECK(cfg.frames[0].zs_len == 4);
    CHECK(cfg.channel.random.paths == 3);
    CHECK(cfg.channel.seed == 99u);
    CHECK(cfg.channel.doppler_frame_len == 352u);
    CHECK(cfg.snr_db == std::vector<double>{12.0});
    CHECK(cfg.detectors == std::vector<DetectorKind>{DetectorKind::MP});
    CHECK(cfg.master_seed == ~0ULL);
    CHECK(cfg.mp.max_iterations == 12);
    CHECK(cfg.mp.damping == 0.5);
    CHECK(cfg.pilot_amplitude == 2.5);

    const auto fixed = experiment_config_from_string(R"({"experiment": "matrix_dump",
        "frames": [{"kind": "FCP", "M": 4, "N": 4, "Lcp": 1}],
        "channel": {"taps": [{"gain_re": 1, "delay": 0, "doppler": 0}, {"gain_re": 0.5, "delay": 1, "doppler": 1}],
                    "grid": "FCP"}})");
    REQUIRE(fixed.channel.fixed);
    CHECK(fixed.channel.fixed->taps.size() == 2);
    CHECK(fixed.channel.fixed->grid == DopplerGrid::FCP);
}

TEST_CASE("config errors name the offending field", "[config]") {
    CHECK_THAT(expect_parse_error(R"({"frames": [{"kind": "RCP", "M": 4, "N": 4}], "snr": [1]})"),
               Catch::Matchers::ContainsSubstring("unknown field 'snr'"));
    CHECK_THAT(expect_parse_error(R"({"experiment": "capacity_table", "gamma_db": [1]})"),
               Catch::Matchers::ContainsSubstring("'frames'"));
    CHECK_THAT(expect_parse_error(R"({"frames": [{"kind": "XCP", "M": 4, "N": 4}], "snr_db": [1]})"),
               Catch::Matchers::ContainsSubstring("frames[0].kind"));
    CHECK_THAT(expect_parse_error(R"({"frames": [{"kind": "RCP", "M": -4, "N": 4}], "snr_db": [1]})"),
               Catch::Matchers::ContainsSubstring("frames[0].M"));
    CHECK_THAT(expect_parse_error(R"({"frames": [{"kind": "RCP", "M": 4}], "snr_db": [1]})"),
               Catch::Matchers::ContainsSubstring("missing field 'N'"));
    CHECK_THAT(expect_parse_error(R"({"frames": [{"kind": "RCP", "M": 4, "N": 4}], "snr_db": [1], "trials": 0})"),
               Catch::Matchers::ContainsSubstring("trials"));
    CHECK_THAT(expect_parse_error(R"({"frames": [{"kind": "RCP", "M": 4, "N": 4}], "snr_db": [1], "detector": "ML"})"),
               Catch::Matchers::ContainsSubstring("detector"));
    CHECK_THAT(expect_parse_error(R"({"experiment": "ber_sweep", "frames": [{"kind": "RCP", "M": 4, "N": 4}]})"),
               Catch::Matchers::ContainsSubstring("snr_db"));
    CHECK_THAT(expect_parse_error(R"({"frames": [{"kind": "RCP", "M": 4, "N": 4}], "snr_db": ["x"]})"),
               Catch::Matchers::ContainsSubstring("snr_db[0]"));
    CHECK_THAT(expect_parse_error(R"({"frames": [{"kind": "RCP", "M": 4, "N": 4}], "snr_db": [1],
                                      "channel": {"random": {"L": 6, "max_delay": 2}}})"),
               Catch::Matchers::ContainsSubstring("channel.random"));
    CHECK_THAT(expect_parse_error(R"({"frames": [{"kind": "RCP", "M": 4, "N": 4}], "snr_db": [1],
                                      "mp": {"damping": 0}})"),
               Catch::Matchers::ContainsSubstring("config.mp"));
    CHECK_THAT(expect_parse_error("{\n  \"frames\": [\n    {\"kind\": \"RCP\",}\n  ]\n}"),
               Catch::Matchers::ContainsSubstring("line 3"));
    CHECK_THAT(expect_parse_error(R"({"frames": [{"kind": "FCP", "M": 4, "N": 4, "Lcp": 5}], "snr_db": [1]})"),
               Catch::Matchers::ContainsSubstring("configuration"));
    CHECK_THROWS_AS(load_experiment_config("/nonexistent/config.json"), ParseError);
}

TEST_CASE("infeasible frame and channel combinations are configuration errors", "[config]") {
    auto cfg = experiment_config_from_json(small_sweep(1));
    cfg.channel.random = RandomChannelSpec{3, 3, 1, DopplerGrid::RCP};
    CHECK_THROWS_AS(run_experiment(cfg), ConfigurationError);
    cfg.experiment = ExperimentKind::MatrixDump;
    CHECK_THROWS_AS(run_experiment(cfg), ConfigurationError);
}

TEST_CASE("capacity table matches the formulas row for row", "[tables]") {
    const auto cfg = experiment_config_from_string(R"({"experiment": "capacity_table",
        "frames": [{"kind": "RCP", "M": 32, "N": 32, "Lcp": 8}, {"kind": "RCP", "M": 32, "N": 32, "Lcp": 16},
                   {"kind": "FCP", "M": 32, "N": 32, "Lcp": 8}, {"kind": "FZS", "M": 32, "N": 32, "Lzs": 16}],
        "gamma_db": [-5, 0, 7.5, 20]})");
    const ExperimentResult r = run_experiment(cfg);
    CHECK(r.header == std::vector<std::string>{"config", "M", "N", "Lcp", "Lzs", "gamma_db", "capacity", "power",
                                               "spectral_eff_factor", "power_eff_factor"});
    REQUIRE(r.rows.size() == 16);
    std::size_t i = 0;
    for (const auto& fc : cfg.frames)
        for (double g : cfg.gamma_db) {
            const auto& row = r.rows[i++];
            CHECK(row[0] == to_string(fc.kind));
            CHECK(std::stod(row[5]) == g);
            CHECK(std::stod(row[6]) == capacity(fc, db_to_linear(g)));
            CHECK(std::stod(row[7]) == tx_power(fc, 1.0));
        }
}

TEST_CASE("power table matches the formulas", "[tables]") {
    const auto cfg = experiment_config_from_string(R"({"experiment": "power_table",
        "frames": [{"kind": "RCP", "M": 2, "N": 2, "Lcp": 2}, {"kind": "RZP", "M": 2, "N": 2, "Lcp": 2},
                   {"kind": "FCP", "M": 2, "N": 2, "Lcp": 2}, {"kind": "FZS", "M": 2, "N": 2, "Lzs": 1}],
        "symbol_power": [1, 0.5]})");
    const ExperimentResult r = run_experiment(cfg);
    REQUIRE(r.rows.size() == 8);
    const double expected[] = {6, 3, 4, 2, 8, 4, 4, 2};
    for (std::size_t i = 0; i < 8; ++i) CHECK(std::stod(r.rows[i][6]) == expected[i]);
}

TEST_CASE("ber sweep is deterministic and independent of threads", "[ber_sweep]") {
    auto cfg = experiment_config_from_json(small_sweep(12));
    const std::string a = csv_of(run_experiment(cfg));
    const std::string b = csv_of(run_experiment(cfg));
    cfg.threads = 3;
    const std::string c = csv_of(run_experiment(cfg));
    CHECK(a == b);
    CHECK(a == c);
    CHECK(a.rfind("config,M,N,Lcp,Lzs,detector,snr_db,ber,ber_stderr,trials,seed\n", 0) == 0);

    cfg.master_seed = 6;
    CHECK(csv_of(run_experiment(cfg)) != a);
}

TEST_CASE("ber sweep counts only payload bits", "[ber_sweep]") {
    auto cfg = experiment_config_from_json(small_sweep(3));
    cfg.snr_db = {200.0};
    const ExperimentResult r = run_experiment(cfg);
    REQUIRE(r.rows.size() == 6);
    for (const auto& row : r.rows) {
        CHECK(row[7] == "0");
        CHECK(row[9] == "3");
        CHECK(row[10] == "5");
    }
}

TEST_CASE("ber standard error shrinks as one over root trials", "[ber_sweep]") {
    auto cfg = experiment_config_from_json(small_sweep(40, 11));
    cfg.detectors = {DetectorKind::MMSE};
    cfg.snr_db = {0.0};
    const ExperimentResult small = run_experiment(cfg);
    cfg.trials = 160;
    const ExperimentResult large = run_experiment(cfg);
    for (std::size_t i = 0; i < small.rows.size(); ++i) {
        const double ratio = std::stod(small.rows[i][8]) / std::stod(large.rows[i][8]);
        INFO("row " << i << " ratio " << ratio);
        CHECK(ratio == Catch::Approx(2.0).epsilon(0.15));
    }
}

TEST_CASE("equivalence check passes on random cases", "[equivalence]") {
    const auto cfg = experiment_config_from_string(R"({"experiment": "equivalence_check",
        "frames": [{"kind": "RCP", "M": 4, "N": 4, "Lcp": 2}, {"kind": "RCP", "M": 8, "N": 2, "Lcp": 3}],
        "channel": {"random": {"L": 3, "max_delay": 3, "k_max": 2}}, "trials": 10, "master_seed": 3})");
    const ExperimentResult r = run_experiment(cfg);
    CHECK(r.rows.size() == 12);
    for (const auto& row : r.rows) {
        INFO(row[0] << " deviation " << row[5]);
        CHECK(row[7] == "true");
    }
    CHECK(r.sidecar["all_pass"] == true);
}

TEST_CASE("matrix dump lists the closed-form entries", "[dumps]") {
    const auto cfg = experiment_config_from_string(R"({"experiment": "matrix_dump",
        "frames": [{"kind": "RCP", "M": 2, "N": 2, "Lcp": 1}, {"kind": "FZS", "M": 2, "N": 2, "Lzs": 1}],
        "channel": {"taps": [{"gain_re": 1, "delay": 0, "doppler": 0}, {"gain_re": 0.5, "delay": 1, "doppler": 1}]}})");
    const ExperimentResult r = run_experiment(cfg);
    CHECK(r.rows.size() == 8 + 6);
    CHECK(r.rows[1] == std::vector<std::string>{"RCP", "2", "2", "1", "0", "0", "3", "3.061616997868383e-17", "0.5"});
    CHECK(r.sidecar["frames"][1]["nonzeros"] == 6);
}

TEST_CASE("cir dump reads the channel back", "[dumps]") {
    const auto cfg = experiment_config_from_string(R"({"experiment": "cir_dump",
        "frames": [{"kind": "RFCP", "M": 16, "N": 16, "Lcp": 4}, {"kind": "FCP", "M": 16, "N": 16, "Lcp": 4},
                   {"kind": "RCP", "M": 16, "N": 16, "Lcp": 4}],
        "channel": {"taps": [{"gain_re": 1, "delay": 0, "doppler": 1}, {"gain_re": 0.5, "gain_im": 0.2, "delay": 2, "doppler": -2}],
                    "grid": "FCP"}})");
    const ExperimentResult r = run_experiment(cfg);
    CHECK(r.rows.size() == 20 * 16 + 20 * 16 + 16 * 16);
    const auto& frames = r.sidecar["frames"];
    const ChannelModel rfcp = channel_model_from_json(frames[0]["estimate"]);
    REQUIRE(rfcp.taps.size() == 2);
    CHECK(std::abs(rfcp.taps[0].gain - cx(1.0)) <= 1e-8);
    CHECK(frames[0]["cp_block_leakage"].get<double>() <= 1e-10);
    CHECK(frames[1]["cp_block_leakage"].get<double>() > 1e-3);
    CHECK(frames[2]["leakage"].get<double>() > 0.0);
    CHECK(frames[1]["leakage"].get<double>() <= 1e-10);
}

TEST_CASE("outputs land in the requested directory", "[output]") {
    const auto dir = std::filesystem::temp_directory_path() / "otfs_test_outputs";
    std::filesystem::remove_all(dir);
    auto cfg = experiment_config_from_string(R"({"experiment": "power_table",
        "frames": [{"kind": "RCP", "M": 4, "N": 4, "Lcp": 1}]})");
    const auto csv = write_outputs(run_experiment(cfg), dir / "nested");
    CHECK(std::filesystem::exists(csv));
    std::ifstream in(dir / "nested" / "power_table.json");
    const json sidecar = json::parse(in);
    CHECK(sidecar["library_version"] == kVersion);
    CHECK(sidecar["master_seed"] == 1);
    CHECK(sidecar["config"]["frames"][0]["kind"] == "RCP");
    CHECK(sidecar["rows"] == 1);
    std::filesystem::remove_all(dir);
}

TEST_CASE("real formatting round trips", "[output]") {
    for (double x : {0.0, 1.0, -2.5, 0.1, 1.0 / 3.0, 1e-300, 6.02214076e23})
        CHECK(std::stod(format_real(x)) == x);
    CHECK(format_real(12.0) == "12");
}
