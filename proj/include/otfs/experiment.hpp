#pragma once

#include "otfs/channel.hpp"
#include "otfs/core.hpp"
#include "otfs/detect.hpp"
#include "otfs/effective.hpp"
#include "otfs/grid.hpp"
#include "otfs/metrics.hpp"
#include "otfs/rfcp.hpp"
#include "otfs/serialize.hpp"
#include "otfs/version.hpp"

#include <Eigen/QR>
#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <mutex>
#include <optional>
#include <ostream>
#include <random>
#include <set>
#include <string>
#include <thread>
#include <vector>

namespace otfs {

// ============================================================================
// Seeds
// ============================================================================

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

/// splitmix64(master + 0x9E3779B97F4A7C15 * (index + 1)). Stable across releases.
inline std::uint64_t trial_seed(std::uint64_t master, std::uint64_t index) {
    return splitmix64(master + 0x9E3779B97F4A7C15ULL * (index + 1));
}

// ============================================================================
// Configuration
// ============================================================================

enum class ExperimentKind { BerSweep, CapacityTable, PowerTable, CirDump, MatrixDump, EquivalenceCheck };

inline std::string_view to_string(ExperimentKind e) {
    switch (e) {
        case ExperimentKind::BerSweep: return "ber_sweep";
        case ExperimentKind::CapacityTable: return "capacity_table";
        case ExperimentKind::PowerTable: return "power_table";
        case ExperimentKind::CirDump: return "cir_dump";
        case ExperimentKind::MatrixDump: return "matrix_dump";
        case ExperimentKind::EquivalenceCheck: return "equivalence_check";
    }
    return "?";
}

inline ExperimentKind experiment_from_string(std::string_view name) {
    for (auto e : {ExperimentKind::BerSweep, ExperimentKind::CapacityTable, ExperimentKind::PowerTable,
                   ExperimentKind::CirDump, ExperimentKind::MatrixDump, ExperimentKind::EquivalenceCheck})
        if (to_string(e) == name) return e;
    throw ParseError("unknown experiment '" + std::string(name) + "'");
}

inline const std::vector<std::string>& experiment_names() {
    static const std::vector<std::string> names{"ber_sweep",  "capacity_table", "power_table",
                                                "cir_dump",   "matrix_dump",    "equivalence_check"};
    return names;
}

/// Where channel realizations come from.
struct ChannelSource {
    std::optional<ChannelModel> fixed;
    RandomChannelSpec random;
    std::optional<std::uint64_t> seed;              // channel draws use this instead of master_seed
    std::optional<std::size_t> doppler_frame_len;   // Doppler bins counted on a frame of this many samples
};

struct ExperimentConfig {
    ExperimentKind experiment = ExperimentKind::BerSweep;
    std::vector<FrameConfig> frames;
    ChannelSource channel;
    std::vector<double> snr_db;
    std::vector<double> gamma_db;
    std::vector<double> symbol_power{1.0};
    std::size_t trials = 1;
    std::vector<DetectorKind> detectors{DetectorKind::MMSE};
    std::string constellation = "4QAM";
    std::uint64_t master_seed = 1;
    std::string output_path = "results";
    std::size_t threads = 1;
    double pilot_amplitude = 1.0;
    MpConfig mp;
    json source;  // the document as read
};

namespace detail {

inline void reject_unknown(const json& obj, const std::set<std::string>& allowed, const std::string& where) {
    for (const auto& [key, value] : obj.items())
        if (!allowed.count(key)) throw ParseError(where + ": unknown field '" + key + "'");
}

inline std::uint64_t unsigned_field(const json& obj, const std::string& key, const std::string& where) {
    const auto& v = obj.at(key);
    if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0))
        throw ParseError(where + "." + key + ": expected a non-negative integer");
    return v.get<std::uint64_t>();
}

inline std::uint64_t unsigned_or(const json& obj, const std::string& key, const std::string& where,
                                 std::uint64_t fallback) {
    return obj.contains(key) ? unsigned_field(obj, key, where) : fallback;
}

inline double number_field(const json& obj, const std::string& key, const std::string& where) {
    const auto& v = obj.at(key);
    if (!v.is_number()) throw ParseError(where + "." + key + ": expected a number");
    return v.get<double>();
}

inline std::vector<double> number_list(const json& obj, const std::string& key, const std::string& where) {
    const auto& v = obj.at(key);
    if (v.is_number()) return {v.get<double>()};
    if (!v.is_array()) throw ParseError(where + "." + key + ": expected a number or an array of numbers");
    std::vector<double> out;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (!v[i].is_number()) throw ParseError(where + "." + key + "[" + std::to_string(i) + "]: expected a number");
        out.push_back(v[i].get<double>());
    }
    return out;
}

inline std::string string_field(const json& obj, const std::string& key, const std::string& where) {
    const auto& v = obj.at(key);
    if (!v.is_string()) throw ParseError(where + "." + key + ": expected a string");
    return v.get<std::string>();
}

inline FrameConfig frame_from_json(const json& f, const std::string& where) {
    if (!f.is_object()) throw ParseError(where + ": expected an object");
    reject_unknown(f, {"kind", "M", "N", "Lcp", "Lzs"}, where);
    if (!f.contains("kind")) throw ParseError(where + ": missing field 'kind'");
    if (!f.contains("M")) throw ParseError(where + ": missing field 'M'");
    if (!f.contains("N")) throw ParseError(where + ": missing field 'N'");
    FrameConfig cfg;
    const std::string kind = string_field(f, "kind", where);
    try {
        cfg.kind = frame_kind_from_string(kind);
    } catch (const Error& e) {
        throw ParseError(where + ".kind: " + e.what());
    }
    cfg.M = unsigned_field(f, "M", where);
    cfg.N = unsigned_field(f, "N", where);
    cfg.cp_len = unsigned_or(f, "Lcp", where, 0);
    cfg.zs_len = unsigned_or(f, "Lzs", where, 0);
    try {
        cfg.validate();
    } catch (const Error& e) {
        throw ConfigurationError(where + ": " + e.what());
    }
    return cfg;
}

inline ChannelSource channel_from_json(const json& c, const std::string& where) {
    if (!c.is_object()) throw ParseError(where + ": expected an object");
    reject_unknown(c, {"taps", "grid", "normalized", "random", "doppler_frame_len"}, where);
    ChannelSource src;
    if (c.contains("doppler_frame_len")) {
        src.doppler_frame_len = unsigned_field(c, "doppler_frame_len", where);
        if (*src.doppler_frame_len == 0) throw ParseError(where + ".doppler_frame_len: must be positive");
    }
    if (c.contains("taps")) {
        if (c.contains("random")) throw ParseError(where + ": give either 'taps' or 'random', not both");
        json model = c;
        model.erase("doppler_frame_len");
        src.fixed = channel_model_from_json(model, where);
        if (src.fixed->taps.empty()) throw ParseError(where + ".taps: empty tap list");
        return src;
    }
    if (!c.contains("random")) throw ParseError(where + ": expected 'taps' or 'random'");
    const json& r = c["random"];
    const std::string at = where + ".random";
    if (!r.is_object()) throw ParseError(at + ": expected an object");
    reject_unknown(r, {"L", "k_max", "max_delay", "seed"}, at);
    src.random.paths = unsigned_or(r, "L", at, 4);
    src.random.max_delay = unsigned_or(r, "max_delay", at, src.random.paths);
    src.random.k_max = int(unsigned_or(r, "k_max", at, 2));
    if (r.contains("seed")) src.seed = unsigned_field(r, "seed", at);
    if (src.random.paths == 0) throw ParseError(at + ".L: must be positive");
    if (src.random.paths > src.random.max_delay + 1)
        throw ConfigurationError(at + ": cannot draw " + std::to_string(src.random.paths) +
                                 " distinct delays from [0, " + std::to_string(src.random.max_delay) + "]");
    return src;
}

}  // namespace detail

/// Reads a parsed JSON document. Field errors name the offending path.
inline ExperimentConfig experiment_config_from_json(const json& doc) {
    const std::string root = "config";
    if (!doc.is_object()) throw ParseError(root + ": expected a JSON object");
    detail::reject_unknown(doc,
                           {"experiment", "frames", "frame", "channel", "snr_db", "gamma_db", "symbol_power", "trials",
                            "detector", "detectors", "constellation", "master_seed", "output_path", "threads", "mp",
                            "pilot_amplitude"},
                           root);
    ExperimentConfig cfg;
    cfg.source = doc;
    if (doc.contains("experiment")) cfg.experiment = experiment_from_string(detail::string_field(doc, "experiment", root));

    const char* frames_key = doc.contains("frames") ? "frames" : "frame";
    if (!doc.contains(frames_key)) throw ParseError(root + ": missing field 'frames'");
    const json& frames = doc[frames_key];
    if (frames.is_object()) {
        cfg.frames.push_back(detail::frame_from_json(frames, root + "." + frames_key));
    } else if (frames.is_array() && !frames.empty()) {
        for (std::size_t i = 0; i < frames.size(); ++i)
            cfg.frames.push_back(
                detail::frame_from_json(frames[i], root + "." + frames_key + "[" + std::to_string(i) + "]"));
    } else {
        throw ParseError(root + "." + frames_key + ": expected a non-empty array of frames");
    }

    if (doc.contains("channel")) cfg.channel = detail::channel_from_json(doc["channel"], root + ".channel");
    if (doc.contains("snr_db")) cfg.snr_db = detail::number_list(doc, "snr_db", root);
    cfg.gamma_db = doc.contains("gamma_db") ? detail::number_list(doc, "gamma_db", root) : cfg.snr_db;
    if (doc.contains("symbol_power")) cfg.symbol_power = detail::number_list(doc, "symbol_power", root);
    for (double p : cfg.symbol_power)
        if (!(p > 0.0)) throw ParseError(root + ".symbol_power: values must be positive");
    cfg.trials = detail::unsigned_or(doc, "trials", root, 1);
    if (cfg.trials == 0) throw ParseError(root + ".trials: must be >= 1");

    const char* det_key = doc.contains("detectors") ? "detectors" : "detector";
    if (doc.contains(det_key)) {
        const json& d = doc[det_key];
        std::vector<json> names = d.is_array() ? std::vector<json>(d.begin(), d.end()) : std::vector<json>{d};
        if (names.empty()) throw ParseError(root + "." + det_key + ": empty detector list");
        cfg.detectors.clear();
        for (const auto& n : names) {
            if (!n.is_string()) throw ParseError(root + "." + det_key + ": expected detector names");
            try {
                cfg.detectors.push_back(detector_from_string(n.get<std::string>()));
            } catch (const Error& e) {
                throw ParseError(root + "." + det_key + ": " + e.what());
            }
        }
    }
    if (doc.contains("constellation")) {
        cfg.constellation = detail::string_field(doc, "constellation", root);
        constellation_from_name(cfg.constellation);
    }
    cfg.master_seed = detail::unsigned_or(doc, "master_seed", root, 1);
    if (doc.contains("output_path")) cfg.output_path = detail::string_field(doc, "output_path", root);
    cfg.threads = detail::unsigned_or(doc, "threads", root, 1);
    if (cfg.threads == 0) throw ParseError(root + ".threads: must be >= 1");
    if (doc.contains("pilot_amplitude")) {
        cfg.pilot_amplitude = detail::number_field(doc, "pilot_amplitude", root);
        if (!(cfg.pilot_amplitude > 0.0)) throw ParseError(root + ".pilot_amplitude: must be positive");
    }
    if (doc.contains("mp")) {
        const json& m = doc["mp"];
        const std::string at = root + ".mp";
        if (!m.is_object()) throw ParseError(at + ": expected an object");
        detail::reject_unknown(m, {"max_iterations", "damping", "convergence_tol"}, at);
        cfg.mp.max_iterations = detail::unsigned_or(m, "max_iterations", at, cfg.mp.max_iterations);
        if (m.contains("damping")) cfg.mp.damping = detail::number_field(m, "damping", at);
        if (m.contains("convergence_tol")) cfg.mp.convergence_tol = detail::number_field(m, "convergence_tol", at);
        try {
            cfg.mp.validate();
        } catch (const Error& e) {
            throw ParseError(at + ": " + e.what());
        }
    }

    if (cfg.experiment == ExperimentKind::BerSweep && cfg.snr_db.empty())
        throw ParseError(root + ".snr_db: ber_sweep needs at least one SNR");
    if (cfg.experiment == ExperimentKind::CapacityTable && cfg.gamma_db.empty())
        throw ParseError(root + ".gamma_db: capacity_table needs at least one SNR");
    return cfg;
}

inline ExperimentConfig experiment_config_from_string(const std::string& text) {
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ParseError(std::string("config: ") + e.what());
    }
    return experiment_config_from_json(doc);
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open config file '" + path + "'");
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    try {
        return experiment_config_from_string(text);
    } catch (const ParseError& e) {
        throw ParseError(path + ": " + e.what());
    }
}

// ============================================================================
// Results
// ============================================================================

struct ExperimentResult {
    std::string name;
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;
    json sidecar;

    void write_csv(std::ostream& os) const {
        auto line = [&](const std::vector<std::string>& cells) {
            for (std::size_t i = 0; i < cells.size(); ++i) os << (i ? "," : "") << cells[i];
            os << '\n';
        };
        line(header);
        for (const auto& r : rows) line(r);
    }
};

/// Shortest round-trip decimal form.
inline std::string format_real(double x) {
    char buf[64];
    for (int precision = 1; precision <= 17; ++precision) {
        std::snprintf(buf, sizeof buf, "%.*g", precision, x);
        if (std::strtod(buf, nullptr) == x) break;
    }
    return buf;
}

namespace detail {

inline std::vector<std::string> frame_cells(const FrameConfig& cfg) {
    return {std::string(to_string(cfg.kind)), std::to_string(cfg.M), std::to_string(cfg.N), std::to_string(cfg.cp_len),
            std::to_string(cfg.zs_len)};
}

inline json frame_json(const FrameConfig& cfg) {
    return {{"kind", std::string(to_string(cfg.kind))},
            {"M", cfg.M},
            {"N", cfg.N},
            {"Lcp", cfg.cp_len},
            {"Lzs", cfg.zs_len}};
}

inline json base_sidecar(const ExperimentConfig& cfg) {
    return {{"experiment", std::string(to_string(cfg.experiment))},
            {"library_version", kVersion},
            {"master_seed", cfg.master_seed},
            {"trial_seed", "splitmix64(master_seed + 0x9E3779B97F4A7C15 * (trial_index + 1))"},
            {"config", cfg.source}};
}

/// The channel model of one trial in bins of the configuration's native grid.
/// Random draws without doppler_frame_len count their integer bins on each configuration's own grid.
inline ChannelModel on_native_grid(const ChannelModel& model, const FrameConfig& cfg, const ChannelSource& src) {
    ChannelModel out = model;
    out.grid = native_grid(cfg);
    if (!src.doppler_frame_len) return src.fixed ? rebase(model, cfg, out.grid) : out;
    const double scale = double(grid_frame_len(out.grid, cfg)) / double(*src.doppler_frame_len);
    for (auto& t : out.taps) t.doppler *= scale;
    return out;
}

inline ChannelModel round_doppler(ChannelModel model) {
    for (auto& t : model.taps) t.doppler = double(nearest_bin(t.doppler));
    return model;
}

/// Channel of one trial: trial_seed(channel seed, t) when the channel names a seed,
/// otherwise the channel sub-stream trial_seed(trial_seed(master, t), 0).
inline ChannelModel draw_channel(const ChannelSource& src, std::uint64_t master, std::uint64_t trial) {
    if (src.fixed) return *src.fixed;
    std::mt19937_64 rng(src.seed ? trial_seed(*src.seed, trial) : trial_seed(trial_seed(master, trial), 0));
    return random_model(src.random, rng);
}

inline std::size_t channel_max_delay(const ChannelSource& src) {
    return src.fixed ? src.fixed->max_delay() : src.random.max_delay;
}

inline void check_guard(const ChannelSource& src, const FrameConfig& cfg, const std::string& where) {
    const std::size_t d = channel_max_delay(src);
    const std::size_t guard = cfg.kind == FrameKind::FZS ? cfg.zs_len : cfg.cp_len;
    if (d > guard || d >= cfg.M)
        throw ConfigurationError(where + ": delay spread " + std::to_string(d) + " does not fit " +
                                 std::string(to_string(cfg.kind)) + " with guard " + std::to_string(guard) +
                                 " and M = " + std::to_string(cfg.M));
}

}  // namespace detail

/// Grid and time-domain model the receiver detects on: FZS uses the equivalent RCP
/// frame, RFCP the extended (M + L) x N RCP frame.
inline FrameConfig detection_config(const FrameConfig& cfg) {
    switch (cfg.kind) {
        case FrameKind::FZS: return FrameConfig{FrameKind::RCP, cfg.M, cfg.N, cfg.zs_len, 0};
        case FrameKind::RFCP: return extended_config(cfg);
        default: return cfg;
    }
}

/// First detection-grid row that carries payload row 0.
inline std::size_t payload_row_offset(const FrameConfig& cfg) { return cfg.kind == FrameKind::RFCP ? cfg.cp_len : 0; }

/**
 * Maps the unknowns onto the detection grid; the same map holds in time and in
 * delay-Doppler because both transforms act row by row. FZS keeps the payload
 * rows, RFCP ties the extended CP rows to the last data rows. Empty for the
 * other kinds, where every grid entry is an unknown.
 */
inline SparseCMatrix payload_map(const FrameConfig& cfg) {
    const FrameConfig det = detection_config(cfg);
    const std::size_t rows = cfg.data_rows();
    std::vector<Eigen::Triplet<cx>> entries;
    if (cfg.kind == FrameKind::FZS) {
        for (std::size_t k = 0; k < cfg.N; ++k)
            for (std::size_t l = 0; l < rows; ++l)
                entries.emplace_back(Eigen::Index(k * det.M + l), Eigen::Index(k * rows + l), 1.0);
    } else if (cfg.kind == FrameKind::RFCP) {
        const std::size_t L = cfg.cp_len;
        for (std::size_t k = 0; k < cfg.N; ++k)
            for (std::size_t l = 0; l < cfg.M; ++l) {
                const auto u = Eigen::Index(k * cfg.M + l);
                entries.emplace_back(Eigen::Index(k * det.M + L + l), u, 1.0);
                if (l + L >= cfg.M) entries.emplace_back(Eigen::Index(k * det.M + l + L - cfg.M), u, 1.0);
            }
    } else {
        return {};
    }
    SparseCMatrix P(Eigen::Index(det.MN()), Eigen::Index(rows * cfg.N));
    P.setFromTriplets(entries.begin(), entries.end());
    return P;
}

/// Noiseless modulate, frame, propagate, strip and demodulate. RFCP returns the extended grid.
inline DelayDopplerFrame run_pipeline(const DelayDopplerFrame& X, const ChannelModel& model, const FrameConfig& cfg) {
    const TimeFrame framed = add_framing(otfs_modulate(X), cfg);
    const TimeFrame r = propagate(framed, model, cfg, NoiseSpec{}, 0);
    const std::size_t rows = cfg.kind == FrameKind::RFCP ? cfg.M + cfg.cp_len : cfg.M;
    return otfs_demodulate(strip_framing(r, cfg), rows, cfg.N);
}

// ============================================================================
// ber_sweep
// ============================================================================

namespace detail {

/// Solves the time-domain system with ZF; rank-deficient channels fall back to the
/// dense minimum-norm least-squares solution.
class TimeZf {
public:
    explicit TimeZf(const SparseCMatrix& H) : H_(H) {
        try {
            sparse_.emplace(H);
        } catch (const SingularMatrixError&) {
            dense_.emplace(CMatrix(H));
        }
    }
    bool fell_back() const { return dense_.has_value(); }
    CVector operator()(const CVector& y) const {
        if (sparse_) {
            try {
                return (*sparse_)(y);
            } catch (const SingularMatrixError&) {
                dense_.emplace(CMatrix(H_));
                sparse_.reset();
            }
        }
        return dense_->solve(y);
    }

private:
    SparseCMatrix H_;
    mutable std::optional<ZfDetector> sparse_;
    mutable std::optional<Eigen::CompleteOrthogonalDecomposition<CMatrix>> dense_;
};

struct SweepTally {
    std::vector<BerCounter> counts;  // [frame][detector][snr]
    std::vector<std::uint64_t> zf_fallbacks;
    std::vector<std::uint64_t> mp_unconverged;
};

}  // namespace detail

/**
 * Monte Carlo BER over frames x detectors x SNR.
 *
 * Trial t uses seed s = trial_seed(master, t) with sub-streams trial_seed(s, 0)
 * for the channel, (s, 1) for the symbols and (s, 2) for the noise, so every
 * configuration and SNR sees the same channel, symbols and unit noise
 * realization. The receiver uses nearest-bin CSI on its native grid.
 */
inline ExperimentResult run_ber_sweep(const ExperimentConfig& cfg) {
    const Constellation c = constellation_from_name(cfg.constellation);
    const std::size_t F = cfg.frames.size(), D = cfg.detectors.size(), S = cfg.snr_db.size();
    for (std::size_t f = 0; f < F; ++f) detail::check_guard(cfg.channel, cfg.frames[f], "frames[" + std::to_string(f) + "]");
    const bool need_zf = std::count(cfg.detectors.begin(), cfg.detectors.end(), DetectorKind::ZF) > 0;
    const bool need_mp = std::count(cfg.detectors.begin(), cfg.detectors.end(), DetectorKind::MP) > 0;

    auto run_trial = [&](std::size_t t, detail::SweepTally& tally) {
        const std::uint64_t seed = trial_seed(cfg.master_seed, t);
        const ChannelModel physical = detail::draw_channel(cfg.channel, cfg.master_seed, t);
        std::mt19937_64 symbol_rng(trial_seed(seed, 1));
        const std::uint64_t noise_seed = trial_seed(seed, 2);

        std::size_t max_mn = 0;
        for (const auto& fr : cfg.frames) max_mn = std::max(max_mn, fr.MN());
        std::uniform_int_distribution<std::size_t> pick(0, c.size() - 1);
        std::vector<std::size_t> labels(max_mn);
        for (auto& l : labels) l = pick(symbol_rng);

        for (std::size_t f = 0; f < F; ++f) {
            const FrameConfig& fc = cfg.frames[f];
            const FrameConfig det = detection_config(fc);
            const ChannelModel model = detail::on_native_grid(physical, fc, cfg.channel);
            ChannelModel csi = detail::round_doppler(model);
            if (fc.kind == FrameKind::RFCP) csi.grid = DopplerGrid::RCP;

            DelayDopplerFrame X = DelayDopplerFrame::zeros(fc.M, fc.N);
            const std::size_t rows = fc.data_rows();
            for (std::size_t k = 0; k < fc.N; ++k)
                for (std::size_t l = 0; l < rows; ++l) X(l, k) = c.points[labels[k * fc.M + l]];

            const TimeFrame framed = add_framing(otfs_modulate(X), fc);
            const CVector r0 = propagate(framed, model, fc, NoiseSpec{}, 0).samples;
            const CVector w = unit_noise(framed.size(), noise_seed);

            const SparseCMatrix P = payload_map(fc);
            const bool mapped = P.size() > 0;
            auto lift = [&](const CVector& u) { return mapped ? CVector(P * u) : u; };
            const SparseCMatrix H =
                mapped ? SparseCMatrix(sparse_time_channel(csi, det) * P) : sparse_time_channel(csi, det);
            std::optional<detail::TimeZf> zf;
            if (need_zf) {
                zf.emplace(H);
                if (zf->fell_back()) ++tally.zf_fallbacks[f];
            }
            std::optional<EffectiveChannel> heff;
            if (need_mp) {
                heff.emplace(heff_closed_form(csi, det));
                if (mapped) heff->matrix = heff->matrix * P;
            }

            const std::size_t offset = payload_row_offset(fc);
            auto count = [&](const CVector& xhat, BerCounter& counter) {
                std::uint64_t errors = 0;
                for (std::size_t k = 0; k < fc.N; ++k)
                    for (std::size_t l = 0; l < rows; ++l) {
                        const std::size_t got = c.slice(xhat(Eigen::Index(k * det.M + offset + l)));
                        errors += std::uint64_t(std::popcount(got ^ labels[k * fc.M + l]));
                    }
                counter.add(errors, std::uint64_t(rows * fc.N * c.bits_per_symbol));
            };

            for (std::size_t s = 0; s < S; ++s) {
                const double sigma2 = db_to_linear(-cfg.snr_db[s]);
                const TimeFrame r{r0 + std::sqrt(sigma2) * w};
                const CVector y_time = strip_framing(r, fc).samples;
                for (std::size_t d = 0; d < D; ++d) {
                    BerCounter& counter = tally.counts[(f * D + d) * S + s];
                    CVector xhat;
                    switch (cfg.detectors[d]) {
                        case DetectorKind::ZF:
                            xhat = otfs_demodulate(TimeFrame{lift((*zf)(y_time))}, det.M, det.N).vec();
                            break;
                        case DetectorKind::MMSE:
                            xhat = otfs_demodulate(TimeFrame{lift(MmseDetector(H, sigma2)(y_time))}, det.M, det.N).vec();
                            break;
                        case DetectorKind::MP: {
                            const CVector y = otfs_demodulate(TimeFrame{y_time}, det.M, det.N).vec();
                            const MpResult res = mp_detect_full(heff->matrix, y, c, sigma2, cfg.mp);
                            if (!res.converged) ++tally.mp_unconverged[f];
                            xhat = lift(res.symbols);
                            break;
                        }
                    }
                    count(xhat, counter);
                }
            }
        }
    };

    auto fresh = [&] {
        detail::SweepTally t;
        t.counts.assign(F * D * S, BerCounter{});
        t.zf_fallbacks.assign(F, 0);
        t.mp_unconverged.assign(F, 0);
        return t;
    };
    detail::SweepTally total = fresh();
    const std::size_t workers = std::max<std::size_t>(1, std::min(cfg.threads, cfg.trials));
    std::vector<detail::SweepTally> tallies(workers, fresh());
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    auto work = [&](std::size_t id) {
        try {
            for (std::size_t t = next++; t < cfg.trials; t = next++) run_trial(t, tallies[id]);
        } catch (...) {
            std::lock_guard<std::mutex> lock(failure_mutex);
            if (!failure) failure = std::current_exception();
            next = cfg.trials;
        }
    };
    if (workers == 1) {
        work(0);
    } else {
        std::vector<std::thread> pool;
        for (std::size_t id = 0; id < workers; ++id) pool.emplace_back(work, id);
        for (auto& th : pool) th.join();
    }
    if (failure) std::rethrow_exception(failure);
    for (const auto& t : tallies) {
        for (std::size_t i = 0; i < total.counts.size(); ++i) total.counts[i].merge(t.counts[i]);
        for (std::size_t f = 0; f < F; ++f) {
            total.zf_fallbacks[f] += t.zf_fallbacks[f];
            total.mp_unconverged[f] += t.mp_unconverged[f];
        }
    }

    ExperimentResult out;
    out.name = "ber_sweep";
    out.header = {"config", "M", "N", "Lcp", "Lzs", "detector", "snr_db", "ber", "ber_stderr", "trials", "seed"};
    json per_frame = json::array();
    for (std::size_t f = 0; f < F; ++f) {
        for (std::size_t d = 0; d < D; ++d)
            for (std::size_t s = 0; s < S; ++s) {
                const BerCounter& b = total.counts[(f * D + d) * S + s];
                auto row = detail::frame_cells(cfg.frames[f]);
                row.insert(row.end(), {std::string(to_string(cfg.detectors[d])), format_real(cfg.snr_db[s]),
                                       format_real(b.ber()), format_real(b.std_error()), std::to_string(cfg.trials),
                                       std::to_string(cfg.master_seed)});
                out.rows.push_back(std::move(row));
            }
        per_frame.push_back({{"frame", detail::frame_json(cfg.frames[f])},
                             {"zf_dense_fallbacks", total.zf_fallbacks[f]},
                             {"mp_unconverged", total.mp_unconverged[f]}});
    }
    out.sidecar = detail::base_sidecar(cfg);
    out.sidecar["frames"] = per_frame;
    out.sidecar["receiver"] = "nearest-bin CSI on the native Doppler grid";
    out.sidecar["noise"] = "sigma^2 = 10^(-snr_db/10) per sample, unit average symbol energy";
    return out;
}

// ============================================================================
// Tables
// ============================================================================

inline ExperimentResult run_capacity_table(const ExperimentConfig& cfg) {
    ExperimentResult out;
    out.name = "capacity_table";
    out.header = {"config", "M", "N", "Lcp", "Lzs", "gamma_db", "capacity", "power", "spectral_eff_factor",
                  "power_eff_factor"};
    const double Ps = cfg.symbol_power.front();
    for (const auto& fc : cfg.frames)
        for (double g : cfg.gamma_db) {
            const EfficiencyReport r = efficiency(fc, db_to_linear(g), Ps);
            auto row = detail::frame_cells(fc);
            row.insert(row.end(), {format_real(g), format_real(r.capacity), format_real(r.tx_power),
                                   format_real(r.spectral_eff_factor), format_real(r.power_eff_factor)});
            out.rows.push_back(std::move(row));
        }
    out.sidecar = detail::base_sidecar(cfg);
    out.sidecar["symbol_power"] = Ps;
    return out;
}

inline ExperimentResult run_power_table(const ExperimentConfig& cfg) {
    ExperimentResult out;
    out.name = "power_table";
    out.header = {"config", "M", "N", "Lcp", "Lzs", "symbol_power", "power", "power_eff_factor", "spectral_eff_factor"};
    for (const auto& fc : cfg.frames)
        for (double p : cfg.symbol_power) {
            const EfficiencyReport r = efficiency(fc, 0.0, p);
            auto row = detail::frame_cells(fc);
            row.insert(row.end(), {format_real(p), format_real(r.tx_power), format_real(r.power_eff_factor),
                                   format_real(r.spectral_eff_factor)});
            out.rows.push_back(std::move(row));
        }
    out.sidecar = detail::base_sidecar(cfg);
    return out;
}

// ============================================================================
// Dumps
// ============================================================================

/// Pilot-only frame per configuration; writes the received grid and the CIR read back from it.
inline ExperimentResult run_cir_dump(const ExperimentConfig& cfg) {
    ExperimentResult out;
    out.name = "cir_dump";
    out.header = {"config", "M", "N", "Lcp", "Lzs", "grid", "l", "k", "re", "im"};
    out.sidecar = detail::base_sidecar(cfg);
    json frames = json::array();
    const ChannelModel physical = detail::draw_channel(cfg.channel, cfg.master_seed, 0);
    for (std::size_t f = 0; f < cfg.frames.size(); ++f) {
        const FrameConfig& fc = cfg.frames[f];
        detail::check_guard(cfg.channel, fc, "frames[" + std::to_string(f) + "]");
        const ChannelModel model = detail::on_native_grid(physical, fc, cfg.channel);
        double k_span = 0.0;
        for (const auto& t : model.taps) k_span = std::max(k_span, std::abs(t.doppler));
        const PilotSpec p = make_pilot_spec(fc, physical.max_delay(), std::size_t(std::ceil(k_span)), cfg.pilot_amplitude);
        const DelayDopplerFrame X = embed_pilot(DelayDopplerFrame::zeros(fc.M, fc.N), p);

        const TimeFrame framed = add_framing(otfs_modulate(X), fc);
        NoiseSpec noise;
        if (!cfg.snr_db.empty()) noise = NoiseSpec{cfg.snr_db.front(), true};
        const TimeFrame r = propagate(framed, model, fc, noise, trial_seed(cfg.master_seed, 0));
        const bool is_rfcp = fc.kind == FrameKind::RFCP;
        const DelayDopplerFrame Y =
            is_rfcp ? DelayDopplerFrame::zeros(fc.M, fc.N) : otfs_demodulate(strip_framing(r, fc), fc.M, fc.N);

        json entry{{"frame", detail::frame_json(fc)},
                   {"pilot", {{"l", p.l_p}, {"k", p.k_p}, {"amplitude", p.amplitude}}},
                   {"channel", to_json_value(model)}};
        const bool extended = fc.kind == FrameKind::FCP || fc.kind == FrameKind::RFCP;
        const DelayDopplerFrame* shown = &Y;
        std::optional<RfcpBlocks> blocks;
        if (fc.kind == FrameKind::RFCP) {
            blocks = rfcp_receive(r, fc);
            shown = &blocks->extended;
            entry["estimate"] = to_json_value(pilot_cir(blocks->extended, p, fc));
        } else {
            entry["estimate"] = to_json_value(pilot_cir(Y, p, fc));
            if (fc.kind == FrameKind::FCP) blocks = rfcp_receive(r, fc);
        }
        if (fc.kind != FrameKind::RFCP) entry["leakage"] = doppler_leakage(Y, model, fc, p.l_p, p.k_p);
        if (extended) entry["cp_block_leakage"] = cp_block_leakage(blocks->cp_block, model, fc, p.k_p);
        if (fc.kind == FrameKind::FCP) shown = &blocks->extended;
        frames.push_back(entry);

        const std::string grid = extended ? "extended" : "data";
        for (Eigen::Index k = 0; k < Eigen::Index(shown->N()); ++k)
            for (Eigen::Index l = 0; l < Eigen::Index(shown->M()); ++l) {
                auto row = detail::frame_cells(fc);
                const cx v = shown->data(l, k);
                row.insert(row.end(), {grid, std::to_string(l), std::to_string(k), format_real(v.real()),
                                       format_real(v.imag())});
                out.rows.push_back(std::move(row));
            }
    }
    out.sidecar["frames"] = frames;
    return out;
}

/// Closed-form H_eff triples per configuration.
inline ExperimentResult run_matrix_dump(const ExperimentConfig& cfg) {
    ExperimentResult out;
    out.name = "matrix_dump";
    out.header = {"config", "M", "N", "Lcp", "Lzs", "row", "col", "re", "im"};
    out.sidecar = detail::base_sidecar(cfg);
    json frames = json::array();
    const ChannelModel physical = detail::draw_channel(cfg.channel, cfg.master_seed, 0);
    for (std::size_t f = 0; f < cfg.frames.size(); ++f) {
        const FrameConfig& fc = cfg.frames[f];
        detail::check_guard(cfg.channel, fc, "frames[" + std::to_string(f) + "]");
        const ChannelModel model = detail::on_native_grid(physical, fc, cfg.channel);
        const EffectiveChannel H = heff_closed_form(model, fc);
        for (Eigen::Index r = 0; r < H.matrix.outerSize(); ++r)
            for (SparseCMatrix::InnerIterator it(H.matrix, r); it; ++it) {
                auto row = detail::frame_cells(fc);
                row.insert(row.end(), {std::to_string(it.row()), std::to_string(it.col()),
                                       format_real(it.value().real()), format_real(it.value().imag())});
                out.rows.push_back(std::move(row));
            }
        frames.push_back({{"frame", detail::frame_json(fc)},
                          {"channel", to_json_value(model)},
                          {"size", H.matrix.rows()},
                          {"nonzeros", H.matrix.nonZeros()}});
    }
    out.sidecar["frames"] = frames;
    return out;
}

// ============================================================================
// equivalence_check
// ============================================================================

struct EquivalenceRow {
    std::string check;
    FrameConfig frame;
    std::size_t cases = 0;
    double max_abs_dev = 0.0;
};

namespace detail {

inline double max_abs_diff(const CMatrix& a, const CMatrix& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) return std::numeric_limits<double>::infinity();
    return (a - b).cwiseAbs().maxCoeff();
}

}  // namespace detail

/**
 * Random integer-Doppler cases per frame shape (M, N, L), where L is the frame's
 * prefix or suffix length. Each check reports the largest deviation seen.
 */
inline std::vector<EquivalenceRow> equivalence_rows(const ExperimentConfig& cfg) {
    const Constellation c = constellation_from_name(cfg.constellation);
    std::vector<EquivalenceRow> rows;
    for (const auto& shape : cfg.frames) {
        const std::size_t M = shape.M, N = shape.N;
        const std::size_t L = shape.kind == FrameKind::FZS ? shape.zs_len : shape.cp_len;
        if (L >= M) throw ConfigurationError("equivalence_check needs a guard shorter than M");
        RandomChannelSpec spec = cfg.channel.random;
        spec.max_delay = std::min(spec.max_delay, L);
        spec.paths = std::min(spec.paths, spec.max_delay + 1);

        const FrameConfig rcp{FrameKind::RCP, M, N, L, 0};
        const FrameConfig rzp{FrameKind::RZP, M, N, L, 0};
        const FrameConfig fcp{FrameKind::FCP, M, N, L, 0};
        const FrameConfig fzs{FrameKind::FZS, M, N, 0, L};
        const FrameConfig rfcp{FrameKind::RFCP, M, N, L, 0};
        const FrameConfig ext = extended_config(fcp);
        const std::vector<FrameConfig> all{rcp, rzp, fcp, fzs, rfcp};

        EquivalenceRow rzp_rcp{"rzp_vs_rcp", shape}, fcp_ext{"fcp_vs_rcp_extended", shape},
            fzs_zero{"fzs_vs_rcp_zeroed", shape}, closed{"closed_vs_conjugation", shape},
            pipe{"pipeline_vs_io", shape}, heff_io{"heff_vs_io", shape};
        for (std::size_t t = 0; t < cfg.trials; ++t) {
            std::mt19937_64 rng(trial_seed(cfg.master_seed, t));
            ChannelModel model = random_model(spec, rng);
            std::uniform_int_distribution<std::size_t> pick(0, c.size() - 1);
            DelayDopplerFrame X = DelayDopplerFrame::zeros(M, N);
            for (auto& v : X.data.reshaped()) v = c.points[pick(rng)];

            rzp_rcp.max_abs_dev = std::max(rzp_rcp.max_abs_dev,
                                           detail::max_abs_diff(run_pipeline(X, model, rzp).data,
                                                                run_pipeline(X, model, rcp).data));

            ChannelModel on_fcp = model;
            on_fcp.grid = DopplerGrid::FCP;
            ChannelModel on_ext = model;
            on_ext.grid = DopplerGrid::RCP;
            const CMatrix Y_ext =
                io_response(DelayDopplerFrame(detail::repeat_tail_rows(X.data, L)), on_ext, ext).data;
            fcp_ext.max_abs_dev = std::max(fcp_ext.max_abs_dev,
                                           detail::max_abs_diff(io_response(X, on_fcp, fcp).data,
                                                                Y_ext.bottomRows(Eigen::Index(M))));

            DelayDopplerFrame X0 = X;
            X0.data.bottomRows(Eigen::Index(L)).setZero();
            fzs_zero.max_abs_dev = std::max(fzs_zero.max_abs_dev,
                                            detail::max_abs_diff(io_response(X0, model, fzs).data,
                                                                 io_response(X0, model, rcp).data));

            for (const auto& fc : all) {
                ChannelModel m = model;
                m.grid = native_grid(fc);
                const DelayDopplerFrame& input = fc.kind == FrameKind::FZS ? X0 : X;
                const EffectiveChannel H = heff_closed_form(m, fc);
                const std::size_t rows = fc.kind == FrameKind::RFCP ? M + L : M;
                const EffectiveChannel Ht = effective_from_time(build_time_channel(m, fc), rows, N);
                closed.max_abs_dev =
                    std::max(closed.max_abs_dev, detail::max_abs_diff(CMatrix(H.matrix), CMatrix(Ht.matrix)));
                const DelayDopplerFrame io = io_response(input, m, fc);
                pipe.max_abs_dev = std::max(pipe.max_abs_dev, detail::max_abs_diff(run_pipeline(input, m, fc).data, io.data));
                const CVector in_vec = fc.kind == FrameKind::RFCP
                                           ? CVector(DelayDopplerFrame(detail::repeat_tail_rows(input.data, L)).vec())
                                           : input.vec();
                heff_io.max_abs_dev = std::max(
                    heff_io.max_abs_dev,
                    detail::max_abs_diff(DelayDopplerFrame::from_vec(H.matrix * in_vec, rows, N).data, io.data));
            }
        }
        for (auto* r : {&rzp_rcp, &fcp_ext, &fzs_zero, &closed, &pipe, &heff_io}) {
            r->cases = cfg.trials;
            rows.push_back(*r);
        }
    }
    return rows;
}

inline ExperimentResult run_equivalence_check(const ExperimentConfig& cfg) {
    constexpr double tolerance = 1e-10;
    ExperimentResult out;
    out.name = "equivalence_check";
    out.header = {"check", "M", "N", "L", "cases", "max_abs_dev", "tolerance", "pass"};
    bool all_pass = true;
    for (const auto& r : equivalence_rows(cfg)) {
        const bool pass = r.max_abs_dev <= tolerance;
        all_pass = all_pass && pass;
        const std::size_t L = r.frame.kind == FrameKind::FZS ? r.frame.zs_len : r.frame.cp_len;
        out.rows.push_back({r.check, std::to_string(r.frame.M), std::to_string(r.frame.N), std::to_string(L),
                            std::to_string(r.cases), format_real(r.max_abs_dev), format_real(tolerance),
                            pass ? "true" : "false"});
    }
    out.sidecar = detail::base_sidecar(cfg);
    out.sidecar["all_pass"] = all_pass;
    return out;
}

// ============================================================================
// Dispatch and output
// ============================================================================

inline ExperimentResult run_experiment(const ExperimentConfig& cfg) {
    switch (cfg.experiment) {
        case ExperimentKind::BerSweep: return run_ber_sweep(cfg);
        case ExperimentKind::CapacityTable: return run_capacity_table(cfg);
        case ExperimentKind::PowerTable: return run_power_table(cfg);
        case ExperimentKind::CirDump: return run_cir_dump(cfg);
        case ExperimentKind::MatrixDump: return run_matrix_dump(cfg);
        case ExperimentKind::EquivalenceCheck: return run_equivalence_check(cfg);
    }
    throw ConfigurationError("unknown experiment");
}

/// Writes <dir>/<name>.csv and <dir>/<name>.json; returns the CSV path.
inline std::filesystem::path write_outputs(const ExperimentResult& result, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    const auto csv = dir / (result.name + ".csv");
    const auto sidecar = dir / (result.name + ".json");
    {
        std::ofstream os(csv, std::ios::binary);
        if (!os) throw ConfigurationError("cannot write " + csv.string());
        result.write_csv(os);
    }
    {
        std::ofstream os(sidecar, std::ios::binary);
        if (!os) throw ConfigurationError("cannot write " + sidecar.string());
        json doc = result.sidecar;
        doc["csv"] = csv.filename().string();
        doc["columns"] = result.header;
        doc["rows"] = result.rows.size();
        os << doc.dump(2) << '\n';
    }
    return csv;
}

}  // namespace otfs
