#pragma once

#include "otfs/channel.hpp"
#include "otfs/core.hpp"
#include "otfs/effective.hpp"

#include <json.hpp>

#include <ostream>
#include <sstream>
#include <string>

namespace otfs {

using json = nlohmann::json;

// ============================================================================
// Channel model
// ============================================================================

inline json to_json_value(const ChannelModel& model) {
    json taps = json::array();
    for (const auto& t : model.taps)
        taps.push_back({{"gain_re", t.gain.real()}, {"gain_im", t.gain.imag()}, {"delay", t.delay}, {"doppler", t.doppler}});
    return {{"taps", taps}, {"grid", std::string(to_string(model.grid))}, {"normalized", model.normalized}};
}

namespace detail {

template <typename T>
T required(const json& obj, const std::string& key, const std::string& where) {
    if (!obj.is_object() || !obj.contains(key)) throw ParseError(where + ": missing field '" + key + "'");
    try {
        return obj.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ParseError(where + "." + key + ": " + e.what());
    }
}

}  // namespace detail

/// Parses {"taps":[{"gain_re","gain_im","delay","doppler"}], "grid":"RCP|FCP", "normalized":bool}.
inline ChannelModel channel_model_from_json(const json& doc, const std::string& where = "channel") {
    if (!doc.is_object()) throw ParseError(where + ": expected an object");
    if (!doc.contains("taps") || !doc["taps"].is_array()) throw ParseError(where + ": 'taps' must be an array");
    ChannelModel m;
    const std::string grid = doc.value("grid", std::string("RCP"));
    if (grid == "RCP")
        m.grid = DopplerGrid::RCP;
    else if (grid == "FCP")
        m.grid = DopplerGrid::FCP;
    else
        throw ParseError(where + ".grid: expected \"RCP\" or \"FCP\", got \"" + grid + "\"");
    m.normalized = doc.value("normalized", false);
    std::size_t i = 0;
    for (const auto& t : doc["taps"]) {
        const std::string at = where + ".taps[" + std::to_string(i++) + "]";
        const double re = detail::required<double>(t, "gain_re", at);
        const double im = t.contains("gain_im") ? detail::required<double>(t, "gain_im", at) : 0.0;
        const auto delay = detail::required<long long>(t, "delay", at);
        if (delay < 0) throw ParseError(at + ".delay: must be non-negative");
        const double doppler = t.contains("doppler") ? detail::required<double>(t, "doppler", at) : 0.0;
        m.taps.push_back({cx(re, im), std::size_t(delay), doppler});
    }
    return m;
}

inline std::string to_json_string(const ChannelModel& model, int indent = 2) { return to_json_value(model).dump(indent); }

inline ChannelModel channel_model_from_string(const std::string& text) {
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ParseError(std::string("channel model JSON: ") + e.what());
    }
    return channel_model_from_json(doc);
}

// ============================================================================
// Effective channel
// ============================================================================

/// {"M", "N", "entries": [{"row", "col", "re", "im"}]}
inline json to_json_value(const EffectiveChannel& H) {
    json entries = json::array();
    for (Eigen::Index r = 0; r < H.matrix.outerSize(); ++r)
        for (SparseCMatrix::InnerIterator it(H.matrix, r); it; ++it)
            entries.push_back({{"row", it.row()}, {"col", it.col()}, {"re", it.value().real()}, {"im", it.value().imag()}});
    json out{{"M", H.M}, {"N", H.N}, {"entries", entries}};
    if (H.config) {
        out["config"] = {{"kind", std::string(to_string(H.config->kind))},
                         {"M", H.config->M},
                         {"N", H.config->N},
                         {"Lcp", H.config->cp_len},
                         {"Lzs", H.config->zs_len}};
    }
    return out;
}

inline void write_triples_csv(std::ostream& os, const EffectiveChannel& H) {
    os << "row,col,re,im\n";
    std::ostringstream line;
    line.precision(17);
    for (Eigen::Index r = 0; r < H.matrix.outerSize(); ++r)
        for (SparseCMatrix::InnerIterator it(H.matrix, r); it; ++it) {
            line.str("");
            line << it.row() << ',' << it.col() << ',' << it.value().real() << ',' << it.value().imag() << '\n';
            os << line.str();
        }
}

inline EffectiveChannel effective_channel_from_json(const json& doc) {
    const auto M = detail::required<std::size_t>(doc, "M", "effective");
    const auto N = detail::required<std::size_t>(doc, "N", "effective");
    if (!doc.contains("entries") || !doc["entries"].is_array()) throw ParseError("effective: 'entries' must be an array");
    std::vector<Triplet> t;
    for (const auto& e : doc["entries"]) {
        const auto row = detail::required<long long>(e, "row", "effective.entries");
        const auto col = detail::required<long long>(e, "col", "effective.entries");
        if (row < 0 || col < 0 || std::size_t(row) >= M * N || std::size_t(col) >= M * N)
            throw ParseError("effective.entries: index out of range");
        t.emplace_back(Eigen::Index(row), Eigen::Index(col),
                       cx(detail::required<double>(e, "re", "effective.entries"),
                          detail::required<double>(e, "im", "effective.entries")));
    }
    SparseCMatrix S(Eigen::Index(M * N), Eigen::Index(M * N));
    S.setFromTriplets(t.begin(), t.end());
    return EffectiveChannel{std::move(S), M, N, std::nullopt};
}

}  // namespace otfs
