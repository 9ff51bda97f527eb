#pragma once

#include "otfs/core.hpp"
#include "otfs/effective.hpp"
#include "otfs/grid.hpp"

#include <Eigen/SparseCholesky>
#include <Eigen/SparseLU>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

namespace otfs {

// ============================================================================
// Constellations
// ============================================================================

/// Gray-labelled constellation with unit average energy. Point i carries the bit label i (MSB first).
struct Constellation {
    std::vector<cx> points;
    std::size_t bits_per_symbol = 0;

    std::size_t size() const { return points.size(); }

    /// Index of the nearest point.
    std::size_t slice(cx value) const {
        std::size_t best = 0;
        double best_d = std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < points.size(); ++i) {
            const double d = std::norm(value - points[i]);
            if (d < best_d) {
                best_d = d;
                best = i;
            }
        }
        return best;
    }

    double min_distance() const {
        double d = std::numeric_limits<double>::infinity();
        for (std::size_t a = 0; a < points.size(); ++a)
            for (std::size_t b = a + 1; b < points.size(); ++b) d = std::min(d, std::abs(points[a] - points[b]));
        return d;
    }
};

inline Constellation bpsk() { return Constellation{{cx(1.0), cx(-1.0)}, 1}; }

/// Square Gray QAM: the first half of each label picks the in-phase level, the second half the quadrature level.
inline Constellation qam(std::size_t order = 4) {
    std::size_t bits = 0;
    while ((std::size_t{1} << bits) < order) ++bits;
    if (order < 4 || (std::size_t{1} << bits) != order || bits % 2 != 0)
        throw ConfigurationError("QAM order must be an even power of two >= 4, got " + std::to_string(order));
    const std::size_t half = bits / 2;
    const std::size_t side = std::size_t{1} << half;

    // level[g] = amplitude whose Gray label is g.
    std::vector<double> level(side);
    for (std::size_t pos = 0; pos < side; ++pos) level[pos ^ (pos >> 1)] = 2.0 * double(pos) - double(side - 1);

    Constellation c;
    c.bits_per_symbol = bits;
    c.points.resize(order);
    double energy = 0.0;
    for (std::size_t label = 0; label < order; ++label) {
        c.points[label] = cx(level[label >> half], level[label & (side - 1)]);
        energy += std::norm(c.points[label]);
    }
    const double scale = 1.0 / std::sqrt(energy / double(order));
    for (auto& p : c.points) p *= scale;
    return c;
}

inline Constellation constellation_from_name(const std::string& name) {
    if (name == "BPSK") return bpsk();
    if (name == "QPSK" || name == "4QAM" || name == "4-QAM") return qam(4);
    if (name == "16QAM" || name == "16-QAM") return qam(16);
    if (name == "64QAM" || name == "64-QAM") return qam(64);
    throw ParseError("unknown constellation '" + name + "'");
}

/// Maps bits to a symbol sequence, bits_per_symbol at a time.
inline CVector map_symbols(const std::vector<std::uint8_t>& bits, const Constellation& c) {
    if (c.bits_per_symbol == 0 || bits.size() % c.bits_per_symbol != 0)
        throw InvalidDimension("bit count " + std::to_string(bits.size()) + " not divisible by " +
                               std::to_string(c.bits_per_symbol));
    CVector out(Eigen::Index(bits.size() / c.bits_per_symbol));
    for (Eigen::Index s = 0; s < out.size(); ++s) {
        std::size_t label = 0;
        for (std::size_t b = 0; b < c.bits_per_symbol; ++b)
            label = (label << 1) | (bits[std::size_t(s) * c.bits_per_symbol + b] & 1u);
        out(s) = c.points[label];
    }
    return out;
}

/// Fills an M x N grid in vec order (k*M + l).
inline DelayDopplerFrame map_bits(const std::vector<std::uint8_t>& bits, const Constellation& c, std::size_t M,
                                  std::size_t N) {
    if (bits.size() != M * N * c.bits_per_symbol)
        throw InvalidDimension("map_bits needs M*N*bits_per_symbol bits");
    return DelayDopplerFrame::from_vec(map_symbols(bits, c), M, N);
}

inline void append_label(std::vector<std::uint8_t>& out, std::size_t label, std::size_t bits) {
    for (std::size_t b = bits; b-- > 0;) out.push_back(std::uint8_t((label >> b) & 1u));
}

/// Minimum-distance demapping.
inline std::vector<std::uint8_t> demap_symbols(const CVector& x, const Constellation& c) {
    std::vector<std::uint8_t> out;
    out.reserve(std::size_t(x.size()) * c.bits_per_symbol);
    for (Eigen::Index i = 0; i < x.size(); ++i) append_label(out, c.slice(x(i)), c.bits_per_symbol);
    return out;
}

inline std::vector<std::uint8_t> demap_symbols(const DelayDopplerFrame& x, const Constellation& c) {
    return demap_symbols(CVector(x.vec()), c);
}

// ============================================================================
// Linear detectors
// ============================================================================

enum class DetectorKind { ZF, MMSE, MP };

inline std::string_view to_string(DetectorKind d) {
    switch (d) {
        case DetectorKind::ZF: return "ZF";
        case DetectorKind::MMSE: return "MMSE";
        case DetectorKind::MP: return "MP";
    }
    return "?";
}

inline DetectorKind detector_from_string(std::string_view name) {
    if (name == "ZF") return DetectorKind::ZF;
    if (name == "MMSE") return DetectorKind::MMSE;
    if (name == "MP") return DetectorKind::MP;
    throw ParseError("unknown detector '" + std::string(name) + "'");
}

/**
 * Zero forcing, x = H^H (H H^H)^{-1} y for wide or square H and the least-squares
 * solution (H^H H)^{-1} H^H y for tall H. The factorization is kept so one
 * channel can be applied to several observations.
 */
class ZfDetector {
public:
    explicit ZfDetector(const SparseCMatrix& H) : H_(H) {
        if (H.rows() == 0 || H.cols() == 0) throw InvalidDimension("empty channel matrix");
        if (H.rows() == H.cols()) {
            lu_.analyzePattern(col_major());
            lu_.factorize(col_major());
            if (lu_.info() != Eigen::Success) throw SingularMatrixError("ZF: channel matrix is singular");
        } else {
            gram_ = H.rows() > H.cols() ? SparseColMatrix(H.adjoint() * H) : SparseColMatrix(H * H.adjoint());
            ldlt_.compute(gram_);
            if (ldlt_.info() != Eigen::Success) throw SingularMatrixError("ZF: channel matrix is rank deficient");
        }
    }

    CVector operator()(const CVector& y) const {
        if (y.size() != H_.rows()) throw InvalidDimension("ZF: observation length mismatch");
        CVector x;
        if (H_.rows() == H_.cols())
            x = lu_.solve(y);
        else if (H_.rows() > H_.cols())
            x = ldlt_.solve(CVector(H_.adjoint() * y));
        else
            x = H_.adjoint() * CVector(ldlt_.solve(y));
        if (!x.allFinite()) throw SingularMatrixError("ZF: solution is not finite");
        return x;
    }

private:
    using SparseColMatrix = Eigen::SparseMatrix<cx, Eigen::ColMajor>;

    SparseColMatrix col_major() const { return SparseColMatrix(H_); }

    SparseCMatrix H_;
    Eigen::SparseLU<SparseColMatrix, Eigen::COLAMDOrdering<int>> lu_;
    SparseColMatrix gram_;
    Eigen::SimplicialLDLT<SparseColMatrix> ldlt_;
};

/// MMSE, x = H^H (H H^H + sigma2 I)^{-1} y, or (H^H H + sigma2 I)^{-1} H^H y for tall H.
class MmseDetector {
public:
    MmseDetector(const SparseCMatrix& H, double sigma2) : H_(H), tall_(H.rows() > H.cols()) {
        if (!(sigma2 > 0.0) || !std::isfinite(sigma2)) throw ConfigurationError("MMSE needs sigma2 > 0");
        SparseColMatrix A = tall_ ? SparseColMatrix(H.adjoint() * H) : SparseColMatrix(H * H.adjoint());
        SparseColMatrix I(A.rows(), A.cols());
        I.setIdentity();
        A += sigma2 * I;
        ldlt_.compute(A);
        if (ldlt_.info() != Eigen::Success) throw NumericalFailure("MMSE: factorization failed");
    }

    CVector operator()(const CVector& y) const {
        if (y.size() != H_.rows()) throw InvalidDimension("MMSE: observation length mismatch");
        if (tall_) return ldlt_.solve(CVector(H_.adjoint() * y));
        return H_.adjoint() * CVector(ldlt_.solve(y));
    }

private:
    using SparseColMatrix = Eigen::SparseMatrix<cx, Eigen::ColMajor>;
    SparseCMatrix H_;
    bool tall_;
    Eigen::SimplicialLDLT<SparseColMatrix> ldlt_;
};

inline CVector zf_detect(const EffectiveChannel& H, const CVector& y) { return ZfDetector(H.matrix)(y); }

inline CVector mmse_detect(const EffectiveChannel& H, const CVector& y, double sigma2) {
    return MmseDetector(H.matrix, sigma2)(y);
}

/**
 * ZF or MMSE on H_eff = (F_N kron I_M) H (F_N^H kron I_M), solved through the
 * time-domain H. The conjugation is unitary, so the estimate is identical to
 * solving with H_eff directly; H is banded or block diagonal, which keeps the
 * sparse factorization cheap.
 */
class ConjugatedDetector {
public:
    ConjugatedDetector(DetectorKind kind, const SparseCMatrix& H_time, std::size_t M, std::size_t N,
                       double sigma2 = 0.0)
        : M_(M), N_(N) {
        if (H_time.rows() != Eigen::Index(M * N) || H_time.cols() != Eigen::Index(M * N))
            throw InvalidDimension("time channel matrix is not MN x MN");
        if (kind == DetectorKind::ZF)
            zf_.emplace(H_time);
        else if (kind == DetectorKind::MMSE)
            mmse_.emplace(H_time, sigma2);
        else
            throw ConfigurationError("ConjugatedDetector supports ZF and MMSE only");
    }

    CVector operator()(const CVector& y) const {
        const CVector r = otfs_modulate(DelayDopplerFrame::from_vec(y, M_, N_)).samples;
        const CVector s = zf_ ? (*zf_)(r) : (*mmse_)(r);
        return otfs_demodulate(TimeFrame{s}, M_, N_).vec();
    }

private:
    std::size_t M_, N_;
    std::optional<ZfDetector> zf_;
    std::optional<MmseDetector> mmse_;
};

// ============================================================================
// Message passing
// ============================================================================

struct MpConfig {
    std::size_t max_iterations = 30;
    double damping = 0.6;  // weight of the new message
    double convergence_tol = 1e-4;

    void validate() const {
        if (max_iterations == 0) throw ConfigurationError("MP needs max_iterations >= 1");
        if (!(damping > 0.0 && damping <= 1.0)) throw ConfigurationError("MP damping must be in (0, 1]");
        if (!(convergence_tol > 0.0)) throw ConfigurationError("MP convergence tolerance must be positive");
    }
};

struct MpResult {
    CVector symbols;
    std::size_t iterations = 0;
    bool converged = false;
};

/**
 * Message passing over the factor graph of a sparse H with Gaussian
 * interference at each observation node. Returns hard decisions.
 */
inline MpResult mp_detect_full(const SparseCMatrix& H, const CVector& y, const Constellation& c, double noise_var,
                               const MpConfig& cfg = {}) {
    cfg.validate();
    if (y.size() != H.rows()) throw InvalidDimension("MP: observation length mismatch");
    if (!(noise_var >= 0.0)) throw ConfigurationError("MP: negative noise variance");
    const std::size_t Q = c.size();
    const auto rows = H.rows();
    const auto cols = H.cols();

    // Edge lists, grouped by row (storage order) and indexed by column.
    std::vector<Eigen::Index> edge_col;
    std::vector<cx> edge_h;
    std::vector<std::size_t> row_start{0};
    for (Eigen::Index r = 0; r < rows; ++r) {
        for (SparseCMatrix::InnerIterator it(H, r); it; ++it) {
            if (it.value() == cx(0.0)) continue;
            edge_col.push_back(it.col());
            edge_h.push_back(it.value());
        }
        row_start.push_back(edge_col.size());
    }
    const std::size_t E = edge_col.size();
    std::vector<std::vector<std::size_t>> col_edges(static_cast<std::size_t>(cols));
    for (std::size_t e = 0; e < E; ++e) col_edges[std::size_t(edge_col[e])].push_back(e);

    std::vector<double> energy(Q);
    for (std::size_t a = 0; a < Q; ++a) energy[a] = std::norm(c.points[a]);

    std::vector<double> p(E * Q, 1.0 / double(Q));  // variable -> observation
    std::vector<double> llk(E * Q, 0.0);           // observation -> variable, log domain
    std::vector<cx> mean(E);
    std::vector<double> var(E);
    std::vector<double> total(Q), ext(Q);
    const double var_floor = 1e-12;

    MpResult result;
    result.symbols = CVector::Zero(cols);
    for (std::size_t iter = 1; iter <= cfg.max_iterations; ++iter) {
        for (std::size_t e = 0; e < E; ++e) {
            cx m = 0.0;
            double s = 0.0;
            for (std::size_t a = 0; a < Q; ++a) {
                m += p[e * Q + a] * c.points[a];
                s += p[e * Q + a] * energy[a];
            }
            mean[e] = m;
            var[e] = std::max(0.0, s - std::norm(m));
        }

        for (Eigen::Index r = 0; r < rows; ++r) {
            cx mu = 0.0;
            double v = noise_var;
            for (std::size_t e = row_start[std::size_t(r)]; e < row_start[std::size_t(r) + 1]; ++e) {
                mu += edge_h[e] * mean[e];
                v += std::norm(edge_h[e]) * var[e];
            }
            for (std::size_t e = row_start[std::size_t(r)]; e < row_start[std::size_t(r) + 1]; ++e) {
                const cx mu_e = mu - edge_h[e] * mean[e];
                const double v_e = std::max(v - std::norm(edge_h[e]) * var[e], var_floor);
                const cx residual = y(r) - mu_e;
                for (std::size_t a = 0; a < Q; ++a) llk[e * Q + a] = -std::norm(residual - edge_h[e] * c.points[a]) / v_e;
            }
        }

        double change = 0.0;
        for (Eigen::Index col = 0; col < cols; ++col) {
            const auto& edges = col_edges[std::size_t(col)];
            std::fill(total.begin(), total.end(), 0.0);
            for (const auto e : edges)
                for (std::size_t a = 0; a < Q; ++a) total[a] += llk[e * Q + a];

            std::size_t best = 0;
            for (std::size_t a = 1; a < Q; ++a)
                if (total[a] > total[best]) best = a;
            if (!std::isfinite(total[best]))
                throw NumericalFailure("MP: non-finite message at iteration " + std::to_string(iter));
            result.symbols(col) = c.points[best];

            for (const auto e : edges) {
                double peak = -std::numeric_limits<double>::infinity();
                for (std::size_t a = 0; a < Q; ++a) {
                    ext[a] = total[a] - llk[e * Q + a];
                    peak = std::max(peak, ext[a]);
                }
                double norm = 0.0;
                for (std::size_t a = 0; a < Q; ++a) {
                    ext[a] = std::exp(ext[a] - peak);
                    norm += ext[a];
                }
                if (!(norm > 0.0) || !std::isfinite(norm))
                    throw NumericalFailure("MP: non-finite message at iteration " + std::to_string(iter));
                for (std::size_t a = 0; a < Q; ++a) {
                    const double updated = cfg.damping * ext[a] / norm + (1.0 - cfg.damping) * p[e * Q + a];
                    change = std::max(change, std::abs(updated - p[e * Q + a]));
                    p[e * Q + a] = updated;
                }
            }
        }
        result.iterations = iter;
        if (change < cfg.convergence_tol) {
            result.converged = true;
            break;
        }
    }
    return result;
}

inline CVector mp_detect(const EffectiveChannel& H, const CVector& y, const Constellation& c, double noise_var,
                         const MpConfig& cfg = {}) {
    return mp_detect_full(H.matrix, y, c, noise_var, cfg).symbols;
}

// ============================================================================
// Dispatch
// ============================================================================

/// Symbol estimates sliced to the constellation.
inline CVector detect_symbols(DetectorKind kind, const EffectiveChannel& H, const CVector& y, const Constellation& c,
                              double noise_var, const MpConfig& mp = {}) {
    CVector x;
    switch (kind) {
        case DetectorKind::ZF: x = zf_detect(H, y); break;
        case DetectorKind::MMSE: x = mmse_detect(H, y, std::max(noise_var, 1e-12)); break;
        case DetectorKind::MP: return mp_detect(H, y, c, noise_var, mp);
    }
    for (Eigen::Index i = 0; i < x.size(); ++i) x(i) = c.points[c.slice(x(i))];
    return x;
}

}  // namespace otfs
