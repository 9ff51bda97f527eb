#pragma once

#include "otfs/channel.hpp"
#include "otfs/core.hpp"
#include "otfs/grid.hpp"

#include <Eigen/Sparse>

#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace otfs {

using SparseCMatrix = Eigen::SparseMatrix<cx, Eigen::RowMajor>;
using Triplet = Eigen::Triplet<cx>;

/// Off-pattern tolerance for the circulant-structure checks.
inline constexpr double kStructuralTol = 1e-10;

/**
 * Delay-Doppler effective channel y = H_eff x (+ w), rows and columns indexed k*M + l.
 *
 * Stored sparse: with integer Doppler each row holds one entry per path.
 * `config` is set when the matrix was built for a specific frame configuration.
 */
struct EffectiveChannel {
    SparseCMatrix matrix;
    std::size_t M = 0;
    std::size_t N = 0;
    std::optional<FrameConfig> config;

    Eigen::Index size() const { return matrix.rows(); }
    CMatrix dense() const { return CMatrix(matrix); }
    CVector apply(const CVector& x) const { return matrix * x; }

    std::size_t row_nonzeros(Eigen::Index row) const {
        std::size_t count = 0;
        for (SparseCMatrix::InnerIterator it(matrix, row); it; ++it)
            if (it.value() != cx(0.0)) ++count;
        return count;
    }
};

namespace detail {

inline SparseCMatrix sparse_from_dense(const CMatrix& A, double drop_below) {
    std::vector<Triplet> entries;
    for (Eigen::Index i = 0; i < A.rows(); ++i)
        for (Eigen::Index j = 0; j < A.cols(); ++j)
            if (std::abs(A(i, j)) > drop_below) entries.emplace_back(i, j, A(i, j));
    SparseCMatrix S(A.rows(), A.cols());
    S.setFromTriplets(entries.begin(), entries.end());
    return S;
}

/// (F_N kron I_M) A (F_N^H kron I_M) using the block structure instead of MN x MN products.
inline CMatrix doppler_conjugate(const CMatrix& A, std::size_t M, std::size_t N) {
    const auto m = Eigen::Index(M);
    const auto n = Eigen::Index(N);
    if (A.rows() != m * n || A.cols() != m * n) throw InvalidDimension("matrix is not MN x MN");
    const CMatrix F = dft_matrix(N);
    CMatrix T = CMatrix::Zero(m * n, m * n);
    for (Eigen::Index a = 0; a < n; ++a)
        for (Eigen::Index b = 0; b < n; ++b) T.middleRows(a * m, m) += F(a, b) * A.middleRows(b * m, m);
    CMatrix out = CMatrix::Zero(m * n, m * n);
    for (Eigen::Index a = 0; a < n; ++a)
        for (Eigen::Index b = 0; b < n; ++b)
            out.middleCols(a * m, m) += std::conj(F(a, b)) * T.middleCols(b * m, m);
    return out;
}

/// Extended (M + L) x N grid: the last L delay rows repeated on top.
inline CMatrix repeat_tail_rows(const CMatrix& X, std::size_t L) {
    const auto l = Eigen::Index(L);
    CMatrix out(X.rows() + l, X.cols());
    out.topRows(l) = X.bottomRows(l);
    out.bottomRows(X.rows()) = X;
    return out;
}

}  // namespace detail

/// RCP configuration that an RFCP frame is equivalent to once its outer prefix is removed.
inline FrameConfig extended_config(const FrameConfig& cfg) {
    return FrameConfig{FrameKind::RCP, cfg.M + cfg.cp_len, cfg.N, cfg.cp_len, 0};
}

/// build_time_channel in sparse form.
inline SparseCMatrix sparse_time_channel(const ChannelModel& model, const FrameConfig& cfg) {
    std::vector<Triplet> entries;
    const auto len = detail::time_channel_entries(
        model, cfg, [&](std::ptrdiff_t r, std::ptrdiff_t c, cx v) { entries.emplace_back(r, c, v); });
    SparseCMatrix H(len, len);
    H.setFromTriplets(entries.begin(), entries.end());
    return H;
}

// ============================================================================
// Effective channel construction
// ============================================================================

/// H_eff = (F_N kron I_M) H (F_N^H kron I_M).
inline EffectiveChannel effective_from_time(const TimeChannelMatrix& H, std::size_t M, std::size_t N) {
    if (M == 0 || N == 0) throw InvalidDimension("effective channel needs M, N >= 1");
    const CMatrix dense = detail::doppler_conjugate(H.matrix, M, N);
    const double scale = dense.cwiseAbs().maxCoeff();
    return EffectiveChannel{detail::sparse_from_dense(dense, 1e-14 * std::max(scale, 1.0)), M, N, std::nullopt};
}

/**
 * Sparse effective channel assembled entry by entry, without a time-domain matrix.
 *
 * RCP/RZP: sum_i h_i T^(i) with T^(i)(kM+l, [l-l_i]_M + M[k-k_i]_N) =
 *          z^{k_i [l-l_i]_M}, times exp(-j 2 pi k / N) when l < l_i.
 * FCP:     Circ[G_0..G_{N-1}], G_{[k_i]_N}(l, [l-l_i]_M) = h_i exp(j 2 pi k_i (L+l-l_i) / ((M+L)N)).
 * FZS:     Circ[Omega_0..], Omega_{[k_i]_N}(l, l-l_i) = h_i exp(j 2 pi k_i (l-l_i) / (MN)), l >= l_i.
 * RFCP:    the RCP form on the extended (M+L) x N grid.
 */
inline EffectiveChannel heff_closed_form(const ChannelModel& model, const FrameConfig& cfg) {
    check_compatible(model, cfg);
    const auto taps = integer_taps(model, cfg);
    const FrameConfig grid_cfg = cfg.kind == FrameKind::RFCP ? extended_config(cfg) : cfg;
    const auto M = std::ptrdiff_t(grid_cfg.M);
    const auto N = std::ptrdiff_t(grid_cfg.N);
    const auto L = std::ptrdiff_t(cfg.cp_len);
    const auto MN = M * N;

    std::vector<Triplet> entries;
    entries.reserve(taps.size() * std::size_t(MN));
    for (const auto& t : taps) {
        for (std::ptrdiff_t k = 0; k < N; ++k) {
            const std::ptrdiff_t k_src = wrap(k - t.doppler, N);
            for (std::ptrdiff_t l = 0; l < M; ++l) {
                const std::ptrdiff_t l_src = wrap(l - t.delay, M);
                cx value;
                switch (cfg.kind) {
                    case FrameKind::RCP:
                    case FrameKind::RZP:
                    case FrameKind::RFCP:
                        value = unit_phase(double(t.doppler * l_src), double(MN));
                        if (l < t.delay) value *= unit_phase(-double(k), double(N));
                        break;
                    case FrameKind::FCP:
                        value = unit_phase(double(t.doppler * (L + l - t.delay)), double((M + L) * N));
                        break;
                    case FrameKind::FZS:
                        if (l < t.delay) continue;
                        value = unit_phase(double(t.doppler * (l - t.delay)), double(MN));
                        break;
                }
                entries.emplace_back(k * M + l, k_src * M + l_src, t.gain * value);
            }
        }
    }
    SparseCMatrix H(MN, MN);
    H.setFromTriplets(entries.begin(), entries.end());
    return EffectiveChannel{std::move(H), std::size_t(M), std::size_t(N), cfg};
}

// ============================================================================
// Input-output relation
// ============================================================================

/// Phase picked up by path i at output bin (l, k); `in_support` is false where FZS has no term.
struct PhaseTerm {
    cx value{0.0, 0.0};
    bool in_support = false;
};

/**
 * Gamma for path `tap` at output bin (l, k).
 *
 * RCP/RZP: z^{k_i [l-l_i]_M} Lambda_i(l, k), z = exp(j 2 pi / (MN)).
 * FCP:     exp(j 2 pi k_i (L + l - l_i) / ((M + L) N)).
 * FZS:     exp(j 2 pi k_i (l - l_i) / (MN)) for l >= l_i, no term otherwise.
 * Doppler is read on the configuration's native grid and must be an integer bin.
 */
inline PhaseTerm gamma(const FrameConfig& cfg, const ChannelTap& tap, DopplerGrid tap_grid, std::size_t l,
                       std::size_t k) {
    ChannelModel one{{tap}, tap_grid, false};
    const auto t = integer_taps(one, cfg).front();
    const FrameConfig grid_cfg = cfg.kind == FrameKind::RFCP ? extended_config(cfg) : cfg;
    const auto M = std::ptrdiff_t(grid_cfg.M);
    const auto N = std::ptrdiff_t(grid_cfg.N);
    const auto L = std::ptrdiff_t(cfg.cp_len);
    const auto li = std::ptrdiff_t(l);
    if (li >= M || std::ptrdiff_t(k) >= N) throw InvalidDimension("gamma: bin outside the grid");
    switch (cfg.kind) {
        case FrameKind::RCP:
        case FrameKind::RZP:
        case FrameKind::RFCP: {
            cx v = unit_phase(double(t.doppler * wrap(li - t.delay, M)), double(M * N));
            if (li < t.delay) v *= unit_phase(-double(k), double(N));
            return {v, true};
        }
        case FrameKind::FCP:
            return {unit_phase(double(t.doppler * (L + li - t.delay)), double((M + L) * N)), true};
        case FrameKind::FZS:
            if (li < t.delay) return {cx(0.0), false};
            return {unit_phase(double(t.doppler * (li - t.delay)), double(M * N)), true};
    }
    return {};
}

inline PhaseTerm gamma(const FrameConfig& cfg, const ChannelTap& tap, std::size_t l, std::size_t k) {
    return gamma(cfg, tap, native_grid(cfg), l, k);
}

/**
 * Noiseless received grid Y(l, k) = sum_i h_i Gamma_i(l, k) X([l-l_i]_M, [k-k_i]_N).
 *
 * For RFCP the input may be the M x N data grid (extended here) or the
 * (M + L) x N extended grid; the output is the extended received grid.
 */
inline DelayDopplerFrame io_response(const DelayDopplerFrame& X, const ChannelModel& model, const FrameConfig& cfg) {
    check_compatible(model, cfg);
    const auto taps = integer_taps(model, cfg);
    CMatrix input = X.data;
    FrameConfig grid_cfg = cfg;
    if (cfg.kind == FrameKind::RFCP) {
        grid_cfg = extended_config(cfg);
        if (X.M() == cfg.M) input = detail::repeat_tail_rows(X.data, cfg.cp_len);
    }
    if (std::size_t(input.rows()) != grid_cfg.M || std::size_t(input.cols()) != grid_cfg.N)
        throw InvalidDimension("io_response: frame shape does not match the configuration");

    const auto M = std::ptrdiff_t(grid_cfg.M);
    const auto N = std::ptrdiff_t(grid_cfg.N);
    const auto L = std::ptrdiff_t(cfg.cp_len);
    CMatrix Y = CMatrix::Zero(M, N);
    for (const auto& t : taps) {
        for (std::ptrdiff_t k = 0; k < N; ++k) {
            const std::ptrdiff_t k_src = wrap(k - t.doppler, N);
            const cx wrap_phase = unit_phase(-double(k), double(N));
            for (std::ptrdiff_t l = 0; l < M; ++l) {
                const std::ptrdiff_t l_src = wrap(l - t.delay, M);
                cx g;
                switch (cfg.kind) {
                    case FrameKind::RCP:
                    case FrameKind::RZP:
                    case FrameKind::RFCP:
                        g = unit_phase(double(t.doppler * l_src), double(M * N));
                        if (l < t.delay) g *= wrap_phase;
                        break;
                    case FrameKind::FCP:
                        g = unit_phase(double(t.doppler * (L + l - t.delay)), double((M + L) * N));
                        break;
                    case FrameKind::FZS:
                        if (l < t.delay) continue;
                        g = unit_phase(double(t.doppler * (l - t.delay)), double(M * N));
                        break;
                }
                Y(l, k) += t.gain * g * input(l_src, k_src);
            }
        }
    }
    return DelayDopplerFrame(std::move(Y));
}

// ============================================================================
// Circulant toolkit
// ============================================================================

/**
 * Circ(A_0, ..., A_{N-1}) where A_n is the M x M circulant whose first column
 * is column n of the generator. Multiplying vec(b) gives vec of the 2D
 * circular convolution of the generator with b.
 */
inline CMatrix doubly_block_circulant(const CMatrix& generator) {
    const Eigen::Index M = generator.rows();
    const Eigen::Index N = generator.cols();
    if (M == 0 || N == 0) throw InvalidDimension("empty generator");
    CMatrix A(M * N, M * N);
    for (Eigen::Index bk = 0; bk < N; ++bk)
        for (Eigen::Index bc = 0; bc < N; ++bc) {
            const Eigen::Index g = wrap(bk - bc, N);
            for (Eigen::Index i = 0; i < M; ++i)
                for (Eigen::Index j = 0; j < M; ++j) A(bk * M + i, bc * M + j) = generator(wrap(i - j, M), g);
        }
    return A;
}

struct Diagonalization {
    CVector eigenvalues;  // index k*M + l
    double residual = 0.0;  // largest off-diagonal magnitude
};

/**
 * Sigma = (F_N kron F_M^H) A (F_N^H kron F_M). For a doubly block circulant A
 * the result is diagonal and holds the unnormalised 2D SFFT of the generator.
 * Throws StructuralError when the off-diagonal residual exceeds the tolerance.
 */
inline Diagonalization sfft_diagonalize(const CMatrix& A, std::size_t M, std::size_t N,
                                        double tolerance = kStructuralTol) {
    const auto size = Eigen::Index(M * N);
    if (A.rows() != size || A.cols() != size) throw InvalidDimension("matrix is not MN x MN");
    const CMatrix FM = dft_matrix(M);
    const CMatrix FN = dft_matrix(N);
    const CMatrix Sigma = kron(FN, FM.adjoint()) * A * kron(FN.adjoint(), FM);
    Diagonalization out{Sigma.diagonal(), 0.0};
    CMatrix off = Sigma;
    off.diagonal().setZero();
    out.residual = size > 1 ? off.cwiseAbs().maxCoeff() : 0.0;
    if (out.residual > tolerance)
        throw StructuralError("matrix is not doubly block circulant (off-diagonal residual " +
                              std::to_string(out.residual) + ")");
    return out;
}

struct BlockDiagonalization {
    std::vector<CMatrix> blocks;
    double residual = 0.0;  // largest off-block magnitude
};

/**
 * D = (F_N kron I_M) A (F_N^H kron I_M). For block-circulant A this is block
 * diagonal; throws StructuralError otherwise. When A is the effective channel
 * of a block-diagonal time matrix diag(H_0..H_{N-1}), block n of D is H_{[-n]_N}.
 */
inline BlockDiagonalization block_diagonalize(const CMatrix& A, std::size_t M, std::size_t N,
                                              double tolerance = kStructuralTol) {
    const CMatrix D = detail::doppler_conjugate(A, M, N);
    const auto m = Eigen::Index(M);
    BlockDiagonalization out;
    CMatrix off = D;
    for (Eigen::Index n = 0; n < Eigen::Index(N); ++n) {
        out.blocks.push_back(D.block(n * m, n * m, m, m));
        off.block(n * m, n * m, m, m).setZero();
    }
    out.residual = off.size() ? off.cwiseAbs().maxCoeff() : 0.0;
    if (out.residual > tolerance)
        throw StructuralError("matrix is not block circulant (off-block residual " + std::to_string(out.residual) +
                              ")");
    return out;
}

/// Raised when a static channel has a spectral null; lists the (l, k) bins.
class SingularChannelError : public SingularMatrixError {
public:
    SingularChannelError(std::string what, std::vector<std::pair<std::size_t, std::size_t>> bins)
        : SingularMatrixError(std::move(what)), bins_(std::move(bins)) {}
    const std::vector<std::pair<std::size_t, std::size_t>>& bins() const { return bins_; }

private:
    std::vector<std::pair<std::size_t, std::size_t>> bins_;
};

/**
 * One-tap equalizer for static channels under FCP/FZS:
 * x = (F_N^H kron F_M) Sigma^{-1} (F_N kron F_M^H) y, Sigma from the delay-Doppler CIR.
 */
inline DelayDopplerFrame static_equalize(const DelayDopplerFrame& Y, const ChannelModel& model,
                                         const FrameConfig& cfg, double tolerance = 1e-12) {
    if (cfg.kind != FrameKind::FCP && cfg.kind != FrameKind::FZS)
        throw ConfigurationError("static equalization needs an FCP or FZS frame");
    check_compatible(model, cfg);
    if (Y.M() != cfg.M || Y.N() != cfg.N) throw InvalidDimension("received grid does not match the frame");
    CMatrix cir = CMatrix::Zero(Eigen::Index(cfg.M), Eigen::Index(cfg.N));
    for (const auto& t : integer_taps(model, cfg)) {
        if (t.doppler != 0) throw ConfigurationError("static equalization needs k_i = 0 for every path");
        cir(t.delay, 0) += t.gain;
    }
    const double root_mn = std::sqrt(double(cfg.MN()));
    const CMatrix sigma = root_mn * sfft(TimeFrequencyFrame{cir}).data;

    std::vector<std::pair<std::size_t, std::size_t>> nulls;
    for (Eigen::Index k = 0; k < sigma.cols(); ++k)
        for (Eigen::Index l = 0; l < sigma.rows(); ++l)
            if (std::abs(sigma(l, k)) < tolerance) nulls.emplace_back(std::size_t(l), std::size_t(k));
    if (!nulls.empty()) {
        std::string msg = "static channel has " + std::to_string(nulls.size()) + " spectral null(s):";
        for (const auto& [l, k] : nulls) msg += " (" + std::to_string(l) + "," + std::to_string(k) + ")";
        throw SingularChannelError(msg, std::move(nulls));
    }
    const CMatrix eq = sfft(TimeFrequencyFrame{Y.data}).data.cwiseQuotient(sigma);
    return DelayDopplerFrame(isfft(DelayDopplerFrame(eq)).data);
}

}  // namespace otfs
