#pragma once

#include "otfs/core.hpp"

#include <cmath>
#include <cstddef>

namespace otfs {

// ============================================================================
// Frame types
// ============================================================================

/**
 * Delay-Doppler symbol grid: M rows (delay index l) by N columns (Doppler index k).
 *
 * Vectorisation is column-major, so grid entry (l, k) sits at index k*M + l.
 */
struct DelayDopplerFrame {
    CMatrix data;

    DelayDopplerFrame() = default;
    explicit DelayDopplerFrame(CMatrix values) : data(std::move(values)) {}
    static DelayDopplerFrame zeros(std::size_t M, std::size_t N) {
        return DelayDopplerFrame(CMatrix::Zero(static_cast<Eigen::Index>(M), static_cast<Eigen::Index>(N)));
    }

    std::size_t M() const { return static_cast<std::size_t>(data.rows()); }
    std::size_t N() const { return static_cast<std::size_t>(data.cols()); }

    cx& operator()(std::size_t l, std::size_t k) { return data(Eigen::Index(l), Eigen::Index(k)); }
    cx operator()(std::size_t l, std::size_t k) const { return data(Eigen::Index(l), Eigen::Index(k)); }

    CVector vec() const { return data.reshaped(); }
    static DelayDopplerFrame from_vec(const CVector& x, std::size_t M, std::size_t N) {
        if (static_cast<std::size_t>(x.size()) != M * N) throw InvalidDimension("vector length is not M*N");
        return DelayDopplerFrame(x.reshaped(Eigen::Index(M), Eigen::Index(N)));
    }
};

/// Time-frequency grid: M rows (subcarrier m) by N columns (subsymbol n).
struct TimeFrequencyFrame {
    CMatrix data;

    std::size_t M() const { return static_cast<std::size_t>(data.rows()); }
    std::size_t N() const { return static_cast<std::size_t>(data.cols()); }
};

/// Sample stream, with or without prefixes depending on where it sits in the chain.
struct TimeFrame {
    CVector samples;

    std::size_t size() const { return static_cast<std::size_t>(samples.size()); }
};

// ============================================================================
// Transforms
// ============================================================================

/// Unitary DFT matrix, entry (a, b) = exp(-j 2 pi a b / n) / sqrt(n).
inline CMatrix dft_matrix(std::size_t n) {
    if (n == 0) throw InvalidDimension("DFT size must be positive");
    const auto size = static_cast<Eigen::Index>(n);
    CMatrix F(size, size);
    const double scale = 1.0 / std::sqrt(static_cast<double>(n));
    for (Eigen::Index a = 0; a < size; ++a)
        for (Eigen::Index b = 0; b < size; ++b)
            F(a, b) = scale * unit_phase(-static_cast<double>((a * b) % size), static_cast<double>(n));
    return F;
}

/// Dense Kronecker product.
inline CMatrix kron(const CMatrix& A, const CMatrix& B) {
    CMatrix out(A.rows() * B.rows(), A.cols() * B.cols());
    for (Eigen::Index i = 0; i < A.rows(); ++i)
        for (Eigen::Index j = 0; j < A.cols(); ++j)
            out.block(i * B.rows(), j * B.cols(), B.rows(), B.cols()) = A(i, j) * B;
    return out;
}

/// X_TF = F_M X_DD F_N^H.
inline TimeFrequencyFrame isfft(const DelayDopplerFrame& X) {
    if (X.data.size() == 0) throw InvalidDimension("empty delay-Doppler frame");
    const CMatrix FM = dft_matrix(X.M());
    const CMatrix FN = dft_matrix(X.N());
    return TimeFrequencyFrame{FM * X.data * FN.adjoint()};
}

/// X_DD = F_M^H X_TF F_N, the inverse of isfft.
inline DelayDopplerFrame sfft(const TimeFrequencyFrame& Y) {
    if (Y.data.size() == 0) throw InvalidDimension("empty time-frequency frame");
    const CMatrix FM = dft_matrix(Y.M());
    const CMatrix FN = dft_matrix(Y.N());
    return DelayDopplerFrame(FM.adjoint() * Y.data * FN);
}

/**
 * Heisenberg transform with a rectangular pulse: s = (F_N^H kron I_M) vec(X_DD),
 * i.e. the columns of X_DD F_N^H stacked. No prefix is inserted.
 */
inline TimeFrame otfs_modulate(const DelayDopplerFrame& X) {
    if (X.data.size() == 0) throw InvalidDimension("empty delay-Doppler frame");
    const CMatrix S = X.data * dft_matrix(X.N()).adjoint();
    return TimeFrame{S.reshaped()};
}

/// y = (F_N kron I_M) r, reshaped to an M x N grid. `r` must already be stripped of prefixes.
inline DelayDopplerFrame otfs_demodulate(const TimeFrame& r, std::size_t M, std::size_t N) {
    if (M == 0 || N == 0) throw InvalidDimension("demodulator needs M >= 1 and N >= 1");
    if (r.size() != M * N) throw InvalidDimension("received frame length is not M*N");
    const CMatrix R = r.samples.reshaped(Eigen::Index(M), Eigen::Index(N));
    // F_N is symmetric, so R F_N^T = R F_N.
    return DelayDopplerFrame(R * dft_matrix(N));
}

}  // namespace otfs
