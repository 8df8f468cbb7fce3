#pragma once

#include <algorithm>
#include <complex>
#include <utility>

#include "specdiff/core.hpp"

namespace specdiff::spectral {

using cplx = std::complex<double>;

// ===========================================================================
// FFT. Iterative radix-2, power-of-two lengths, double precision.
// Forward is unnormalized; inverse applies the 1/N factor.
// ===========================================================================

inline void fft_1d(cplx* a, int n, bool inverse) {
    // bit-reversal permutation
    for (int i = 1, j = 0; i < n; ++i) {
        int bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(a[i], a[j]);
    }
    for (int len = 2; len <= n; len <<= 1) {
        double ang = 2.0 * kPi / len * (inverse ? 1.0 : -1.0);
        cplx wl(std::cos(ang), std::sin(ang));
        for (int i = 0; i < n; i += len) {
            cplx w(1.0, 0.0);
            for (int k = 0; k < len / 2; ++k) {
                cplx u = a[i + k];
                cplx t = a[i + k + len / 2] * w;
                a[i + k] = u + t;
                a[i + k + len / 2] = u - t;
                w *= wl;
            }
        }
    }
    if (inverse) {
        for (int i = 0; i < n; ++i) a[i] /= double(n);
    }
}

/** In-place 2-D transform of a rows x cols row-major buffer. */
inline void fft_2d(cplx* a, int rows, int cols, bool inverse) {
    require(is_pow2(rows) && is_pow2(cols), "fft_2d: dimensions must be powers of two");
    for (int r = 0; r < rows; ++r) fft_1d(a + size_t(r) * cols, cols, inverse);
    std::vector<cplx> col(rows);
    for (int c = 0; c < cols; ++c) {
        for (int r = 0; r < rows; ++r) col[r] = a[size_t(r) * cols + c];
        fft_1d(col.data(), rows, inverse);
        for (int r = 0; r < rows; ++r) a[size_t(r) * cols + c] = col[r];
    }
}

/** Circular roll by half along both axes; for even dimensions this moves the
    zero-frequency bin to (rows/2, cols/2) and is its own inverse. */
template <typename T>
inline void fftshift_2d(std::vector<T>& v, int rows, int cols) {
    std::vector<T> out(v.size());
    int dr = rows / 2, dc = cols / 2;
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c)
            out[size_t((r + dr) % rows) * cols + (c + dc) % cols] = v[size_t(r) * cols + c];
    v.swap(out);
}

// ===========================================================================
// Image-domain preprocessing
// ===========================================================================

/** Luminance reduction: gray = 0.299 R + 0.587 G + 0.114 B. Single-channel
    input passes through unchanged. */
inline Plane to_grayscale(const ImageBuf& img) {
    require(img.channels == 1 || img.channels == 3, "to_grayscale: expected 1 or 3 channels");
    Plane out(img.rows, img.cols);
    for (int r = 0; r < img.rows; ++r)
        for (int c = 0; c < img.cols; ++c)
            out.at(r, c) = img.channels == 1
                               ? img.at(r, c, 0)
                               : 0.299 * img.at(r, c, 0) + 0.587 * img.at(r, c, 1) +
                                     0.114 * img.at(r, c, 2);
    return out;
}

inline double hann_sample(int i, int n) {
    return n < 2 ? 1.0 : 0.5 * (1.0 - std::cos(2.0 * kPi * double(i) / double(n - 1)));
}

/** Separable Hann window, w(i) = 0.5 (1 - cos(2 pi i / (N-1))) per axis.
    Suppresses the spectral leakage of the non-periodic image borders. */
inline Plane apodize(const Plane& p) {
    Plane out(p.rows, p.cols);
    std::vector<double> wr(p.rows), wc(p.cols);
    for (int r = 0; r < p.rows; ++r) wr[r] = hann_sample(r, p.rows);
    for (int c = 0; c < p.cols; ++c) wc[c] = hann_sample(c, p.cols);
    for (int r = 0; r < p.rows; ++r)
        for (int c = 0; c < p.cols; ++c) out.at(r, c) = p.at(r, c) * wr[r] * wc[c];
    return out;
}

/** Centered magnitude of the 2-D DFT. Output bin (rows/2, cols/2) is the
    zero-frequency term; invariant under circular shifts of the input. */
inline Plane fft_magnitude(const Plane& p) {
    require(is_pow2(p.rows) && is_pow2(p.cols), "fft_magnitude: dimensions must be powers of two");
    std::vector<cplx> buf(p.size());
    for (size_t i = 0; i < p.size(); ++i) buf[i] = cplx(p.v[i], 0.0);
    fft_2d(buf.data(), p.rows, p.cols, false);
    Plane out(p.rows, p.cols);
    for (size_t i = 0; i < p.size(); ++i) out.v[i] = std::abs(buf[i]);
    fftshift_2d(out.v, out.rows, out.cols);
    return out;
}

/** Radial raised-cosine high-pass gain over a centered spectrum:
    H(rho) = u (2 - u) with u = (1 - cos(pi rho)) / 2 and rho the radius
    normalized by min(H,W)/2, clamped to [0,1]. H(0) = 0, H(1) = 1,
    monotone in between; attenuates the DC neighborhood that otherwise
    dominates log-polar correlation. */
inline Plane make_highpass(int rows, int cols) {
    Plane f(rows, cols);
    double cr = rows / 2.0, cc = cols / 2.0;
    double rad = std::min(rows, cols) / 2.0;
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) {
            double rho = std::sqrt((r - cr) * (r - cr) + (c - cc) * (c - cc)) / rad;
            rho = std::clamp(rho, 0.0, 1.0);
            double u = 0.5 * (1.0 - std::cos(kPi * rho));
            f.at(r, c) = u * (2.0 - u);
        }
    return f;
}

inline Plane highpass(const Plane& spectrum) {
    Plane f = make_highpass(spectrum.rows, spectrum.cols);
    Plane out(spectrum.rows, spectrum.cols);
    for (size_t i = 0; i < out.size(); ++i) out.v[i] = spectrum.v[i] * f.v[i];
    return out;
}

// ===========================================================================
// Log-polar resampling
// ===========================================================================

struct LogPolarParams {
    int angular_bins = 256;  // columns, covering [0, 360) degrees
    int radial_bins = 256;   // rows, geometric spacing from r_min to r_max
    double r_min = 1.0;
    double r_max = 0.0;       // 0 resolves to min(H,W)/2 of the source plane
    double center_row = -1.0; // negative resolves to H/2
    double center_col = -1.0; // negative resolves to W/2

    double resolved_r_max(int rows, int cols) const {
        return r_max > 0.0 ? r_max : std::min(rows, cols) / 2.0;
    }
};

/** Precomputed bilinear sampling table for one (source size, params) pair.
    Column j samples angle 360 j / A degrees; row i samples radius
    r_min (r_max/r_min)^(i/(R-1)) about the plane center. A rotation of the
    source by d theta shifts columns by d theta * A/360; scaling by s shifts
    rows by log(s)/log(r_max/r_min) * (R-1). Samples outside the plane read 0. */
struct LogPolarMap {
    int rows = 0, cols = 0;        // source plane shape
    int radial_bins = 0, angular_bins = 0;
    double r_min = 1.0, r_max = 1.0;
    std::vector<int> idx;     // 4 source indices per output bin, -1 when outside
    std::vector<double> wgt;  // matching bilinear weights
};

inline LogPolarMap make_log_polar_map(int rows, int cols, const LogPolarParams& lp = {}) {
    require(lp.angular_bins > 1 && lp.radial_bins > 1, "log_polar: need at least 2 bins per axis");
    LogPolarMap m;
    m.rows = rows;
    m.cols = cols;
    m.radial_bins = lp.radial_bins;
    m.angular_bins = lp.angular_bins;
    m.r_min = lp.r_min;
    m.r_max = lp.resolved_r_max(rows, cols);
    require(m.r_max > m.r_min && m.r_min > 0.0, "log_polar: need 0 < r_min < r_max");
    size_t n = size_t(lp.radial_bins) * lp.angular_bins;
    m.idx.assign(n * 4, -1);
    m.wgt.assign(n * 4, 0.0);
    double cy = lp.center_row >= 0.0 ? lp.center_row : rows / 2.0;
    double cx = lp.center_col >= 0.0 ? lp.center_col : cols / 2.0;
    double ratio = m.r_max / m.r_min;
    for (int i = 0; i < lp.radial_bins; ++i) {
        double r = m.r_min * std::pow(ratio, double(i) / double(lp.radial_bins - 1));
        for (int j = 0; j < lp.angular_bins; ++j) {
            double phi = 2.0 * kPi * double(j) / double(lp.angular_bins);
            double y = cy + r * std::sin(phi);
            double x = cx + r * std::cos(phi);
            int y0 = int(std::floor(y)), x0 = int(std::floor(x));
            double fy = y - y0, fx = x - x0;
            size_t o = (size_t(i) * lp.angular_bins + j) * 4;
            const double w4[4] = {(1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx};
            const int yy[4] = {y0, y0, y0 + 1, y0 + 1};
            const int xx[4] = {x0, x0 + 1, x0, x0 + 1};
            for (int k = 0; k < 4; ++k) {
                if (yy[k] >= 0 && yy[k] < rows && xx[k] >= 0 && xx[k] < cols) {
                    m.idx[o + k] = yy[k] * cols + xx[k];
                    m.wgt[o + k] = w4[k];
                }
            }
        }
    }
    return m;
}

inline Plane log_polar_apply(const Plane& p, const LogPolarMap& m) {
    require(p.rows == m.rows && p.cols == m.cols, "log_polar: plane shape differs from table");
    Plane out(m.radial_bins, m.angular_bins);
    for (size_t i = 0; i < out.size(); ++i) {
        const int* ix = &m.idx[i * 4];
        const double* w = &m.wgt[i * 4];
        double s = 0;
        for (int k = 0; k < 4; ++k)
            if (ix[k] >= 0) s += w[k] * p.v[ix[k]];
        out.v[i] = s;
    }
    return out;
}

/** Adjoint of log_polar_apply: scatter-add output-side gradient back to the
    source plane. Exact transpose of the bilinear gather. */
inline Plane log_polar_adjoint(const Plane& grad_out, const LogPolarMap& m) {
    require(grad_out.rows == m.radial_bins && grad_out.cols == m.angular_bins,
            "log_polar_adjoint: gradient shape differs from table");
    Plane out(m.rows, m.cols);
    for (size_t i = 0; i < grad_out.size(); ++i) {
        const int* ix = &m.idx[i * 4];
        const double* w = &m.wgt[i * 4];
        for (int k = 0; k < 4; ++k)
            if (ix[k] >= 0) out.v[ix[k]] += w[k] * grad_out.v[i];
    }
    return out;
}

inline Plane log_polar(const Plane& p, const LogPolarParams& lp = {}) {
    return log_polar_apply(p, make_log_polar_map(p.rows, p.cols, lp));
}

// ===========================================================================
// Phase correlation and decoding
// ===========================================================================

/** Real part of the inverse transform of the normalized cross-power spectrum,
    rolled so zero displacement sits at bin (rows/2, cols/2). When b equals a
    circularly shifted by (dr, dc), the peak lands at (rows/2 + dr, cols/2 + dc),
    i.e. the map reads out the displacement of b relative to a. */
inline CorrMap phase_correlate(const Plane& a, const Plane& b, double eps = 1e-12) {
    require(a.same_shape(b), "phase_correlate: shape mismatch");
    require(is_pow2(a.rows) && is_pow2(a.cols), "phase_correlate: dimensions must be powers of two");
    size_t n = a.size();
    std::vector<cplx> fa(n), fb(n);
    for (size_t i = 0; i < n; ++i) fa[i] = cplx(a.v[i], 0.0);
    for (size_t i = 0; i < n; ++i) fb[i] = cplx(b.v[i], 0.0);
    fft_2d(fa.data(), a.rows, a.cols, false);
    fft_2d(fb.data(), a.rows, a.cols, false);
    for (size_t i = 0; i < n; ++i) {
        cplx x = std::conj(fa[i]) * fb[i];
        fa[i] = x / std::max(std::abs(x), eps);
    }
    fft_2d(fa.data(), a.rows, a.cols, true);
    CorrMap out(a.rows, a.cols);
    for (size_t i = 0; i < n; ++i) out.v[i] = fa[i].real();
    fftshift_2d(out.v, out.rows, out.cols);
    return out;
}

/** Temperature-scaled softmax over all bins: p_i = exp(T c_i) / sum exp(T c_j),
    evaluated with the max subtracted for stability. Argmax-preserving for T > 0. */
inline CorrMap normalize_to_distribution(const CorrMap& c, double temperature = 1.0) {
    require(temperature > 0.0, "normalize_to_distribution: temperature must be positive");
    CorrMap out(c.rows, c.cols);
    out.temperature = temperature;
    double m = *std::max_element(c.v.begin(), c.v.end());
    double z = 0.0;
    for (size_t i = 0; i < c.size(); ++i) {
        out.v[i] = std::exp((c.v[i] - m) * temperature);
        z += out.v[i];
    }
    for (size_t i = 0; i < c.size(); ++i) out.v[i] /= z;
    return out;
}

namespace detail {
/** Representative of index k on a circular axis of n bins, within
    [anchor - n/2, anchor + n/2). */
inline double circular_rep(int k, int anchor, int n) {
    int off = ((k - anchor) % n + n + n / 2) % n - n / 2;
    return double(anchor + off);
}

inline std::pair<double, double> soft_expectation_raw(const CorrMap& c, double temperature) {
    CorrMap p = normalize_to_distribution(c, temperature);
    size_t am = 0;
    for (size_t i = 1; i < c.size(); ++i)
        if (c.v[i] > c.v[am]) am = i;
    int ar = int(am) / c.cols, ac = int(am) % c.cols;
    std::vector<double> pr(c.rows, 0.0), pc(c.cols, 0.0);
    for (int r = 0; r < c.rows; ++r)
        for (int col = 0; col < c.cols; ++col) {
            pr[r] += p.at(r, col);
            pc[col] += p.at(r, col);
        }
    double er = 0.0, ec = 0.0;
    for (int r = 0; r < c.rows; ++r) er += pr[r] * circular_rep(r, ar, c.rows);
    for (int col = 0; col < c.cols; ++col) ec += pc[col] * circular_rep(col, ac, c.cols);
    return {er, ec};
}
}  // namespace detail

/** Probability-weighted mean bin coordinate of the softmax-normalized map.
    Both axes are treated as circular: each index is remapped to its
    representative within [argmax - N/2, argmax + N/2) before averaging, so a
    peak near the wrap seam is not pulled toward the opposite edge; the mean
    is finally wrapped back into [0, N). Exact on dominant single bins and on
    symmetric two-point masses. */
inline std::pair<double, double> soft_expectation(const CorrMap& c, double temperature = 10.0) {
    auto [er, ec] = detail::soft_expectation_raw(c, temperature);
    auto wrap = [](double x, int n) {
        x = std::fmod(x, double(n));
        return x < 0.0 ? x + n : x;
    };
    return {wrap(er, c.rows), wrap(ec, c.cols)};
}

/** Analytic gradient of g . soft_expectation(c, T) with respect to the map,
    for a fixed argmax cell: d/dc_j = T p_j (g_r (rep_r(j) - E_r) + g_c (rep_c(j) - E_c)).
    The final wrap of the expectation is a constant offset and does not alter
    the gradient, so the unwrapped mean is used here. */
inline CorrMap soft_expectation_backward(const CorrMap& c, double temperature, double grad_row,
                                         double grad_col) {
    CorrMap p = normalize_to_distribution(c, temperature);
    size_t am = 0;
    for (size_t i = 1; i < c.size(); ++i)
        if (c.v[i] > c.v[am]) am = i;
    int ar = int(am) / c.cols, ac = int(am) % c.cols;
    auto [er, ec] = detail::soft_expectation_raw(c, temperature);
    CorrMap out(c.rows, c.cols);
    for (int r = 0; r < c.rows; ++r)
        for (int col = 0; col < c.cols; ++col)
            out.at(r, col) = temperature * p.at(r, col) *
                             (grad_row * (detail::circular_rep(r, ar, c.rows) - er) +
                              grad_col * (detail::circular_rep(col, ac, c.cols) - ec));
    return out;
}

}  // namespace specdiff::spectral
