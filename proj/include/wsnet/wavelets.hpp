#pragma once

#include <array>
#include <cstring>
#include <vector>

#include "wsnet/common.hpp"

// Orthonormal 1-D/2-D discrete wavelet transforms (Haar, Symlet-3).
//
// Odd-length signals are first extended to even length by half-sample symmetric
// padding (the edge sample is duplicated); the even-length signal is then filtered
// with periodized orthonormal filters and dyadically downsampled. Each subband has
// ceil(n/2) samples and the analysis map is orthogonal whenever the padded length
// is at least the filter length, which makes reconstruction (the adjoint, followed
// by cropping the padded sample) exact. For padded lengths shorter than the filter
// the analysis matrix is inverted directly.

namespace wsnet {

enum class WaveletKind { haar, symlet3 };

struct WaveletFilterPair {
    WaveletKind kind;
    std::vector<double> lo;        // analysis low-pass
    std::vector<double> hi;        // analysis high-pass (quadrature mirror of lo)
    std::vector<double> synth_lo;  // synthesis duals: time-reversed analysis filters
    std::vector<double> synth_hi;

    size_t taps() const { return lo.size(); }
};

inline WaveletFilterPair filter_bank(WaveletKind kind) {
    WaveletFilterPair f;
    f.kind = kind;
    switch (kind) {
        case WaveletKind::haar:
            f.lo = {0.7071067811865475244008443621048490, 0.7071067811865475244008443621048490};
            break;
        case WaveletKind::symlet3:
            // 6-tap least-asymmetric Daubechies-family low-pass, obtained by spectral
            // factorization of the degree-2 half-band polynomial and frozen here after
            // passing the orthonormality and vanishing-moment checks.
            f.lo = {0.33267055295008263,  0.80689150931109255,   0.45987750211849154,
                    -0.13501102001025458, -0.085441273882026658, 0.035226291885709533};
            break;
        default:
            throw error("filter_bank: unknown wavelet kind");
    }
    const size_t n = f.lo.size();
    f.hi.resize(n);
    for (size_t k = 0; k < n; ++k)
        f.hi[k] = ((k & 1) ? -1.0 : 1.0) * f.lo[n - 1 - k];
    f.synth_lo.assign(f.lo.rbegin(), f.lo.rend());
    f.synth_hi.assign(f.hi.rbegin(), f.hi.rend());
    return f;
}

namespace detail {

// Analysis along one axis: reads n strided samples, writes ceil(n/2) approx/detail
// coefficients. Half-sample symmetric padding to even length, then periodized filtering.
inline void dwt1(const double* x, size_t n, size_t sx, const WaveletFilterPair& f,
                 double* approx, double* det, size_t so) {
    require(n > 0, "dwt1: empty signal");
    const size_t m = n + (n & 1);
    const size_t half = m / 2;
    const size_t taps = f.taps();
    auto sample = [&](size_t idx) {
        // idx < m; map the padded slot back onto the edge sample
        return x[(idx < n ? idx : n - 1) * sx];
    };
    for (size_t k = 0; k < half; ++k) {
        double a = 0.0, d = 0.0;
        for (size_t t = 0; t < taps; ++t) {
            const size_t idx = (2 * k + t) % m;
            const double v = sample(idx);
            a += f.lo[t] * v;
            d += f.hi[t] * v;
        }
        approx[k * so] = a;
        det[k * so] = d;
    }
}

// Dense periodized analysis matrix for tiny signals (padded length < filter length),
// rows: even shifts of lo then hi. Used only by the short-edge inverse.
inline std::vector<double> analysis_matrix(size_t m, const WaveletFilterPair& f) {
    const size_t half = m / 2;
    std::vector<double> t(m * m, 0.0);
    for (size_t k = 0; k < half; ++k)
        for (size_t tap = 0; tap < f.taps(); ++tap) {
            const size_t idx = (2 * k + tap) % m;
            t[k * m + idx] += f.lo[tap];
            t[(half + k) * m + idx] += f.hi[tap];
        }
    return t;
}

inline void solve_dense(std::vector<double> a, std::vector<double>& b, size_t n) {
    // Gaussian elimination with partial pivoting; n is tiny here.
    for (size_t col = 0; col < n; ++col) {
        size_t piv = col;
        for (size_t r = col + 1; r < n; ++r)
            if (std::abs(a[r * n + col]) > std::abs(a[piv * n + col])) piv = r;
        require(std::abs(a[piv * n + col]) > 1e-300, "wavelets: singular short-edge system");
        if (piv != col) {
            for (size_t c = 0; c < n; ++c) std::swap(a[piv * n + c], a[col * n + c]);
            std::swap(b[piv], b[col]);
        }
        const double inv = 1.0 / a[col * n + col];
        for (size_t r = col + 1; r < n; ++r) {
            const double fac = a[r * n + col] * inv;
            if (fac == 0.0) continue;
            for (size_t c = col; c < n; ++c) a[r * n + c] -= fac * a[col * n + c];
            b[r] -= fac * b[col];
        }
    }
    for (size_t col = n; col-- > 0;) {
        double s = b[col];
        for (size_t c = col + 1; c < n; ++c) s -= a[col * n + c] * b[c];
        b[col] = s / a[col * n + col];
    }
}

// Inverse of dwt1: reconstructs n samples from ceil(n/2) approx/detail pairs.
inline void idwt1(const double* approx, const double* det, size_t si, size_t n,
                  const WaveletFilterPair& f, double* out, size_t so) {
    const size_t m = n + (n & 1);
    const size_t half = m / 2;
    const size_t taps = f.taps();
    std::vector<double> ext(m, 0.0);
    if (m >= taps) {
        // Orthogonal case: synthesis is the adjoint (upsample + time-reversed filters).
        for (size_t k = 0; k < half; ++k) {
            const double a = approx[k * si];
            const double d = det[k * si];
            for (size_t t = 0; t < taps; ++t) {
                const size_t idx = (2 * k + t) % m;
                ext[idx] += f.lo[t] * a + f.hi[t] * d;
            }
        }
    } else {
        for (size_t k = 0; k < half; ++k) {
            ext[k] = approx[k * si];
            ext[half + k] = det[k * si];
        }
        solve_dense(analysis_matrix(m, f), ext, m);
    }
    for (size_t i = 0; i < n; ++i) out[i * so] = ext[i];
}

}  // namespace detail

inline size_t half_ceil(size_t n) { return (n + 1) / 2; }

// Four half-resolution planes; first letter is the filter along rows (width),
// second the filter along columns (height).
struct SubbandSet {
    size_t height = 0;  // ceil(h/2)
    size_t width = 0;   // ceil(w/2)
    std::vector<double> ll, hl, lh, hh;
};

inline SubbandSet dwt2(const std::vector<double>& plane, size_t h, size_t w,
                       const WaveletFilterPair& f) {
    require(h > 0 && w > 0, "dwt2: empty plane");
    require(plane.size() == h * w, "dwt2: plane size mismatch");
    const size_t cw = half_ceil(w);
    const size_t ch = half_ceil(h);
    std::vector<double> row_lo(h * cw), row_hi(h * cw);
    for (size_t i = 0; i < h; ++i)
        detail::dwt1(plane.data() + i * w, w, 1, f, row_lo.data() + i * cw,
                     row_hi.data() + i * cw, 1);
    SubbandSet s;
    s.height = ch;
    s.width = cw;
    s.ll.resize(ch * cw);
    s.lh.resize(ch * cw);
    s.hl.resize(ch * cw);
    s.hh.resize(ch * cw);
    for (size_t j = 0; j < cw; ++j) {
        detail::dwt1(row_lo.data() + j, h, cw, f, s.ll.data() + j, s.lh.data() + j, cw);
        detail::dwt1(row_hi.data() + j, h, cw, f, s.hl.data() + j, s.hh.data() + j, cw);
    }
    return s;
}

inline std::vector<double> idwt2(const SubbandSet& s, const WaveletFilterPair& f,
                                 size_t out_h, size_t out_w) {
    require(s.height == half_ceil(out_h) && s.width == half_ceil(out_w),
            "idwt2: subband dimensions inconsistent with output size");
    const size_t cw = s.width;
    require(s.ll.size() == s.height * cw && s.lh.size() == s.ll.size() &&
                s.hl.size() == s.ll.size() && s.hh.size() == s.ll.size(),
            "idwt2: subband planes must share dimensions");
    std::vector<double> row_lo(out_h * cw), row_hi(out_h * cw);
    for (size_t j = 0; j < cw; ++j) {
        detail::idwt1(s.ll.data() + j, s.lh.data() + j, cw, out_h, f, row_lo.data() + j, cw);
        detail::idwt1(s.hl.data() + j, s.hh.data() + j, cw, out_h, f, row_hi.data() + j, cw);
    }
    std::vector<double> plane(out_h * out_w);
    for (size_t i = 0; i < out_h; ++i)
        detail::idwt1(row_lo.data() + i * cw, row_hi.data() + i * cw, 1, out_w, f,
                      plane.data() + i * out_w, 1);
    return plane;
}

}  // namespace wsnet
