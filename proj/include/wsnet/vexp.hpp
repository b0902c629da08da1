#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>

#if defined(__AVX2__)
#include <immintrin.h>
#endif

// Vectorized exp over arrays (Cephes-style rational approximation, < 1 ulp over
// the normal range). The attention softmax spends most of its time here; one
// function serves both the streaming op and the dense map builder so results of
// the two routes stay identical.

namespace wsnet::vexp_detail {

constexpr double kLog2E = 1.4426950408889634073599;
constexpr double kC1 = 6.93145751953125e-1;
constexpr double kC2 = 1.42860682030941723212e-6;
constexpr double kP0 = 1.26177193074810590878e-4;
constexpr double kP1 = 3.02994407707441961300e-2;
constexpr double kP2 = 9.99999999999999999910e-1;
constexpr double kQ0 = 3.00198505138664455042e-6;
constexpr double kQ1 = 2.52448340349684104192e-3;
constexpr double kQ2 = 2.27265548208155028766e-1;
constexpr double kQ3 = 2.00000000000000000005e0;

inline double exp_scalar(double x) {
    if (x > 709.0) return std::numeric_limits<double>::infinity();
    if (x < -709.0) return 0.0;
    const double px = std::floor(kLog2E * x + 0.5);
    const auto n = static_cast<std::int64_t>(px);
    x -= px * kC1;
    x -= px * kC2;
    const double xx = x * x;
    double p = kP0;
    p = p * xx + kP1;
    p = p * xx + kP2;
    p *= x;
    double q = kQ0;
    q = q * xx + kQ1;
    q = q * xx + kQ2;
    q = q * xx + kQ3;
    const double e = p / (q - p);
    double r = 1.0 + 2.0 * e;
    std::int64_t bits;
    std::memcpy(&bits, &r, 8);
    bits += n << 52;
    std::memcpy(&r, &bits, 8);
    return r;
}

}  // namespace wsnet::vexp_detail

namespace wsnet {

// dst[i] = exp(src[i]); dst may alias src
inline void vexp(double* dst, const double* src, std::size_t n) {
    std::size_t i = 0;
#if defined(__AVX2__)
    using namespace vexp_detail;
    const __m256d log2e = _mm256_set1_pd(kLog2E);
    const __m256d half = _mm256_set1_pd(0.5);
    const __m256d c1 = _mm256_set1_pd(kC1);
    const __m256d c2 = _mm256_set1_pd(kC2);
    const __m256d p0 = _mm256_set1_pd(kP0), p1 = _mm256_set1_pd(kP1), p2 = _mm256_set1_pd(kP2);
    const __m256d q0 = _mm256_set1_pd(kQ0), q1 = _mm256_set1_pd(kQ1), q2 = _mm256_set1_pd(kQ2),
                  q3 = _mm256_set1_pd(kQ3);
    const __m256d one = _mm256_set1_pd(1.0), two = _mm256_set1_pd(2.0);
    const __m256d hi = _mm256_set1_pd(709.0), lo = _mm256_set1_pd(-709.0);
    for (; i + 4 <= n; i += 4) {
        __m256d x = _mm256_loadu_pd(src + i);
        const __m256d oob =
            _mm256_or_pd(_mm256_cmp_pd(x, hi, _CMP_GT_OQ), _mm256_cmp_pd(x, lo, _CMP_LT_OQ));
        if (_mm256_movemask_pd(oob)) {
            // rare saturated lanes take the scalar path
            for (std::size_t l = 0; l < 4; ++l) dst[i + l] = exp_scalar(src[i + l]);
            continue;
        }
        const __m256d px =
            _mm256_round_pd(_mm256_fmadd_pd(log2e, x, half), _MM_FROUND_TO_NEG_INF);
        x = _mm256_fnmadd_pd(px, c1, x);
        x = _mm256_fnmadd_pd(px, c2, x);
        const __m256d xx = _mm256_mul_pd(x, x);
        __m256d p = _mm256_fmadd_pd(p0, xx, p1);
        p = _mm256_fmadd_pd(p, xx, p2);
        p = _mm256_mul_pd(p, x);
        __m256d q = _mm256_fmadd_pd(q0, xx, q1);
        q = _mm256_fmadd_pd(q, xx, q2);
        q = _mm256_fmadd_pd(q, xx, q3);
        const __m256d e = _mm256_div_pd(p, _mm256_sub_pd(q, p));
        __m256d r = _mm256_fmadd_pd(two, e, one);
        // scale by 2^n via the exponent bits
        const __m128i n32 = _mm256_cvtpd_epi32(px);
        const __m256i n64 = _mm256_cvtepi32_epi64(n32);
        const __m256i bits = _mm256_add_epi64(_mm256_castpd_si256(r), _mm256_slli_epi64(n64, 52));
        _mm256_storeu_pd(dst + i, _mm256_castsi256_pd(bits));
    }
#endif
    for (; i < n; ++i) dst[i] = vexp_detail::exp_scalar(src[i]);
}

}  // namespace wsnet
