#pragma once

#include <algorithm>
#include <cstddef>
#include <vector>

// Dense accumulate kernels shared by the autodiff ops. All kernels add into C,
// callers zero the output first. The k dimension is processed in panels so the
// active slice of B stays cache-resident while the row loop sweeps C.

namespace wsnet::kernels {

using std::size_t;

namespace detail {
constexpr size_t kPanel = 64;
}

namespace detail {

// one C row accumulated over four/eight B rows at a time; fewer C passes
inline void row_update4(double* __restrict__ ci, const double* __restrict__ b, size_t n,
                        double a0, double a1, double a2, double a3) {
    const double* b0 = b;
    const double* b1 = b + n;
    const double* b2 = b + 2 * n;
    const double* b3 = b + 3 * n;
    for (size_t j = 0; j < n; ++j)
        ci[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
}

inline void row_update8(double* __restrict__ ci, const double* __restrict__ b, size_t n,
                        const double* __restrict__ av, size_t stride) {
    const double a0 = av[0], a1 = av[stride], a2 = av[2 * stride], a3 = av[3 * stride];
    const double a4 = av[4 * stride], a5 = av[5 * stride], a6 = av[6 * stride],
                 a7 = av[7 * stride];
    const double* b0 = b;
    const double* b4 = b + 4 * n;
    for (size_t j = 0; j < n; ++j)
        ci[j] += (a0 * b0[j] + a1 * b0[n + j] + a2 * b0[2 * n + j] + a3 * b0[3 * n + j]) +
                 (a4 * b4[j] + a5 * b4[n + j] + a6 * b4[2 * n + j] + a7 * b4[3 * n + j]);
}

}  // namespace detail

// C(m,n) += A(m,k) * B(k,n)
inline void mm_nn(double* __restrict__ c, const double* __restrict__ a,
                  const double* __restrict__ b, size_t m, size_t k, size_t n) {
    for (size_t k0 = 0; k0 < k; k0 += detail::kPanel) {
        const size_t k1 = std::min(k, k0 + detail::kPanel);
        for (size_t i = 0; i < m; ++i) {
            const double* ai = a + i * k;
            double* ci = c + i * n;
            size_t kk = k0;
            for (; kk + 8 <= k1; kk += 8)
                detail::row_update8(ci, b + kk * n, n, ai + kk, 1);
            for (; kk + 4 <= k1; kk += 4)
                detail::row_update4(ci, b + kk * n, n, ai[kk], ai[kk + 1], ai[kk + 2],
                                    ai[kk + 3]);
            for (; kk < k1; ++kk) {
                const double av = ai[kk];
                const double* bk = b + kk * n;
                for (size_t j = 0; j < n; ++j) ci[j] += av * bk[j];
            }
        }
    }
}

// C(m,n) += A(k,m)^T * B(k,n)
inline void mm_tn(double* __restrict__ c, const double* __restrict__ a,
                  const double* __restrict__ b, size_t m, size_t k, size_t n) {
    for (size_t k0 = 0; k0 < k; k0 += detail::kPanel) {
        const size_t k1 = std::min(k, k0 + detail::kPanel);
        for (size_t i = 0; i < m; ++i) {
            double* ci = c + i * n;
            size_t kk = k0;
            for (; kk + 8 <= k1; kk += 8)
                detail::row_update8(ci, b + kk * n, n, a + kk * m + i, m);
            for (; kk + 4 <= k1; kk += 4)
                detail::row_update4(ci, b + kk * n, n, a[kk * m + i], a[(kk + 1) * m + i],
                                    a[(kk + 2) * m + i], a[(kk + 3) * m + i]);
            for (; kk < k1; ++kk) {
                const double av = a[kk * m + i];
                const double* bk = b + kk * n;
                for (size_t j = 0; j < n; ++j) ci[j] += av * bk[j];
            }
        }
    }
}

// C(m,n) += A(m,k) * B(n,k)^T  (B stored row-major n x k)
inline void mm_nt(double* __restrict__ c, const double* __restrict__ a,
                  const double* __restrict__ b, size_t m, size_t k, size_t n) {
    if (m >= 4 && n >= 4 && k >= 8) {
        // row-dot form is latency-bound; transpose once and take the panel kernel
        std::vector<double> bt(k * n);
        for (size_t j = 0; j < n; ++j)
            for (size_t kk = 0; kk < k; ++kk) bt[kk * n + j] = b[j * k + kk];
        mm_nn(c, a, bt.data(), m, k, n);
        return;
    }
    for (size_t i = 0; i < m; ++i) {
        const double* ai = a + i * k;
        double* ci = c + i * n;
        for (size_t j = 0; j < n; ++j) {
            const double* bj = b + j * k;
            double s = 0.0;
            for (size_t kk = 0; kk < k; ++kk) s += ai[kk] * bj[kk];
            ci[j] += s;
        }
    }
}

inline void axpy(double* __restrict__ y, double alpha, const double* __restrict__ x, size_t n) {
    for (size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

inline double dot(const double* __restrict__ a, const double* __restrict__ b, size_t n) {
    double s = 0.0;
    for (size_t i = 0; i < n; ++i) s += a[i] * b[i];
    return s;
}

inline void transpose(const double* __restrict__ src, double* __restrict__ dst, size_t rows,
                      size_t cols) {
    for (size_t i = 0; i < rows; ++i)
        for (size_t j = 0; j < cols; ++j) dst[j * rows + i] = src[i * cols + j];
}

}  // namespace wsnet::kernels
