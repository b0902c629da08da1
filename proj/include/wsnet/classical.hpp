#pragma once

#include <algorithm>
#include <numeric>
#include <vector>

#include "wsnet/common.hpp"
#include "wsnet/core.hpp"
#include "wsnet/kernels.hpp"

// Classical unmixing baselines: VCA endmember extraction and FCLSU (fully
// constrained least squares) abundance estimation via active-set NNLS.

namespace wsnet {
namespace linalg {

// Householder QR least squares: minimizes ||A x - b||_2 for A (m x n), m >= n.
// A and b are modified in place; returns x of length n.
inline std::vector<double> qr_solve(std::vector<double>& a, std::vector<double>& b, size_t m,
                                    size_t n) {
    require(m >= n, "qr_solve: underdetermined system");
    for (size_t k = 0; k < n; ++k) {
        double norm = 0.0;
        for (size_t i = k; i < m; ++i) norm += a[i * n + k] * a[i * n + k];
        norm = std::sqrt(norm);
        require(norm > 1e-300, "qr_solve: rank-deficient matrix");
        if (a[k * n + k] > 0) norm = -norm;
        // v = column with a_kk shifted; stored in place
        const double akk = a[k * n + k] - norm;
        const double vnorm_sq = norm * norm - a[k * n + k] * norm;  // = v^T v / ... see below
        a[k * n + k] = akk;
        // apply H = I - 2 v v^T / (v^T v); v^T v = 2 * (norm^2 - a_kk_old*norm)
        const double inv_vtv2 = 1.0 / vnorm_sq;  // equals 2 / v^T v
        for (size_t j = k + 1; j < n; ++j) {
            double s = 0.0;
            for (size_t i = k; i < m; ++i) s += a[i * n + k] * a[i * n + j];
            s *= inv_vtv2;
            for (size_t i = k; i < m; ++i) a[i * n + j] -= s * a[i * n + k];
        }
        double s = 0.0;
        for (size_t i = k; i < m; ++i) s += a[i * n + k] * b[i];
        s *= inv_vtv2;
        for (size_t i = k; i < m; ++i) b[i] -= s * a[i * n + k];
        a[k * n + k] = norm;  // R diagonal
    }
    std::vector<double> x(n);
    for (size_t k = n; k-- > 0;) {
        double s = b[k];
        for (size_t j = k + 1; j < n; ++j) s -= a[k * n + j] * x[j];
        x[k] = s / a[k * n + k];
    }
    return x;
}

// Top-k eigenvectors of a symmetric PSD matrix via subspace iteration with
// Gram-Schmidt orthonormalization. Deterministic (fixed pseudo-random start).
inline std::vector<double> sym_eig_topk(const std::vector<double>& c, size_t n, size_t k,
                                        size_t iters = 300) {
    require(c.size() == n * n && k <= n, "sym_eig_topk: bad dimensions");
    std::vector<double> q(n * k);
    Rng rng(0x5eedD00Dull);
    for (double& v : q) v = rng.gaussian();
    std::vector<double> z(n * k);
    auto orthonormalize = [&](std::vector<double>& m) {
        for (size_t col = 0; col < k; ++col) {
            for (size_t prev = 0; prev < col; ++prev) {
                double dot = 0.0;
                for (size_t i = 0; i < n; ++i) dot += m[i * k + col] * m[i * k + prev];
                for (size_t i = 0; i < n; ++i) m[i * k + col] -= dot * m[i * k + prev];
            }
            double norm = 0.0;
            for (size_t i = 0; i < n; ++i) norm += m[i * k + col] * m[i * k + col];
            norm = std::sqrt(norm);
            if (norm < 1e-150) {
                // deflated direction (rank deficiency): replace with a fresh vector
                for (size_t i = 0; i < n; ++i) m[i * k + col] = rng.gaussian();
                for (size_t prev = 0; prev < col; ++prev) {
                    double dot = 0.0;
                    for (size_t i = 0; i < n; ++i) dot += m[i * k + col] * m[i * k + prev];
                    for (size_t i = 0; i < n; ++i) m[i * k + col] -= dot * m[i * k + prev];
                }
                norm = 0.0;
                for (size_t i = 0; i < n; ++i) norm += m[i * k + col] * m[i * k + col];
                norm = std::sqrt(norm);
            }
            const double inv = 1.0 / norm;
            for (size_t i = 0; i < n; ++i) m[i * k + col] *= inv;
        }
    };
    orthonormalize(q);
    for (size_t it = 0; it < iters; ++it) {
        std::fill(z.begin(), z.end(), 0.0);
        kernels::mm_nn(z.data(), c.data(), q.data(), n, n, k);
        std::swap(q, z);
        orthonormalize(q);
    }
    return q;  // n x k, column-orthonormal
}

// Lawson-Hanson active-set NNLS: minimizes ||A x - b|| subject to x >= 0.
// Returns true on convergence within max_iter iterations. The KKT threshold
// combines the caller tolerance with a roundoff floor scaled to the problem,
// which keeps heavily weighted rows (the FCLSU sum-to-one augmentation) from
// cycling on gradient noise.
inline bool nnls(const std::vector<double>& a, const std::vector<double>& b, size_t m, size_t n,
                 std::vector<double>& x, size_t max_iter, double tol) {
    x.assign(n, 0.0);
    std::vector<bool> passive(n, false);
    std::vector<double> w(n), resid(b);
    size_t iter = 0;

    double scale = 0.0;
    for (double v : a) scale = std::max(scale, std::abs(v));
    double bscale = 0.0;
    for (double v : b) bscale = std::max(bscale, std::abs(v));
    const double gradient_floor =
        16.0 * std::numeric_limits<double>::epsilon() * scale * bscale;

    auto compute_w = [&]() {
        // w = A^T (b - A x); resid kept current
        for (size_t j = 0; j < n; ++j) {
            double s = 0.0;
            for (size_t i = 0; i < m; ++i) s += a[i * n + j] * resid[i];
            w[j] = s;
        }
    };
    auto solve_passive = [&](std::vector<double>& z) {
        std::vector<size_t> idx;
        for (size_t j = 0; j < n; ++j)
            if (passive[j]) idx.push_back(j);
        std::vector<double> ap(m * idx.size());
        for (size_t i = 0; i < m; ++i)
            for (size_t c = 0; c < idx.size(); ++c) ap[i * idx.size() + c] = a[i * n + idx[c]];
        std::vector<double> bp(b);
        auto sol = qr_solve(ap, bp, m, idx.size());
        z.assign(n, 0.0);
        for (size_t c = 0; c < idx.size(); ++c) z[idx[c]] = sol[c];
    };
    auto refresh_resid = [&]() {
        resid = b;
        for (size_t i = 0; i < m; ++i) {
            double s = 0.0;
            for (size_t j = 0; j < n; ++j)
                if (x[j] != 0.0) s += a[i * n + j] * x[j];
            resid[i] -= s;
        }
    };

    compute_w();
    std::vector<bool> banned(n, false);  // zero-step additions, cleared on progress
    while (true) {
        // pick the most violated KKT multiplier among free variables
        double wmax = std::max(tol, gradient_floor);
        size_t jmax = n;
        for (size_t j = 0; j < n; ++j)
            if (!passive[j] && !banned[j] && w[j] > wmax) {
                wmax = w[j];
                jmax = j;
            }
        if (jmax == n) return true;  // KKT satisfied
        passive[jmax] = true;

        std::vector<double> z;
        solve_passive(z);
        bool moved = true;
        while (true) {
            if (++iter > max_iter) return false;
            double zmin = std::numeric_limits<double>::infinity();
            for (size_t j = 0; j < n; ++j)
                if (passive[j]) zmin = std::min(zmin, z[j]);
            if (zmin > tol) break;
            // step toward z until the first passive coordinate hits zero
            double alpha = std::numeric_limits<double>::infinity();
            for (size_t j = 0; j < n; ++j)
                if (passive[j] && z[j] <= tol) alpha = std::min(alpha, x[j] / (x[j] - z[j]));
            if (alpha == 0.0 && passive[jmax] && z[jmax] <= tol) {
                // the fresh variable is numerically useless: drop and ban it until
                // some other update makes progress
                passive[jmax] = false;
                banned[jmax] = true;
                moved = false;
                break;
            }
            for (size_t j = 0; j < n; ++j)
                if (passive[j]) x[j] += alpha * (z[j] - x[j]);
            for (size_t j = 0; j < n; ++j)
                if (passive[j] && x[j] <= tol) {
                    passive[j] = false;
                    x[j] = 0.0;
                }
            solve_passive(z);
        }
        if (moved) {
            for (size_t j = 0; j < n; ++j) x[j] = passive[j] ? z[j] : 0.0;
            refresh_resid();
            compute_w();
            std::fill(banned.begin(), banned.end(), false);
        }
    }
}

}  // namespace linalg

// ---------------------------------------------------------------------------
// VCA

namespace detail {

// flattened observation matrix Y (L x N), pixel-major columns
inline std::vector<double> cube_matrix(const SpectralCube& cube) {
    const size_t l = cube.bands, n = cube.pixels();
    std::vector<double> y(l * n);
    for (size_t b = 0; b < l; ++b)
        std::copy(cube.band(b), cube.band(b) + n, y.begin() + b * n);
    return y;
}

inline std::vector<double> gram(const std::vector<double>& y, size_t l, size_t n) {
    // (Y Y^T) / N, symmetric L x L
    std::vector<double> g(l * l, 0.0);
    kernels::mm_nt(g.data(), y.data(), y.data(), l, n, l);
    const double inv = 1.0 / static_cast<double>(n);
    for (double& v : g) v *= inv;
    return g;
}

}  // namespace detail

// Vertex Component Analysis. Projects the data onto an R-dimensional subspace
// (projective scaling in the high-SNR regime, affine lift otherwise) and
// iteratively picks the pixel with the largest projection onto a random
// direction orthogonal to the span of endmembers found so far. Returns actual
// pixel spectra as columns; deterministic for a fixed seed.
inline EndmemberMatrix vca(const SpectralCube& cube, size_t r, std::uint64_t seed) {
    cube.validate();
    const size_t l = cube.bands, n = cube.pixels();
    require(r >= 1, "vca: need at least one endmember");
    require(r <= std::min(l, n), "vca: R exceeds min(L, N)");

    auto y = detail::cube_matrix(cube);

    // mean-removed PCA projection for the SNR estimate
    std::vector<double> mean_spec(l, 0.0);
    for (size_t b = 0; b < l; ++b) {
        const double* row = y.data() + b * n;
        double s = 0.0;
        for (size_t px = 0; px < n; ++px) s += row[px];
        mean_spec[b] = s / static_cast<double>(n);
    }
    std::vector<double> y0(y);
    for (size_t b = 0; b < l; ++b) {
        double* row = y0.data() + b * n;
        for (size_t px = 0; px < n; ++px) row[px] -= mean_spec[b];
    }
    const auto g0 = detail::gram(y0, l, n);
    auto ud0 = linalg::sym_eig_topk(g0, l, r);  // L x r
    std::vector<double> xp0(r * n, 0.0);
    kernels::mm_tn(xp0.data(), ud0.data(), y0.data(), r, l, n);

    double p_y = 0.0, p_x = 0.0, mean_sq = 0.0;
    for (double v : y) p_y += v * v;
    p_y /= static_cast<double>(n);
    for (double v : xp0) p_x += v * v;
    p_x /= static_cast<double>(n);
    for (double v : mean_spec) mean_sq += v * v;
    p_x += mean_sq;
    const double denom = p_y - p_x;
    const double ratio = p_x - (static_cast<double>(r) / static_cast<double>(l)) * p_y;
    const double snr_db = denom <= 1e-12 * p_y
                              ? std::numeric_limits<double>::infinity()
                              : 10.0 * std::log10(std::max(ratio, 1e-300) / denom);
    const double snr_th = 15.0 + 10.0 * std::log10(static_cast<double>(r));

    // r == 1 degenerates (no orthogonal directions): take the pixel with the
    // largest projection onto the principal direction
    if (r == 1) {
        const auto g = detail::gram(y, l, n);
        auto ud = linalg::sym_eig_topk(g, l, 1);
        size_t best = 0;
        double bestmag = -1.0;
        for (size_t px = 0; px < n; ++px) {
            double proj = 0.0;
            for (size_t b = 0; b < l; ++b) proj += ud[b] * y[b * n + px];
            if (std::abs(proj) > bestmag) {
                bestmag = std::abs(proj);
                best = px;
            }
        }
        EndmemberMatrix e(l, 1);
        for (size_t b = 0; b < l; ++b) e.at(b, 0) = y[b * n + best];
        return e;
    }

    std::vector<double> yp;  // r x n projected representation used by the simplex search
    if (snr_db > snr_th) {
        // projective projection onto the top-R subspace of the correlation matrix
        const auto g = detail::gram(y, l, n);
        auto ud = linalg::sym_eig_topk(g, l, r);
        std::vector<double> xp(r * n, 0.0);
        kernels::mm_tn(xp.data(), ud.data(), y.data(), r, l, n);
        std::vector<double> u(r, 0.0);
        for (size_t d = 0; d < r; ++d) {
            double s = 0.0;
            for (size_t px = 0; px < n; ++px) s += xp[d * n + px];
            u[d] = s / static_cast<double>(n);
        }
        yp.assign(r * n, 0.0);
        for (size_t px = 0; px < n; ++px) {
            double dot = 0.0;
            for (size_t d = 0; d < r; ++d) dot += xp[d * n + px] * u[d];
            if (std::abs(dot) < 1e-300) dot = 1e-300;
            for (size_t d = 0; d < r; ++d) yp[d * n + px] = xp[d * n + px] / dot;
        }
    } else {
        // affine lift: project mean-removed data to R-1 dims, append a constant row
        const size_t d = r - 1;
        auto ud = linalg::sym_eig_topk(g0, l, d);
        std::vector<double> xp(d * n, 0.0);
        kernels::mm_tn(xp.data(), ud.data(), y0.data(), d, l, n);
        double c = 0.0;
        for (size_t px = 0; px < n; ++px) {
            double norm = 0.0;
            for (size_t dd = 0; dd < d; ++dd) norm += xp[dd * n + px] * xp[dd * n + px];
            c = std::max(c, norm);
        }
        c = std::sqrt(c);
        yp.assign(r * n, c);
        for (size_t dd = 0; dd < d; ++dd)
            std::copy(xp.begin() + dd * n, xp.begin() + (dd + 1) * n, yp.begin() + dd * n);
    }

    // iterative orthogonal-projection vertex search
    Rng rng(seed);
    std::vector<double> a(r * r, 0.0);  // columns: projected endmembers found so far
    a[(r - 1) * r + 0] = 1.0;
    std::vector<size_t> indices(r, 0);
    std::vector<double> f(r), w(r);
    for (size_t it = 0; it < r; ++it) {
        for (double& v : w) v = rng.gaussian();
        // f = (I - A pinv(A)) w restricted to the filled columns: subtract the
        // projection onto span(filled columns) via normal equations
        const size_t cols = std::max<size_t>(it, 1);
        std::vector<double> at_a(cols * cols, 0.0), at_w(cols, 0.0);
        for (size_t c1 = 0; c1 < cols; ++c1) {
            for (size_t c2 = 0; c2 < cols; ++c2) {
                double s = 0.0;
                for (size_t i = 0; i < r; ++i) s += a[i * r + c1] * a[i * r + c2];
                at_a[c1 * cols + c2] = s;
            }
            double s = 0.0;
            for (size_t i = 0; i < r; ++i) s += a[i * r + c1] * w[i];
            at_w[c1] = s;
        }
        // tiny ridge keeps the solve well-posed when columns repeat
        for (size_t c1 = 0; c1 < cols; ++c1) at_a[c1 * cols + c1] += 1e-12;
        std::vector<double> coef;
        {
            std::vector<double> m(at_a), rhs(at_w);
            coef = linalg::qr_solve(m, rhs, cols, cols);
        }
        for (size_t i = 0; i < r; ++i) {
            double proj = 0.0;
            for (size_t c1 = 0; c1 < cols; ++c1) proj += a[i * r + c1] * coef[c1];
            f[i] = w[i] - proj;
        }
        double fnorm = 0.0;
        for (double v : f) fnorm += v * v;
        fnorm = std::sqrt(fnorm);
        require(fnorm > 1e-150, "vca: degenerate projection direction");
        for (double& v : f) v /= fnorm;

        size_t best = 0;
        double bestmag = -1.0;
        for (size_t px = 0; px < n; ++px) {
            double proj = 0.0;
            for (size_t d = 0; d < r; ++d) proj += f[d] * yp[d * n + px];
            if (std::abs(proj) > bestmag) {
                bestmag = std::abs(proj);
                best = px;
            }
        }
        indices[it] = best;
        for (size_t d = 0; d < r; ++d) a[d * r + it] = yp[d * n + best];
    }

    EndmemberMatrix e(l, r);
    for (size_t c = 0; c < r; ++c)
        for (size_t b = 0; b < l; ++b) e.at(b, c) = std::max(0.0, y[b * n + indices[c]]);
    return e;
}

// ---------------------------------------------------------------------------
// FCLSU

struct FclsuSettings {
    size_t max_iter = 500;
    double tol = 1e-10;
    double asc_penalty = 1e-5;  // delta; ASC row is weighted by 1/delta

    void validate() const {
        require(max_iter > 0 && tol > 0.0 && asc_penalty > 0.0,
                "FclsuSettings: values must be positive");
    }
};

// Per-pixel fully constrained least squares: min ||y - E a|| s.t. a >= 0, sum a = 1.
// ASC enforced by row augmentation, ANC by active-set NNLS; the solution is then
// normalized to sum exactly one.
inline AbundanceTensor fclsu(const SpectralCube& cube, const EndmemberMatrix& e,
                             const FclsuSettings& settings = {}) {
    cube.validate();
    e.validate();
    settings.validate();
    require(cube.bands == e.bands, "fclsu: band mismatch");
    require(e.count >= 1, "fclsu: empty endmember matrix");

    const size_t l = cube.bands, p = e.count, n = cube.pixels();
    const size_t m = l + 1;
    const double wgt = 1.0 / settings.asc_penalty;

    // augmented system rows: [E; wgt * 1^T], row-major m x p
    std::vector<double> aug(m * p);
    for (size_t b = 0; b < l; ++b)
        for (size_t c = 0; c < p; ++c) aug[b * p + c] = e.at(b, c);
    for (size_t c = 0; c < p; ++c) aug[l * p + c] = wgt;

    AbundanceTensor out(p, cube.height, cube.width);
    std::vector<double> b(m), x;
    std::vector<size_t> failed;
    for (size_t px = 0; px < n; ++px) {
        for (size_t bb = 0; bb < l; ++bb) b[bb] = cube.data[bb * n + px];
        b[l] = wgt;
        if (!linalg::nnls(aug, b, m, p, x, settings.max_iter, settings.tol)) {
            failed.push_back(px);
            continue;
        }
        double s = std::accumulate(x.begin(), x.end(), 0.0);
        require(s > 0.0, "fclsu: degenerate all-zero solution");
        for (size_t c = 0; c < p; ++c) out.data[c * n + px] = x[c] / s;
    }
    if (!failed.empty())
        throw error("fclsu: NNLS failed to converge for " + std::to_string(failed.size()) +
                    " pixel(s), first at linear index " + std::to_string(failed[0]));
    return out;
}

// ||y - E a||^2 for one pixel; the objective FCLSU minimizes over the simplex.
inline double fclsu_objective(const SpectralCube& cube, const EndmemberMatrix& e, size_t px,
                              const std::vector<double>& a) {
    const size_t n = cube.pixels();
    double obj = 0.0;
    for (size_t b = 0; b < cube.bands; ++b) {
        double fit = 0.0;
        for (size_t c = 0; c < e.count; ++c) fit += e.at(b, c) * a[c];
        const double d = cube.data[b * n + px] - fit;
        obj += d * d;
    }
    return obj;
}

}  // namespace wsnet
