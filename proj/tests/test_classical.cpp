#include <catch2/catch.hpp>

#include "wsnet/classical.hpp"
#include "wsnet/objectives.hpp"

using namespace wsnet;

namespace {

EndmemberMatrix random_e(size_t l, size_t p, std::uint64_t seed, double lo = 0.05,
                         double hi = 1.0) {
    Rng rng(seed);
    EndmemberMatrix e(l, p);
    for (auto& v : e.data) v = rng.uniform(lo, hi);
    return e;
}

AbundanceTensor random_simplex(size_t p, size_t h, size_t w, std::uint64_t seed) {
    Rng rng(seed);
    AbundanceTensor a(p, h, w);
    const size_t n = h * w;
    for (size_t px = 0; px < n; ++px) {
        double total = 0.0;
        std::vector<double> x(p);
        for (auto& v : x) {
            v = -std::log(rng.uniform01_open0());
            total += v;
        }
        for (size_t r = 0; r < p; ++r) a.data[r * n + px] = x[r] / total;
    }
    return a;
}

// scene with one guaranteed pure pixel per endmember
SpectralCube pure_pixel_scene(const EndmemberMatrix& e, size_t h, size_t w, std::uint64_t seed,
                              AbundanceTensor* a_out = nullptr) {
    auto a = random_simplex(e.count, h, w, seed);
    const size_t n = h * w;
    for (size_t r = 0; r < e.count; ++r) {
        const size_t px = r;  // first P pixels are pure
        for (size_t q = 0; q < e.count; ++q) a.data[q * n + px] = (q == r) ? 1.0 : 0.0;
    }
    if (a_out) *a_out = a;
    return linear_mix(e, a);
}

}  // namespace

TEST_CASE("qr_solve matches a hand-checked least squares solution") {
    // A = [[1,0],[0,1],[1,1]], b = [1,2,2]; normal equations give x = (2/3, 5/3)... compute:
    // A^T A = [[2,1],[1,2]], A^T b = [3,4] -> x = (2/3, 5/3)
    std::vector<double> a = {1, 0, 0, 1, 1, 1};
    std::vector<double> b = {1, 2, 2};
    auto x = linalg::qr_solve(a, b, 3, 2);
    REQUIRE(x[0] == Approx(2.0 / 3.0).margin(1e-12));
    REQUIRE(x[1] == Approx(5.0 / 3.0).margin(1e-12));
}

TEST_CASE("nnls: clamps a negative unconstrained solution to the boundary") {
    // minimize ||A x - b|| with solution forced to x2 = 0
    std::vector<double> a = {1, 1, 0, 1, 0, 0};  // 3x2: rows (1,1),(0,1),(0,0)
    std::vector<double> b = {1, -2, 0};
    std::vector<double> x;
    REQUIRE(linalg::nnls(a, b, 3, 2, x, 100, 1e-12));
    REQUIRE(x[1] == 0.0);
    REQUIRE(x[0] == Approx(1.0).margin(1e-10));
}

TEST_CASE("fclsu: orthonormal endmembers recover a one-hot pixel") {
    EndmemberMatrix e(3, 3);
    for (size_t r = 0; r < 3; ++r) e.at(r, r) = 1.0;
    AbundanceTensor a(3, 1, 1);
    a.data = {0.0, 1.0, 0.0};
    auto cube = linear_mix(e, a);
    auto rec = fclsu(cube, e);
    REQUIRE(rec.data[0] == Approx(0.0).margin(1e-9));
    REQUIRE(rec.data[1] == Approx(1.0).margin(1e-9));
    REQUIRE(rec.data[2] == Approx(0.0).margin(1e-9));
}

TEST_CASE("fclsu: noiseless forward model is inverted to 1e-6") {
    auto e = random_e(30, 3, 77);
    auto a = random_simplex(3, 8, 8, 78);
    auto cube = linear_mix(e, a);
    auto rec = fclsu(cube, e);
    double mx = 0.0;
    for (size_t k = 0; k < a.data.size(); ++k)
        mx = std::max(mx, std::abs(rec.data[k] - a.data[k]));
    REQUIRE(mx < 1e-6);
}

TEST_CASE("fclsu: ANC exact and ASC within 1e-9 on noisy data") {
    auto e = random_e(20, 4, 80);
    auto a = random_simplex(4, 6, 6, 81);
    auto cube = add_noise_snr(linear_mix(e, a), NoiseSpec{15.0, 5});
    auto rec = fclsu(cube, e);
    const size_t n = rec.pixels();
    for (double v : rec.data) REQUIRE(v >= 0.0);
    for (size_t px = 0; px < n; ++px) {
        double s = 0.0;
        for (size_t r = 0; r < 4; ++r) s += rec.data[r * n + px];
        REQUIRE(s == Approx(1.0).margin(1e-9));
    }
}

TEST_CASE("fclsu: off-simplex pixel lands on the boundary and beats a grid search") {
    // y far outside the simplex cone -> at least one active zero
    EndmemberMatrix e(4, 3);
    Rng rng(82);
    for (auto& v : e.data) v = rng.uniform(0.1, 1.0);
    SpectralCube cube(4, 1, 1);
    // a spectrum close to endmember 0 minus endmember 1 direction
    for (size_t b = 0; b < 4; ++b)
        cube.data[b] = std::max(0.0, e.at(b, 0) - 0.8 * e.at(b, 1));
    auto rec = fclsu(cube, e);
    size_t zeros = 0;
    for (size_t r = 0; r < 3; ++r)
        if (rec.data[r] < 1e-9) ++zeros;
    REQUIRE(zeros >= 1);

    // dense simplex grid at step 1e-3 cannot do better (up to tolerance)
    std::vector<double> sol = {rec.data[0], rec.data[1], rec.data[2]};
    const double ours = fclsu_objective(cube, e, 0, sol);
    double grid_best = std::numeric_limits<double>::infinity();
    const int steps = 1000;
    for (int i = 0; i <= steps; ++i)
        for (int j = 0; j <= steps - i; ++j) {
            const double a0 = i / 1000.0, a1 = j / 1000.0, a2 = 1.0 - a0 - a1;
            grid_best = std::min(grid_best,
                                 fclsu_objective(cube, e, 0, {a0, a1, a2}));
        }
    REQUIRE(ours <= grid_best + 1e-9);
}

TEST_CASE("fclsu objective beats 1000 random simplex points per pixel") {
    auto e = random_e(15, 3, 90);
    auto a = random_simplex(3, 2, 2, 91);
    auto cube = add_noise_snr(linear_mix(e, a), NoiseSpec{10.0, 7});
    auto rec = fclsu(cube, e);
    Rng rng(92);
    const size_t n = cube.pixels();
    for (size_t px = 0; px < n; ++px) {
        std::vector<double> sol(3);
        for (size_t r = 0; r < 3; ++r) sol[r] = rec.data[r * n + px];
        const double ours = fclsu_objective(cube, e, px, sol);
        for (int t = 0; t < 1000; ++t) {
            std::vector<double> cand(3);
            double total = 0.0;
            for (auto& v : cand) {
                v = -std::log(rng.uniform01_open0());
                total += v;
            }
            for (auto& v : cand) v /= total;
            REQUIRE(ours <= fclsu_objective(cube, e, px, cand) + 1e-9);
        }
    }
}

TEST_CASE("fclsu: zero max_iter reports non-convergence") {
    auto e = random_e(6, 3, 95);
    auto a = random_simplex(3, 2, 2, 96);
    auto cube = linear_mix(e, a);
    FclsuSettings s;
    s.max_iter = 0;
    REQUIRE_THROWS_AS(fclsu(cube, e, s), error);
}

TEST_CASE("vca: pure-pixel scene is recovered to SAD < 1e-6") {
    auto e = random_e(24, 4, 100);
    auto cube = pure_pixel_scene(e, 8, 8, 101);
    auto est = vca(cube, 4, 1);
    auto perm = align_endmembers_perm(e, est);
    for (size_t r = 0; r < 4; ++r)
        REQUIRE(spectral_angle(e.column(r), est.column(perm[r]), 24) < 1e-6);
}

TEST_CASE("vca returns actual pixel spectra from the cube") {
    auto e = random_e(12, 3, 110);
    auto cube = pure_pixel_scene(e, 5, 5, 111);
    auto est = vca(cube, 3, 2);
    const size_t n = cube.pixels();
    for (size_t c = 0; c < 3; ++c) {
        bool found = false;
        for (size_t px = 0; px < n && !found; ++px) {
            bool same = true;
            for (size_t b = 0; b < 12 && same; ++b)
                same = (cube.data[b * n + px] == est.at(b, c));
            found = same;
        }
        REQUIRE(found);
    }
}

TEST_CASE("vca: R=1 picks the largest-projection pixel") {
    auto e = random_e(10, 1, 120);
    AbundanceTensor a(1, 3, 3);
    for (auto& v : a.data) v = 1.0;
    auto cube = linear_mix(e, a);
    // scale one pixel spectrum up so it dominates
    const size_t n = cube.pixels();
    for (size_t b = 0; b < 10; ++b) cube.data[b * n + 4] *= 1.5;
    auto est = vca(cube, 1, 3);
    for (size_t b = 0; b < 10; ++b) REQUIRE(est.at(b, 0) == cube.data[b * n + 4]);
}

TEST_CASE("vca is deterministic per seed") {
    auto e = random_e(16, 3, 130);
    auto cube = add_noise_snr(pure_pixel_scene(e, 6, 6, 131), NoiseSpec{25.0, 9});
    auto e1 = vca(cube, 3, 42);
    auto e2 = vca(cube, 3, 42);
    REQUIRE(e1.data == e2.data);
}

TEST_CASE("vca rejects impossible R") {
    auto e = random_e(5, 2, 140);
    auto a = random_simplex(2, 2, 2, 141);
    auto cube = linear_mix(e, a);
    REQUIRE_THROWS_AS(vca(cube, 6, 0), error);
}
