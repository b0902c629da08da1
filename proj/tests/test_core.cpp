#include <catch2/catch.hpp>

#include "wsnet/core.hpp"

using namespace wsnet;

namespace {

SpectralCube triple_loop_mix(const EndmemberMatrix& e, const AbundanceTensor& a) {
    SpectralCube out(e.bands, a.height, a.width);
    for (size_t l = 0; l < e.bands; ++l)
        for (size_t i = 0; i < a.height; ++i)
            for (size_t j = 0; j < a.width; ++j) {
                double s = 0.0;
                for (size_t r = 0; r < e.count; ++r) s += e.at(l, r) * a.at(r, i, j);
                out.at(l, i, j) = s;
            }
    return out;
}

AbundanceTensor random_simplex_abundances(size_t p, size_t h, size_t w, std::uint64_t seed) {
    Rng rng(seed);
    AbundanceTensor a(p, h, w);
    for (size_t i = 0; i < h; ++i)
        for (size_t j = 0; j < w; ++j) {
            double total = 0.0;
            std::vector<double> x(p);
            for (auto& v : x) {
                v = -std::log(rng.uniform01_open0());
                total += v;
            }
            for (size_t r = 0; r < p; ++r) a.at(r, i, j) = x[r] / total;
        }
    return a;
}

EndmemberMatrix random_endmembers(size_t l, size_t p, std::uint64_t seed) {
    Rng rng(seed);
    EndmemberMatrix e(l, p);
    for (auto& v : e.data) v = rng.uniform(0.05, 1.0);
    return e;
}

}  // namespace

TEST_CASE("linear_mix: one-hot abundances pick out a column") {
    auto e = random_endmembers(5, 3, 11);
    AbundanceTensor a(3, 2, 2);
    for (size_t px = 0; px < 4; ++px) a.data[1 * 4 + px] = 1.0;  // endmember 1 everywhere
    auto cube = linear_mix(e, a);
    for (size_t l = 0; l < 5; ++l)
        for (size_t px = 0; px < 4; ++px)
            REQUIRE(cube.data[l * 4 + px] == Approx(e.at(l, 1)).margin(0));
}

TEST_CASE("linear_mix: equal mixture of two columns is their mean") {
    auto e = random_endmembers(6, 2, 5);
    AbundanceTensor a(2, 3, 3);
    for (size_t r = 0; r < 2; ++r)
        for (size_t px = 0; px < 9; ++px) a.data[r * 9 + px] = 0.5;
    auto cube = linear_mix(e, a);
    for (size_t l = 0; l < 6; ++l)
        REQUIRE(cube.data[l * 9 + 4] == Approx(0.5 * (e.at(l, 0) + e.at(l, 1))).epsilon(1e-15));
}

TEST_CASE("linear_mix matches the naive triple-loop oracle") {
    auto e = random_endmembers(6, 3, 42);
    auto a = random_simplex_abundances(3, 4, 4, 43);
    auto fast = linear_mix(e, a);
    auto slow = triple_loop_mix(e, a);
    for (size_t k = 0; k < fast.data.size(); ++k)
        REQUIRE(fast.data[k] == Approx(slow.data[k]).margin(1e-12));
}

TEST_CASE("linear_mix is linear in the abundances") {
    auto e = random_endmembers(7, 4, 1);
    auto a1 = random_simplex_abundances(4, 3, 5, 2);
    auto a2 = random_simplex_abundances(4, 3, 5, 3);
    const double lam = 0.3;
    AbundanceTensor mixab(4, 3, 5);
    for (size_t k = 0; k < mixab.data.size(); ++k)
        mixab.data[k] = lam * a1.data[k] + (1.0 - lam) * a2.data[k];
    auto lhs = linear_mix(e, mixab);
    auto c1 = linear_mix(e, a1);
    auto c2 = linear_mix(e, a2);
    for (size_t k = 0; k < lhs.data.size(); ++k)
        REQUIRE(lhs.data[k] == Approx(lam * c1.data[k] + (1.0 - lam) * c2.data[k]).margin(1e-12));
}

TEST_CASE("linear_mix rejects constraint violations") {
    auto e = random_endmembers(4, 2, 9);
    AbundanceTensor bad(2, 1, 1);
    bad.data = {0.7, 0.7};  // sums to 1.4
    REQUIRE_THROWS_AS(linear_mix(e, bad), error);
    AbundanceTensor neg(2, 1, 1);
    neg.data = {-0.1, 1.1};
    REQUIRE_THROWS_AS(linear_mix(e, neg), error);
    AbundanceTensor ok(3, 1, 1);
    ok.data = {0.2, 0.3, 0.5};
    REQUIRE_THROWS_AS(linear_mix(e, ok), error);  // count mismatch
}

TEST_CASE("add_noise_snr: none passes through untouched") {
    auto e = random_endmembers(4, 2, 7);
    auto a = random_simplex_abundances(2, 3, 3, 8);
    auto cube = linear_mix(e, a);
    auto out = add_noise_snr(cube, NoiseSpec{std::nullopt, 99});
    REQUIRE(out.data == cube.data);
}

TEST_CASE("add_noise_snr: target 10 dB sets noise variance to signal_power/10") {
    SpectralCube cube(2, 4, 4);
    for (size_t k = 0; k < cube.data.size(); ++k) cube.data[k] = 0.5;
    const double p = signal_power(cube);
    REQUIRE(p == Approx(0.25));
    // variance used for sampling is p / 10^(10/10)
    REQUIRE(p / std::pow(10.0, 1.0) == Approx(0.025));
}

TEST_CASE("add_noise_snr: realized SNR on a large cube is within 0.1 dB") {
    auto e = random_endmembers(459, 4, 21);
    auto a = random_simplex_abundances(4, 80, 80, 22);
    auto cube = linear_mix(e, a);
    auto noisy = add_noise_snr(cube, NoiseSpec{20.0, 1234});
    REQUIRE(measured_snr_db(cube, noisy) == Approx(20.0).margin(0.1));
}

TEST_CASE("add_noise_snr is deterministic per seed") {
    auto e = random_endmembers(10, 3, 31);
    auto a = random_simplex_abundances(3, 6, 6, 32);
    auto cube = linear_mix(e, a);
    auto n1 = add_noise_snr(cube, NoiseSpec{15.0, 77});
    auto n2 = add_noise_snr(cube, NoiseSpec{15.0, 77});
    REQUIRE(n1.data == n2.data);  // bitwise
    auto n3 = add_noise_snr(cube, NoiseSpec{15.0, 78});
    REQUIRE(n1.data != n3.data);
}

TEST_CASE("classify_weak_endmembers: spectral and spatial conditions") {
    const size_t l = 100, npx = 100;
    EndmemberMatrix e(l, 3);
    AbundanceTensor a(3, 10, 10);
    // endmember 0: dark in 71% of bands, abundant -> weak via spectral test
    for (size_t b = 0; b < l; ++b) e.at(b, 0) = b < 71 ? 0.05 : 0.5;
    // endmember 1: bright everywhere, abundant -> not weak
    for (size_t b = 0; b < l; ++b) e.at(b, 1) = 0.5;
    // endmember 2: bright but nearly absent -> weak via spatial test
    for (size_t b = 0; b < l; ++b) e.at(b, 2) = 0.6;
    for (size_t px = 0; px < npx; ++px) {
        a.data[0 * npx + px] = 0.45;
        a.data[1 * npx + px] = px < 30 ? 0.55 - 0.02 : 0.53;
        a.data[2 * npx + px] = px < 30 ? 0.02 : 0.02;
    }
    // normalize pixel sums to 1 exactly
    for (size_t px = 0; px < npx; ++px) {
        double s = 0.0;
        for (size_t r = 0; r < 3; ++r) s += a.data[r * npx + px];
        for (size_t r = 0; r < 3; ++r) a.data[r * npx + px] /= s;
    }
    auto weak = classify_weak_endmembers(e, a);
    REQUIRE(weak == std::vector<size_t>{0, 2});
}

TEST_CASE("classify_weak_endmembers: constant 0.5 everywhere is not weak") {
    EndmemberMatrix e(20, 2);
    for (auto& v : e.data) v = 0.5;
    AbundanceTensor a(2, 4, 4);
    for (auto& v : a.data) v = 0.5;
    auto weak = classify_weak_endmembers(e, a);
    REQUIRE(weak.empty());
}

TEST_CASE("partition_endmembers: empty and full partitions") {
    auto e = random_endmembers(6, 4, 51);
    auto a = random_simplex_abundances(4, 3, 3, 52);
    auto none = partition_endmembers(e, a, {});
    REQUIRE(none.weak_e.count == 0);
    REQUIRE(none.strong_e.count == 4);
    REQUIRE(none.strong_e.data == e.data);
    auto all = partition_endmembers(e, a, {0, 1, 2, 3});
    REQUIRE(all.strong_e.count == 0);
    REQUIRE(all.weak_e.count == 4);
}

TEST_CASE("partition_endmembers: partial mixes sum to the full mix") {
    auto e = random_endmembers(8, 4, 61);
    auto a = random_simplex_abundances(4, 4, 5, 62);
    auto full = linear_mix(e, a);
    auto part = partition_endmembers(e, a, {1, 3});
    auto strong = partial_mix(part.strong_e, part.strong_a);
    auto weak = partial_mix(part.weak_e, part.weak_a);
    for (size_t k = 0; k < full.data.size(); ++k)
        REQUIRE(strong.data[k] + weak.data[k] == Approx(full.data[k]).margin(1e-12));
}

TEST_CASE("partition_endmembers rejects out-of-range indices") {
    auto e = random_endmembers(4, 3, 71);
    auto a = random_simplex_abundances(3, 2, 2, 72);
    REQUIRE_THROWS_AS(partition_endmembers(e, a, {5}), error);
}
