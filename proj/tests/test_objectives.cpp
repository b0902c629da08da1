#include <catch2/catch.hpp>

#include "wsnet/objectives.hpp"

using namespace wsnet;
using ad::Tensor;

namespace {

Tensor random_spectra(size_t l, size_t n, std::uint64_t seed, bool grad = false) {
    Rng rng(seed);
    std::vector<double> v(l * n);
    for (auto& x : v) x = rng.uniform(0.05, 1.0);
    return Tensor::leaf({l, n}, std::move(v), grad);
}

}  // namespace

TEST_CASE("loss_rmse: identity, constant offset, direct formula") {
    auto y = random_spectra(3, 4, 1);
    REQUIRE(loss_rmse(y, y).item() == 0.0);

    auto shifted = ad::add_scalar(y, 0.1);
    REQUIRE(loss_rmse(y, shifted).item() == Approx(0.1).margin(1e-12));

    auto yh = random_spectra(3, 4, 2);
    double acc = 0.0;
    for (size_t k = 0; k < y.numel(); ++k) {
        const double d = yh.value()[k] - y.value()[k];
        acc += d * d;
    }
    REQUIRE(loss_rmse(y, yh).item() ==
            Approx(std::sqrt(acc / static_cast<double>(y.numel()))).margin(1e-12));
}

TEST_CASE("loss_sad: collinear, orthogonal, and 45-degree spectra") {
    auto y = random_spectra(5, 3, 3);
    REQUIRE(loss_sad(y, ad::scale(y, 2.0)).item() == Approx(0.0).margin(1e-6));

    auto a = Tensor::leaf({2, 1}, {1.0, 0.0});
    auto b = Tensor::leaf({2, 1}, {0.0, 1.0});
    REQUIRE(loss_sad(a, b).item() == Approx(M_PI / 2).margin(1e-9));

    auto c = Tensor::leaf({2, 1}, {1.0, 1.0});
    REQUIRE(loss_sad(a, c).item() == Approx(M_PI / 4).margin(1e-9));
}

TEST_CASE("loss_kl: identity, scale invariance, reference value") {
    auto y = random_spectra(7, 5, 4);
    REQUIRE(loss_kl(y, y).item() == Approx(0.0).margin(1e-9));
    REQUIRE(loss_kl(y, ad::scale(y, 3.7)).item() == Approx(0.0).margin(1e-7));

    // P = (0.5, 0.5), Q = (0.25, 0.75) -> 0.5 ln 2 + 0.5 ln(2/3)
    auto p = Tensor::leaf({2, 1}, {0.5, 0.5});
    auto q = Tensor::leaf({2, 1}, {0.25, 0.75});
    const double expect = 0.5 * std::log(2.0) + 0.5 * std::log(2.0 / 3.0);
    REQUIRE(loss_kl(p, q).item() == Approx(expect).margin(1e-6));
    REQUIRE(expect == Approx(0.14384).margin(1e-5));
}

TEST_CASE("loss_kl is nonnegative on random pairs") {
    for (std::uint64_t s = 0; s < 20; ++s) {
        auto y = random_spectra(11, 6, 100 + s);
        auto q = random_spectra(11, 6, 200 + s);
        REQUIRE(loss_kl(y, q).item() >= -1e-12);
    }
}

TEST_CASE("total_loss: weight selection and component sum") {
    auto y = random_spectra(4, 6, 5);
    auto yh = random_spectra(4, 6, 6);
    REQUIRE(total_loss(y, yh, LossWeights{1.0, 0.0, 0.0}).item() ==
            Approx(loss_rmse(y, yh).item()).margin(1e-15));
    REQUIRE(total_loss(y, y, LossWeights{0.7, 0.2, 0.1}).item() == Approx(0.0).margin(1e-7));
    const double sum3 =
        loss_rmse(y, yh).item() + loss_sad(y, yh).item() + loss_kl(y, yh).item();
    REQUIRE(total_loss(y, yh, LossWeights{1.0, 1.0, 1.0}).item() ==
            Approx(sum3).margin(1e-12));
    REQUIRE_THROWS_AS(total_loss(y, yh, LossWeights{0.0, 0.0, 0.0}), error);
}

TEST_CASE("total_loss gradients pass a finite-difference check at 1e-5") {
    auto y = random_spectra(5, 4, 7);
    auto yh = random_spectra(5, 4, 8, true);
    auto f = [&] { return total_loss(y, yh, LossWeights{1.0, 0.5, 0.25}); };
    REQUIRE(ad::grad_check(f, {yh}, 1e-5, 200, 11) < 1e-5);
}

TEST_CASE("loss_sad and metric_endmember_sad are scale invariant") {
    auto y = random_spectra(9, 5, 9);
    auto scaled = ad::scale(y, 5.0);
    REQUIRE(std::abs(loss_sad(y, scaled).item()) < 1e-7);

    EndmemberMatrix e(6, 3);
    Rng rng(10);
    for (auto& v : e.data) v = rng.uniform(0.1, 1.0);
    EndmemberMatrix e3 = e;
    for (auto& v : e3.data) v *= 3.0;
    auto sad = metric_endmember_sad(e, e3);
    for (double v : sad.per_endmember) REQUIRE(std::abs(v) < 1e-7);
}

TEST_CASE("metric_abundance_rmse: identity, direct formula, pooled vs mean") {
    AbundanceTensor t(2, 2, 2);
    t.data = {0.2, 0.4, 0.6, 0.8, 0.8, 0.6, 0.4, 0.2};
    auto zero = metric_abundance_rmse(t, t);
    for (double v : zero.per_endmember) REQUIRE(v == 0.0);
    REQUIRE(zero.mean == 0.0);

    AbundanceTensor u = t;
    for (auto& v : u.data) v += 0.05;
    auto rm = metric_abundance_rmse(t, u);
    for (double v : rm.per_endmember) REQUIRE(v == Approx(0.05).margin(1e-12));
    REQUIRE(rm.mean == Approx(0.05).margin(1e-12));
    REQUIRE(rm.pooled == Approx(0.05).margin(1e-12));

    // direct formula on a random pair
    Rng rng(11);
    AbundanceTensor a(2, 2, 2), b(2, 2, 2);
    for (auto& v : a.data) v = rng.uniform(0.0, 1.0);
    for (auto& v : b.data) v = rng.uniform(0.0, 1.0);
    auto rm2 = metric_abundance_rmse(a, b);
    for (size_t r = 0; r < 2; ++r) {
        double acc = 0.0;
        for (size_t px = 0; px < 4; ++px) {
            const double d = b.data[r * 4 + px] - a.data[r * 4 + px];
            acc += d * d;
        }
        REQUIRE(rm2.per_endmember[r] == Approx(std::sqrt(acc / 4.0)).margin(1e-12));
    }
}

TEST_CASE("metric_endmember_sad: identity and orthogonality") {
    EndmemberMatrix e(4, 2);
    e.data = {1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0};
    auto same = metric_endmember_sad(e, e);
    for (double v : same.per_endmember) REQUIRE(v == Approx(0.0).margin(1e-12));
    EndmemberMatrix swapped(4, 2);
    swapped.data = {0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0};
    auto ortho = metric_endmember_sad(e, swapped);
    for (double v : ortho.per_endmember) REQUIRE(v == Approx(M_PI / 2).margin(1e-12));
}

namespace {

EndmemberMatrix random_e(size_t l, size_t p, std::uint64_t seed) {
    Rng rng(seed);
    EndmemberMatrix e(l, p);
    for (auto& v : e.data) v = rng.uniform(0.05, 1.0);
    return e;
}

}  // namespace

TEST_CASE("align_endmembers: identity, swap, and a known shuffle") {
    auto e = random_e(8, 4, 20);
    AbundanceTensor a(4, 2, 2);
    for (size_t px = 0; px < 4; ++px)
        for (size_t r = 0; r < 4; ++r) a.data[r * 4 + px] = 0.25;

    auto ident = align_endmembers(e, e, a);
    REQUIRE(ident.permutation == std::vector<size_t>{0, 1, 2, 3});

    // apply a known shuffle and require recovery
    const std::vector<size_t> shuffle = {2, 0, 3, 1};  // est[k] = true[shuffle[k]]
    EndmemberMatrix shuffled(8, 4);
    AbundanceTensor shuffled_a(4, 2, 2);
    for (size_t k = 0; k < 4; ++k) {
        std::copy(e.column(shuffle[k]), e.column(shuffle[k]) + 8, shuffled.column(k));
        for (size_t px = 0; px < 4; ++px)
            shuffled_a.data[k * 4 + px] = static_cast<double>(shuffle[k]);
    }
    auto fixed = align_endmembers(e, shuffled, shuffled_a);
    for (size_t r = 0; r < 4; ++r) {
        REQUIRE(fixed.endmembers.column_vec(r) == e.column_vec(r));
        REQUIRE(fixed.abundances.data[r * 4] == Approx(static_cast<double>(r)));
    }

    // brute-force oracle: exhaustively verify the chosen permutation is optimal
    auto est = random_e(8, 4, 21);
    auto perm = align_endmembers_perm(e, est);
    std::vector<size_t> idx = {0, 1, 2, 3};
    double best = std::numeric_limits<double>::infinity();
    do {
        double c = 0.0;
        for (size_t i = 0; i < 4; ++i)
            c += spectral_angle(e.column(i), est.column(idx[i]), 8);
        best = std::min(best, c);
    } while (std::next_permutation(idx.begin(), idx.end()));
    double got = 0.0;
    for (size_t i = 0; i < 4; ++i) got += spectral_angle(e.column(i), est.column(perm[i]), 8);
    REQUIRE(got == Approx(best).margin(1e-12));
}

TEST_CASE("align_endmembers beats random permutations") {
    auto e = random_e(10, 5, 30);
    auto est = random_e(10, 5, 31);
    auto perm = align_endmembers_perm(e, est);
    double aligned_cost = 0.0;
    for (size_t i = 0; i < 5; ++i)
        aligned_cost += spectral_angle(e.column(i), est.column(perm[i]), 10);
    Rng rng(32);
    std::vector<size_t> idx = {0, 1, 2, 3, 4};
    for (int trial = 0; trial < 100; ++trial) {
        for (size_t k = idx.size(); k > 1; --k) std::swap(idx[k - 1], idx[rng.index(k)]);
        double c = 0.0;
        for (size_t i = 0; i < 5; ++i) c += spectral_angle(e.column(i), est.column(idx[i]), 10);
        REQUIRE(aligned_cost <= c + 1e-12);
    }
}
