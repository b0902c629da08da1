#pragma once

#include <algorithm>
#include <numeric>
#include <vector>

#include "wsnet/autodiff.hpp"
#include "wsnet/core.hpp"

// Training losses (RMSE, SAD, KL over spectra) on autodiff tensors, and plain
// evaluation metrics (abundance RMSE, endmember SAD) with optimal column alignment.
// Loss tensors are (L, N): one column per pixel spectrum.

namespace wsnet {

struct LossWeights {
    double alpha = 1.0;  // RMSE
    double beta = 0.1;   // SAD
    double gamma = 0.05; // KL

    void validate() const {
        for (double w : {alpha, beta, gamma})
            require(std::isfinite(w) && w >= 0.0, "LossWeights: weights must be finite and >= 0");
        require(alpha + beta + gamma > 0.0, "LossWeights: at least one weight must be nonzero");
    }
};

inline void check_same_shape(const ad::Tensor& y, const ad::Tensor& yhat, const char* what) {
    require(y.shape() == yhat.shape(), std::string(what) + ": shape mismatch");
}

// sqrt of the mean squared difference over all entries
inline ad::Tensor loss_rmse(const ad::Tensor& y, const ad::Tensor& yhat) {
    check_same_shape(y, yhat, "loss_rmse");
    ad::Tensor d = ad::sub(yhat, y);
    return ad::sqrt(ad::mean_all(ad::mul(d, d)));
}

// mean over pixels of the angle between per-pixel spectra (columns of (L,N))
inline ad::Tensor loss_sad(const ad::Tensor& y, const ad::Tensor& yhat) {
    check_same_shape(y, yhat, "loss_sad");
    require(y.shape().size() == 2, "loss_sad: (L,N) tensors required");
    const double tiny = 1e-24;  // keeps norms differentiable at zero spectra
    ad::Tensor dot = ad::sum(ad::mul(y, yhat), 0);
    ad::Tensor ny = ad::sqrt(ad::add_scalar(ad::sum(ad::mul(y, y), 0), tiny));
    ad::Tensor nyh = ad::sqrt(ad::add_scalar(ad::sum(ad::mul(yhat, yhat), 0), tiny));
    ad::Tensor cosang = ad::div(dot, ad::mul(ny, nyh));
    return ad::mean_all(ad::arccos_safe(cosang));
}

// mean over pixels of D_KL(P(y) || P(yhat)) on eps-regularized per-pixel
// spectral distributions; eps enters both the normalization and the logs.
inline ad::Tensor loss_kl(const ad::Tensor& y, const ad::Tensor& yhat, double eps = 1e-8) {
    check_same_shape(y, yhat, "loss_kl");
    require(y.shape().size() == 2, "loss_kl: (L,N) tensors required");
    auto normalized = [&](const ad::Tensor& t) {
        ad::Tensor shifted = ad::add_scalar(ad::clamp_min(t, 0.0), eps);
        return ad::div(shifted, ad::sum(shifted, 0));
    };
    ad::Tensor p = normalized(y);
    ad::Tensor q = normalized(yhat);
    ad::Tensor logdiff = ad::sub(ad::log_eps(p, eps), ad::log_eps(q, eps));
    return ad::mean_all(ad::sum(ad::mul(p, logdiff), 0));
}

inline ad::Tensor total_loss(const ad::Tensor& y, const ad::Tensor& yhat, const LossWeights& w) {
    w.validate();
    ad::Tensor loss = ad::scale(loss_rmse(y, yhat), w.alpha);
    loss = ad::add(loss, ad::scale(loss_sad(y, yhat), w.beta));
    return ad::add(loss, ad::scale(loss_kl(y, yhat), w.gamma));
}

// ---------------------------------------------------------------------------
// evaluation metrics (plain doubles; inputs assumed aligned)

struct AbundanceRmse {
    std::vector<double> per_endmember;  // RMSE over H*W entries per endmember
    double mean = 0.0;                  // arithmetic mean of per-endmember RMSEs
    double pooled = 0.0;                // sqrt(1/(R*H*W) * sum of all squared errors)
};

inline AbundanceRmse metric_abundance_rmse(const AbundanceTensor& truth,
                                           const AbundanceTensor& est) {
    require(truth.count == est.count && truth.height == est.height && truth.width == est.width,
            "metric_abundance_rmse: shape mismatch");
    AbundanceRmse out;
    const size_t n = truth.pixels();
    double total_sq = 0.0;
    for (size_t r = 0; r < truth.count; ++r) {
        double sq = 0.0;
        const double* tp = truth.plane(r);
        const double* ep = est.plane(r);
        for (size_t px = 0; px < n; ++px) {
            const double d = ep[px] - tp[px];
            sq += d * d;
        }
        total_sq += sq;
        out.per_endmember.push_back(std::sqrt(sq / static_cast<double>(n)));
    }
    out.mean = std::accumulate(out.per_endmember.begin(), out.per_endmember.end(), 0.0) /
               static_cast<double>(truth.count);
    out.pooled = std::sqrt(total_sq / static_cast<double>(truth.count * n));
    return out;
}

inline double spectral_angle(const double* a, const double* b, size_t n) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (size_t i = 0; i < n; ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    require(na > 0.0 && nb > 0.0, "spectral_angle: zero-norm spectrum");
    const double c = std::min(1.0, std::max(-1.0, dot / (std::sqrt(na) * std::sqrt(nb))));
    return std::acos(c);
}

struct EndmemberSad {
    std::vector<double> per_endmember;
    double mean = 0.0;
};

inline EndmemberSad metric_endmember_sad(const EndmemberMatrix& truth,
                                         const EndmemberMatrix& est) {
    require(truth.bands == est.bands && truth.count == est.count,
            "metric_endmember_sad: shape mismatch");
    EndmemberSad out;
    for (size_t r = 0; r < truth.count; ++r)
        out.per_endmember.push_back(spectral_angle(truth.column(r), est.column(r), truth.bands));
    out.mean = std::accumulate(out.per_endmember.begin(), out.per_endmember.end(), 0.0) /
               static_cast<double>(truth.count);
    return out;
}

// Permutation minimizing total SAD between true and estimated columns, found by
// exhaustive assignment (R <= 8 is plenty here). perm[k] = index into est matched
// to true column k. Ties break toward the lexicographically smallest permutation.
inline std::vector<size_t> align_endmembers_perm(const EndmemberMatrix& truth,
                                                 const EndmemberMatrix& est) {
    require(truth.count == est.count, "align_endmembers: count mismatch");
    require(truth.bands == est.bands, "align_endmembers: band mismatch");
    const size_t r = truth.count;
    require(r <= 8, "align_endmembers: exhaustive assignment supports at most 8 endmembers");
    std::vector<double> cost(r * r);
    for (size_t i = 0; i < r; ++i)
        for (size_t j = 0; j < r; ++j)
            cost[i * r + j] = spectral_angle(truth.column(i), est.column(j), truth.bands);
    std::vector<size_t> perm(r), best(r);
    std::iota(perm.begin(), perm.end(), size_t{0});
    best = perm;
    double best_cost = std::numeric_limits<double>::infinity();
    do {
        double c = 0.0;
        for (size_t i = 0; i < r; ++i) c += cost[i * r + perm[i]];
        if (c < best_cost - 1e-15) {
            best_cost = c;
            best = perm;
        }
    } while (std::next_permutation(perm.begin(), perm.end()));
    return best;
}

struct AlignedEstimate {
    EndmemberMatrix endmembers;
    AbundanceTensor abundances;
    std::vector<size_t> permutation;
};

// Applies the SAD-optimal permutation to estimated endmember columns and
// abundance planes so they line up with the ground-truth ordering.
inline AlignedEstimate align_endmembers(const EndmemberMatrix& truth, const EndmemberMatrix& est,
                                        const AbundanceTensor& est_abund) {
    require(est.count == est_abund.count, "align_endmembers: abundance count mismatch");
    auto perm = align_endmembers_perm(truth, est);
    AlignedEstimate out;
    out.permutation = perm;
    out.endmembers = EndmemberMatrix(est.bands, est.count);
    out.abundances = AbundanceTensor(est_abund.count, est_abund.height, est_abund.width);
    for (size_t k = 0; k < perm.size(); ++k) {
        std::copy(est.column(perm[k]), est.column(perm[k]) + est.bands,
                  out.endmembers.column(k));
        std::copy(est_abund.plane(perm[k]), est_abund.plane(perm[k]) + est_abund.pixels(),
                  out.abundances.plane(k));
    }
    return out;
}

}  // namespace wsnet
