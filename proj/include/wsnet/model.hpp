#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "wsnet/autodiff.hpp"
#include "wsnet/classical.hpp"
#include "wsnet/core.hpp"
#include "wsnet/objectives.hpp"
#include "wsnet/vexp.hpp"
#include "wsnet/wavelets.hpp"

// WS-Net: wavelet-fused encoder (WFFE), diagonal state-space branch, weak-signal
// attention branch with normalized inverse attention, learnable gated fusion, and
// a softmax-constrained decoder trained against the composite RMSE/SAD/KL loss.

namespace wsnet {

struct WsNetConfig {
    size_t endmembers = 4;  // R
    size_t feat_dim = 64;   // D, channels per token
    size_t stages = 4;      // WFFE depth
    size_t d_k = 32;        // attention head dim (values share it)
    size_t ssm_state = 16;  // SSM states per channel
    double tau_sa = 1.0;
    double tau_inv = 1.0;
    bool enable_mamba = true;
    bool enable_attention = true;  // standard attention branch
    bool enable_wsa = true;        // inverse-attention reweighting + learnable gate
    double lr = 4e-3;
    size_t iters = 200;
    LossWeights weights{1.0, 0.1, 0.05};
    std::uint64_t seed = 0;

    size_t token_dim() const { return stages * (feat_dim / 4); }
    bool attention_branch_on() const { return enable_attention || enable_wsa; }

    void validate() const {
        require(endmembers >= 1 && feat_dim >= 4 && stages >= 1 && d_k >= 1 && ssm_state >= 1,
                "WsNetConfig: dimensions must be >= 1");
        require(feat_dim % 4 == 0, "WsNetConfig: feat_dim must be divisible by 4");
        require(tau_sa > 0.0 && tau_inv > 0.0, "WsNetConfig: temperatures must be positive");
        require(enable_mamba || attention_branch_on(), "WsNetConfig: no branch enabled");
        require(std::isfinite(lr) && lr > 0.0, "WsNetConfig: bad learning rate");
        weights.validate();
    }
};

// ---------------------------------------------------------------------------
// fixed (non-trainable) wavelet features of the input cube
//
// The spectral axis is first reduced to feat_dim/4 bins by plain band averaging;
// Haar and Symlet-3 LL-chains of the binned image then supply each stage's four
// sub-bands. These are linear feature maps of the (non-trainable) input, so the
// DWT never needs a backward rule and the features are computed once per scene.

struct WffeFeatures {
    size_t bins = 0;
    std::vector<std::pair<size_t, size_t>> dims;  // (h, w) per level, 0..stages
    std::vector<ad::Tensor> haar;                 // per stage: (4*bins, h_s, w_s)
    std::vector<ad::Tensor> sym;
    ad::Tensor cube_flat;                         // (L, N) constant
};

namespace detail {

inline std::vector<std::vector<double>> bin_bands(const SpectralCube& cube, size_t bins) {
    const size_t n = cube.pixels();
    std::vector<std::vector<double>> out(bins, std::vector<double>(n, 0.0));
    for (size_t k = 0; k < bins; ++k) {
        const size_t b0 = k * cube.bands / bins;
        const size_t b1 = (k + 1) * cube.bands / bins;
        for (size_t b = b0; b < b1; ++b)
            for (size_t px = 0; px < n; ++px) out[k][px] += cube.band(b)[px];
        const double inv = 1.0 / static_cast<double>(b1 - b0);
        for (double& v : out[k]) v *= inv;
    }
    return out;
}

inline ad::Tensor subbands_tensor(const std::vector<SubbandSet>& subs) {
    const size_t ch = subs.size();
    const size_t h = subs[0].height, w = subs[0].width;
    std::vector<double> data;
    data.reserve(4 * ch * h * w);
    using PlanePtr = std::vector<double> SubbandSet::*;
    for (PlanePtr plane : {&SubbandSet::ll, &SubbandSet::lh, &SubbandSet::hl, &SubbandSet::hh})
        for (size_t c = 0; c < ch; ++c) {
            const auto& v = subs[c].*plane;
            data.insert(data.end(), v.begin(), v.end());
        }
    return ad::Tensor::leaf({4 * ch, h, w}, std::move(data));
}

}  // namespace detail

inline WffeFeatures build_wffe_features(const SpectralCube& cube, const WsNetConfig& cfg) {
    cube.validate();
    cfg.validate();
    require(cube.height >= (size_t{1} << cfg.stages) && cube.width >= (size_t{1} << cfg.stages),
            "wffe: image smaller than 2^stages in some dimension");
    WffeFeatures f;
    f.bins = std::min(cube.bands, std::max<size_t>(1, cfg.feat_dim / 4));
    f.dims.emplace_back(cube.height, cube.width);
    for (size_t s = 1; s <= cfg.stages; ++s)
        f.dims.emplace_back(half_ceil(f.dims[s - 1].first), half_ceil(f.dims[s - 1].second));

    const auto haar_f = filter_bank(WaveletKind::haar);
    const auto sym_f = filter_bank(WaveletKind::symlet3);
    auto binned = detail::bin_bands(cube, f.bins);
    auto haar_cur = binned;
    auto sym_cur = binned;
    for (size_t s = 1; s <= cfg.stages; ++s) {
        const auto [h, w] = f.dims[s - 1];
        std::vector<SubbandSet> hs(f.bins), ss(f.bins);
        for (size_t c = 0; c < f.bins; ++c) {
            hs[c] = dwt2(haar_cur[c], h, w, haar_f);
            ss[c] = dwt2(sym_cur[c], h, w, sym_f);
        }
        f.haar.push_back(detail::subbands_tensor(hs));
        f.sym.push_back(detail::subbands_tensor(ss));
        for (size_t c = 0; c < f.bins; ++c) {
            haar_cur[c] = hs[c].ll;
            sym_cur[c] = ss[c].ll;
        }
    }

    std::vector<double> flat(cube.bands * cube.pixels());
    for (size_t b = 0; b < cube.bands; ++b)
        std::copy(cube.band(b), cube.band(b) + cube.pixels(), flat.begin() + b * cube.pixels());
    f.cube_flat = ad::Tensor::leaf({cube.bands, cube.pixels()}, std::move(flat));
    return f;
}

// ---------------------------------------------------------------------------
// parameters

struct WsNetParams {
    // WFFE
    ad::Tensor stem_w, stem_b;                      // (D,L), (D)
    std::vector<ad::Tensor> pre_w, pre_b;           // per stage: (D,D,3,3), (D)
    std::vector<ad::Tensor> fuse_w, fuse_b;         // (D, 4*bins+D, 3, 3), (D)
    std::vector<ad::Tensor> proj_w, proj_b;         // (D/4, D+4*bins, 1, 1), (D/4)
    // attention branch
    ad::Tensor pos_emb;                             // (N, Td)
    ad::Tensor wq, wk, wv;                          // (Td, dk)
    ad::Tensor gate1_w, gate1_b, gate2_w, gate2_b;  // scalar -> 16 -> scalar
    ad::Tensor mlp1_w, mlp1_b, mlp2_w, mlp2_b;      // (dk,4D),(4D),(4D,D),(D)
    // mamba branch
    ad::Tensor ssm_lambda, ssm_b, ssm_c;            // (Td,S)
    ad::Tensor ssm_d;                               // (Td)
    ad::Tensor ssm_gate_w, ssm_gate_b;              // (Td,Td), (Td)
    ad::Tensor ssm_out_w, ssm_out_b;                // (Td,D), (D)
    // fusion + decoder
    ad::Tensor global_gate;                         // (1)
    ad::Tensor dec_w, dec_b;                        // (D,R), (R)
    ad::Tensor endmembers;                          // (L,R), clamped >= 0 after each step

    std::vector<ad::Tensor> all() const {
        std::vector<ad::Tensor> v = {stem_w, stem_b};
        for (size_t s = 0; s < pre_w.size(); ++s) {
            v.push_back(pre_w[s]);
            v.push_back(pre_b[s]);
            v.push_back(fuse_w[s]);
            v.push_back(fuse_b[s]);
            v.push_back(proj_w[s]);
            v.push_back(proj_b[s]);
        }
        for (const auto& t : {pos_emb, wq, wk, wv, gate1_w, gate1_b, gate2_w, gate2_b, mlp1_w,
                              mlp1_b, mlp2_w, mlp2_b, ssm_lambda, ssm_b, ssm_c, ssm_d, ssm_gate_w,
                              ssm_gate_b, ssm_out_w, ssm_out_b, global_gate, dec_w, dec_b,
                              endmembers})
            v.push_back(t);
        return v;
    }
};

namespace detail {

inline ad::Tensor init_uniform(Rng& rng, std::vector<size_t> shape, double scale) {
    std::vector<double> v(ad::shape_numel(shape));
    for (double& x : v) x = rng.uniform(-scale, scale);
    return ad::Tensor::leaf(std::move(shape), std::move(v), true);
}

inline ad::Tensor init_const(std::vector<size_t> shape, double value) {
    return ad::Tensor::leaf(shape, std::vector<double>(ad::shape_numel(shape), value), true);
}

}  // namespace detail

// Seeded parameter initialization; E is set separately (VCA).
inline WsNetParams init_params(const WsNetConfig& cfg, size_t bands, size_t pixels, size_t bins) {
    cfg.validate();
    Rng rng(mix_seed(cfg.seed, 0xA11));
    const size_t d = cfg.feat_dim, td = cfg.token_dim(), dk = cfg.d_k, s = cfg.ssm_state;
    WsNetParams p;
    p.stem_w = detail::init_uniform(rng, {d, bands}, 1.0 / std::sqrt(double(bands)));
    p.stem_b = detail::init_const({d}, 0.0);
    for (size_t st = 0; st < cfg.stages; ++st) {
        p.pre_w.push_back(detail::init_uniform(rng, {d, d, 3, 3}, 1.0 / std::sqrt(9.0 * d)));
        p.pre_b.push_back(detail::init_const({d}, 0.0));
        const size_t cfuse = 4 * bins + d;
        p.fuse_w.push_back(detail::init_uniform(rng, {d, cfuse, 3, 3}, 1.0 / std::sqrt(9.0 * cfuse)));
        p.fuse_b.push_back(detail::init_const({d}, 0.0));
        const size_t cproj = d + 4 * bins;
        p.proj_w.push_back(
            detail::init_uniform(rng, {d / 4, cproj, 1, 1}, 1.0 / std::sqrt(double(cproj))));
        p.proj_b.push_back(detail::init_const({d / 4}, 0.0));
    }
    p.pos_emb = detail::init_const({pixels, td}, 0.0);
    p.wq = detail::init_uniform(rng, {td, dk}, 1.0 / std::sqrt(double(td)));
    p.wk = detail::init_uniform(rng, {td, dk}, 1.0 / std::sqrt(double(td)));
    p.wv = detail::init_uniform(rng, {td, dk}, 1.0 / std::sqrt(double(td)));
    p.gate1_w = detail::init_uniform(rng, {1, 16}, 1.0);
    p.gate1_b = detail::init_const({16}, 0.0);
    p.gate2_w = detail::init_uniform(rng, {16, 1}, 1.0 / 4.0);
    p.gate2_b = detail::init_const({1}, 0.0);
    p.mlp1_w = detail::init_uniform(rng, {dk, 4 * d}, 1.0 / std::sqrt(double(dk)));
    p.mlp1_b = detail::init_const({4 * d}, 0.0);
    p.mlp2_w = detail::init_uniform(rng, {4 * d, d}, 1.0 / std::sqrt(4.0 * d));
    p.mlp2_b = detail::init_const({d}, 0.0);
    p.ssm_lambda = detail::init_uniform(rng, {td, s}, 1.0);  // a = sigmoid(-lambda)
    p.ssm_b = detail::init_uniform(rng, {td, s}, 1.0 / std::sqrt(double(s)));
    p.ssm_c = detail::init_uniform(rng, {td, s}, 1.0 / std::sqrt(double(s)));
    p.ssm_d = detail::init_const({td}, 1.0);
    p.ssm_gate_w = detail::init_uniform(rng, {td, td}, 1.0 / std::sqrt(double(td)));
    p.ssm_gate_b = detail::init_const({td}, 0.0);
    p.ssm_out_w = detail::init_uniform(rng, {td, d}, 1.0 / std::sqrt(double(td)));
    p.ssm_out_b = detail::init_const({d}, 0.0);
    p.global_gate = detail::init_const({1}, 0.0);
    p.dec_w = detail::init_uniform(rng, {d, cfg.endmembers}, 1.0 / std::sqrt(double(d)));
    p.dec_b = detail::init_const({cfg.endmembers}, 0.0);
    // placeholder until init_endmembers supplies the VCA columns
    p.endmembers = detail::init_const({bands, cfg.endmembers}, 0.0);
    return p;
}

// ---------------------------------------------------------------------------
// WFFE forward

namespace detail {

inline ad::Tensor linear(const ad::Tensor& x, const ad::Tensor& w, const ad::Tensor& b) {
    return ad::add(ad::matmul(x, w), b);
}

inline ad::Tensor conv_bias(const ad::Tensor& x, const ad::Tensor& w, const ad::Tensor& b,
                            size_t stride, size_t pad) {
    ad::Tensor y = ad::conv2d(x, w, stride, pad);
    return ad::add(y, ad::reshape(b, {b.numel(), 1, 1}));
}

}  // namespace detail

// Tokens are raster-ordered rows of the fused multi-scale feature field: (N, token_dim).
inline ad::Tensor wffe_forward(const WffeFeatures& feats, const WsNetParams& p,
                               const WsNetConfig& cfg) {
    const auto [h0, w0] = feats.dims[0];
    const size_t n = h0 * w0;
    // stage 0: 1x1 projection of the cube to D channels at full resolution
    ad::Tensor conv_path = ad::reshape(
        ad::add(ad::matmul(p.stem_w, feats.cube_flat), ad::reshape(p.stem_b, {cfg.feat_dim, 1})),
        {cfg.feat_dim, h0, w0});
    std::vector<ad::Tensor> scales;
    for (size_t s = 1; s <= cfg.stages; ++s) {
        ad::Tensor pre = ad::silu(detail::conv_bias(conv_path, p.pre_w[s - 1], p.pre_b[s - 1], 1, 1));
        conv_path = ad::avg_pool2_ceil(pre);
        ad::Tensor fuse_in = ad::concat({feats.haar[s - 1], conv_path}, 0);
        ad::Tensor fused = ad::silu(detail::conv_bias(fuse_in, p.fuse_w[s - 1], p.fuse_b[s - 1], 1, 1));
        ad::Tensor stage_out = ad::concat({fused, feats.sym[s - 1]}, 0);
        ad::Tensor t = detail::conv_bias(stage_out, p.proj_w[s - 1], p.proj_b[s - 1], 1, 0);
        for (size_t lev = s; lev-- > 0;) {
            t = ad::upsample_nearest2(t);
            t = ad::slice(t, 1, 0, feats.dims[lev].first);
            t = ad::slice(t, 2, 0, feats.dims[lev].second);
        }
        scales.push_back(t);
    }
    ad::Tensor field = ad::concat(scales, 0);  // (token_dim, H, W)
    return ad::transpose2d(ad::reshape(field, {cfg.token_dim(), n}));
}

// Convenience overload building the fixed features on the fly.
inline ad::Tensor wffe_forward(const SpectralCube& cube, const WsNetParams& p,
                               const WsNetConfig& cfg) {
    return wffe_forward(build_wffe_features(cube, cfg), p, cfg);
}

// ---------------------------------------------------------------------------
// diagonal SSM scan (custom op): per channel-state pair
//   h_t = a h_{t-1} + b u_t,   y_t[ch] = sum_s c h_t + d u_t[ch]

inline ad::Tensor ssm_scan(const ad::Tensor& u, const ad::Tensor& a, const ad::Tensor& b,
                           const ad::Tensor& c, const ad::Tensor& dskip) {
    require(u.shape().size() == 2, "ssm_scan: u must be (N, D)");
    const size_t n = u.shape()[0], d = u.shape()[1];
    const size_t s = a.shape().size() == 2 ? a.shape()[1] : 0;
    require(a.shape() == std::vector<size_t>({d, s}) && b.shape() == a.shape() &&
                c.shape() == a.shape(),
            "ssm_scan: a/b/c must be (D, S)");
    require(dskip.shape() == std::vector<size_t>({d}), "ssm_scan: d must be (D)");

    // channel-major copies keep the time loops contiguous
    auto ut = std::make_shared<std::vector<double>>(d * n);
    kernels::transpose(u.value().data(), ut->data(), n, d);
    auto hkeep = std::make_shared<std::vector<double>>(d * s * n);  // states for backward
    std::vector<double> yt(d * n, 0.0);
    const auto& av = a.value();
    const auto& bv = b.value();
    const auto& cv = c.value();
    const auto& dv = dskip.value();
    for (size_t ch = 0; ch < d; ++ch) {
        const double* uc = ut->data() + ch * n;
        double* yc = yt.data() + ch * n;
        for (size_t st = 0; st < s; ++st) {
            const double aa = av[ch * s + st], bb = bv[ch * s + st], cc = cv[ch * s + st];
            double* hc = hkeep->data() + (ch * s + st) * n;
            double h = 0.0;
            for (size_t t = 0; t < n; ++t) {
                h = aa * h + bb * uc[t];
                hc[t] = h;
                yc[t] += cc * h;
            }
        }
        const double dd = dv[ch];
        for (size_t t = 0; t < n; ++t) yc[t] += dd * uc[t];
    }
    std::vector<double> y(n * d);
    kernels::transpose(yt.data(), y.data(), d, n);
    return ad::make_op(
        "ssm_scan", {n, d}, std::move(y), {u, a, b, c, dskip},
        [pu = u.node(), pa = a.node(), pb = b.node(), pc = c.node(), pd = dskip.node(), ut,
         hkeep, n, d, s](ad::Node& nd) {
            const auto& av = pa->value;
            const auto& bv = pb->value;
            const auto& cv = pc->value;
            const auto& dv = pd->value;
            const bool wu = pu->needs_grad, wa = pa->needs_grad, wb = pb->needs_grad,
                       wc = pc->needs_grad, wd = pd->needs_grad;
            if (wu) pu->ensure_grad();
            if (wa) pa->ensure_grad();
            if (wb) pb->ensure_grad();
            if (wc) pc->ensure_grad();
            if (wd) pd->ensure_grad();
            std::vector<double> gt(d * n), dut;
            kernels::transpose(nd.grad.data(), gt.data(), n, d);
            if (wu) dut.assign(d * n, 0.0);
            for (size_t ch = 0; ch < d; ++ch) {
                const double* uc = ut->data() + ch * n;
                const double* gc = gt.data() + ch * n;
                double* duc = wu ? dut.data() + ch * n : nullptr;
                if (wd || wu) {
                    const double dd = dv[ch];
                    double acc = 0.0;
                    for (size_t t = 0; t < n; ++t) {
                        acc += gc[t] * uc[t];
                        if (wu) duc[t] += dd * gc[t];
                    }
                    if (wd) pd->grad[ch] += acc;
                }
                for (size_t st = 0; st < s; ++st) {
                    const double aa = av[ch * s + st], bb = bv[ch * s + st], cc = cv[ch * s + st];
                    const double* hc = hkeep->data() + (ch * s + st) * n;
                    double padj = 0.0;  // dL/dh_t, swept backwards
                    double da = 0.0, db = 0.0, dc = 0.0;
                    for (size_t t = n; t-- > 0;) {
                        const double gy = gc[t];
                        dc += hc[t] * gy;
                        padj = cc * gy + aa * padj;
                        const double hprev = t > 0 ? hc[t - 1] : 0.0;
                        da += hprev * padj;
                        db += uc[t] * padj;
                        if (wu) duc[t] += bb * padj;
                    }
                    if (wa) pa->grad[ch * s + st] += da;
                    if (wb) pb->grad[ch * s + st] += db;
                    if (wc) pc->grad[ch * s + st] += dc;
                }
            }
            if (wu) {
                std::vector<double> dun(n * d);
                kernels::transpose(dut.data(), dun.data(), d, n);
                for (size_t i = 0; i < n * d; ++i) pu->grad[i] += dun[i];
            }
        });
}

// Mamba-style branch: gated diagonal SSM over raster-ordered tokens, projected to D.
inline ad::Tensor mamba_branch(const ad::Tensor& tokens, const WsNetParams& p,
                               const WsNetConfig& cfg) {
    require(cfg.enable_mamba, "mamba_branch: branch disabled");
    ad::Tensor a = ad::sigmoid(ad::scale(p.ssm_lambda, -1.0));  // exp(-softplus(lambda))
    ad::Tensor core = ssm_scan(tokens, a, p.ssm_b, p.ssm_c, p.ssm_d);
    ad::Tensor gate = ad::sigmoid(detail::linear(tokens, p.ssm_gate_w, p.ssm_gate_b));
    return detail::linear(ad::mul(core, gate), p.ssm_out_w, p.ssm_out_b);
}

// ---------------------------------------------------------------------------
// weak-signal attention

namespace detail {

// Recycles the large attention scratch blocks across training iterations so each
// step does not re-fault hundreds of megabytes of fresh pages.
struct BufferPool {
    std::vector<std::vector<double>*> items;
    ~BufferPool() {
        for (auto* p : items) delete p;
    }
};

inline BufferPool& buffer_pool() {
    thread_local BufferPool pool;
    return pool;
}

inline std::shared_ptr<std::vector<double>> pooled_buffer(size_t n) {
    auto& pool = buffer_pool();
    std::vector<double>* buf = nullptr;
    for (size_t i = 0; i < pool.items.size(); ++i)
        if (pool.items[i]->size() == n) {
            buf = pool.items[i];
            pool.items.erase(pool.items.begin() + i);
            break;
        }
    if (!buf) buf = new std::vector<double>(n);
    return std::shared_ptr<std::vector<double>>(buf, [](std::vector<double>* p) {
        auto& pl = buffer_pool();
        if (pl.items.size() < 4)
            pl.items.push_back(p);
        else
            delete p;
    });
}

// Row softmaxes of S/tau_sa and -S/tau_inv, shared by the streaming op and the
// dense map builder so both routes agree to rounding. With equal temperatures the
// inverse map reuses the forward exponentials (exp((mx-s)/tau) = 1/exp((s-mx)/tau)),
// halving the exp count; normalization makes the two formulations identical.
inline void softmax_pair_row(const double* s, size_t n, double tau_sa, double tau_inv, double* pa,
                             double* pb) {
    double mx = -std::numeric_limits<double>::infinity();
    double mn = std::numeric_limits<double>::infinity();
    for (size_t j = 0; j < n; ++j) {
        mx = std::max(mx, s[j]);
        mn = std::min(mn, s[j]);
    }
    double za = 0.0, zb = 0.0;
    const double inv_tsa = 1.0 / tau_sa;
    for (size_t j = 0; j < n; ++j) pa[j] = (s[j] - mx) * inv_tsa;
    vexp(pa, pa, n);
    for (size_t j = 0; j < n; ++j) za += pa[j];
    if (tau_sa == tau_inv && (mx - mn) * inv_tsa < 690.0) {
        for (size_t j = 0; j < n; ++j) {
            pb[j] = 1.0 / pa[j];
            zb += pb[j];
        }
    } else {
        const double inv_tinv = 1.0 / tau_inv;
        for (size_t j = 0; j < n; ++j) pb[j] = (mn - s[j]) * inv_tinv;
        vexp(pb, pb, n);
        for (size_t j = 0; j < n; ++j) zb += pb[j];
    }
    const double ia = 1.0 / za, ib = 1.0 / zb;
    for (size_t j = 0; j < n; ++j) {
        pa[j] *= ia;
        pb[j] *= ib;
    }
}

}  // namespace detail

// Z = (alpha A_sa + (1-alpha) A_inv) V with S = Q K^T / sqrt(d_k). Streams the
// similarity rows in blocks so the N x N maps are never materialized; the backward
// pass recomputes them the same way.
inline ad::Tensor wsa_apply(const ad::Tensor& q, const ad::Tensor& k, const ad::Tensor& v,
                            const ad::Tensor& alpha, double tau_sa, double tau_inv) {
    require(q.shape().size() == 2 && q.shape() == k.shape(), "wsa_apply: Q/K shape mismatch");
    require(v.shape().size() == 2 && v.shape()[0] == q.shape()[0], "wsa_apply: V rows mismatch");
    require(alpha.numel() == 1, "wsa_apply: alpha must be scalar");
    const size_t n = q.shape()[0], dk = q.shape()[1], dv = v.shape()[1];
    const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
    const size_t block = std::min<size_t>(256, n);

    // the backward pass reuses the softmax pair instead of re-deriving it from S
    const bool track = ad::detail::grad_enabled() &&
                       (q.raw()->needs_grad || k.raw()->needs_grad || v.raw()->needs_grad ||
                        alpha.raw()->needs_grad);
    std::shared_ptr<std::vector<double>> pa_keep, pb_keep;
    if (track) {
        pa_keep = detail::pooled_buffer(n * n);
        pb_keep = detail::pooled_buffer(n * n);
    }

    std::vector<double> z(n * dv, 0.0);
    {
        std::vector<double> kt(dk * n);
        kernels::transpose(k.value().data(), kt.data(), n, dk);
        std::vector<double> srows(block * n), wrows(block * n);
        std::vector<double> pa_tmp(n), pb_tmp(n);
        const double al = alpha.value()[0];
        for (size_t i0 = 0; i0 < n; i0 += block) {
            const size_t rows = std::min(block, n - i0);
            std::fill(srows.begin(), srows.begin() + rows * n, 0.0);
            kernels::mm_nn(srows.data(), q.value().data() + i0 * dk, kt.data(), rows, dk, n);
            for (size_t r = 0; r < rows; ++r) {
                double* srow = srows.data() + r * n;
                for (size_t j = 0; j < n; ++j) srow[j] *= scale;
                double* pa = track ? pa_keep->data() + (i0 + r) * n : pa_tmp.data();
                double* pb = track ? pb_keep->data() + (i0 + r) * n : pb_tmp.data();
                detail::softmax_pair_row(srow, n, tau_sa, tau_inv, pa, pb);
                double* wrow = wrows.data() + r * n;
                for (size_t j = 0; j < n; ++j) wrow[j] = al * pa[j] + (1.0 - al) * pb[j];
            }
            kernels::mm_nn(z.data() + i0 * dv, wrows.data(), v.value().data(), rows, n, dv);
        }
    }
    return ad::make_op(
        "wsa_apply", {n, dv}, std::move(z), {q, k, v, alpha},
        [pq = q.node(), pk = k.node(), pv = v.node(), palpha = alpha.node(), n, dk, dv, scale,
         tau_sa, tau_inv, block, pa_keep, pb_keep](ad::Node& nd) {
            const bool wq = pq->needs_grad, wk = pk->needs_grad, wv = pv->needs_grad,
                       wal = palpha->needs_grad;
            if (wq) pq->ensure_grad();
            if (wk) pk->ensure_grad();
            if (wv) pv->ensure_grad();
            if (wal) palpha->ensure_grad();
            const double al = palpha->value[0];
            double dalpha = 0.0;
            std::vector<double> vt(dv * n);
            kernels::transpose(pv->value.data(), vt.data(), n, dv);
            std::vector<double> wrows(block * n), gjrows(block * n), dsrows(block * n);
            const double ca = al / tau_sa, cb = (1.0 - al) / tau_inv;
            for (size_t i0 = 0; i0 < n; i0 += block) {
                const size_t rows = std::min(block, n - i0);
                const double* parows = pa_keep->data() + i0 * n;
                const double* pbrows = pb_keep->data() + i0 * n;
                // gj[i,j] = dZ_i . V_j
                std::fill(gjrows.begin(), gjrows.begin() + rows * n, 0.0);
                kernels::mm_nn(gjrows.data(), nd.grad.data() + i0 * dv, vt.data(), rows, dv, n);
                // one sweep per row collects dalpha, the fused weights, and the
                // softmax inner products; a second fills dS
                for (size_t r = 0; r < rows; ++r) {
                    const double* pa = parows + r * n;
                    const double* pb = pbrows + r * n;
                    const double* gj = gjrows.data() + r * n;
                    double* wrow = wrows.data() + r * n;
                    double dot_a = 0.0, dot_b = 0.0, da_row = 0.0;
                    for (size_t j = 0; j < n; ++j) {
                        dot_a += pa[j] * gj[j];
                        dot_b += pb[j] * gj[j];
                        da_row += (pa[j] - pb[j]) * gj[j];
                        wrow[j] = al * pa[j] + (1.0 - al) * pb[j];
                    }
                    dalpha += da_row;
                    if (wq || wk) {
                        double* ds = dsrows.data() + r * n;
                        // scale folded in so dQ/dK are plain products with K/Q
                        for (size_t j = 0; j < n; ++j)
                            ds[j] = scale * (ca * pa[j] * (gj[j] - dot_a) -
                                             cb * pb[j] * (gj[j] - dot_b));
                    }
                }
                if (wv)
                    kernels::mm_tn(pv->grad.data(), wrows.data(), nd.grad.data() + i0 * dv, n,
                                   rows, dv);
                if (wq)
                    kernels::mm_nn(pq->grad.data() + i0 * dk, dsrows.data(), pk->value.data(),
                                   rows, n, dk);
                if (wk)
                    kernels::mm_tn(pk->grad.data(), dsrows.data(), pq->value.data() + i0 * dk, n,
                                   rows, dk);
            }
            if (wal) palpha->grad[0] += dalpha;
        });
}

// Dense attention maps, for inspection and property tests. All plain values.
struct AttentionMaps {
    size_t n = 0;
    std::vector<double> similarity;  // S, row-major n x n
    std::vector<double> a_sa;
    std::vector<double> a_inv;
    std::vector<double> a_fuse;
};

inline AttentionMaps dense_attention_maps(const std::vector<double>& q,
                                          const std::vector<double>& k, size_t n, size_t dk,
                                          double alpha, double tau_sa, double tau_inv) {
    AttentionMaps m;
    m.n = n;
    m.similarity.assign(n * n, 0.0);
    kernels::mm_nt(m.similarity.data(), q.data(), k.data(), n, dk, n);
    const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
    for (double& v : m.similarity) v *= scale;
    m.a_sa.resize(n * n);
    m.a_inv.resize(n * n);
    m.a_fuse.resize(n * n);
    for (size_t i = 0; i < n; ++i) {
        detail::softmax_pair_row(m.similarity.data() + i * n, n, tau_sa, tau_inv,
                                 m.a_sa.data() + i * n, m.a_inv.data() + i * n);
        for (size_t j = 0; j < n; ++j)
            m.a_fuse[i * n + j] = alpha * m.a_sa[i * n + j] + (1.0 - alpha) * m.a_inv[i * n + j];
    }
    return m;
}

struct WsaOutput {
    ad::Tensor z;      // (N, D)
    ad::Tensor alpha;  // scalar in (0,1); forced constant at the flag endpoints
    AttentionMaps maps;
    bool has_maps = false;
};

// Weak-signal attention branch. alpha is produced by a small gate network over the
// mean pre-softmax logit; enable_wsa=false pins alpha=1 (standard attention only),
// and a WAT-only configuration (enable_attention=false) pins alpha=0.
inline WsaOutput wsa_branch(const ad::Tensor& tokens, const WsNetParams& p,
                            const WsNetConfig& cfg, bool with_maps = true) {
    require(cfg.attention_branch_on(), "wsa_branch: branch disabled");
    const size_t n = tokens.shape()[0];
    ad::Tensor tk = ad::add(tokens, p.pos_emb);
    ad::Tensor q = ad::matmul(tk, p.wq);
    ad::Tensor k = ad::matmul(tk, p.wk);
    ad::Tensor v = ad::matmul(tk, p.wv);

    ad::Tensor alpha;
    if (!cfg.enable_wsa) {
        alpha = ad::Tensor::scalar(1.0);
    } else if (!cfg.enable_attention) {
        alpha = ad::Tensor::scalar(0.0);
    } else {
        const double denom = static_cast<double>(n) * static_cast<double>(n) *
                             std::sqrt(static_cast<double>(cfg.d_k));
        ad::Tensor smean =
            ad::scale(ad::sum_all(ad::mul(ad::sum(q, 0), ad::sum(k, 0))), 1.0 / denom);
        ad::Tensor hidden =
            ad::silu(detail::linear(ad::reshape(smean, {1, 1}), p.gate1_w, p.gate1_b));
        alpha = ad::reshape(ad::sigmoid(detail::linear(hidden, p.gate2_w, p.gate2_b)), {1});
    }

    ad::Tensor z0 = wsa_apply(q, k, v, alpha, cfg.tau_sa, cfg.tau_inv);
    ad::Tensor hidden = ad::silu(detail::linear(z0, p.mlp1_w, p.mlp1_b));
    WsaOutput out;
    out.z = detail::linear(hidden, p.mlp2_w, p.mlp2_b);
    out.alpha = alpha;
    if (with_maps) {
        ad::NoGradGuard ng;
        out.maps = dense_attention_maps(q.value(), k.value(), n, cfg.d_k, alpha.item(),
                                        cfg.tau_sa, cfg.tau_inv);
        out.has_maps = true;
    }
    return out;
}

// Z_final = beta Z_mamba + (1 - beta) Z_attention (convex, beta = sigmoid(gate)).
inline ad::Tensor global_fuse(const ad::Tensor& z_mamba, const ad::Tensor& z_attention,
                              const WsNetParams& p) {
    if (!z_mamba.defined()) return z_attention;
    if (!z_attention.defined()) return z_mamba;
    require(z_mamba.shape() == z_attention.shape(), "global_fuse: shape mismatch");
    ad::Tensor beta = ad::sigmoid(p.global_gate);
    ad::Tensor keep = ad::sub(ad::Tensor::scalar(1.0), beta);
    return ad::add(ad::mul(z_mamba, beta), ad::mul(z_attention, keep));
}

struct DecodeOutput {
    ad::Tensor abundances;  // (N, R), softmax rows
    ad::Tensor reconstruction;  // (L, N)
};

// Softmax over the endmember axis per pixel, then Y_hat = E A.
inline DecodeOutput decode(const ad::Tensor& z_final, const WsNetParams& p) {
    DecodeOutput out;
    out.abundances = ad::softmax(detail::linear(z_final, p.dec_w, p.dec_b), 1);
    out.reconstruction = ad::matmul(p.endmembers, out.abundances, false, true);
    return out;
}

// VCA endmember initialization; the result becomes the trainable E.
inline EndmemberMatrix init_endmembers(const SpectralCube& cube, size_t r, std::uint64_t seed) {
    return vca(cube, r, seed);
}

// ---------------------------------------------------------------------------
// full forward + training

struct ForwardOutput {
    ad::Tensor tokens;
    ad::Tensor z_final;
    DecodeOutput decoded;
    ad::Tensor alpha;  // undefined when the attention branch is off
};

inline ForwardOutput wsnet_forward(const WffeFeatures& feats, const WsNetParams& p,
                                   const WsNetConfig& cfg, bool with_maps = false,
                                   AttentionMaps* maps_out = nullptr) {
    ForwardOutput out;
    out.tokens = wffe_forward(feats, p, cfg);
    ad::Tensor zm, za;
    if (cfg.enable_mamba) zm = mamba_branch(out.tokens, p, cfg);
    if (cfg.attention_branch_on()) {
        WsaOutput wsa = wsa_branch(out.tokens, p, cfg, with_maps);
        za = wsa.z;
        out.alpha = wsa.alpha;
        if (with_maps && maps_out) *maps_out = wsa.maps;
    }
    out.z_final = global_fuse(zm, za, p);
    out.decoded = decode(out.z_final, p);
    return out;
}

inline AbundanceTensor abundances_from_tensor(const ad::Tensor& a_nr, size_t h, size_t w) {
    const size_t n = a_nr.shape()[0], r = a_nr.shape()[1];
    require(n == h * w, "abundances_from_tensor: pixel count mismatch");
    AbundanceTensor out(r, h, w);
    for (size_t px = 0; px < n; ++px)
        for (size_t c = 0; c < r; ++c) out.data[c * n + px] = a_nr.value()[px * r + c];
    return out;
}

inline EndmemberMatrix endmembers_from_tensor(const ad::Tensor& e) {
    const size_t l = e.shape()[0], r = e.shape()[1];
    EndmemberMatrix out(l, r);
    for (size_t b = 0; b < l; ++b)
        for (size_t c = 0; c < r; ++c) out.at(b, c) = std::max(0.0, e.value()[b * r + c]);
    return out;
}

struct AdamState {
    double lr;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    size_t t = 0;
    std::vector<std::vector<double>> m, v;

    explicit AdamState(const std::vector<ad::Tensor>& params, double lr_) : lr(lr_) {
        for (const auto& p : params) {
            m.emplace_back(p.numel(), 0.0);
            v.emplace_back(p.numel(), 0.0);
        }
    }

    void step(std::vector<ad::Tensor>& params) {
        ++t;
        const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
        const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
        for (size_t pi = 0; pi < params.size(); ++pi) {
            auto& val = params[pi].value();
            const auto& g = params[pi].grad();
            if (g.empty()) continue;  // parameter did not participate this pass
            for (size_t i = 0; i < val.size(); ++i) {
                m[pi][i] = beta1 * m[pi][i] + (1.0 - beta1) * g[i];
                v[pi][i] = beta2 * v[pi][i] + (1.0 - beta2) * g[i] * g[i];
                val[i] -= lr * (m[pi][i] / bc1) / (std::sqrt(v[pi][i] / bc2) + eps);
            }
        }
    }
};

struct TrainResult {
    WsNetParams params;
    std::vector<double> loss_history;
    WsNetConfig config;
};

// Full-scene gradient training with Adam; E is clamped nonnegative after every step.
inline TrainResult train(const SpectralCube& cube, const WsNetConfig& cfg) {
    cfg.validate();
    cube.validate();
    WffeFeatures feats = build_wffe_features(cube, cfg);
    WsNetParams params = init_params(cfg, cube.bands, cube.pixels(), feats.bins);
    {
        EndmemberMatrix e0 = init_endmembers(cube, cfg.endmembers, cfg.seed);
        auto& ev = params.endmembers.value();
        for (size_t b = 0; b < cube.bands; ++b)
            for (size_t c = 0; c < cfg.endmembers; ++c) ev[b * cfg.endmembers + c] = e0.at(b, c);
    }

    auto plist = params.all();
    AdamState adam(plist, cfg.lr);
    TrainResult result;
    result.config = cfg;
    for (size_t it = 0; it < cfg.iters; ++it) {
        ForwardOutput fwd = wsnet_forward(feats, params, cfg, false);
        ad::Tensor loss = total_loss(feats.cube_flat, fwd.decoded.reconstruction, cfg.weights);
        const double lval = loss.item();
        if (!std::isfinite(lval))
            throw error("train: non-finite loss at iteration " + std::to_string(it));
        ad::backward(loss);
        adam.step(plist);
        for (double& x : params.endmembers.value()) x = std::max(0.0, x);
        result.loss_history.push_back(lval);
    }
    result.params = params;
    return result;
}

}  // namespace wsnet
