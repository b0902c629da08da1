#pragma once

#include <algorithm>
#include <optional>
#include <vector>

#include "wsnet/common.hpp"

// Linear mixing model: observation cubes, endmember libraries, abundance maps,
// SNR-controlled noise injection, and the weak-endmember predicate/partition.

namespace wsnet {

// L x H x W reflectance volume, band-major: data[(l*height + i)*width + j].
struct SpectralCube {
    size_t bands = 0;
    size_t height = 0;
    size_t width = 0;
    std::vector<double> data;
    std::vector<double> wavelengths;  // empty, or strictly increasing of length `bands`

    SpectralCube() = default;
    SpectralCube(size_t l, size_t h, size_t w)
        : bands(l), height(h), width(w), data(l * h * w, 0.0) {}

    size_t pixels() const { return height * width; }
    size_t size() const { return bands * height * width; }

    double& at(size_t l, size_t i, size_t j) { return data[(l * height + i) * width + j]; }
    double at(size_t l, size_t i, size_t j) const { return data[(l * height + i) * width + j]; }

    double* band(size_t l) { return data.data() + l * height * width; }
    const double* band(size_t l) const { return data.data() + l * height * width; }

    // Spectrum of pixel (i, j) as a length-L vector.
    std::vector<double> pixel(size_t i, size_t j) const {
        std::vector<double> s(bands);
        for (size_t l = 0; l < bands; ++l) s[l] = at(l, i, j);
        return s;
    }

    void validate() const {
        require(data.size() == bands * height * width, "SpectralCube: data length != L*H*W");
        require(all_finite(data), "SpectralCube: non-finite values");
        if (!wavelengths.empty()) {
            require(wavelengths.size() == bands, "SpectralCube: wavelengths length != bands");
            for (size_t l = 1; l < bands; ++l)
                require(wavelengths[l] > wavelengths[l - 1],
                        "SpectralCube: wavelengths not strictly increasing");
        }
    }
};

// L x P endmember signatures, column-major: data[r*bands + l] so each column is contiguous.
struct EndmemberMatrix {
    size_t bands = 0;
    size_t count = 0;
    std::vector<double> data;
    std::vector<size_t> weak_indices;  // sorted subset of {0 .. count-1}

    EndmemberMatrix() = default;
    EndmemberMatrix(size_t l, size_t p) : bands(l), count(p), data(l * p, 0.0) {}

    double& at(size_t l, size_t r) { return data[r * bands + l]; }
    double at(size_t l, size_t r) const { return data[r * bands + l]; }

    double* column(size_t r) { return data.data() + r * bands; }
    const double* column(size_t r) const { return data.data() + r * bands; }

    std::vector<double> column_vec(size_t r) const {
        return std::vector<double>(column(r), column(r) + bands);
    }

    void validate() const {
        require(data.size() == bands * count, "EndmemberMatrix: data length != L*P");
        for (double x : data)
            require(std::isfinite(x) && x >= 0.0, "EndmemberMatrix: entries must be finite and >= 0");
        for (size_t k = 0; k < weak_indices.size(); ++k) {
            require(weak_indices[k] < count, "EndmemberMatrix: weak index out of range");
            if (k) require(weak_indices[k] > weak_indices[k - 1],
                           "EndmemberMatrix: weak indices not sorted/unique");
        }
    }
};

// P x H x W fractional abundances: data[(r*height + i)*width + j].
struct AbundanceTensor {
    size_t count = 0;
    size_t height = 0;
    size_t width = 0;
    std::vector<double> data;

    AbundanceTensor() = default;
    AbundanceTensor(size_t p, size_t h, size_t w)
        : count(p), height(h), width(w), data(p * h * w, 0.0) {}

    size_t pixels() const { return height * width; }

    double& at(size_t r, size_t i, size_t j) { return data[(r * height + i) * width + j]; }
    double at(size_t r, size_t i, size_t j) const { return data[(r * height + i) * width + j]; }

    double* plane(size_t r) { return data.data() + r * height * width; }
    const double* plane(size_t r) const { return data.data() + r * height * width; }

    // ANC exactly, ASC within `asc_tol` per pixel.
    void validate(double asc_tol = 1e-6) const {
        require(data.size() == count * height * width, "AbundanceTensor: data length != P*H*W");
        for (double x : data)
            require(std::isfinite(x) && x >= 0.0, "AbundanceTensor: ANC violated");
        const size_t n = pixels();
        for (size_t px = 0; px < n; ++px) {
            double s = 0.0;
            for (size_t r = 0; r < count; ++r) s += data[r * n + px];
            require(std::abs(s - 1.0) <= asc_tol, "AbundanceTensor: ASC violated");
        }
    }
};

struct NoiseSpec {
    std::optional<double> target_snr_db;  // nullopt means "none"
    std::uint64_t seed = 0;

    void validate() const {
        if (target_snr_db) require(std::isfinite(*target_snr_db), "NoiseSpec: SNR must be finite");
    }
};

// out[l,i,j] = sum_r E[l,r] * A[r,i,j]
inline SpectralCube linear_mix(const EndmemberMatrix& e, const AbundanceTensor& a) {
    e.validate();
    a.validate();
    require(e.count == a.count, "linear_mix: endmember count mismatch");
    SpectralCube out(e.bands, a.height, a.width);
    const size_t n = a.pixels();
    for (size_t r = 0; r < e.count; ++r) {
        const double* ap = a.plane(r);
        for (size_t l = 0; l < e.bands; ++l) {
            const double w = e.at(l, r);
            double* ob = out.band(l);
            for (size_t px = 0; px < n; ++px) ob[px] += w * ap[px];
        }
    }
    return out;
}

// Mean square over all cube entries; the "signal power" used for SNR targets.
inline double signal_power(const SpectralCube& cube) {
    double s = 0.0;
    for (double x : cube.data) s += x * x;
    return cube.data.empty() ? 0.0 : s / static_cast<double>(cube.data.size());
}

// Adds zero-mean i.i.d. Gaussian noise so 10*log10(signal_power/noise_power) hits the target.
inline SpectralCube add_noise_snr(const SpectralCube& cube, const NoiseSpec& spec) {
    cube.validate();
    spec.validate();
    if (!spec.target_snr_db) return cube;
    const double p = signal_power(cube);
    const double noise_var = p / std::pow(10.0, *spec.target_snr_db / 10.0);
    const double sigma = std::sqrt(noise_var);
    SpectralCube out = cube;
    Rng rng(spec.seed);
    for (double& x : out.data) x += sigma * rng.gaussian();
    return out;
}

// Realized SNR in dB of (noisy - clean) against the clean cube.
inline double measured_snr_db(const SpectralCube& clean, const SpectralCube& noisy) {
    require(clean.data.size() == noisy.data.size(), "measured_snr_db: size mismatch");
    double ps = 0.0, pn = 0.0;
    for (size_t k = 0; k < clean.data.size(); ++k) {
        ps += clean.data[k] * clean.data[k];
        const double d = noisy.data[k] - clean.data[k];
        pn += d * d;
    }
    return 10.0 * std::log10(ps / pn);
}

// Endmember r is weak iff reflectance stays below refl_thresh in more than band_frac
// of bands, or abundance stays below abund_thresh in more than pixel_frac of pixels.
inline std::vector<size_t> classify_weak_endmembers(const EndmemberMatrix& e,
                                                    const AbundanceTensor& a,
                                                    double refl_thresh = 0.1,
                                                    double band_frac = 0.7,
                                                    double abund_thresh = 0.1,
                                                    double pixel_frac = 0.6) {
    e.validate();
    a.validate();
    require(e.count == a.count, "classify_weak_endmembers: count mismatch");
    for (double t : {refl_thresh, band_frac, abund_thresh, pixel_frac})
        require(t > 0.0 && t < 1.0, "classify_weak_endmembers: thresholds must lie in (0,1)");
    std::vector<size_t> weak;
    const size_t n = a.pixels();
    for (size_t r = 0; r < e.count; ++r) {
        size_t low_bands = 0;
        for (size_t l = 0; l < e.bands; ++l)
            if (e.at(l, r) < refl_thresh) ++low_bands;
        size_t low_px = 0;
        const double* ap = a.plane(r);
        for (size_t px = 0; px < n; ++px)
            if (ap[px] < abund_thresh) ++low_px;
        const bool spectral = static_cast<double>(low_bands) > band_frac * static_cast<double>(e.bands);
        const bool spatial = static_cast<double>(low_px) > pixel_frac * static_cast<double>(n);
        if (spectral || spatial) weak.push_back(r);
    }
    return weak;
}

struct EndmemberPartition {
    EndmemberMatrix strong_e;
    AbundanceTensor strong_a;
    EndmemberMatrix weak_e;
    AbundanceTensor weak_a;
};

// Column/row reorder so that the strong and weak partial mixes sum back to the full mix.
inline EndmemberPartition partition_endmembers(const EndmemberMatrix& e,
                                               const AbundanceTensor& a,
                                               const std::vector<size_t>& weak) {
    require(e.count == a.count, "partition_endmembers: count mismatch");
    std::vector<bool> is_weak(e.count, false);
    for (size_t idx : weak) {
        require(idx < e.count, "partition_endmembers: weak index out of range");
        is_weak[idx] = true;
    }
    std::vector<size_t> strong_ids, weak_ids;
    for (size_t r = 0; r < e.count; ++r)
        (is_weak[r] ? weak_ids : strong_ids).push_back(r);

    auto take = [&](const std::vector<size_t>& ids, EndmemberMatrix& eo, AbundanceTensor& ao) {
        eo = EndmemberMatrix(e.bands, ids.size());
        ao = AbundanceTensor(ids.size(), a.height, a.width);
        for (size_t k = 0; k < ids.size(); ++k) {
            std::copy(e.column(ids[k]), e.column(ids[k]) + e.bands, eo.column(k));
            std::copy(a.plane(ids[k]), a.plane(ids[k]) + a.pixels(), ao.plane(k));
        }
    };
    EndmemberPartition out;
    take(strong_ids, out.strong_e, out.strong_a);
    take(weak_ids, out.weak_e, out.weak_a);
    if (out.weak_e.count > 0) {
        out.weak_e.weak_indices.resize(out.weak_e.count);
        for (size_t k = 0; k < out.weak_e.count; ++k) out.weak_e.weak_indices[k] = k;
    }
    return out;
}

// Partial mix that skips abundance validation, so partitions (which do not individually
// satisfy ASC) can still be mixed and recombined.
inline SpectralCube partial_mix(const EndmemberMatrix& e, const AbundanceTensor& a) {
    require(e.count == a.count, "partial_mix: endmember count mismatch");
    SpectralCube out(e.bands, a.height, a.width);
    const size_t n = a.pixels();
    for (size_t r = 0; r < e.count; ++r) {
        const double* ap = a.plane(r);
        for (size_t l = 0; l < e.bands; ++l) {
            const double w = e.at(l, r);
            double* ob = out.band(l);
            for (size_t px = 0; px < n; ++px) ob[px] += w * ap[px];
        }
    }
    return out;
}

}  // namespace wsnet
