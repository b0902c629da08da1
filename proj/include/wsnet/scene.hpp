#pragma once

#include <algorithm>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "wsnet/common.hpp"
#include "wsnet/core.hpp"

// Synthetic blocked-scene generation from library spectra, plus the spectral-library
// CSV loader (header `wavelength_nm,<name1>,<name2>,...`).

namespace wsnet {

struct SpectralSignature {
    std::string name;
    std::vector<double> wavelengths;  // nm, strictly increasing
    std::vector<double> reflectance;  // >= 0

    void validate() const {
        require(wavelengths.size() == reflectance.size(), "SpectralSignature: length mismatch");
        require(!wavelengths.empty(), "SpectralSignature: empty signature");
        for (size_t k = 0; k < wavelengths.size(); ++k) {
            require(std::isfinite(wavelengths[k]) && std::isfinite(reflectance[k]),
                    "SpectralSignature: non-finite value");
            require(reflectance[k] >= 0.0, "SpectralSignature: negative reflectance");
            if (k) require(wavelengths[k] > wavelengths[k - 1],
                           "SpectralSignature: wavelengths not strictly increasing");
        }
    }
};

struct SceneSpec {
    size_t grid = 4;                 // blocks per side
    size_t block_px = 20;            // pixels per block side
    size_t bands = 459;              // L
    double lambda_min = 400.0;       // nm
    double lambda_max = 2500.0;      // nm
    size_t materials_per_block = 3;
    std::uint64_t seed = 0;

    size_t side() const { return grid * block_px; }

    void validate(size_t num_signatures) const {
        require(grid > 0 && block_px > 0 && bands > 0, "SceneSpec: zero dimension");
        require(lambda_max > lambda_min, "SceneSpec: bad wavelength range");
        require(materials_per_block > 0, "SceneSpec: materials_per_block must be >= 1");
        require(materials_per_block <= num_signatures,
                "SceneSpec: fewer signatures than materials_per_block");
    }
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur += c;
        }
    }
    out.push_back(cur);
    return out;
}

inline double parse_number(const std::string& s, const std::string& what) {
    try {
        size_t pos = 0;
        double v = std::stod(s, &pos);
        while (pos < s.size() && (s[pos] == ' ' || s[pos] == '\t')) ++pos;
        require(pos == s.size(), what + ": trailing junk in '" + s + "'");
        return v;
    } catch (const std::exception&) {
        throw error(what + ": cannot parse number '" + s + "'");
    }
}

}  // namespace detail

inline std::vector<SpectralSignature> load_spectral_library(std::istream& in) {
    std::string line;
    require(static_cast<bool>(std::getline(in, line)), "spectral library: empty file");
    auto header = detail::split_csv_line(line);
    require(header.size() >= 2, "spectral library: header needs wavelength_nm plus one material");
    require(header[0] == "wavelength_nm", "spectral library: first column must be wavelength_nm");
    const size_t nmat = header.size() - 1;

    std::vector<double> wl;
    std::vector<std::vector<double>> refl(nmat);
    size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line == "\r") continue;
        auto cells = detail::split_csv_line(line);
        require(cells.size() == header.size(),
                "spectral library: wrong column count on line " + std::to_string(lineno));
        wl.push_back(detail::parse_number(cells[0], "spectral library wavelength"));
        for (size_t m = 0; m < nmat; ++m) {
            double v = detail::parse_number(cells[m + 1], "spectral library reflectance");
            require(v >= 0.0, "spectral library: negative reflectance on line " + std::to_string(lineno));
            refl[m].push_back(v);
        }
    }
    require(!wl.empty(), "spectral library: no data rows");

    // sort rows by wavelength, then demand strict monotonicity (duplicates are an error)
    std::vector<size_t> order(wl.size());
    for (size_t k = 0; k < order.size(); ++k) order[k] = k;
    std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) { return wl[a] < wl[b]; });

    std::vector<SpectralSignature> sigs(nmat);
    for (size_t m = 0; m < nmat; ++m) {
        sigs[m].name = header[m + 1];
        sigs[m].wavelengths.reserve(wl.size());
        sigs[m].reflectance.reserve(wl.size());
        for (size_t k : order) {
            sigs[m].wavelengths.push_back(wl[k]);
            sigs[m].reflectance.push_back(refl[m][k]);
        }
        sigs[m].validate();  // rejects duplicated wavelengths
    }
    return sigs;
}

inline std::vector<SpectralSignature> load_spectral_library(const std::string& path) {
    std::ifstream in(path);
    require(static_cast<bool>(in), "spectral library: cannot open " + path);
    return load_spectral_library(in);
}

// Linear interpolation of `sig` at `l` uniformly spaced wavelengths spanning
// [lambda_min, lambda_max] inclusive.
inline std::vector<double> resample_signature(const SpectralSignature& sig, size_t l,
                                              double lambda_min, double lambda_max) {
    sig.validate();
    require(l > 0, "resample_signature: zero bands");
    require(lambda_max >= lambda_min, "resample_signature: bad range");
    require(lambda_min >= sig.wavelengths.front() && lambda_max <= sig.wavelengths.back(),
            "resample_signature: requested range outside signature support");
    std::vector<double> out(l);
    for (size_t k = 0; k < l; ++k) {
        const double lam = (l == 1) ? lambda_min
                                    : lambda_min + (lambda_max - lambda_min) *
                                                       static_cast<double>(k) /
                                                       static_cast<double>(l - 1);
        auto it = std::lower_bound(sig.wavelengths.begin(), sig.wavelengths.end(), lam);
        if (it == sig.wavelengths.begin()) {
            out[k] = sig.reflectance.front();
            continue;
        }
        if (it == sig.wavelengths.end()) {
            out[k] = sig.reflectance.back();
            continue;
        }
        const size_t hi = static_cast<size_t>(it - sig.wavelengths.begin());
        const size_t lo = hi - 1;
        const double t = (lam - sig.wavelengths[lo]) / (sig.wavelengths[hi] - sig.wavelengths[lo]);
        out[k] = (1.0 - t) * sig.reflectance[lo] + t * sig.reflectance[hi];
    }
    return out;
}

struct SyntheticScene {
    SpectralCube cube;
    EndmemberMatrix endmembers;
    AbundanceTensor abundances;
    std::vector<std::string> material_names;
};

namespace detail {

inline std::vector<std::vector<size_t>> combinations(size_t n, size_t k) {
    std::vector<std::vector<size_t>> out;
    std::vector<size_t> idx(k);
    for (size_t i = 0; i < k; ++i) idx[i] = i;
    while (true) {
        out.push_back(idx);
        size_t i = k;
        while (i-- > 0) {
            if (idx[i] != i + n - k) {
                ++idx[i];
                for (size_t j = i + 1; j < k; ++j) idx[j] = idx[j - 1] + 1;
                break;
            }
            if (i == 0) return out;
        }
    }
}

}  // namespace detail

// Blocked scene: grid x grid blocks of block_px x block_px pixels. Each block holds a
// constant abundance vector drawn from a symmetric Dirichlet(1,...,1) over a subset of
// materials_per_block endmembers; subsets cycle through all combinations in seeded
// shuffled order so every endmember is represented.
inline SyntheticScene generate_blocked_scene(const std::vector<SpectralSignature>& signatures,
                                             const SceneSpec& spec) {
    spec.validate(signatures.size());
    const size_t p = signatures.size();
    const size_t side = spec.side();

    SyntheticScene scene;
    scene.endmembers = EndmemberMatrix(spec.bands, p);
    for (size_t r = 0; r < p; ++r) {
        auto col = resample_signature(signatures[r], spec.bands, spec.lambda_min, spec.lambda_max);
        std::copy(col.begin(), col.end(), scene.endmembers.column(r));
        scene.material_names.push_back(signatures[r].name);
    }

    Rng rng(spec.seed);
    auto combos = detail::combinations(p, spec.materials_per_block);
    // seeded Fisher-Yates over the combination list
    for (size_t k = combos.size(); k > 1; --k) std::swap(combos[k - 1], combos[rng.index(k)]);

    scene.abundances = AbundanceTensor(p, side, side);
    for (size_t by = 0; by < spec.grid; ++by) {
        for (size_t bx = 0; bx < spec.grid; ++bx) {
            const auto& chosen = combos[(by * spec.grid + bx) % combos.size()];
            // Dirichlet(1,...,1): normalized unit exponentials
            std::vector<double> frac(chosen.size());
            double total = 0.0;
            for (double& f : frac) {
                f = -std::log(rng.uniform01_open0());
                total += f;
            }
            for (double& f : frac) f /= total;
            for (size_t m = 0; m < chosen.size(); ++m) {
                const size_t r = chosen[m];
                for (size_t i = by * spec.block_px; i < (by + 1) * spec.block_px; ++i)
                    for (size_t j = bx * spec.block_px; j < (bx + 1) * spec.block_px; ++j)
                        scene.abundances.at(r, i, j) = frac[m];
            }
        }
    }

    scene.cube = linear_mix(scene.endmembers, scene.abundances);
    scene.cube.wavelengths.resize(spec.bands);
    for (size_t k = 0; k < spec.bands; ++k)
        scene.cube.wavelengths[k] =
            (spec.bands == 1) ? spec.lambda_min
                              : spec.lambda_min + (spec.lambda_max - spec.lambda_min) *
                                                      static_cast<double>(k) /
                                                      static_cast<double>(spec.bands - 1);
    return scene;
}

}  // namespace wsnet
