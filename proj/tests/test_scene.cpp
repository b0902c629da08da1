#include <catch2/catch.hpp>
#include <sstream>

#include "wsnet/scene.hpp"

using namespace wsnet;

TEST_CASE("load_spectral_library: minimal two-row file") {
    std::istringstream in("wavelength_nm,quartz\n400,0.5\n500,0.6\n");
    auto sigs = load_spectral_library(in);
    REQUIRE(sigs.size() == 1);
    REQUIRE(sigs[0].name == "quartz");
    REQUIRE(sigs[0].wavelengths == std::vector<double>{400.0, 500.0});
    REQUIRE(sigs[0].reflectance == std::vector<double>{0.5, 0.6});
}

TEST_CASE("load_spectral_library: duplicated wavelength row is rejected") {
    std::istringstream in("wavelength_nm,a\n400,0.5\n400,0.6\n500,0.7\n");
    REQUIRE_THROWS_AS(load_spectral_library(in), error);
}

TEST_CASE("load_spectral_library: rows are sorted by wavelength") {
    std::istringstream in("wavelength_nm,a\n500,0.7\n400,0.5\n450,0.6\n");
    auto sigs = load_spectral_library(in);
    REQUIRE(sigs[0].wavelengths == std::vector<double>{400.0, 450.0, 500.0});
    REQUIRE(sigs[0].reflectance == std::vector<double>{0.5, 0.6, 0.7});
}

TEST_CASE("load_spectral_library: 480-row 4-material file") {
    std::ostringstream text;
    text << "wavelength_nm,m1,m2,m3,m4\n";
    for (int k = 0; k < 480; ++k)
        text << 400 + k << ",0.1,0.2,0.3,0.4\n";
    std::istringstream in(text.str());
    auto sigs = load_spectral_library(in);
    REQUIRE(sigs.size() == 4);
    for (const auto& s : sigs) REQUIRE(s.wavelengths.size() == 480);
}

TEST_CASE("load_spectral_library: malformed rows are rejected") {
    {
        std::istringstream in("wavelength_nm,a\n400,0.5,9\n");
        REQUIRE_THROWS_AS(load_spectral_library(in), error);
    }
    {
        std::istringstream in("wavelength_nm,a\n400,-0.5\n");
        REQUIRE_THROWS_AS(load_spectral_library(in), error);
    }
    {
        std::istringstream in("lambda,a\n400,0.5\n");
        REQUIRE_THROWS_AS(load_spectral_library(in), error);
    }
}

TEST_CASE("resample_signature: constants, endpoints, midpoints") {
    SpectralSignature sig;
    sig.name = "s";
    sig.wavelengths = {400, 500, 600, 700};
    sig.reflectance = {0.3, 0.3, 0.3, 0.3};
    auto flat = resample_signature(sig, 7, 420, 680);
    for (double v : flat) REQUIRE(v == Approx(0.3).margin(1e-15));

    sig.reflectance = {0.1, 0.2, 0.6, 0.4};
    auto ends = resample_signature(sig, 2, 400, 700);
    REQUIRE(ends[0] == Approx(0.1));
    REQUIRE(ends[1] == Approx(0.4));

    auto mid = resample_signature(sig, 3, 400, 500);  // queries 400, 450, 500
    REQUIRE(mid[1] == Approx(0.5 * (0.1 + 0.2)).margin(1e-15));
}

TEST_CASE("resample_signature: range outside support is rejected") {
    SpectralSignature sig;
    sig.name = "s";
    sig.wavelengths = {400, 500};
    sig.reflectance = {0.1, 0.2};
    REQUIRE_THROWS_AS(resample_signature(sig, 4, 300, 500), error);
    REQUIRE_THROWS_AS(resample_signature(sig, 4, 400, 600), error);
}

namespace {

std::vector<SpectralSignature> demo_library() {
    return load_spectral_library(std::string(WSNET_DATA_DIR) + "/usgs_demo_library.csv");
}

}  // namespace

TEST_CASE("generate_blocked_scene: defaults give the 80x80x459 S1 layout") {
    auto sigs = demo_library();
    SceneSpec spec;
    spec.seed = 5;
    auto scene = generate_blocked_scene(sigs, spec);
    REQUIRE(scene.cube.bands == 459);
    REQUIRE(scene.cube.height == 80);
    REQUIRE(scene.cube.width == 80);
    REQUIRE(scene.endmembers.count == 4);
    // constant abundance within each block, at most 3 nonzero materials
    for (size_t by = 0; by < 4; ++by)
        for (size_t bx = 0; bx < 4; ++bx) {
            size_t nonzero = 0;
            for (size_t r = 0; r < 4; ++r) {
                const double v0 = scene.abundances.at(r, by * 20, bx * 20);
                if (v0 > 0.0) ++nonzero;
                for (size_t i = 0; i < 20; ++i)
                    REQUIRE(scene.abundances.at(r, by * 20 + i, bx * 20 + i % 20) == v0);
            }
            REQUIRE(nonzero <= 3);
        }
}

TEST_CASE("generate_blocked_scene: ANC/ASC and exact linear mix") {
    auto sigs = demo_library();
    SceneSpec spec;
    spec.grid = 3;
    spec.block_px = 4;
    spec.bands = 40;
    spec.seed = 9;
    auto scene = generate_blocked_scene(sigs, spec);
    const size_t n = scene.abundances.pixels();
    for (double v : scene.abundances.data) REQUIRE(v >= 0.0);
    for (size_t px = 0; px < n; ++px) {
        double s = 0.0;
        for (size_t r = 0; r < 4; ++r) s += scene.abundances.data[r * n + px];
        REQUIRE(s == Approx(1.0).margin(1e-12));
    }
    auto remix = linear_mix(scene.endmembers, scene.abundances);
    REQUIRE(remix.data == scene.cube.data);  // exact
}

TEST_CASE("generate_blocked_scene: pure blocks when materials_per_block = 1") {
    auto sigs = demo_library();
    SceneSpec spec;
    spec.grid = 2;
    spec.block_px = 3;
    spec.bands = 30;
    spec.materials_per_block = 1;
    spec.seed = 3;
    auto scene = generate_blocked_scene(sigs, spec);
    const size_t n = scene.abundances.pixels();
    for (size_t px = 0; px < n; ++px) {
        size_t ones = 0;
        for (size_t r = 0; r < 4; ++r) {
            const double v = scene.abundances.data[r * n + px];
            REQUIRE((v == 0.0 || v == 1.0));
            if (v == 1.0) ++ones;
        }
        REQUIRE(ones == 1);
    }
}

TEST_CASE("generate_blocked_scene is deterministic per seed") {
    auto sigs = demo_library();
    SceneSpec spec;
    spec.grid = 2;
    spec.block_px = 5;
    spec.bands = 25;
    spec.seed = 123;
    auto s1 = generate_blocked_scene(sigs, spec);
    auto s2 = generate_blocked_scene(sigs, spec);
    REQUIRE(s1.cube.data == s2.cube.data);
    REQUIRE(s1.abundances.data == s2.abundances.data);
    spec.seed = 124;
    auto s3 = generate_blocked_scene(sigs, spec);
    REQUIRE(s1.abundances.data != s3.abundances.data);
}

TEST_CASE("generate_blocked_scene: every endmember appears somewhere") {
    auto sigs = demo_library();
    SceneSpec spec;
    spec.grid = 4;
    spec.block_px = 2;
    spec.bands = 20;
    spec.seed = 17;
    auto scene = generate_blocked_scene(sigs, spec);
    const size_t n = scene.abundances.pixels();
    for (size_t r = 0; r < 4; ++r) {
        double mx = 0.0;
        for (size_t px = 0; px < n; ++px) mx = std::max(mx, scene.abundances.data[r * n + px]);
        REQUIRE(mx > 0.0);
    }
}

TEST_CASE("bundled magnetite stand-in satisfies the weak predicate") {
    auto sigs = demo_library();
    SceneSpec spec;
    spec.grid = 4;
    spec.block_px = 5;
    spec.bands = 459;
    spec.seed = 2;
    auto scene = generate_blocked_scene(sigs, spec);
    auto weak = classify_weak_endmembers(scene.endmembers, scene.abundances);
    REQUIRE(std::find(weak.begin(), weak.end(), 0u) != weak.end());
    REQUIRE(scene.material_names[0] == "magnetite");
}

TEST_CASE("generate_blocked_scene: too few signatures is an error") {
    auto sigs = demo_library();
    sigs.resize(2);
    SceneSpec spec;
    spec.materials_per_block = 3;
    REQUIRE_THROWS_AS(generate_blocked_scene(sigs, spec), error);
}
