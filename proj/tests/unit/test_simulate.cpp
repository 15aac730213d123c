#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <memory>

#include "doctest.h"
#include "parbeam/errors.hpp"
#include "parbeam/io.hpp"
#include "parbeam/metrics.hpp"
#include "parbeam/parallel.hpp"
#include "parbeam/simulate.hpp"
#include "parbeam/solvers.hpp"
#include "support.hpp"

using namespace parbeam;
namespace fs = std::filesystem;

namespace {

Sinogram disk_sinogram(int p, int q) {
    const Geometry g = make_geometry(p, q, 1.0);
    std::mt19937_64 rng(0);
    PhantomConfig pc;
    pc.kind = PhantomKind::Disk;
    return Projector(g).forward(rasterize_phantom(make_phantom(g, pc, rng), g));
}

std::string file_bytes(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

fs::path scratch_dir(const std::string& name) {
    const fs::path d = fs::temp_directory_path() / ("parbeam_test_" + name);
    fs::remove_all(d);
    return d;
}

} // namespace

TEST_CASE("noise: high-dose limit, determinism, bad input") {
    const Sinogram clean = disk_sinogram(20, 16);
    const auto hi = apply_noise(clean, NoiseModel{1e12, 0.0, 3});
    CHECK(rel_error(hi.sino.values.flat(), clean.values.flat()) <= 1e-4);
    const auto a = apply_noise(clean, NoiseModel{1e4, 1e-4, 7});
    const auto b = apply_noise(clean, NoiseModel{1e4, 1e-4, 7});
    CHECK(a.sino.values == b.sino.values);
    CHECK(a.snr_db == b.snr_db);
    Sinogram bad = clean;
    bad.values(0, 0) = std::nan("");
    CHECK_THROWS_AS(apply_noise(bad, NoiseModel{}), InvalidArgument);
    CHECK_THROWS_AS(apply_noise(clean, NoiseModel{0.0, 0.0, 0}), InvalidArgument);
    CHECK_THROWS_AS(apply_noise(clean, NoiseModel{1e4, -1.0, 0}), InvalidArgument);
}

TEST_CASE("noise: unbiased in the intensity domain") {
    const Geometry g = make_geometry(5, 2, 1.0);
    Sinogram clean(g);
    for (std::size_t i = 0; i < clean.values.size(); ++i) clean.values.flat()[i] = 0.08 * static_cast<double>(i);
    for (const auto& [i0, sth] : {std::pair{50.0, 0.0}, std::pair{2000.0, 0.01}}) {
        const int draws = 10000;
        std::vector<double> sum(clean.values.size(), 0.0);
        for (int d = 0; d < draws; ++d) {
            const auto n = apply_noise(clean, NoiseModel{i0, sth, static_cast<std::uint64_t>(1000 + d)});
            for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += i0 * std::exp(-n.sino.values.flat()[i]);
        }
        for (std::size_t i = 0; i < sum.size(); ++i) {
            const double mean = i0 * std::exp(-clean.values.flat()[i]);
            const double var = mean + (sth * i0) * (sth * i0);
            const double se = std::sqrt(var / draws);
            CHECK(std::abs(sum[i] / draws - mean) <= 3.0 * se);
        }
    }
}

TEST_CASE("noise: poisson sampler moments") {
    std::mt19937_64 rng(11);
    for (double mean : {0.5, 4.0, 29.0, 31.0, 500.0}) {
        const int n = 40000;
        double s = 0.0, s2 = 0.0;
        for (int k = 0; k < n; ++k) {
            const double v = sample_poisson(mean, rng);
            CHECK(v == std::floor(v));
            s += v;
            s2 += v * v;
        }
        const double m = s / n, var = s2 / n - m * m;
        CHECK(std::abs(m - mean) <= 4.0 * std::sqrt(mean / n));
        CHECK(var == doctest::Approx(mean).epsilon(0.05));
    }
}

TEST_CASE("noise: snr increases with dose") {
    const Sinogram clean = disk_sinogram(40, 32);
    CalibrationOptions co;
    double prev = -1e9;
    for (double i0 : {1e3, 1e4, 1e5, 1e6}) {
        const double s = mean_snr_db(clean, i0, 1e-4, co);
        CHECK(s > prev);
        prev = s;
    }
}

TEST_CASE("calibration: 40 dB target, monotone in target and thermal scale") {
    const Sinogram clean = disk_sinogram(40, 32);
    const auto c40 = calibrate_snr(clean, 40.0, 1e-4);
    CHECK(std::abs(c40.achieved_db - 40.0) <= 0.25);
    CalibrationOptions fresh;
    fresh.seeds = 20;
    fresh.seed = 5000;
    const double check = mean_snr_db(clean, c40.i0, 1e-4, fresh);
    MESSAGE("I0 " << c40.i0 << " fresh-seed SNR " << check);
    CHECK(std::abs(check - 40.0) <= 0.5);

    const auto c10 = calibrate_snr(clean, 10.0, 1e-4);
    CHECK(c10.i0 < c40.i0);

    const auto lo_th = calibrate_snr(clean, 30.0, 1e-4);
    const auto hi_th = calibrate_snr(clean, 30.0, 1e-3);
    MESSAGE("30 dB: I0 " << lo_th.i0 << " (sigma_th 1e-4) vs " << hi_th.i0 << " (1e-3)");
    CHECK(hi_th.i0 > lo_th.i0);

    CHECK_THROWS_AS(calibrate_snr(clean, 200.0, 1e-4), CalibrationFailed);
}

TEST_CASE("phantoms: random phantoms stay in the disk and are reproducible") {
    const Geometry g = make_geometry(10, 16, 1.0);
    PhantomConfig pc;
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        std::mt19937_64 r1(seed), r2(seed);
        const Phantom a = make_phantom(g, pc, r1);
        const Phantom b = make_phantom(g, pc, r2);
        REQUIRE(a.ellipses.size() == b.ellipses.size());
        CHECK(a.ellipses.size() >= 4);
        CHECK(a.ellipses.size() <= 7);
        CHECK_NOTHROW(rasterize_phantom(a, g));
    }
}

TEST_CASE("samples: independent of thread count") {
    const Geometry g = make_geometry(12, 8, 1.0);
    const Projector proj(g);
    DatasetConfig cfg;
    cfg.seed = 42;
    cfg.input = InputMode::Art;
    const int before = thread_count();
    set_thread_count(1);
    const auto a = generate_samples(proj, cfg, 5);
    set_thread_count(4);
    const auto b = generate_samples(proj, cfg, 5);
    set_thread_count(before);
    for (std::size_t i = 0; i < 5; ++i) {
        CHECK(a[i].noisy.values == b[i].noisy.values);
        CHECK(a[i].input.values == b[i].input.values);
    }
    CHECK(!(a[0].truth.values == a[1].truth.values));
}

TEST_CASE("dataset: files, manifest, reload and determinism") {
    const Geometry g = make_geometry(12, 8, 1.0);
    DatasetConfig cfg;
    cfg.seed = 9;
    const fs::path d1 = scratch_dir("ds1"), d2 = scratch_dir("ds2");
    const auto rows = make_dataset(g, cfg, 1, d1);
    REQUIRE(rows.size() == 1);
    int pbtk = 0;
    for (const auto& e : fs::directory_iterator(d1)) pbtk += e.path().extension() == ".pbtk";
    CHECK(pbtk == 4);
    const std::string manifest = file_bytes(d1 / kManifestName);
    CHECK(manifest.rfind("idx,seed,snr_db,input_mode,mae_hu_input,f_path,gbar_path,ghat_path,fin_path\n", 0) == 0);
    CHECK(parse_manifest(manifest).size() == 1);

    make_dataset(g, cfg, 1, d2);
    for (const char* f : {"manifest.csv", "00000_f.pbtk", "00000_gbar.pbtk", "00000_ghat.pbtk", "00000_fin.pbtk"})
        CHECK(file_bytes(d1 / f) == file_bytes(d2 / f));

    const Dataset ds = load_dataset(d1);
    REQUIRE(ds.samples.size() == 1);
    CHECK(ds.geom == g);
    const Sample s = generate_sample(Projector(g), cfg, 0);
    CHECK(ds.samples[0].truth.values == s.truth.values);
    CHECK(ds.samples[0].noisy.values == s.noisy.values);
    CHECK(ds.samples[0].input.values == s.input.values);
    fs::remove_all(d1);
    fs::remove_all(d2);
}

TEST_CASE("dataset: art input equals six landweber steps from zero") {
    const Geometry g = make_geometry(12, 8, 1.0);
    DatasetConfig cfg;
    cfg.seed = 3;
    cfg.input = InputMode::Art;
    cfg.art_steps = 6;
    const fs::path d = scratch_dir("art");
    make_dataset(g, cfg, 2, d);
    const Dataset ds = load_dataset(d);
    auto op = std::make_shared<ProjectorOperator>(std::make_shared<Projector>(g));
    const double s = power_method_norm(*op, kBoundPowerIters, kBoundPowerSeed).sigma_max;
    for (const auto& smp : ds.samples) {
        LandweberOptions lo;
        lo.omega = 1.0 / (s * s);
        lo.iters = 6;
        const auto f = landweber(LinearProblem(op, smp.noisy.values.vec()), lo).f;
        CHECK(smp.input.values.vec() == f);
    }
    fs::remove_all(d);
}

TEST_CASE("dataset: calibrated target, errors, data root") {
    const Geometry g = make_geometry(40, 16, 1.0);
    DatasetConfig cfg;
    cfg.target_snr_db = 40.0;
    cfg.seed = 1;
    const Projector proj(g);
    const auto samples = generate_samples(proj, cfg, 8);
    double mean = 0.0;
    for (const auto& s : samples) mean += s.snr_db;
    mean /= 8.0;
    MESSAGE("mean achieved SNR " << mean);
    CHECK(mean >= 39.0);
    CHECK(mean <= 41.0);

    CHECK_THROWS_AS(make_dataset(g, cfg, 0, scratch_dir("zero")), InvalidArgument);
    CHECK_THROWS_AS(make_dataset(g, DatasetConfig{}, 1, "/proc/parbeam_no_such_dir/x"), IoError);
    CHECK_THROWS_AS(load_dataset(scratch_dir("missing")), IoError);

    ::setenv("PARBEAM_DATA_DIR", "/tmp/parbeam_root", 1);
    CHECK(data_root("fallback") == fs::path("/tmp/parbeam_root"));
    ::unsetenv("PARBEAM_DATA_DIR");
    CHECK(data_root("fallback") == fs::path("fallback"));
}
