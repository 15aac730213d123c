#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "parbeam/core.hpp"
#include "parbeam/radon.hpp"

namespace parbeam {

/// Transmission noise: counts ~ Poisson(I0 e^{-g} + N(0, sigma_th I0)),
/// clamped to >= 1, returned as -ln(counts / I0).
struct NoiseModel {
    double i0 = 1e5;
    double sigma_th = 1e-4; ///< standard deviation of the thermal term, relative to I0
    std::uint64_t seed = 0;
};

struct NoisySinogram {
    Sinogram sino;
    double snr_db = 0.0; ///< of this realization against the clean input
};

/// Throws InvalidArgument on non-finite input or an invalid model.
NoisySinogram apply_noise(const Sinogram& clean, const NoiseModel& nm);

/// Poisson draw: inversion below mean 30, rounded Gaussian approximation above.
double sample_poisson(double mean, std::mt19937_64& rng);

struct CalibrationOptions {
    double i0_lo = 1e1;
    double i0_hi = 1e14;
    int seeds = 10;
    double tolerance_db = 0.25;
    int max_iters = 100;
    std::uint64_t seed = 0; ///< first of the seeds averaged per evaluation
};

struct Calibration {
    double i0 = 0.0;
    double achieved_db = 0.0; ///< mean over the calibration seeds
    int evaluations = 0;
};

/// Mean achieved SNR over opts.seeds realizations at intensity i0.
double mean_snr_db(const Sinogram& clean, double i0, double sigma_th, const CalibrationOptions& opts);

/// Bisection on log I0. Throws CalibrationFailed when the target is not
/// bracketed or tolerance is not met within max_iters.
Calibration calibrate_snr(const Sinogram& clean, double target_db, double sigma_th, const CalibrationOptions& opts = {});

enum class PhantomKind { Random, SheppLogan, Disk };

/// Random phantoms: a water body ellipse plus inner ellipses with HU
/// increments drawn uniformly from [hu_lo, hu_hi].
struct PhantomConfig {
    PhantomKind kind = PhantomKind::Random;
    int min_inner = 3;
    int max_inner = 6;
    double hu_lo = -300.0;
    double hu_hi = 600.0;
    HuScale hu{};
};

Phantom make_phantom(const Geometry& geom, const PhantomConfig& cfg, std::mt19937_64& rng);

enum class InputMode { Fbp, Art };

std::string to_string(InputMode m);
InputMode parse_input_mode(const std::string& s);

struct DatasetConfig {
    PhantomConfig phantom{};
    double sigma_th = 1e-4;
    double i0 = 1e5;                      ///< used when no target is set
    std::optional<double> target_snr_db;  ///< calibrate I0 per sample
    InputMode input = InputMode::Fbp;
    int art_steps = 6;
    double omega = 0.0; ///< Landweber step for ART input, <= 0 picks 1/sigma^2
    std::uint64_t seed = 0;
};

struct Sample {
    std::size_t index = 0;
    std::uint64_t seed = 0;
    Image truth;
    Sinogram ideal;
    Sinogram noisy;
    Image input;
    double snr_db = 0.0;
    double mae_hu_input = 0.0;
};

/// Seed of sample idx derived from the master seed.
std::uint64_t sample_seed(std::uint64_t master, std::size_t idx);

/// Deterministic in (cfg.seed, idx) regardless of thread count.
Sample generate_sample(const Projector& proj, const DatasetConfig& cfg, std::size_t idx);
std::vector<Sample> generate_samples(const Projector& proj, const DatasetConfig& cfg, std::size_t count);

struct ManifestRow {
    std::size_t idx = 0;
    std::uint64_t seed = 0;
    double snr_db = 0.0;
    InputMode input = InputMode::Fbp;
    double mae_hu_input = 0.0;
    std::string f_path, gbar_path, ghat_path, fin_path; ///< relative to the dataset root
};

inline constexpr const char* kManifestName = "manifest.csv";
inline constexpr const char* kDatasetInfoName = "dataset.json";

/// Root for datasets: PARBEAM_DATA_DIR when set, else `fallback`.
std::filesystem::path data_root(const std::filesystem::path& fallback);

/// Writes four PBTK1 files per sample, manifest.csv and dataset.json (the
/// geometry and config) under `dir`. Throws IoError naming the failing path.
std::vector<ManifestRow> make_dataset(const Geometry& geom, const DatasetConfig& cfg, std::size_t count,
                                      const std::filesystem::path& dir);

struct Dataset {
    Geometry geom;
    HuScale hu;
    std::vector<ManifestRow> rows;
    std::vector<Sample> samples;
};

Dataset load_dataset(const std::filesystem::path& dir);

std::string manifest_csv(const std::vector<ManifestRow>& rows);
std::vector<ManifestRow> parse_manifest(const std::string& text);

} // namespace parbeam
