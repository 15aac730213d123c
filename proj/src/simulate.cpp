#include "parbeam/simulate.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <memory>
#include <numbers>
#include <sstream>

#include <json.hpp>

#include "parbeam/errors.hpp"
#include "parbeam/fbp.hpp"
#include "parbeam/io.hpp"
#include "parbeam/metrics.hpp"
#include "parbeam/parallel.hpp"
#include "parbeam/solvers.hpp"

namespace parbeam {

namespace fs = std::filesystem;

double sample_poisson(double mean, std::mt19937_64& rng) {
    if (!(mean > 0.0)) return 0.0;
    if (mean < 30.0) {
        std::uniform_real_distribution<double> ud(0.0, 1.0);
        const double u = ud(rng);
        double p = std::exp(-mean);
        double cdf = p;
        int k = 0;
        while (u > cdf && k < 1000) {
            ++k;
            p *= mean / k;
            cdf += p;
        }
        return k;
    }
    std::normal_distribution<double> nd(0.0, 1.0);
    return std::max(0.0, std::round(mean + std::sqrt(mean) * nd(rng)));
}

NoisySinogram apply_noise(const Sinogram& clean, const NoiseModel& nm) {
    if (!(nm.i0 > 0.0) || !std::isfinite(nm.i0)) throw InvalidArgument("apply_noise: I0 must be positive and finite");
    if (!(nm.sigma_th >= 0.0)) throw InvalidArgument("apply_noise: sigma_th must be >= 0");
    for (double v : clean.values.flat())
        if (!std::isfinite(v)) throw InvalidArgument("apply_noise: non-finite sinogram entry");
    std::mt19937_64 rng(nm.seed);
    std::normal_distribution<double> thermal(0.0, 1.0);
    NoisySinogram out{Sinogram(clean.geom), 0.0};
    const auto in = clean.values.flat();
    auto dst = out.sino.values.flat();
    for (std::size_t i = 0; i < in.size(); ++i) {
        double mean = nm.i0 * std::exp(-in[i]);
        if (nm.sigma_th > 0.0) mean += nm.sigma_th * nm.i0 * thermal(rng);
        const double counts = std::max(1.0, sample_poisson(mean, rng));
        dst[i] = -std::log(counts / nm.i0);
    }
    out.snr_db = snr_db(dst, in);
    return out;
}

double mean_snr_db(const Sinogram& clean, double i0, double sigma_th, const CalibrationOptions& opts) {
    double s = 0.0;
    for (int k = 0; k < opts.seeds; ++k)
        s += apply_noise(clean, NoiseModel{i0, sigma_th, opts.seed + static_cast<std::uint64_t>(k)}).snr_db;
    return s / opts.seeds;
}

Calibration calibrate_snr(const Sinogram& clean, double target_db, double sigma_th, const CalibrationOptions& opts) {
    if (opts.seeds < 1 || !(opts.i0_lo > 0.0) || !(opts.i0_hi > opts.i0_lo))
        throw InvalidArgument("calibrate_snr: bad search options");
    Calibration c;
    double lo = std::log10(opts.i0_lo), hi = std::log10(opts.i0_hi);
    const double snr_lo = mean_snr_db(clean, opts.i0_lo, sigma_th, opts);
    const double snr_hi = mean_snr_db(clean, opts.i0_hi, sigma_th, opts);
    c.evaluations = 2;
    if (!(snr_lo <= target_db && target_db <= snr_hi)) {
        std::ostringstream msg;
        msg << "calibrate_snr: target " << target_db << " dB not bracketed; SNR(I0=" << opts.i0_lo << ") = " << snr_lo
            << " dB, SNR(I0=" << opts.i0_hi << ") = " << snr_hi << " dB, sigma_th = " << sigma_th;
        throw CalibrationFailed(msg.str());
    }
    for (int it = 0; it < opts.max_iters; ++it) {
        const double mid = 0.5 * (lo + hi);
        const double i0 = std::pow(10.0, mid);
        const double snr = mean_snr_db(clean, i0, sigma_th, opts);
        ++c.evaluations;
        if (std::abs(snr - target_db) <= opts.tolerance_db) {
            c.i0 = i0;
            c.achieved_db = snr;
            return c;
        }
        (snr < target_db ? lo : hi) = mid;
    }
    std::ostringstream msg;
    msg << "calibrate_snr: no I0 within " << opts.tolerance_db << " dB of " << target_db << " dB after "
        << opts.max_iters << " bisection steps; bracket log10 I0 in [" << lo << ", " << hi << "]";
    throw CalibrationFailed(msg.str());
}

Phantom make_phantom(const Geometry& geom, const PhantomConfig& cfg, std::mt19937_64& rng) {
    const double r = geom.radius();
    const double mu_w = cfg.hu.mu_water;
    switch (cfg.kind) {
    case PhantomKind::SheppLogan:
        return shepp_logan(geom, cfg.hu);
    case PhantomKind::Disk: {
        Phantom ph;
        ph.ellipses.push_back(Ellipse{0.0, 0.0, 0.5 * r, 0.5 * r, 0.0, mu_w});
        return ph;
    }
    case PhantomKind::Random:
        break;
    }
    if (cfg.min_inner < 0 || cfg.max_inner < cfg.min_inner) throw InvalidArgument("make_phantom: bad inner count range");
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    auto uni = [&](double a, double b) { return a + (b - a) * unit(rng); };
    Phantom ph;
    Ellipse body;
    body.a = uni(0.6, 0.85) * r;
    body.b = uni(0.6, 0.85) * r;
    body.cx = uni(-0.05, 0.05) * r;
    body.cy = uni(-0.05, 0.05) * r;
    body.theta = uni(0.0, std::numbers::pi);
    body.value = mu_w;
    ph.ellipses.push_back(body);
    std::uniform_int_distribution<int> count(cfg.min_inner, cfg.max_inner);
    const int n = count(rng);
    for (int i = 0; i < n; ++i) {
        // Centre inside 60% of the body, so inner ellipses stay well within the disk.
        const double t = uni(0.0, 2.0 * std::numbers::pi);
        const double rad = 0.6 * std::sqrt(unit(rng));
        const double u = rad * body.a * std::cos(t), v = rad * body.b * std::sin(t);
        const double ct = std::cos(body.theta), st = std::sin(body.theta);
        Ellipse e;
        e.cx = body.cx + ct * u - st * v;
        e.cy = body.cy + st * u + ct * v;
        e.a = uni(0.05, 0.2) * r;
        e.b = uni(0.05, 0.2) * r;
        e.theta = uni(0.0, std::numbers::pi);
        e.value = uni(cfg.hu_lo, cfg.hu_hi) / 1000.0 * mu_w;
        ph.ellipses.push_back(e);
    }
    return ph;
}

std::string to_string(InputMode m) { return m == InputMode::Fbp ? "fbp" : "art"; }

InputMode parse_input_mode(const std::string& s) {
    if (s == "fbp") return InputMode::Fbp;
    if (s == "art") return InputMode::Art;
    throw InvalidArgument("unknown input mode: " + s);
}

std::uint64_t sample_seed(std::uint64_t master, std::size_t idx) {
    std::seed_seq seq{static_cast<std::uint32_t>(master), static_cast<std::uint32_t>(master >> 32),
                      static_cast<std::uint32_t>(idx), static_cast<std::uint32_t>(static_cast<std::uint64_t>(idx) >> 32)};
    std::uint32_t words[2];
    seq.generate(words, words + 2);
    return (static_cast<std::uint64_t>(words[0]) << 32) | words[1];
}

namespace {

double resolve_omega(const Projector& proj, const DatasetConfig& cfg) {
    if (cfg.omega > 0.0) return cfg.omega;
    const ProjectorOperator op(std::make_shared<Projector>(proj));
    const double s = power_method_norm(op, kBoundPowerIters, kBoundPowerSeed).sigma_max;
    return 1.0 / (s * s);
}

Sample generate_with_omega(const Projector& proj, const DatasetConfig& cfg, std::size_t idx, double omega) {
    const Geometry& geom = proj.geometry();
    Sample s{idx, sample_seed(cfg.seed, idx), Image(geom), Sinogram(geom), Sinogram(geom), Image(geom), 0.0, 0.0};
    std::mt19937_64 rng(s.seed);
    s.truth = rasterize_phantom(make_phantom(geom, cfg.phantom, rng), geom);
    const std::uint64_t noise_seed = rng();
    const std::uint64_t calib_seed = rng();
    s.ideal = proj.forward(s.truth);
    double i0 = cfg.i0;
    if (cfg.target_snr_db) {
        CalibrationOptions co;
        co.seed = calib_seed;
        i0 = calibrate_snr(s.ideal, *cfg.target_snr_db, cfg.sigma_th, co).i0;
    }
    auto noisy = apply_noise(s.ideal, NoiseModel{i0, cfg.sigma_th, noise_seed});
    s.noisy = std::move(noisy.sino);
    s.snr_db = noisy.snr_db;
    if (cfg.input == InputMode::Fbp) {
        s.input = reconstruct_fbp(s.noisy, make_fbp_plan(geom));
    } else {
        auto op = std::make_shared<ProjectorOperator>(std::make_shared<Projector>(proj));
        LinearProblem prob(op, s.noisy.values.vec());
        LandweberOptions lo;
        lo.omega = omega;
        lo.iters = cfg.art_steps;
        lo.trace.enabled = false;
        const auto side = static_cast<std::size_t>(geom.image_side());
        s.input = Image(geom, Array2(side, side, landweber(prob, lo).f));
    }
    s.mae_hu_input = mae_hu(s.input.values.flat(), s.truth.values.flat(), cfg.phantom.hu);
    return s;
}

} // namespace

Sample generate_sample(const Projector& proj, const DatasetConfig& cfg, std::size_t idx) {
    const double omega = cfg.input == InputMode::Art ? resolve_omega(proj, cfg) : 0.0;
    return generate_with_omega(proj, cfg, idx, omega);
}

std::vector<Sample> generate_samples(const Projector& proj, const DatasetConfig& cfg, std::size_t count) {
    const double omega = cfg.input == InputMode::Art ? resolve_omega(proj, cfg) : 0.0;
    std::vector<std::optional<Sample>> slots(count);
    parallel_for(0, count, [&](std::size_t i) { slots[i] = generate_with_omega(proj, cfg, i, omega); });
    std::vector<Sample> out;
    out.reserve(count);
    for (auto& s : slots) out.push_back(std::move(*s));
    return out;
}

fs::path data_root(const fs::path& fallback) {
    const char* env = std::getenv("PARBEAM_DATA_DIR");
    return env && *env ? fs::path(env) : fallback;
}

std::string manifest_csv(const std::vector<ManifestRow>& rows) {
    std::string out = "idx,seed,snr_db,input_mode,mae_hu_input,f_path,gbar_path,ghat_path,fin_path\n";
    for (const auto& r : rows) {
        out += std::to_string(r.idx) + "," + std::to_string(r.seed) + "," + io::format_double(r.snr_db) + "," +
               to_string(r.input) + "," + io::format_double(r.mae_hu_input) + "," + r.f_path + "," + r.gbar_path +
               "," + r.ghat_path + "," + r.fin_path + "\n";
    }
    return out;
}

std::vector<ManifestRow> parse_manifest(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line) || line.rfind("idx,seed,", 0) != 0) throw IoError("manifest: missing header");
    std::vector<ManifestRow> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::istringstream ls(line);
        std::string cell;
        while (std::getline(ls, cell, ',')) f.push_back(cell);
        if (f.size() != 9) throw IoError("manifest: expected 9 fields in row: " + line);
        ManifestRow r;
        try {
            r.idx = std::stoull(f[0]);
            r.seed = std::stoull(f[1]);
            r.snr_db = std::strtod(f[2].c_str(), nullptr);
            r.input = parse_input_mode(f[3]);
            r.mae_hu_input = std::strtod(f[4].c_str(), nullptr);
        } catch (const std::exception& e) {
            throw IoError("manifest: bad row: " + line);
        }
        r.f_path = f[5];
        r.gbar_path = f[6];
        r.ghat_path = f[7];
        r.fin_path = f[8];
        rows.push_back(std::move(r));
    }
    return rows;
}

namespace {

nlohmann::json dataset_info(const Geometry& geom, const DatasetConfig& cfg, std::size_t count, double omega) {
    nlohmann::json j;
    j["geometry"] = {{"p", geom.num_angles()}, {"q", geom.half_bins()}, {"radius", geom.radius()}};
    j["mu_water"] = cfg.phantom.hu.mu_water;
    j["count"] = count;
    j["seed"] = cfg.seed;
    j["input_mode"] = to_string(cfg.input);
    j["art_steps"] = cfg.art_steps;
    j["omega"] = omega;
    j["sigma_th"] = cfg.sigma_th;
    j["i0"] = cfg.i0;
    j["target_snr_db"] = cfg.target_snr_db ? nlohmann::json(*cfg.target_snr_db) : nlohmann::json(nullptr);
    const char* kinds[] = {"random", "shepp-logan", "disk"};
    j["phantom"] = {{"kind", kinds[static_cast<int>(cfg.phantom.kind)]},
                    {"min_inner", cfg.phantom.min_inner},
                    {"max_inner", cfg.phantom.max_inner},
                    {"hu_lo", cfg.phantom.hu_lo},
                    {"hu_hi", cfg.phantom.hu_hi}};
    return j;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + path.string());
    f << text;
    if (!f) throw IoError("write failed: " + path.string());
}

std::string read_text(const fs::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for reading: " + path.string());
    std::ostringstream s;
    s << f.rdbuf();
    return s.str();
}

} // namespace

std::vector<ManifestRow> make_dataset(const Geometry& geom, const DatasetConfig& cfg, std::size_t count,
                                      const fs::path& dir) {
    if (count < 1) throw InvalidArgument("make_dataset: count must be >= 1");
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir)) throw IoError("cannot create dataset directory: " + dir.string());
    const Projector proj(geom);
    const double omega = cfg.input == InputMode::Art ? resolve_omega(proj, cfg) : 0.0;
    DatasetConfig resolved = cfg;
    resolved.omega = omega;
    const auto samples = generate_samples(proj, resolved, count);
    std::vector<ManifestRow> rows;
    for (const auto& s : samples) {
        char stem[32];
        std::snprintf(stem, sizeof stem, "%05zu", s.index);
        ManifestRow r;
        r.idx = s.index;
        r.seed = s.seed;
        r.snr_db = s.snr_db;
        r.input = cfg.input;
        r.mae_hu_input = s.mae_hu_input;
        r.f_path = std::string(stem) + "_f.pbtk";
        r.gbar_path = std::string(stem) + "_gbar.pbtk";
        r.ghat_path = std::string(stem) + "_ghat.pbtk";
        r.fin_path = std::string(stem) + "_fin.pbtk";
        io::write_image(dir / r.f_path, s.truth);
        io::write_sinogram(dir / r.gbar_path, s.ideal);
        io::write_sinogram(dir / r.ghat_path, s.noisy);
        io::write_image(dir / r.fin_path, s.input);
        rows.push_back(std::move(r));
    }
    write_text(dir / kManifestName, manifest_csv(rows));
    write_text(dir / kDatasetInfoName, dataset_info(geom, cfg, count, omega).dump(2) + "\n");
    return rows;
}

Dataset load_dataset(const fs::path& dir) {
    nlohmann::json info;
    try {
        info = nlohmann::json::parse(read_text(dir / kDatasetInfoName));
    } catch (const nlohmann::json::exception& e) {
        throw IoError((dir / kDatasetInfoName).string() + ": " + e.what());
    }
    Geometry geom = make_geometry(info.at("geometry").at("p").get<int>(), info.at("geometry").at("q").get<int>(),
                                  info.at("geometry").at("radius").get<double>());
    Dataset ds{geom, HuScale(info.at("mu_water").get<double>()), parse_manifest(read_text(dir / kManifestName)), {}};
    for (const auto& r : ds.rows) {
        Sample s{r.idx,
                 r.seed,
                 io::read_image(dir / r.f_path, geom),
                 io::read_sinogram(dir / r.gbar_path, geom),
                 io::read_sinogram(dir / r.ghat_path, geom),
                 io::read_image(dir / r.fin_path, geom),
                 r.snr_db,
                 r.mae_hu_input};
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

} // namespace parbeam
