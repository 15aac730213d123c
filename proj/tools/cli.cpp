#include "cli.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <random>
#include <sstream>

#include <CLI11.hpp>

#include "parbeam/errors.hpp"
#include "parbeam/fbp.hpp"
#include "parbeam/io.hpp"
#include "parbeam/metrics.hpp"
#include "parbeam/regularizers.hpp"
#include "parbeam/schemes.hpp"
#include "parbeam/simulate.hpp"
#include "parbeam/solvers.hpp"

namespace parbeam::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

#define PARBEAM_CFG_FIELDS(X)                                                                                         \
    X(command) X(p) X(q) X(radius) X(seed) X(out) X(phantoms) X(phantom) X(snr_db) X(i0) X(sigma_th) X(input)         \
    X(art_steps) X(method) X(data) X(index) X(sino) X(truth) X(iters) X(omega) X(lambda) X(block_size) X(weight)       \
    X(fbp_cutoff) X(nltv_gamma) X(nltv_delta) X(nltv_h0) X(nltv_window) X(scheme) X(samples) X(val_fraction)          \
    X(epochs) X(batch) X(lr) X(lr_decay) X(decay_every) X(max_steps) X(levels) X(base) X(batchnorm) X(tau1) X(tau2)    \
    X(tau3) X(tau4) X(gamma) X(eps) X(s) X(depth) X(p_init) X(gamma_a) X(gamma_s) X(gamma_g) X(checkpoint) X(depths)   \
    X(trials)

} // namespace

json to_json(const RunConfig& c) {
    json j;
#define X(f) j[#f] = c.f;
    PARBEAM_CFG_FIELDS(X)
#undef X
    return j;
}

RunConfig from_json(const json& j) {
    if (!j.is_object()) throw InvalidArgument("config: expected a JSON object");
    RunConfig c;
    for (const auto& [key, value] : j.items()) {
        bool known = false;
        try {
#define X(f)                                                                                                          \
    if (key == #f) {                                                                                                  \
        value.get_to(c.f);                                                                                            \
        known = true;                                                                                                 \
    }
            PARBEAM_CFG_FIELDS(X)
#undef X
        } catch (const json::exception& e) {
            throw InvalidArgument("config: bad value for '" + key + "': " + e.what());
        }
        if (!known) throw InvalidArgument("config: unknown key '" + key + "'");
    }
    return c;
}

namespace {

// ---- helpers -------------------------------------------------------------

void ensure_writable(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    const fs::path probe = dir / ".parbeam_write_probe";
    std::ofstream os(probe);
    if (ec || !os) throw UsageError("output directory is not writable: " + dir.string());
    os.close();
    fs::remove(probe, ec);
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary);
    os << text;
    if (!os) throw IoError("cannot write " + path.string());
}

void echo(const RunConfig& c, std::ostream& out) {
    const std::string text = to_json(c).dump(2);
    out << "config " << to_json(c).dump() << '\n';
    write_text(fs::path(c.out) / "run.json", text + "\n");
}

std::pair<double, double> range_of(const Array2& a) {
    const auto [lo, hi] = std::minmax_element(a.flat().begin(), a.flat().end());
    return {*lo, *hi};
}

/// Linear window from the reference range (or the image's own).
void preview(const fs::path& path, const Array2& img, const Array2* ref) {
    auto [lo, hi] = range_of(ref ? *ref : img);
    if (!(hi > lo)) hi = lo + 1.0;
    io::write_pgm(path, img, lo, hi);
}

Geometry geometry_of(const RunConfig& c) { return make_geometry(c.p, c.q, c.radius); }

Dataset open_dataset(const RunConfig& c) {
    if (c.data.empty()) throw UsageError("--data is required (create one with `parbeam simulate --out DIR`)");
    if (!fs::exists(fs::path(c.data) / kManifestName))
        throw UsageError("no dataset at '" + c.data + "' (create one with `parbeam simulate --out " + c.data + "`)");
    return load_dataset(c.data);
}

json dataset_info(const RunConfig& c) {
    std::ifstream is(fs::path(c.data) / kDatasetInfoName);
    return json::parse(is);
}

PhantomKind parse_phantom(const std::string& s) {
    if (s == "random") return PhantomKind::Random;
    if (s == "shepp-logan") return PhantomKind::SheppLogan;
    if (s == "disk") return PhantomKind::Disk;
    throw UsageError("unknown phantom '" + s + "' (random, shepp-logan, disk)");
}

double sigma_of(const LinearOperator& op) { return power_method_norm(op, kBoundPowerIters, kBoundPowerSeed).sigma_max; }

double parse_number(const std::string& s, const char* what) {
    try {
        std::size_t pos = 0;
        const double v = std::stod(s, &pos);
        if (pos != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw UsageError(std::string(what) + ": expected a number or 'auto', got '" + s + "'");
    }
}

// ---- simulate ------------------------------------------------------------

int cmd_simulate(RunConfig c, std::ostream& out) {
    const Geometry geom = geometry_of(c);
    DatasetConfig dc;
    dc.phantom.kind = parse_phantom(c.phantom);
    dc.sigma_th = c.sigma_th;
    dc.i0 = c.i0;
    if (c.snr_db > 0.0) dc.target_snr_db = c.snr_db;
    dc.input = parse_input_mode(c.input);
    dc.art_steps = c.art_steps;
    dc.seed = c.seed;
    ensure_writable(c.out);
    echo(c, out);
    const auto rows = make_dataset(geom, dc, c.phantoms, c.out);
    double mean = 0.0, lo = INFINITY, hi = -INFINITY;
    for (const auto& r : rows) {
        mean += r.snr_db / static_cast<double>(rows.size());
        lo = std::min(lo, r.snr_db);
        hi = std::max(hi, r.snr_db);
    }
    const Dataset ds = load_dataset(c.out);
    fs::create_directories(fs::path(c.out) / "previews");
    for (std::size_t i = 0; i < std::min<std::size_t>(ds.samples.size(), 4); ++i) {
        const Sample& s = ds.samples[i];
        char name[32];
        std::snprintf(name, sizeof name, "%05zu", s.index);
        preview(fs::path(c.out) / "previews" / (std::string(name) + "_truth.pgm"), s.truth.values, &s.truth.values);
        preview(fs::path(c.out) / "previews" / (std::string(name) + "_input.pgm"), s.input.values, &s.truth.values);
    }
    out << "samples " << rows.size() << " snr_db mean " << io::format_double(mean) << " min "
        << io::format_double(lo) << " max " << io::format_double(hi) << '\n';
    return kOk;
}

// ---- reconstruct ---------------------------------------------------------

int cmd_reconstruct(RunConfig c, std::ostream& out) {
    static const std::vector<std::string> methods{"fbp", "landweber", "kaczmarz", "cimmino", "fista-tv", "nltv"};
    if (std::find(methods.begin(), methods.end(), c.method) == methods.end())
        throw UsageError("unknown method '" + c.method + "' (fbp, landweber, kaczmarz, cimmino, fista-tv, nltv)");

    std::optional<Geometry> geom;
    std::optional<Sinogram> sino;
    std::optional<Image> truth;
    if (!c.sino.empty()) {
        geom = geometry_of(c);
        if (!fs::exists(c.sino)) throw UsageError("sinogram not found: " + c.sino);
        sino = io::read_sinogram(c.sino, *geom);
        if (!c.truth.empty()) truth = io::read_image(c.truth, *geom);
    } else {
        Dataset ds = open_dataset(c);
        if (c.index >= ds.samples.size())
            throw UsageError("--index " + std::to_string(c.index) + " outside the dataset of " +
                             std::to_string(ds.samples.size()));
        geom = ds.geom;
        c.p = geom->num_angles();
        c.q = geom->half_bins();
        c.radius = geom->radius();
        sino = ds.samples[c.index].noisy;
        truth = ds.samples[c.index].truth;
    }

    auto proj = std::make_shared<Projector>(*geom);
    auto op = std::make_shared<ProjectorOperator>(proj);
    const auto side = static_cast<std::size_t>(geom->image_side());
    std::optional<double> sigma;
    auto sig = [&] {
        if (!sigma) sigma = sigma_of(*op);
        return *sigma;
    };
    if (c.method != "fbp" && c.omega == "auto") {
        double w;
        if (c.method == "landweber")
            w = 0.9 * 2.0 / (sig() * sig());
        else if (c.method == "kaczmarz" || c.method == "cimmino")
            w = 1.0;
        else
            w = 1.0 / (sig() * sig());
        c.omega = io::format_double(w);
    }
    const double omega = c.method == "fbp" ? 0.0 : parse_number(c.omega, "--omega");
    ensure_writable(c.out);
    echo(c, out);
    if (c.method != "fbp") out << "omega " << io::format_double(omega) << '\n';

    std::optional<std::vector<double>> truth_vec;
    if (truth) truth_vec = truth->values.vec();
    LinearProblem problem(op, sino->values.vec(), truth_vec);
    TraceOptions trace;
    trace.enabled = true;
    std::vector<double> f;
    std::optional<IterationTrace> tr;
    if (c.method == "fbp") {
        f = reconstruct_fbp(*sino, make_fbp_plan(*geom, c.fbp_cutoff)).values.vec();
    } else if (c.method == "landweber") {
        LandweberOptions lo;
        lo.omega = omega;
        lo.iters = c.iters;
        lo.trace = trace;
        if (sigma) lo.sigma_max = sigma;
        auto r = landweber(problem, lo);
        f = std::move(r.f);
        tr = std::move(r.trace);
    } else if (c.method == "kaczmarz" || c.method == "cimmino") {
        BlockOptions bo;
        bo.omega = omega;
        bo.iters = c.iters;
        bo.trace = trace;
        if (c.weight == "exact")
            bo.weight = BlockWeight::Exact;
        else if (c.weight == "bound")
            bo.weight = BlockWeight::Bound;
        else if (c.weight == "rowsum")
            bo.weight = BlockWeight::RowSum;
        else
            throw UsageError("unknown --weight '" + c.weight + "' (exact, bound, rowsum)");
        const Blocks blocks = c.block_size <= 1 ? single_row_blocks(op->rows()) : contiguous_blocks(op->rows(), c.block_size);
        auto r = c.method == "kaczmarz" ? kaczmarz(problem, blocks, bo) : cimmino(problem, blocks, bo);
        f = std::move(r.f);
        tr = std::move(r.trace);
    } else if (c.method == "fista-tv") {
        FistaOptions fo;
        fo.lambda = c.lambda;
        fo.step = omega;
        fo.iters = c.iters;
        fo.trace = trace;
        auto r = fista_tv(problem, fo);
        f = std::move(r.solve.f);
        tr = std::move(r.solve.trace);
    } else {
        NltvSchemeOptions no;
        no.gamma = c.nltv_gamma;
        no.delta = c.nltv_delta;
        no.nltv.h0 = c.nltv_h0;
        no.nltv.window = c.nltv_window;
        no.outer_iters = c.iters;
        no.omega = omega;
        no.trace = trace;
        auto r = nltv_scheme(problem, no);
        f = std::move(r.solve.f);
        tr = std::move(r.solve.trace);
    }

    const Image img(*geom, Array2(side, side, std::move(f)));
    const fs::path dir = c.out;
    io::write_image(dir / "recon.pbtk", img);
    preview(dir / "recon.pgm", img.values, truth ? &truth->values : nullptr);
    if (tr) tr->write_csv(dir / "trace.csv");
    if (truth) {
        const MetricReport m = evaluate(img, *truth, *op);
        write_text(dir / "metrics.csv", MetricReport::csv_header() + "\n" + m.csv_row() + "\n");
        out << "mae_hu " << io::format_double(m.mae_hu) << " rel_error " << io::format_double(m.rel_error) << '\n';
    }
    return kOk;
}

// ---- train / eval ----------------------------------------------------------

struct Split {
    std::vector<Sample> train, val;
};

Split split_samples(const RunConfig& c, std::vector<Sample> all) {
    if (c.samples > 0) {
        if (c.samples > all.size())
            throw UsageError("--samples " + std::to_string(c.samples) + " exceeds the dataset size " +
                             std::to_string(all.size()));
        all.erase(all.begin() + static_cast<std::ptrdiff_t>(c.samples), all.end());
    }
    if (all.size() < 2) throw UsageError("training needs at least 2 samples");
    if (!(c.val_fraction > 0.0 && c.val_fraction < 1.0)) throw UsageError("--val-fraction must lie in (0, 1)");
    auto nval = static_cast<std::size_t>(std::ceil(c.val_fraction * static_cast<double>(all.size())));
    nval = std::clamp<std::size_t>(nval, 1, all.size() - 1);
    Split s;
    s.train.assign(all.begin(), all.end() - static_cast<std::ptrdiff_t>(nval));
    s.val.assign(all.end() - static_cast<std::ptrdiff_t>(nval), all.end());
    return s;
}

void require_input(const Dataset& ds, InputMode m, const std::string& scheme) {
    for (const auto& r : ds.rows)
        if (r.input != m)
            throw UsageError("scheme '" + scheme + "' needs a dataset simulated with --input " + to_string(m));
}

PostLossConfig post_config(const RunConfig& c) {
    PostLossConfig pc;
    pc.tau1 = c.tau1;
    pc.tau2 = c.tau2;
    pc.tau3 = c.tau3;
    pc.tau4 = c.tau4;
    pc.gamma = c.gamma;
    pc.eps = c.eps;
    return pc;
}

UnrolledConfig unrolled_config(const RunConfig& c) {
    UnrolledConfig uc;
    uc.s = c.s;
    uc.depth = c.depth;
    uc.p_init = c.p_init;
    uc.gamma_a = c.gamma_a;
    uc.gamma_s = c.gamma_s;
    uc.gamma_g = c.gamma_g;
    uc.omega = c.omega == "auto" ? 0.0 : parse_number(c.omega, "--omega");
    return uc;
}

/// Fills geometry, p_init and omega from the dataset so the echo is complete.
void resolve_from_dataset(RunConfig& c, const Dataset& ds, const RadonContext& ctx) {
    c.p = ds.geom.num_angles();
    c.q = ds.geom.half_bins();
    c.radius = ds.geom.radius();
    if (c.scheme == "unrolled") {
        const json info = dataset_info(c);
        const json& cfg = info.contains("config") ? info.at("config") : info;
        if (cfg.contains("art_steps")) c.p_init = cfg.at("art_steps").get<int>();
        double w = cfg.contains("omega") ? cfg.at("omega").get<double>() : 0.0;
        if (c.omega != "auto") w = parse_number(c.omega, "--omega");
        if (!(w > 0.0)) w = 1.0 / (ctx.sigma_max * ctx.sigma_max);
        c.omega = io::format_double(w);
    }
}

int cmd_train(RunConfig c, std::ostream& out) {
    if (c.scheme != "post" && c.scheme != "unrolled") throw UsageError("unknown scheme '" + c.scheme + "' (post, unrolled)");
    const Dataset ds = open_dataset(c);
    require_input(ds, c.scheme == "post" ? InputMode::Fbp : InputMode::Art, c.scheme);
    const RadonContext ctx = make_radon_context(ds.geom);
    resolve_from_dataset(c, ds, ctx);
    if (c.batchnorm == "auto") c.batchnorm = c.scheme == "post" ? "on" : "off";
    if (c.batchnorm != "on" && c.batchnorm != "off") throw UsageError("--batchnorm must be auto, on or off");
    if (c.scheme == "post" && c.tau2 < 0.0) c.tau2 = 1.0 / static_cast<double>(ctx.side());
    const Split split = split_samples(c, ds.samples);

    nn::UNetConfig uc;
    uc.levels = c.levels;
    uc.base_channels = c.base;
    uc.batchnorm = c.batchnorm == "on";
    uc.seed = c.seed;
    const nn::Network net = nn::build_mini_unet(uc);

    TrainSchedule ts;
    ts.epochs = c.epochs;
    ts.batch_size = c.batch;
    ts.lr = c.lr;
    ts.lr_decay = c.lr_decay;
    ts.decay_every = c.decay_every;
    ts.max_steps = c.max_steps;
    ts.seed = c.seed;
    ts.checkpoint_dir = fs::path(c.out) / "checkpoints";
    ts.log_path = fs::path(c.out) / "train_log.csv";
    ensure_writable(c.out);
    echo(c, out);

    const SchemeState st = c.scheme == "post"
                               ? train_postprocess(ctx, split.train, split.val, net, post_config(c), ts, ds.hu)
                               : train_unrolled(ctx, split.train, split.val, net, unrolled_config(c), ts, ds.hu);
    std::ostringstream v;
    v << "epoch,val_mae_hu\n0," << io::format_double(st.initial_val_mae_hu) << '\n';
    for (std::size_t e = 0; e < st.val_mae_hu.size(); ++e)
        v << e + 1 << ',' << io::format_double(st.val_mae_hu[e]) << '\n';
    write_text(fs::path(c.out) / "validation.csv", v.str());
    out << "steps " << st.step << " best_epoch " << st.best_epoch << " val_mae_hu "
        << io::format_double(st.best_val_mae_hu) << " initial " << io::format_double(st.initial_val_mae_hu) << '\n';
    for (const auto& p : st.checkpoints) out << "checkpoint " << p.string() << '\n';
    return kOk;
}

int cmd_eval(RunConfig c, std::ostream& out) {
    if (c.scheme != "post" && c.scheme != "unrolled") throw UsageError("unknown scheme '" + c.scheme + "' (post, unrolled)");
    if (c.checkpoint.empty()) throw UsageError("--checkpoint is required");
    if (!fs::exists(c.checkpoint)) throw UsageError("checkpoint not found: " + c.checkpoint);
    const Dataset ds = open_dataset(c);
    require_input(ds, c.scheme == "post" ? InputMode::Fbp : InputMode::Art, c.scheme);
    const RadonContext ctx = make_radon_context(ds.geom);
    resolve_from_dataset(c, ds, ctx);
    std::vector<Sample> samples = ds.samples;
    if (c.samples > 0 && c.samples < samples.size())
        samples.erase(samples.begin() + static_cast<std::ptrdiff_t>(c.samples), samples.end());
    const nn::Network net = nn::load_checkpoint(c.checkpoint);
    ensure_writable(c.out);
    echo(c, out);
    const fs::path dir = c.out;

    if (c.scheme == "post") {
        std::ostringstream os;
        os << "index,source," << MetricReport::csv_header() << '\n';
        double in_mae = 0.0, out_mae = 0.0;
        for (const auto& s : samples) {
            const Image o = apply_net(net, s.input);
            const MetricReport mi = evaluate(s.input, s.truth, *ctx.op, ds.hu);
            const MetricReport mo = evaluate(o, s.truth, *ctx.op, ds.hu);
            os << s.index << ",input," << mi.csv_row() << '\n' << s.index << ",output," << mo.csv_row() << '\n';
            in_mae += mi.mae_hu / static_cast<double>(samples.size());
            out_mae += mo.mae_hu / static_cast<double>(samples.size());
        }
        write_text(dir / "metrics.csv", os.str());
        const Image first = apply_net(net, samples.front().input);
        preview(dir / "output_00000.pgm", first.values, &samples.front().truth.values);
        out << "mae_hu input " << io::format_double(in_mae) << " output " << io::format_double(out_mae) << '\n';
    } else {
        const UnrolledConfig uc = unrolled_config(c);
        if (c.depths < uc.depth) throw UsageError("--depths must be >= --depth");
        const DepthCurve curve = semi_convergence_eval(ctx, uc, net, samples, c.depths, ds.hu);
        write_text(dir / "depth_curve.csv", curve.to_csv());
        const auto it = unrolled_apply(ctx, uc, net, samples.front().noisy, samples.front().input, c.depths);
        preview(dir / "depth_last_00000.pgm", it.back().values, &samples.front().truth.values);
        out << "argmin_depth " << curve.argmin << '\n';
    }
    return kOk;
}

// ---- sweep -----------------------------------------------------------------

int cmd_sweep(RunConfig c, std::ostream& out) {
    SemiConvergenceOptions so;
    if (c.method == "landweber")
        so.method = SweepMethod::Landweber;
    else if (c.method == "kaczmarz")
        so.method = SweepMethod::Kaczmarz;
    else if (c.method == "cimmino")
        so.method = SweepMethod::Cimmino;
    else
        throw UsageError("sweep method must be landweber, kaczmarz or cimmino");
    const Geometry geom = geometry_of(c);
    auto proj = std::make_shared<Projector>(geom);
    auto op = std::make_shared<ProjectorOperator>(proj);
    if (c.omega == "auto") {
        const double s = so.method == SweepMethod::Landweber ? sigma_of(*op) : 0.0;
        c.omega = io::format_double(so.method == SweepMethod::Landweber ? 0.9 * 2.0 / (s * s) : 1.0);
    }
    so.omega = parse_number(c.omega, "--omega");
    so.iters = c.iters;
    so.trials = c.trials;
    so.seed = c.seed;

    PhantomConfig pc;
    pc.kind = parse_phantom(c.phantom);
    std::mt19937_64 rng(c.seed);
    const Image truth = rasterize_phantom(make_phantom(geom, pc, rng), geom);
    const Sinogram clean = proj->forward(truth);
    double i0 = c.i0;
    if (c.snr_db > 0.0) {
        CalibrationOptions co;
        co.seed = c.seed;
        i0 = calibrate_snr(clean, c.snr_db, c.sigma_th, co).i0;
    }
    ensure_writable(c.out);
    echo(c, out);
    const double sigma_th = c.sigma_th;
    const NoiseFn noise = [&geom, i0, sigma_th](std::span<const double> g, std::uint64_t seed) {
        const auto p = static_cast<std::size_t>(geom.num_angles()), b = static_cast<std::size_t>(geom.num_bins());
        const Sinogram s(geom, Array2(p, b, std::vector<double>(g.begin(), g.end())));
        return apply_noise(s, NoiseModel{i0, sigma_th, seed}).sino.values.vec();
    };
    LinearProblem problem(op, clean.values.vec(), truth.values.vec());
    const SemiConvergenceTable t = semi_convergence_sweep(problem, noise, so);
    write_text(fs::path(c.out) / "sweep.csv", t.to_csv());
    out << "argmin " << t.argmin << " interior_fraction " << io::format_double(t.interior_fraction) << '\n';
    return kOk;
}

// ---- parsing -----------------------------------------------------------------

void add_common(CLI::App* sub, RunConfig& c) {
    sub->add_option("--p", c.p, "number of projection angles");
    sub->add_option("--q", c.q, "half number of detector bins (image side 2q+1)");
    sub->add_option("--radius", c.radius, "reconstruction disk radius");
    sub->add_option("--seed", c.seed, "master seed");
    sub->add_option("--out", c.out, "output directory");
}

void add_data(CLI::App* sub, RunConfig& c) {
    sub->add_option("--data", c.data, "dataset directory");
    sub->add_option("--samples", c.samples, "use the first N samples (0 = all)");
}

void add_net(CLI::App* sub, RunConfig& c) {
    sub->add_option("--scheme", c.scheme, "post or unrolled");
    sub->add_option("--tau1", c.tau1);
    sub->add_option("--tau2", c.tau2, "< 0 picks 1/N");
    sub->add_option("--tau3", c.tau3);
    sub->add_option("--tau4", c.tau4);
    sub->add_option("--gamma", c.gamma, "TV-difference weight");
    sub->add_option("--eps", c.eps, "log-sparsity offset");
    sub->add_option("--s", c.s, "Landweber steps per network call");
    sub->add_option("--depth", c.depth, "unrolled depth D");
    sub->add_option("--p-init", c.p_init, "initial Landweber steps");
    sub->add_option("--gamma-a", c.gamma_a);
    sub->add_option("--gamma-s", c.gamma_s);
    sub->add_option("--gamma-g", c.gamma_g);
    sub->add_option("--omega", c.omega, "Landweber step or auto");
}

} // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    RunConfig c;
    CLI::App app{"parallel-beam tomography toolkit", "parbeam"};
    app.require_subcommand(0, 1);
    std::string config_path;
    app.add_option("--config", config_path, "replay an echoed run.json");

    auto* sim = app.add_subcommand("simulate", "generate a dataset");
    add_common(sim, c);
    sim->add_option("--phantoms", c.phantoms, "number of samples");
    sim->add_option("--phantom", c.phantom, "random, shepp-logan or disk");
    sim->add_option("--snr-db", c.snr_db, "target sinogram SNR (<= 0 uses --i0)");
    sim->add_option("--i0", c.i0, "photon count when no SNR target is set");
    sim->add_option("--sigma-th", c.sigma_th, "thermal noise relative to I0");
    sim->add_option("--input", c.input, "fbp or art");
    sim->add_option("--art-steps", c.art_steps, "Landweber steps for art inputs");

    auto* rec = app.add_subcommand("reconstruct", "reconstruct one sinogram");
    add_common(rec, c);
    rec->add_option("--method", c.method, "fbp, landweber, kaczmarz, cimmino, fista-tv, nltv");
    rec->add_option("--data", c.data, "dataset directory");
    rec->add_option("--index", c.index, "sample index in the dataset");
    rec->add_option("--sino", c.sino, "PBTK1 sinogram (instead of --data)");
    rec->add_option("--truth", c.truth, "PBTK1 ground truth for metrics");
    rec->add_option("--iters", c.iters);
    rec->add_option("--omega", c.omega, "step size or auto");
    rec->add_option("--lambda", c.lambda, "TV weight for fista-tv");
    rec->add_option("--block-size", c.block_size, "rows per block for kaczmarz/cimmino");
    rec->add_option("--weight", c.weight, "exact, bound or rowsum");
    rec->add_option("--fbp-cutoff", c.fbp_cutoff, "Ram-Lak bandwidth (0 = pi/ds)");
    rec->add_option("--nltv-gamma", c.nltv_gamma);
    rec->add_option("--nltv-delta", c.nltv_delta);
    rec->add_option("--nltv-h0", c.nltv_h0);
    rec->add_option("--nltv-window", c.nltv_window);

    auto* train = app.add_subcommand("train", "train a learned scheme");
    add_common(train, c);
    add_data(train, c);
    add_net(train, c);
    train->add_option("--val-fraction", c.val_fraction);
    train->add_option("--epochs", c.epochs);
    train->add_option("--batch", c.batch);
    train->add_option("--lr", c.lr);
    train->add_option("--lr-decay", c.lr_decay);
    train->add_option("--decay-every", c.decay_every);
    train->add_option("--max-steps", c.max_steps);
    train->add_option("--levels", c.levels);
    train->add_option("--base", c.base, "channels at the first level");
    train->add_option("--batchnorm", c.batchnorm, "auto, on or off");

    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
    add_common(ev, c);
    add_data(ev, c);
    add_net(ev, c);
    ev->add_option("--checkpoint", c.checkpoint);
    ev->add_option("--depths", c.depths, "unrolled iterations to evaluate");

    auto* sw = app.add_subcommand("sweep", "semi-convergence sweep of a classical solver");
    add_common(sw, c);
    sw->add_option("--method", c.method, "landweber, kaczmarz or cimmino");
    sw->add_option("--iters", c.iters);
    sw->add_option("--trials", c.trials);
    sw->add_option("--omega", c.omega, "step size or auto");
    sw->add_option("--phantom", c.phantom);
    sw->add_option("--snr-db", c.snr_db);
    sw->add_option("--i0", c.i0);
    sw->add_option("--sigma-th", c.sigma_th);

    try {
        std::vector<std::string> rev(args.rbegin(), args.rend());
        app.parse(rev);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kOk;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return kOk;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << '\n';
        return kUsageError;
    }

    try {
        if (!config_path.empty()) {
            if (!app.get_subcommands().empty()) throw UsageError("--config cannot be combined with a subcommand");
            std::ifstream is(config_path);
            if (!is) throw UsageError("cannot read config " + config_path);
            json j;
            try {
                j = json::parse(is);
            } catch (const json::exception& e) {
                throw UsageError(std::string("config is not valid JSON: ") + e.what());
            }
            c = from_json(j);
        } else {
            if (app.get_subcommands().empty()) throw UsageError("a subcommand is required (see --help)");
            c.command = app.get_subcommands().front()->get_name();
        }
        if (c.method == "fbp" && c.command == "sweep") c.method = "landweber";
        if (c.command == "simulate") return cmd_simulate(c, out);
        if (c.command == "reconstruct") return cmd_reconstruct(c, out);
        if (c.command == "train") return cmd_train(c, out);
        if (c.command == "eval") return cmd_eval(c, out);
        if (c.command == "sweep") return cmd_sweep(c, out);
        throw UsageError("unknown command '" + c.command + "'");
    } catch (const UsageError& e) {
        err << "usage error: " << e.what() << '\n';
        return kUsageError;
    } catch (const InvalidArgument& e) {
        err << "invalid argument: " << e.what() << '\n';
        return kUsageError;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return kRuntimeError;
    }
}

} // namespace parbeam::cli
