// Acceptance run: prints one PASS/FAIL line per criterion and exits nonzero
// when any criterion fails. Pass criterion numbers to run a subset.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numbers>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "cli.hpp"
#include "parbeam/errors.hpp"
#include "parbeam/fbp.hpp"
#include "parbeam/io.hpp"
#include "parbeam/linalg.hpp"
#include "parbeam/metrics.hpp"
#include "parbeam/nn/network.hpp"
#include "parbeam/parallel.hpp"
#include "parbeam/radon.hpp"
#include "parbeam/regularizers.hpp"
#include "parbeam/schemes.hpp"
#include "parbeam/simulate.hpp"
#include "parbeam/solvers.hpp"

using namespace parbeam;
namespace fs = std::filesystem;

namespace {

constexpr double kPi = std::numbers::pi;

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::vector<double> gaussian(std::size_t n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd(0.0, 1.0);
    std::vector<double> v(n);
    for (auto& x : v) x = nd(rng);
    return v;
}

double dotp(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double nrm(std::span<const double> a) { return std::sqrt(dotp(a, a)); }

double rel_l2(std::span<const double> a, std::span<const double> b) {
    double n = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) n += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(n) / nrm(b);
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

std::shared_ptr<ProjectorOperator> projector_op(const Geometry& g) {
    return std::make_shared<ProjectorOperator>(std::make_shared<Projector>(g));
}

// ---- 1 -----------------------------------------------------------------

Outcome adjointness() {
    const auto t0 = std::chrono::steady_clock::now();
    const Geometry g = make_geometry(12, 16, 1.0);
    const Projector proj(g);
    const auto n = static_cast<std::size_t>(g.image_side());
    const auto p = static_cast<std::size_t>(g.num_angles()), b = static_cast<std::size_t>(g.num_bins());
    double worst = 0.0;
    for (int t = 0; t < 100; ++t) {
        const Image f(g, Array2(n, n, gaussian(n * n, 1000 + t)));
        const Sinogram s(g, Array2(p, b, gaussian(p * b, 5000 + t)));
        const double lhs = dotp(proj.forward(f).values.flat(), s.values.flat());
        const double rhs = dotp(f.values.flat(), proj.adjoint_backproject(s).values.flat());
        worst = std::max(worst, std::abs(lhs - rhs) / (nrm(f.values.flat()) * nrm(s.values.flat())));
    }
    const double secs = seconds_since(t0);
    return {worst <= 1e-10 && secs < 5.0, fmt("worst defect %.3g over 100 pairs, %.2f s", worst, secs)};
}

// ---- 2 -----------------------------------------------------------------

Outcome matrix_equivalence() {
    const Geometry g = make_geometry(6, 8, 1.0);
    const Projector proj(g);
    const auto dense = materialize(proj);
    const auto n = static_cast<std::size_t>(g.image_side());
    int mismatches = 0;
    for (int t = 0; t < 20; ++t) {
        const Image f(g, Array2(n, n, gaussian(n * n, 200 + t)));
        if (matvec(dense.matrix, f.values.flat()) != proj.forward(f).values.vec()) ++mismatches;
    }
    return {mismatches == 0, fmt("%d of 20 inputs differ bitwise", mismatches)};
}

// ---- 3 -----------------------------------------------------------------

Outcome ramlak() {
    const Geometry g = make_geometry(20, 8, 1.0);
    const double omega = kPi / g.bin_step();
    const FbpPlan plan = make_fbp_plan(g, omega);
    const double scale = omega * omega / (2.0 * kPi * kPi);
    double worst = 0.0;
    bool zeros = true;
    for (int l = -8; l <= 8; ++l) {
        const double got = plan.filter.tap(l);
        double want;
        if (l == 0)
            want = scale * 0.25;
        else if (l % 2 == 0)
            want = 0.0;
        else
            want = -scale / (kPi * kPi * l * l);
        if (l != 0 && l % 2 == 0)
            zeros = zeros && got == 0.0;
        else
            worst = std::max(worst, std::abs(got - want) / std::abs(want));
    }
    // "exact" up to the rounding of the two-factor product
    return {zeros && worst <= 2.0 * std::numeric_limits<double>::epsilon(),
            fmt("even taps exactly zero: %s, worst relative deviation %.3g", zeros ? "yes" : "no", worst)};
}

// ---- 4 -----------------------------------------------------------------

double fbp_error(const Image& f) {
    const Image rec = reconstruct_fbp(Projector(f.geom).forward(f), make_fbp_plan(f.geom));
    return rel_l2(rec.values.flat(), f.values.flat());
}

Outcome fbp_consistency() {
    const double dense = fbp_error(gaussian_blob(make_geometry(180, 128, 1.0), 0.0, 0.0, 8.0 / 128));
    const double sparse_same = fbp_error(gaussian_blob(make_geometry(40, 128, 1.0), 0.0, 0.0, 8.0 / 128));
    const double fine180 = fbp_error(gaussian_blob(make_geometry(180, 128, 1.0), 0.0, 0.0, 4.0 / 128));
    const double fine40 = fbp_error(gaussian_blob(make_geometry(40, 128, 1.0), 0.0, 0.0, 4.0 / 128));
    Phantom disk;
    disk.ellipses.push_back({0.0, 0.0, 0.5, 0.5, 0.0, 1.0});
    const Geometry g180 = make_geometry(180, 128, 1.0), g40 = make_geometry(40, 128, 1.0);
    const double d180 = fbp_error(rasterize_phantom(disk, g180));
    const double d40 = fbp_error(rasterize_phantom(disk, g40));
    const bool pass = dense <= 0.05 && fine180 <= 0.05 && fine40 >= 2.0 * fine180;
    return {pass, fmt("blob(8ds) p=180 %.4f (p=40 %.4f); blob(4ds) p=180 %.4f p=40 %.4f ratio %.2f; "
                      "disk p=180 %.4f p=40 %.4f ratio %.2f",
                      dense, sparse_same, fine180, fine40, fine40 / fine180, d180, d40, d40 / d180)};
}

// ---- 5 -----------------------------------------------------------------

Matrix random_matrix(std::size_t m, std::size_t n, std::uint64_t seed) {
    Matrix a(m, n);
    a.data() = gaussian(m * n, seed);
    return a;
}

Eigen::MatrixXd to_eigen(const Matrix& a) {
    Eigen::MatrixXd e(a.rows(), a.cols());
    for (std::size_t r = 0; r < a.rows(); ++r)
        for (std::size_t c = 0; c < a.cols(); ++c)
            e(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = a(r, c);
    return e;
}

Outcome landweber_closed_form() {
    double worst_k = 0.0, worst_limit = 0.0;
    std::string shapes;
    for (auto [m, n] : {std::pair<std::size_t, std::size_t>{20, 12}, {12, 20}}) {
        const Matrix a = random_matrix(m, n, 31 + m);
        const auto op = std::make_shared<DenseMatrixOperator>(a);
        const auto g = gaussian(m, 41 + m);
        const auto f0 = gaussian(n, 51 + m);
        const Eigen::MatrixXd e = to_eigen(a);
        Eigen::JacobiSVD<Eigen::MatrixXd> svd(e, Eigen::ComputeThinU | Eigen::ComputeThinV);
        const Eigen::VectorXd s = svd.singularValues();
        const double omega = 1.0 / (s(0) * s(0));
        const Eigen::VectorXd gv = Eigen::Map<const Eigen::VectorXd>(g.data(), static_cast<Eigen::Index>(m));
        const Eigen::VectorXd fv = Eigen::Map<const Eigen::VectorXd>(f0.data(), static_cast<Eigen::Index>(n));
        const Eigen::MatrixXd& U = svd.matrixU();
        const Eigen::MatrixXd& V = svd.matrixV();
        const Eigen::VectorXd f0_ker = fv - V * (V.transpose() * fv);

        // start from zero for the filter-factor form
        for (int k : {1, 5, 20}) {
            LandweberOptions o;
            o.omega = omega;
            o.iters = k;
            o.trace.enabled = false;
            const auto got = landweber(LinearProblem(op, g), o).f;
            Eigen::VectorXd want = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n));
            for (Eigen::Index i = 0; i < s.size(); ++i) {
                const double phi = 1.0 - std::pow(1.0 - omega * s(i) * s(i), k);
                want += phi * (U.col(i).dot(gv) / s(i)) * V.col(i);
            }
            worst_k = std::max(worst_k, max_abs_diff(got, std::span<const double>(want.data(), n)));
        }
        // limit from a nonzero start keeps the kernel part of f0
        LandweberOptions o;
        o.omega = omega;
        o.iters = 20000;
        o.trace.enabled = false;
        const auto got = landweber(LinearProblem(op, g, std::nullopt, f0), o).f;
        const Eigen::VectorXd want = e.completeOrthogonalDecomposition().pseudoInverse() * gv + f0_ker;
        worst_limit = std::max(worst_limit, max_abs_diff(got, std::span<const double>(want.data(), n)));
        shapes += fmt("%zux%zu ", m, n);
    }
    return {worst_k <= 1e-9 && worst_limit <= 1e-6,
            fmt("%sfilter-factor max deviation %.3g (k=1,5,20), limit deviation %.3g", shapes.c_str(), worst_k,
                worst_limit)};
}

// ---- 6 -----------------------------------------------------------------

Outcome step_bound() {
    const Geometry geom = make_geometry(12, 8, 1.0);
    const auto op = projector_op(geom);
    const auto g = gaussian(op->rows(), 61);
    const double s = power_method_norm(*op, kBoundPowerIters, kBoundPowerSeed).sigma_max;
    const LinearProblem prob(op, g);

    LandweberOptions inside;
    inside.omega = 1.5 / (s * s);
    inside.iters = 100;
    const auto ok = landweber(prob, inside).trace.records;
    bool monotone = true;
    for (std::size_t k = 1; k < ok.size(); ++k) monotone = monotone && ok[k].residual <= ok[k - 1].residual;

    LandweberOptions outside;
    outside.omega = 3.0 / (s * s);
    outside.iters = 100;
    outside.allow_unstable = true;
    const auto bad = landweber(prob, outside).trace.records;
    const double growth = bad.back().residual / bad.front().residual;
    return {monotone && ok.back().residual < ok.front().residual && growth >= 10.0,
            fmt("omega=1.5/s^2 residual %.4g -> %.4g (monotone %s); omega=3/s^2 growth %.3g in 100 iterations",
                ok.front().residual, ok.back().residual, monotone ? "yes" : "no", growth)};
}

// ---- 7 -----------------------------------------------------------------

Outcome semi_convergence() {
    const Geometry geom = make_geometry(40, 16, 1.0);
    const auto proj = std::make_shared<Projector>(geom);
    const auto op = std::make_shared<ProjectorOperator>(proj);
    std::mt19937_64 rng(17);
    const Image truth = rasterize_phantom(make_phantom(geom, PhantomConfig{}, rng), geom);
    const Sinogram clean = proj->forward(truth);
    const double i0 = calibrate_snr(clean, 40.0, 1e-4).i0;
    const NoiseFn noise = [&geom, i0](std::span<const double> gc, std::uint64_t seed) {
        const auto p = static_cast<std::size_t>(geom.num_angles()), b = static_cast<std::size_t>(geom.num_bins());
        const Sinogram s(geom, Array2(p, b, std::vector<double>(gc.begin(), gc.end())));
        return apply_noise(s, NoiseModel{i0, 1e-4, seed}).sino.values.vec();
    };
    const LinearProblem prob(op, clean.values.vec(), truth.values.vec());
    SemiConvergenceOptions so;
    so.iters = 800;
    so.trials = 30;
    so.seed = 3;
    const auto noisy = semi_convergence_sweep(prob, noise, so);
    so.trials = 1;
    const auto quiet = semi_convergence_sweep(prob, nullptr, so);
    bool monotone = true;
    for (std::size_t k = 1; k < quiet.mean_error.size(); ++k)
        monotone = monotone && quiet.mean_error[k] <= quiet.mean_error[k - 1];
    return {noisy.interior_fraction >= 0.8 && monotone,
            fmt("interior argmin in %.0f%% of 30 trials (mean-curve argmin %d of 800); noise-free error "
                "non-increasing: %s",
                100.0 * noisy.interior_fraction, noisy.argmin, monotone ? "yes" : "no")};
}

// ---- 8 -----------------------------------------------------------------

Outcome hand_values() {
    const Array2 x(2, 2, {0.0, 1.0, 0.0, 1.0});
    const double tv = tv_l1(x);
    const double ls = log_sparsity(x, 1.0);
    const std::vector<double> r{1.0, 0.0, 0.0};
    const double rw = rwl1(r, 1.0);
    const double e1 = std::abs(tv - 1.0), e2 = std::abs(ls - std::log(2.0)), e3 = std::abs(rw - 0.5);
    return {e1 <= 1e-12 && e2 <= 1e-12 && e3 <= 1e-12,
            fmt("TV %.17g (1), log-sparsity %.17g (ln 2), RWL1 %.17g (0.5)", tv, ls, rw)};
}

// ---- 9 -----------------------------------------------------------------

Outcome noise_calibration() {
    const Geometry geom = make_geometry(40, 32, 1.0);
    std::mt19937_64 rng(0);
    PhantomConfig pc;
    pc.kind = PhantomKind::SheppLogan;
    const Sinogram clean = Projector(geom).forward(rasterize_phantom(make_phantom(geom, pc, rng), geom));
    const auto cal = calibrate_snr(clean, 40.0, 1e-4);
    double mean = 0.0;
    for (int s = 0; s < 20; ++s) mean += apply_noise(clean, NoiseModel{cal.i0, 1e-4, 9000u + s}).snr_db / 20.0;
    const auto hi = apply_noise(clean, NoiseModel{1e12, 0.0, 1});
    const double hd = rel_error(hi.sino.values.flat(), clean.values.flat());
    return {std::abs(mean - 40.0) <= 1.0 && hd <= 1e-4,
            fmt("I0 %.4g, mean SNR over 20 fresh seeds %.3f dB; high-dose relative deviation %.3g", cal.i0, mean,
                hd)};
}

// ---- 10 ----------------------------------------------------------------

using nn::Mode;
using nn::Network;
using nn::Shape;
using nn::Tensor4;

Tensor4 random_tensor(Shape s, std::uint64_t seed) { return Tensor4(s, gaussian(s.size(), seed)); }

double inner(const Tensor4& a, const Tensor4& b) { return dotp(a.flat(), b.flat()); }

double rel_dev(std::span<const double> a, std::span<const double> b) {
    double d = 0.0, m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        d = std::max(d, std::abs(a[i] - b[i]));
        m = std::max(m, std::abs(b[i]));
    }
    return d / std::max(m, 1e-300);
}

double layer_gradient_error(Network net, Shape in, Mode m, std::uint64_t seed) {
    net.set_params(gaussian(net.param_count(), seed));
    const Tensor4 x = random_tensor(in, seed + 1);
    const Tensor4 u = random_tensor(net.apply(x, m).shape(), seed + 2);
    net.forward(x, m);
    const auto g = net.backward(u);
    const double h = 1e-5;
    std::vector<double> p = net.params(), fdp(p.size());
    Network probe = net;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double keep = p[i];
        p[i] = keep + h;
        probe.set_params(p);
        const double fp = inner(u, probe.apply(x, m));
        p[i] = keep - h;
        probe.set_params(p);
        const double fm = inner(u, probe.apply(x, m));
        p[i] = keep;
        fdp[i] = (fp - fm) / (2 * h);
    }
    Tensor4 xp = x;
    std::vector<double> fdx(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double keep = xp.flat()[i];
        xp.flat()[i] = keep + h;
        const double fp = inner(u, net.apply(xp, m));
        xp.flat()[i] = keep - h;
        const double fm = inner(u, net.apply(xp, m));
        xp.flat()[i] = keep;
        fdx[i] = (fp - fm) / (2 * h);
    }
    double e = rel_dev(g.input.flat(), fdx);
    if (!p.empty()) e = std::max(e, rel_dev(g.params, fdp));
    return e;
}

Outcome autodiff() {
    const Shape in{2, 2, 4, 4};
    std::map<std::string, double> layer;
    {
        nn::NetBuilder nb(2);
        layer["conv3x3"] = layer_gradient_error(nb.build(nb.conv3(nb.input(), 3), 0), in, Mode::Eval, 10);
    }
    {
        nn::NetBuilder nb(2);
        layer["conv1x1"] = layer_gradient_error(nb.build(nb.conv1(nb.input(), 3), 0), in, Mode::Eval, 20);
    }
    {
        nn::NetBuilder nb(2);
        layer["relu"] = layer_gradient_error(nb.build(nb.relu(nb.conv3(nb.input(), 2)), 0), in, Mode::Eval, 30);
    }
    {
        nn::NetBuilder nb(2);
        layer["maxpool"] = layer_gradient_error(nb.build(nb.maxpool(nb.input()), 0), in, Mode::Eval, 40);
    }
    {
        nn::NetBuilder nb(2);
        const int d = nb.maxpool(nb.input());
        layer["tconv"] = layer_gradient_error(nb.build(nb.tconv(d, 3), 0), in, Mode::Eval, 50);
    }
    {
        nn::NetBuilder nb(2);
        layer["batchnorm-train"] = layer_gradient_error(nb.build(nb.batchnorm(nb.input()), 0), in, Mode::Train, 60);
    }
    {
        nn::NetBuilder nb(2);
        Network net = nb.build(nb.batchnorm(nb.input()), 0);
        net.set_running_stats({{0.3, -0.2}}, {{1.5, 0.7}});
        layer["batchnorm-eval"] = layer_gradient_error(net, in, Mode::Eval, 70);
    }
    {
        nn::NetBuilder nb(2);
        const int a = nb.conv1(nb.input(), 1);
        layer["concat"] = layer_gradient_error(nb.build(nb.concat(a, nb.input()), 0), in, Mode::Eval, 80);
    }
    {
        nn::NetBuilder nb(2);
        const int a = nb.conv3(nb.input(), 2);
        layer["add"] = layer_gradient_error(nb.build(nb.add(a, nb.input()), 0), in, Mode::Eval, 90);
    }
    double worst_layer = 0.0;
    std::string worst_name;
    for (const auto& [k, v] : layer)
        if (v >= worst_layer) {
            worst_layer = v;
            worst_name = k;
        }

    // network jvp against a finite difference and the bilinear duality
    nn::UNetConfig uc;
    uc.levels = 2;
    uc.base_channels = 3;
    uc.batchnorm = true;
    uc.zero_final = false;
    uc.seed = 4;
    double worst_jvp = 0.0, worst_dual = 0.0;
    for (Mode m : {Mode::Eval, Mode::Train}) {
        Network net = nn::build_mini_unet(uc);
        const Tensor4 x = random_tensor(Shape{2, 1, 8, 8}, 21);
        const Tensor4 e = random_tensor(x.shape(), 22);
        const Tensor4 u = random_tensor(x.shape(), 23);
        const Tensor4 jv = net.jvp(x, e, m);
        const double eps = 1e-6;
        Tensor4 xp = x, xm = x;
        for (std::size_t i = 0; i < x.size(); ++i) {
            xp.flat()[i] += eps * e.flat()[i];
            xm.flat()[i] -= eps * e.flat()[i];
        }
        const Tensor4 a = net.apply(xp, m), b = net.apply(xm, m);
        std::vector<double> fd(a.size());
        for (std::size_t i = 0; i < a.size(); ++i) fd[i] = (a.flat()[i] - b.flat()[i]) / (2 * eps);
        worst_jvp = std::max(worst_jvp, rel_l2(fd, jv.flat()));
        net.forward(x, m);
        const auto g = net.backward(u);
        const double lhs = inner(g.input, e), rhs = inner(u, jv);
        worst_dual = std::max(worst_dual, std::abs(lhs - rhs) / std::max(1.0, std::abs(rhs)));
    }

    // full-parameter gradient of the unrolled objective on a tiny instance
    const Geometry geom = make_geometry(4, 4, 1.0);
    const RadonContext ctx = make_radon_context(geom);
    const Image truth = rasterize_phantom(shepp_logan(geom), geom);
    Sinogram g = ctx.proj->forward(truth);
    const auto noise = gaussian(g.values.size(), 5);
    for (std::size_t i = 0; i < noise.size(); ++i) g.values.vec()[i] += 0.01 * noise[i];
    nn::UNetConfig tc;
    tc.levels = 1;
    tc.base_channels = 2;
    tc.zero_final = false;
    tc.seed = 31;
    Network net = nn::build_mini_unet(tc);
    std::vector<double> p = net.params();
    const auto jitter = gaussian(p.size(), 77);
    for (std::size_t i = 0; i < p.size(); ++i) p[i] += 0.05 * jitter[i];
    net.set_params(p);
    UnrolledConfig cfg;
    cfg.depth = 2;
    cfg.p_init = 4;
    cfg.gamma_s = 0.5;
    cfg.gamma_g = 0.5;
    const auto r = unrolled_loss_grad(ctx, cfg, net, g, truth);
    std::vector<double> fd(p.size());
    const double h = 1e-6;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double keep = p[i];
        p[i] = keep + h;
        net.set_params(p);
        const double fp = unrolled_loss(ctx, cfg, net, g, truth).total;
        p[i] = keep - h;
        net.set_params(p);
        const double fm = unrolled_loss(ctx, cfg, net, g, truth).total;
        p[i] = keep;
        fd[i] = (fp - fm) / (2 * h);
    }
    const double worst_unrolled = rel_dev(r.grad, fd);

    const bool pass = worst_layer <= 1e-5 && worst_jvp <= 1e-4 && worst_dual <= 1e-8 && worst_unrolled <= 1e-4;
    return {pass, fmt("layers worst %.3g (%s), jvp %.3g, duality %.3g, unrolled gradient %.3g (%zu params)",
                      worst_layer, worst_name.c_str(), worst_jvp, worst_dual, worst_unrolled, p.size())};
}

// ---- 11 ----------------------------------------------------------------

Outcome postprocess() {
    const auto t0 = std::chrono::steady_clock::now();
    const Geometry geom = make_geometry(40, 16, 1.0);
    const RadonContext ctx = make_radon_context(geom);
    DatasetConfig dc;
    dc.target_snr_db = 40.0;
    dc.seed = 7;
    const auto all = generate_samples(*ctx.proj, dc, 200);
    const std::vector<Sample> train(all.begin(), all.begin() + 160), val(all.begin() + 160, all.end());
    double fbp = 0.0;
    for (const auto& s : val) fbp += s.mae_hu_input / static_cast<double>(val.size());

    nn::UNetConfig uc;
    uc.levels = 2;
    uc.base_channels = 8;
    uc.batchnorm = true;
    uc.seed = 3;
    TrainSchedule ts;
    ts.epochs = 30;
    ts.batch_size = 8;
    const SchemeState st = train_postprocess(ctx, train, val, nn::build_mini_unet(uc), PostLossConfig{}, ts);

    // single-sample overfit on the fidelity term
    PostLossConfig fid;
    fid.tau2 = fid.tau3 = fid.tau4 = fid.gamma = 0.0;
    nn::UNetConfig oc = uc;
    oc.batchnorm = false;
    TrainSchedule os;
    os.epochs = 2000;
    os.batch_size = 1;
    os.lr = 1e-3;
    os.lr_decay = 1.0;
    const std::vector<Sample> one{all.front()};
    const SchemeState ov = train_postprocess(ctx, one, one, nn::build_mini_unet(oc), fid, os);
    const double ratio = ov.trace.back().total / ov.trace.front().total;

    const bool pass = st.best_val_mae_hu < fbp && ratio <= 1e-3;
    return {pass, fmt("validation MAE-HU %.2f (epoch %d) vs FBP input %.2f; overfit loss ratio %.3g after %ld "
                      "steps; %.0f s",
                      st.best_val_mae_hu, st.best_epoch, fbp, ratio, ov.step, seconds_since(t0))};
}

// ---- 12 ----------------------------------------------------------------

struct UnrolledRun {
    DepthCurve curve;
    double leakage = 0.0;
    double lipschitz = 0.0;
    double val = 0.0;
};

UnrolledRun unrolled_run(const RadonContext& ctx, const std::vector<Sample>& train, const std::vector<Sample>& val,
                         double gamma_s, double gamma_g) {
    nn::UNetConfig uc;
    uc.levels = 2;
    uc.base_channels = 8;
    uc.seed = 3;
    UnrolledConfig cfg;
    cfg.gamma_s = gamma_s;
    cfg.gamma_g = gamma_g;
    TrainSchedule ts;
    ts.epochs = 10;
    ts.batch_size = 4;
    const SchemeState st = train_unrolled(ctx, train, val, nn::build_mini_unet(uc), cfg, ts);
    UnrolledRun r;
    r.val = st.best_val_mae_hu;
    r.curve = semi_convergence_eval(ctx, cfg, st.net, val, 6);
    r.leakage = support_leakage(ctx, cfg, st.net, val);
    r.lipschitz = median_lipschitz(ctx, cfg, st.net, val, 5, 1e-3, 1);
    return r;
}

Outcome unrolled() {
    const auto t0 = std::chrono::steady_clock::now();
    const Geometry geom = make_geometry(40, 16, 1.0);
    const RadonContext ctx = make_radon_context(geom);
    DatasetConfig dc;
    dc.target_snr_db = 40.0;
    dc.seed = 11;
    dc.input = InputMode::Art;
    dc.art_steps = 6;
    const auto all = generate_samples(*ctx.proj, dc, 100);
    const std::vector<Sample> train(all.begin(), all.begin() + 80), val(all.begin() + 80, all.end());

    const UnrolledConfig d;
    const UnrolledRun base = unrolled_run(ctx, train, val, d.gamma_s, d.gamma_g);
    const UnrolledRun s0 = unrolled_run(ctx, train, val, 0.0, d.gamma_g);
    const UnrolledRun s1 = unrolled_run(ctx, train, val, 1.0, d.gamma_g);
    const UnrolledRun g0 = unrolled_run(ctx, train, val, d.gamma_s, 0.0);
    const UnrolledRun g1 = unrolled_run(ctx, train, val, d.gamma_s, 1.0);

    const double k1 = base.curve.mae_hu[0], k4 = base.curve.mae_hu[3];
    const int am = base.curve.argmin;
    const bool depth_ok = k4 < k1;
    const bool argmin_ok = am >= 3 && am <= 5;
    const bool support_ok = s1.leakage < s0.leakage;
    const bool lip_ok = g1.lipschitz < g0.lipschitz;
    std::printf("info: unrolled depth curve (MAE-HU, k=1..6):");
    for (double v : base.curve.mae_hu) std::printf(" %.2f", v);
    std::printf("\ninfo: default weights vs gamma_s=0: leakage %.3g vs %.3g; default vs gamma_g=0: Lipschitz %.4f vs "
                "%.4f\n",
                base.leakage, s0.leakage, base.lipschitz, g0.lipschitz);
    return {depth_ok && argmin_ok && support_ok && lip_ok,
            fmt("depth 4 %.2f < depth 1 %.2f: %s; argmin depth %d; leakage gamma_s=1 %.3g < gamma_s=0 %.3g: %s; "
                "Lipschitz gamma_g=1 %.4f < gamma_g=0 %.4f: %s; %.0f s",
                k4, k1, depth_ok ? "yes" : "no", am, s1.leakage, s0.leakage, support_ok ? "yes" : "no",
                g1.lipschitz, g0.lipschitz, lip_ok ? "yes" : "no", seconds_since(t0))};
}

// ---- 13 ----------------------------------------------------------------

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

// Drops the wall-clock column of trace files.
std::string without_ms(const std::string& text) {
    std::istringstream is(text);
    std::string line, out;
    int drop = -1;
    bool header = true;
    while (std::getline(is, line)) {
        std::vector<std::string> cells;
        std::istringstream ls(line);
        std::string c;
        while (std::getline(ls, c, ',')) cells.push_back(c);
        if (header) {
            for (std::size_t i = 0; i < cells.size(); ++i)
                if (cells[i] == "ms") drop = static_cast<int>(i);
            header = false;
        }
        for (std::size_t i = 0; i < cells.size(); ++i)
            if (static_cast<int>(i) != drop) out += cells[i] + ",";
        out += "\n";
    }
    return out;
}

std::map<std::string, std::string> artifacts(const fs::path& root) {
    std::map<std::string, std::string> m;
    for (const auto& e : fs::recursive_directory_iterator(root))
        if (e.is_regular_file()) {
            const std::string rel = fs::relative(e.path(), root).string();
            m[rel] = e.path().filename() == "trace.csv" ? without_ms(slurp(e.path())) : slurp(e.path());
        }
    return m;
}

Outcome determinism() {
    const fs::path root = fs::temp_directory_path() / "parbeam_acceptance_determinism";
    fs::remove_all(root);
    fs::create_directories(root);
    const std::string fbp = (root / "data_fbp").string(), art = (root / "data_art").string();
    std::ostringstream sink;
    const std::vector<std::string> geo{"--p", "24", "--q", "8"};
    auto with = [&](std::vector<std::string> a) {
        a.insert(a.end(), geo.begin(), geo.end());
        return a;
    };
    if (cli::run(with({"simulate", "--phantoms", "6", "--seed", "3", "--out", fbp}), sink, sink) != 0 ||
        cli::run(with({"simulate", "--phantoms", "6", "--seed", "4", "--input", "art", "--out", art}), sink, sink) != 0)
        return {false, "dataset generation failed: " + sink.str()};

    const fs::path work = root / "run";
    const std::string ckpt_post = (root / "keep_post.pbtk").string(), ckpt_unr = (root / "keep_unr.pbtk").string();
    struct Cmd {
        std::string name;
        std::vector<std::string> args;
    };
    std::vector<Cmd> cmds{
        {"simulate", with({"simulate", "--phantoms", "3", "--seed", "9", "--out", work.string()})},
        {"simulate-art", with({"simulate", "--phantoms", "3", "--seed", "9", "--input", "art", "--out", work.string()})},
        {"train-post", {"train", "--scheme", "post", "--data", fbp, "--epochs", "2", "--batch", "2", "--levels", "1",
                        "--base", "4", "--out", work.string()}},
        {"train-unrolled", {"train", "--scheme", "unrolled", "--data", art, "--epochs", "1", "--batch", "2",
                            "--levels", "1", "--base", "4", "--depth", "2", "--out", work.string()}},
        {"sweep", with({"sweep", "--iters", "40", "--trials", "4", "--snr-db", "30", "--out", work.string()})},
    };
    for (const char* m : {"fbp", "landweber", "kaczmarz", "cimmino", "fista-tv", "nltv"})
        cmds.push_back({std::string("reconstruct-") + m,
                        {"reconstruct", "--method", m, "--data", fbp, "--index", "1", "--iters", "5", "--out",
                         work.string()}});

    std::vector<std::string> failed;
    auto run_at = [&](const Cmd& c, int threads, const fs::path& keep) {
        set_thread_count(threads);
        fs::remove_all(work);
        std::ostringstream o, e;
        const int code = cli::run(c.args, o, e);
        if (code != 0) throw Error(c.name + " exited " + std::to_string(code) + ": " + e.str());
        fs::rename(work, keep);
    };
    const int saved = thread_count();
    try {
        for (std::size_t i = 0; i < cmds.size(); ++i) {
            const fs::path a = root / ("a" + std::to_string(i)), b = root / ("b" + std::to_string(i));
            run_at(cmds[i], 1, a);
            run_at(cmds[i], 3, b);
            if (artifacts(a) != artifacts(b)) failed.push_back(cmds[i].name);
            if (cmds[i].name == "train-post") fs::copy_file(a / "checkpoints" / kBestCheckpoint, ckpt_post);
            if (cmds[i].name == "train-unrolled") fs::copy_file(a / "checkpoints" / kBestCheckpoint, ckpt_unr);
            if (cmds[i].name.starts_with("train")) {
                const std::string ck = cmds[i].name == "train-post" ? ckpt_post : ckpt_unr;
                fs::copy_file(a / "checkpoints" / (std::string(kBestCheckpoint) + ".json"), ck + ".json");
            }
        }
        const std::vector<Cmd> evals{
            {"eval-post", {"eval", "--scheme", "post", "--data", fbp, "--checkpoint", ckpt_post, "--out", work.string()}},
            {"eval-unrolled", {"eval", "--scheme", "unrolled", "--data", art, "--depth", "2", "--checkpoint", ckpt_unr,
                               "--depths", "4", "--out", work.string()}},
        };
        for (std::size_t i = 0; i < evals.size(); ++i) {
            const fs::path a = root / ("ea" + std::to_string(i)), b = root / ("eb" + std::to_string(i));
            run_at(evals[i], 1, a);
            run_at(evals[i], 3, b);
            if (artifacts(a) != artifacts(b)) failed.push_back(evals[i].name);
        }
        cmds.insert(cmds.end(), evals.begin(), evals.end());
    } catch (const std::exception& ex) {
        set_thread_count(saved);
        return {false, ex.what()};
    }
    set_thread_count(saved);
    std::string list;
    for (const auto& f : failed) list += " " + f;
    fs::remove_all(root);
    return {failed.empty(), fmt("%zu commands at 1 vs 3 threads; differing:%s", cmds.size(),
                                failed.empty() ? " none" : list.c_str())};
}

} // namespace

int main(int argc, char** argv) {
    const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
        {"adjointness", adjointness},
        {"matrix-oracle equivalence", matrix_equivalence},
        {"Ram-Lak closed form", ramlak},
        {"FBP self-consistency", fbp_consistency},
        {"Landweber closed form", landweber_closed_form},
        {"step-bound behaviour", step_bound},
        {"classical semi-convergence", semi_convergence},
        {"regularizer hand values", hand_values},
        {"noise calibration", noise_calibration},
        {"autodiff checks", autodiff},
        {"postprocessing scheme", postprocess},
        {"unrolled scheme", unrolled},
        {"determinism", determinism},
    };
    std::set<int> only;
    for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
    int failures = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const int id = static_cast<int>(i + 1);
        if (!only.empty() && !only.contains(id)) continue;
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        if (!o.pass) ++failures;
        std::printf("criterion %2d %s  %s: %s\n", id, o.pass ? "PASS" : "FAIL", criteria[i].first, o.detail.c_str());
        std::fflush(stdout);
    }
    return failures == 0 ? 0 : 1;
}
