#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "doctest.h"
#include "parbeam/errors.hpp"
#include "parbeam/metrics.hpp"
#include "parbeam/parallel.hpp"
#include "parbeam/regularizers.hpp"
#include "parbeam/schemes.hpp"
#include "support.hpp"

using namespace parbeam;
namespace fs = std::filesystem;

namespace {

nn::Network random_net(int levels, std::size_t base, std::uint64_t seed, bool bn = false) {
    nn::UNetConfig uc;
    uc.levels = levels;
    uc.base_channels = base;
    uc.batchnorm = bn;
    uc.zero_final = false;
    uc.seed = seed;
    return nn::build_mini_unet(uc);
}

nn::Network identity_net(int levels, std::size_t base) {
    nn::UNetConfig uc;
    uc.levels = levels;
    uc.base_channels = base;
    return nn::build_mini_unet(uc);
}

Image smooth_phantom(const Geometry& g) {
    return rasterize_phantom(shepp_logan(g), g);
}

double sum(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0); }

std::vector<double> diff(const std::vector<double>& a, const std::vector<double>& b) {
    std::vector<double> d(a);
    for (std::size_t i = 0; i < d.size(); ++i) d[i] -= b[i];
    return d;
}

double max_abs(const std::vector<double>& v) {
    double m = 0.0;
    for (double x : v) m = std::max(m, std::abs(x));
    return m;
}

std::vector<Sample> small_set(const Projector& proj, InputMode mode, std::size_t n, std::uint64_t seed) {
    DatasetConfig dc;
    dc.input = mode;
    dc.i0 = 1e6;
    dc.seed = seed;
    return generate_samples(proj, dc, n);
}

} // namespace

TEST_CASE("new tape ops against central differences") {
    nn::Tensor4 x(nn::Shape{2, 1, 5, 4}, testing::random_vector(40, 3));
    const nn::Tensor4 u(nn::Shape{2, 1, 6, 6}, testing::random_vector(72, 4));
    auto objective = [&](const nn::Tensor4& in, bool grad, nn::Tensor4* g) {
        nn::Tape t;
        const nn::Var v = t.leaf(in, grad);
        const nn::Var tv = nn::ops::tv_map(t, v);
        const nn::Var lg = nn::ops::mean_all(t, nn::ops::log_eps(t, tv, 0.1));
        const nn::Var padded = nn::ops::pad_to(t, v, 6, 6);
        const nn::Var w = nn::ops::mul(t, padded, t.constant(u));
        const nn::Var cropped = nn::ops::crop(t, w, 3, 3);
        const nn::Var out = nn::ops::add(t, lg, nn::ops::mean_all(t, cropped));
        if (grad) {
            t.backward(out);
            *g = t.grad(v);
        }
        return t.value(out).flat()[0];
    };
    nn::Tensor4 g;
    objective(x, true, &g);
    const double h = 1e-6;
    double worst = 0.0, scale = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double keep = x.flat()[i];
        x.flat()[i] = keep + h;
        const double fp = objective(x, false, nullptr);
        x.flat()[i] = keep - h;
        const double fm = objective(x, false, nullptr);
        x.flat()[i] = keep;
        worst = std::max(worst, std::abs((fp - fm) / (2 * h) - g.flat()[i]));
        scale = std::max(scale, std::abs(g.flat()[i]));
    }
    CHECK(worst / scale <= 1e-6);
}

TEST_CASE("tape tv_map matches the regularizer map and has zero gradient on flat regions") {
    const Geometry geom = make_geometry(6, 4, 1.0);
    const Image img = testing::random_image(geom, 9);
    nn::Tape t;
    const nn::Var v = t.leaf(stack_images({&img}));
    const nn::Var tv = nn::ops::tv_map(t, v);
    const Array2 ref = tv_map(img.values);
    for (std::size_t i = 0; i < ref.size(); ++i) CHECK(t.value(tv).flat()[i] == ref.flat()[i]);

    nn::Tape t2;
    const nn::Var flat = t2.leaf(nn::Tensor4(nn::Shape{1, 1, 3, 3}, 2.0));
    t2.backward(nn::ops::mean_all(t2, nn::ops::tv_map(t2, flat)));
    const nn::Tensor4 gflat = t2.grad(flat);
    for (double gv : gflat.flat()) CHECK(gv == 0.0);
}

TEST_CASE("post loss: zero residual, zero weights, validation") {
    const Geometry geom = make_geometry(12, 8, 1.0);
    const RadonContext ctx = make_radon_context(geom);
    const Image truth = smooth_phantom(geom);
    const Sinogram ideal = ctx.proj->forward(truth);
    const nn::Network net = random_net(1, 2, 5);
    PostLossConfig cfg;

    const PostLoss l = post_loss(truth, truth, ideal, ctx, net, cfg);
    const auto k = kernel_weights(net);
    const double kernel = std::inner_product(k.begin(), k.end(), k.begin(), 0.0) / static_cast<double>(k.size());
    CHECK(l.raw.fid == 0.0);
    CHECK(l.raw.tvdiff == 0.0);
    CHECK(l.raw.radon == 0.0);
    CHECK(l.total == doctest::Approx(cfg.tau3 * log_sparsity(truth.values, cfg.eps) + cfg.tau4 * kernel).epsilon(1e-12));

    PostLossConfig zero;
    zero.tau1 = zero.tau2 = zero.tau3 = zero.tau4 = 0.0;
    const Image other = testing::random_image(geom, 2);
    CHECK(post_loss(other, truth, ideal, ctx, net, zero).total == 0.0);

    PostLossConfig bad;
    bad.tau1 = -1.0;
    CHECK_THROWS_AS(post_loss(other, truth, ideal, ctx, net, bad), InvalidArgument);
    bad = PostLossConfig{};
    bad.eps = 0.0;
    CHECK_THROWS_AS(post_loss(other, truth, ideal, ctx, net, bad), InvalidArgument);
    const Geometry g2 = make_geometry(12, 6, 1.0);
    CHECK_THROWS_AS(post_loss(Image(g2), truth, ideal, ctx, net, cfg), InvalidArgument);
}

TEST_CASE("post loss terms match independent evaluation") {
    const Geometry geom = make_geometry(10, 8, 1.0);
    const RadonContext ctx = make_radon_context(geom);
    const Image truth = smooth_phantom(geom);
    const Sinogram ideal = ctx.proj->forward(truth);
    Image out = truth;
    const auto noise = testing::random_vector(out.values.size(), 21);
    for (std::size_t i = 0; i < noise.size(); ++i) out.values.vec()[i] += 0.01 * noise[i];
    const nn::Network net = random_net(2, 2, 8, true);
    PostLossConfig cfg;
    cfg.gamma = 0.3;
    const PostLoss l = post_loss(out, truth, ideal, ctx, net, cfg);

    const auto d = diff(out.values.vec(), truth.values.vec());
    const double fid = std::inner_product(d.begin(), d.end(), d.begin(), 0.0) / static_cast<double>(d.size());
    const Array2 dimg(out.values.rows(), out.values.cols(), d);
    const double tvdiff = tv_l1(dimg) / static_cast<double>(tv_map(dimg).size());
    const Sinogram so = ctx.proj->forward(out);
    const auto rd = diff(so.values.vec(), ideal.values.vec());
    const double radon = std::inner_product(rd.begin(), rd.end(), rd.begin(), 0.0) / static_cast<double>(rd.size());
    const double logsp = log_sparsity(out.values, cfg.eps);
    const auto k = kernel_weights(net);
    const double kernel = std::inner_product(k.begin(), k.end(), k.begin(), 0.0) / static_cast<double>(k.size());

    CHECK(l.raw.fid == doctest::Approx(fid).epsilon(1e-12));
    CHECK(l.raw.tvdiff == doctest::Approx(tvdiff).epsilon(1e-12));
    CHECK(l.raw.radon == doctest::Approx(radon).epsilon(1e-12));
    CHECK(l.raw.logsp == doctest::Approx(logsp).epsilon(1e-12));
    CHECK(l.raw.kernel == doctest::Approx(kernel).epsilon(1e-12));
    CHECK(l.weighted.radon == doctest::Approx(radon / geom.image_side()).epsilon(1e-12));
    CHECK(l.weighted.tvdiff == doctest::Approx(cfg.tau1 * cfg.gamma * tvdiff).epsilon(1e-12));

    const PostTerms& w = l.weighted;
    CHECK(std::abs(l.total - (w.fid + w.tvdiff + w.radon + w.logsp + w.kernel)) <= 1e-12 * std::abs(l.total));
    CHECK(w.fid >= 0.0);
    CHECK(w.tvdiff >= 0.0);
    CHECK(w.radon >= 0.0);
    CHECK(w.kernel >= 0.0);
}

TEST_CASE("apply_net pads odd images and keeps the identity exact") {
    const Geometry geom = make_geometry(6, 5, 1.0);
    const Image img = testing::random_image(geom, 4);
    for (int levels : {1, 2, 3}) {
        const Image out = apply_net(identity_net(levels, 2), img);
        CHECK(out.values == img.values);
    }
    const Image r = apply_net(random_net(2, 2, 3), img);
    CHECK(r.values.rows() == img.values.rows());
    CHECK_FALSE(r.values == img.values);
}

TEST_CASE("unrolled apply: identity net is Landweber, K=0, invalid omega") {
    const Geometry geom = make_geometry(8, 6, 1.0);
    const RadonContext ctx = make_radon_context(geom);
    const Sinogram g = ctx.proj->forward(smooth_phantom(geom));
    UnrolledConfig cfg;
    cfg.s = 2;
    cfg.p_init = 3;
    const nn::Network id = identity_net(1, 2);
    const auto it = unrolled_apply(ctx, cfg, id, g, std::nullopt, 4);
    REQUIRE(it.size() == 4);

    LandweberOptions lo;
    lo.omega = cfg.resolved_omega(ctx);
    lo.sigma_max = ctx.sigma_max;
    lo.trace.enabled = false;
    LinearProblem prob(ctx.op, g.values.vec());
    for (int k = 1; k <= 4; ++k) {
        lo.iters = cfg.p_init + cfg.s * k;
        CHECK(landweber(prob, lo).f == it[static_cast<std::size_t>(k - 1)].values.vec());
    }

    const Image f0 = testing::random_image(geom, 1);
    CHECK(unrolled_apply(ctx, cfg, id, g, f0, 0).empty());
    CHECK_THROWS_AS(unrolled_apply(ctx, cfg, id, g, f0, -1), InvalidArgument);

    UnrolledConfig bad = cfg;
    bad.omega = 2.5 / (ctx.sigma_max * ctx.sigma_max);
    CHECK_THROWS_AS(unrolled_apply(ctx, bad, id, g, f0, 1), InvalidArgument);
    bad = cfg;
    bad.s = 0;
    CHECK_THROWS_AS(unrolled_apply(ctx, bad, id, g, f0, 1), InvalidArgument);
    bad = cfg;
    bad.gamma_a = 0.5;
    CHECK_THROWS_AS(unrolled_apply(ctx, bad, id, g, f0, 1), InvalidArgument);
}

TEST_CASE("unrolled apply is deterministic across thread counts") {
    const Geometry geom = make_geometry(8, 6, 1.0);
    const RadonContext ctx = make_radon_context(geom);
    const Sinogram g = ctx.proj->forward(smooth_phantom(geom));
    const nn::Network net = random_net(2, 3, 17);
    UnrolledConfig cfg;
    const int before = thread_count();
    set_thread_count(1);
    const auto a = unrolled_apply(ctx, cfg, net, g, std::nullopt, 3);
    set_thread_count(3);
    const auto b = unrolled_apply(ctx, cfg, net, g, std::nullopt, 3);
    const auto c = unrolled_apply(ctx, cfg, net, g, std::nullopt, 3);
    set_thread_count(before);
    for (std::size_t k = 0; k < a.size(); ++k) {
        CHECK(a[k].values == b[k].values);
        CHECK(b[k].values == c[k].values);
    }
}

TEST_CASE("unrolled loss: reductions and independent terms") {
    const Geometry geom = make_geometry(8, 6, 1.0);
    const RadonContext ctx = make_radon_context(geom);
    const Image truth = smooth_phantom(geom);
    const Sinogram g = ctx.proj->forward(truth);
    const nn::Network net = random_net(1, 3, 23);

    SUBCASE("D=1 without regularizers is the plain fidelity") {
        UnrolledConfig cfg;
        cfg.depth = 1;
        cfg.gamma_s = cfg.gamma_g = 0.0;
        const UnrolledLoss l = unrolled_loss(ctx, cfg, net, g, truth);
        const Image h = unrolled_apply(ctx, cfg, net, g, std::nullopt, 1).front();
        const auto d = diff(h.values.vec(), truth.values.vec());
        const double fid = std::inner_product(d.begin(), d.end(), d.begin(), 0.0) / static_cast<double>(d.size());
        CHECK(l.total == doctest::Approx(fid).epsilon(1e-12));
        CHECK(l.support_sum() == 0.0);
        CHECK(l.inputgrad_sum() == 0.0);
    }

    SUBCASE("support term equals the mean squared sinogram of the network change") {
        UnrolledConfig cfg;
        cfg.depth = 2;
        cfg.gamma_s = 0.7;
        const UnrolledLoss l = unrolled_loss(ctx, cfg, net, g, truth);
        const double omega = cfg.resolved_omega(ctx);
        Image f = landweber_start(ctx, cfg, g);
        for (int k = 0; k < cfg.depth; ++k) {
            Image u = f;
            for (int i = 0; i < cfg.s; ++i)
                u.values.vec() = landweber_step(*ctx.op, g.values.flat(), u.values.flat(), omega);
            const Image y = apply_net(net, u);
            const Sinogram rc = ctx.proj->forward(Image(geom, Array2(u.values.rows(), u.values.cols(),
                                                                      diff(y.values.vec(), u.values.vec()))));
            const auto& v = rc.values.vec();
            const double ref = cfg.gamma_s * std::inner_product(v.begin(), v.end(), v.begin(), 0.0) /
                               static_cast<double>(v.size());
            CHECK(l.support[static_cast<std::size_t>(k)] == doctest::Approx(ref).epsilon(1e-12));
            f = y;
        }
    }

    SUBCASE("depth weights are powers of gamma_a") {
        UnrolledConfig a;
        a.gamma_a = 2.0;
        UnrolledConfig b = a;
        b.gamma_a = 1.0;
        const UnrolledLoss la = unrolled_loss(ctx, a, net, g, truth);
        const UnrolledLoss lb = unrolled_loss(ctx, b, net, g, truth);
        REQUIRE(la.fid.size() == 4);
        const double expect[] = {1, 2, 4, 8};
        for (std::size_t k = 0; k < 4; ++k) CHECK(la.fid[k] / lb.fid[k] == doctest::Approx(expect[k]).epsilon(1e-12));
    }

    SUBCASE("components are nonnegative and add up") {
        UnrolledConfig cfg;
        cfg.gamma_s = 0.5;
        cfg.gamma_g = 0.5;
        const UnrolledLoss l = unrolled_loss(ctx, cfg, net, g, truth);
        double total = 0.0;
        for (std::size_t k = 0; k < l.fid.size(); ++k) {
            CHECK(l.fid[k] >= 0.0);
            CHECK(l.support[k] >= 0.0);
            CHECK(l.inputgrad[k] >= 0.0);
            total += l.fid[k] + l.support[k] + l.inputgrad[k];
        }
        CHECK(l.inputgrad_sum() > 0.0);
        CHECK(std::abs(l.total - total) <= 1e-12 * l.total);
    }

    SUBCASE("input-gradient term is the jvp along the unit direction") {
        UnrolledConfig cfg;
        cfg.depth = 1;
        cfg.gamma_s = 0.0;
        cfg.gamma_g = 1.0;
        const Image f0 = landweber_start(ctx, cfg, g);
        const UnrolledLoss l = unrolled_loss(ctx, cfg, net, g, truth, f0);
        auto d = diff(truth.values.vec(), f0.values.vec());
        const double n = norm2(d);
        for (auto& x : d) x /= n;
        const double h = 1e-6, omega = cfg.resolved_omega(ctx);
        auto H = [&](double t) {
            Image f = f0;
            axpy(t, d, f.values.flat());
            f.values.vec() = landweber_step(*ctx.op, g.values.flat(), f.values.flat(), omega);
            return apply_net(net, f).values.vec();
        };
        const auto jd = diff(H(h), H(-h));
        double ms = 0.0;
        for (double x : jd) ms += (x / (2 * h)) * (x / (2 * h));
        ms /= static_cast<double>(jd.size());
        CHECK(l.inputgrad[0] == doctest::Approx(ms).epsilon(1e-6));
    }

    SUBCASE("zero direction sets the term to zero") {
        UnrolledConfig cfg;
        cfg.depth = 2;
        cfg.gamma_g = 1.0;
        const UnrolledLossGrad r = unrolled_loss_grad(ctx, cfg, net, g, truth, truth);
        CHECK(r.loss.inputgrad[0] == 0.0);
        CHECK(r.loss.inputgrad[1] > 0.0);
        for (double x : r.grad) CHECK(std::isfinite(x));
    }
}

TEST_CASE("unrolled loss gradient against central differences") {
    const Geometry geom = make_geometry(4, 4, 1.0);
    const RadonContext ctx = make_radon_context(geom);
    const Image truth = smooth_phantom(geom);
    Sinogram g = ctx.proj->forward(truth);
    const auto noise = testing::random_vector(g.values.size(), 5);
    for (std::size_t i = 0; i < noise.size(); ++i) g.values.vec()[i] += 0.01 * noise[i];
    nn::Network net = random_net(1, 2, 31);
    // Zero biases put pre-activations exactly on the ReLU kink where the
    // image is zero, so every parameter gets a small offset.
    std::vector<double> shifted = net.params();
    const auto jitter = testing::random_vector(shifted.size(), 77);
    for (std::size_t i = 0; i < shifted.size(); ++i) shifted[i] += 0.05 * jitter[i];
    net.set_params(shifted);
    UnrolledConfig cfg;
    cfg.depth = 2;
    cfg.p_init = 4;
    cfg.gamma_s = 0.5;
    cfg.gamma_g = 0.5;

    const UnrolledLossGrad r = unrolled_loss_grad(ctx, cfg, net, g, truth);
    REQUIRE(r.grad.size() == net.param_count());
    CHECK(r.loss.inputgrad_sum() > 0.0);
    CHECK(r.loss.support_sum() > 0.0);

    std::vector<double> p = net.params(), fd(p.size());
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
    net.set_params(p);
    CHECK(max_abs(diff(r.grad, fd)) / max_abs(fd) <= 1e-4);
}

TEST_CASE("semi-convergence eval") {
    const Geometry geom = make_geometry(10, 6, 1.0);
    const RadonContext ctx = make_radon_context(geom);
    const auto samples = small_set(*ctx.proj, InputMode::Art, 3, 4);
    UnrolledConfig cfg;
    cfg.depth = 2;
    cfg.s = 3;
    const nn::Network id = identity_net(1, 2);

    SUBCASE("identity net follows Landweber every s steps") {
        const DepthCurve c = semi_convergence_eval(ctx, cfg, id, samples, 5);
        REQUIRE(c.mae_hu.size() == 5);
        LandweberOptions lo;
        lo.omega = cfg.resolved_omega(ctx);
        lo.sigma_max = ctx.sigma_max;
        lo.trace.enabled = false;
        for (int k = 1; k <= 5; ++k) {
            double mae = 0.0, rel = 0.0;
            for (const auto& s : samples) {
                LinearProblem prob(ctx.op, s.noisy.values.vec());
                lo.iters = cfg.p_init + cfg.s * k;
                const auto f = landweber(prob, lo).f;
                mae += mae_hu(f, s.truth.values.flat()) / 3.0;
                rel += rel_error(f, s.truth.values.flat()) / 3.0;
            }
            CHECK(c.mae_hu[static_cast<std::size_t>(k - 1)] == doctest::Approx(mae).epsilon(1e-12));
            CHECK(c.rel_error[static_cast<std::size_t>(k - 1)] == doctest::Approx(rel).epsilon(1e-12));
        }
        std::istringstream csv(c.to_csv());
        std::string line;
        std::getline(csv, line);
        CHECK(line == "k,mae_hu,rel_error,ssim");
        int rows = 0;
        while (std::getline(csv, line)) ++rows;
        CHECK(rows == 5);
    }

    SUBCASE("single sample curve is that sample's metrics") {
        const nn::Network net = random_net(1, 2, 3);
        const std::vector<Sample> one{samples[1]};
        const DepthCurve c = semi_convergence_eval(ctx, cfg, net, one, 3);
        const auto it = unrolled_apply(ctx, cfg, net, samples[1].noisy, samples[1].input, 3);
        for (std::size_t k = 0; k < 3; ++k) {
            CHECK(c.mae_hu[k] == mae_hu(it[k].values.flat(), samples[1].truth.values.flat()));
            CHECK(c.ssim[k] == ssim(it[k].values, samples[1].truth.values));
        }
    }

    CHECK_THROWS_AS(semi_convergence_eval(ctx, cfg, id, samples, 1), InvalidArgument);
    CHECK_THROWS_AS(semi_convergence_eval(ctx, cfg, id, {}, 3), InvalidArgument);
}

TEST_CASE("probes on the identity network") {
    const Geometry geom = make_geometry(10, 6, 1.0);
    const RadonContext ctx = make_radon_context(geom);
    const auto samples = small_set(*ctx.proj, InputMode::Art, 2, 6);
    UnrolledConfig cfg;
    cfg.depth = 2;
    const nn::Network id = identity_net(1, 2);
    CHECK(support_leakage(ctx, cfg, id, samples) == 0.0);
    const double lip = median_lipschitz(ctx, cfg, id, samples, 5, 1e-3, 2);
    CHECK(lip > 0.0);
    CHECK(lip <= 1.0 + 1e-9);
    const SvdOracle oracle = svd_oracle(materialize(*ctx.proj).matrix);
    CHECK(support_energy_fraction(ctx, oracle, cfg, id, samples) == 0.0);
    const double frac = support_energy_fraction(ctx, oracle, cfg, random_net(1, 2, 9), samples);
    CHECK(frac > 0.0);
    CHECK(frac <= 1.0);
    const auto steps = step_norms(ctx, cfg, id, samples[0], 4);
    CHECK(steps.size() == 4);
}

TEST_CASE("post training: logs, checkpoints, overfit direction") {
    const Geometry geom = make_geometry(10, 6, 1.0);
    const RadonContext ctx = make_radon_context(geom);
    const auto set = small_set(*ctx.proj, InputMode::Fbp, 6, 8);
    const std::vector<Sample> train(set.begin(), set.begin() + 4), val(set.begin() + 4, set.end());
    nn::UNetConfig uc;
    uc.levels = 1;
    uc.base_channels = 2;
    uc.batchnorm = true;
    const nn::Network net = nn::build_mini_unet(uc);
    const fs::path dir = fs::temp_directory_path() / "parbeam_test_post";
    fs::remove_all(dir);
    TrainSchedule ts;
    ts.epochs = 2;
    ts.batch_size = 2;
    ts.checkpoint_dir = dir / "ckpt";
    ts.log_path = dir / "log.csv";
    const SchemeState st = train_postprocess(ctx, train, val, net, PostLossConfig{}, ts);
    CHECK(st.step == 4);
    CHECK(st.epoch == 2);
    CHECK(st.val_mae_hu.size() == 2);
    CHECK(st.best_val_mae_hu == *std::min_element(st.val_mae_hu.begin(), st.val_mae_hu.end()));
    CHECK(fs::exists(dir / "ckpt" / kBestCheckpoint));
    CHECK(fs::exists(dir / "ckpt" / kLastCheckpoint));
    const nn::Network best = nn::load_checkpoint(dir / "ckpt" / kBestCheckpoint);
    CHECK(best.params() == st.net.params());
    CHECK(validate_post(best, val, HuScale{}) == st.best_val_mae_hu);

    std::ifstream in(dir / "log.csv");
    std::string header;
    std::getline(in, header);
    CHECK(header == "step,epoch,total,fid,tvdiff,radon,logsp,kernel");
    for (const auto& r : st.trace) {
        CHECK(r.terms.size() == 5);
        CHECK(std::abs(r.total - sum(r.terms)) <= 1e-12 * std::abs(r.total));
    }

    SUBCASE("same seed reproduces the run") {
        TrainSchedule again = ts;
        again.checkpoint_dir.reset();
        again.log_path.reset();
        const SchemeState st2 = train_postprocess(ctx, train, val, net, PostLossConfig{}, again);
        CHECK(st2.log_csv() == st.log_csv());
        CHECK(st2.last.params() == st.last.params());
    }

    SUBCASE("fidelity-only training on one sample lowers the loss") {
        PostLossConfig fid;
        fid.tau2 = fid.tau3 = fid.tau4 = fid.gamma = 0.0;
        TrainSchedule one;
        one.epochs = 150;
        one.batch_size = 1;
        one.lr = 1e-2;
        const std::vector<Sample> single{train[0]};
        const SchemeState s = train_postprocess(ctx, single, single, identity_net(1, 4), fid, one);
        CHECK(s.trace.back().total < 0.5 * s.trace.front().total);
    }

    fs::remove_all(dir);
}

TEST_CASE("post training divergence keeps the last good checkpoint") {
    const Geometry geom = make_geometry(10, 6, 1.0);
    const RadonContext ctx = make_radon_context(geom);
    auto set = small_set(*ctx.proj, InputMode::Fbp, 2, 8);
    set[1].input.values(3, 3) = std::nan("");
    const fs::path dir = fs::temp_directory_path() / "parbeam_test_diverge";
    fs::remove_all(dir);
    TrainSchedule ts;
    ts.epochs = 1;
    ts.batch_size = 1;
    ts.seed = 1;
    ts.checkpoint_dir = dir;
    const std::vector<Sample> val{set[0]};
    CHECK_THROWS_AS(train_postprocess(ctx, set, val, identity_net(1, 2), PostLossConfig{}, ts), TrainingDiverged);
    CHECK(fs::exists(dir / kLastGoodCheckpoint));
    fs::remove_all(dir);
}

TEST_CASE("unrolled training: log columns and validation") {
    const Geometry geom = make_geometry(10, 6, 1.0);
    const RadonContext ctx = make_radon_context(geom);
    const auto set = small_set(*ctx.proj, InputMode::Art, 5, 12);
    const std::vector<Sample> train(set.begin(), set.begin() + 3), val(set.begin() + 3, set.end());
    UnrolledConfig cfg;
    cfg.depth = 3;
    TrainSchedule ts;
    ts.epochs = 3;
    ts.batch_size = 2;
    ts.lr = 3e-3;
    const SchemeState st = train_unrolled(ctx, train, val, identity_net(1, 2), cfg, ts);
    CHECK(st.columns == std::vector<std::string>{"fid_k0", "fid_k1", "fid_k2", "support", "inputgrad"});
    CHECK(st.log_csv().rfind("step,epoch,total,fid_k0,fid_k1,fid_k2,support,inputgrad\n", 0) == 0);
    CHECK(st.step == 6);
    CHECK(st.initial_val_mae_hu == doctest::Approx(validate_unrolled(ctx, cfg, identity_net(1, 2), val, HuScale{})));
    CHECK(st.best_val_mae_hu <= st.initial_val_mae_hu);

    nn::UNetConfig bn;
    bn.batchnorm = true;
    CHECK_THROWS_AS(train_unrolled(ctx, train, val, nn::build_mini_unet(bn), cfg, ts), InvalidArgument);
    TrainSchedule bad = ts;
    bad.epochs = 0;
    CHECK_THROWS_AS(train_unrolled(ctx, train, val, identity_net(1, 2), cfg, bad), InvalidArgument);
}

TEST_CASE("support-space share of the network change drops after training with the support term") {
    const Geometry geom = make_geometry(12, 8, 1.0);
    const RadonContext ctx = make_radon_context(geom);
    const auto set = small_set(*ctx.proj, InputMode::Art, 8, 14);
    const std::vector<Sample> train(set.begin(), set.begin() + 6), val(set.begin() + 6, set.end());
    UnrolledConfig cfg;
    cfg.depth = 2;
    cfg.gamma_s = 10.0;
    const nn::Network net = random_net(1, 4, 5);
    const SvdOracle oracle = svd_oracle(materialize(*ctx.proj).matrix);
    const double before = support_energy_fraction(ctx, oracle, cfg, net, val);
    TrainSchedule ts;
    ts.epochs = 15;
    ts.batch_size = 2;
    const SchemeState st = train_unrolled(ctx, train, val, net, cfg, ts);
    const double after = support_energy_fraction(ctx, oracle, cfg, st.last, val);
    MESSAGE("support share before " << before << " after " << after);
    CHECK(after < before);
}
