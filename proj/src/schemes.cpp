#include "parbeam/schemes.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include "parbeam/errors.hpp"
#include "parbeam/io.hpp"
#include "parbeam/linalg.hpp"
#include "parbeam/metrics.hpp"
#include "parbeam/parallel.hpp"

namespace parbeam {

namespace fs = std::filesystem;
using nn::Mode;
using nn::Shape;
using nn::Tape;
using nn::Tensor4;
using nn::Var;
namespace ops = nn::ops;

RadonContext make_radon_context(const Geometry& geom) {
    RadonContext ctx;
    ctx.proj = std::make_shared<Projector>(geom);
    ctx.op = std::make_shared<ProjectorOperator>(ctx.proj);
    ctx.sigma_max = power_method_norm(*ctx.op, kBoundPowerIters, kBoundPowerSeed).sigma_max;
    return ctx;
}

namespace {

Shape image_item(const RadonContext& ctx) { return Shape{1, 1, ctx.side(), ctx.side()}; }

Shape sino_item(const RadonContext& ctx) {
    const Geometry& g = ctx.geometry();
    return Shape{1, 1, static_cast<std::size_t>(g.num_angles()), static_cast<std::size_t>(g.num_bins())};
}

std::size_t padded(std::size_t n, int depth) {
    const std::size_t m = std::size_t{1} << depth;
    return (n + m - 1) / m * m;
}

double value_of(const Tape& t, Var v) { return t.value(v).flat()[0]; }

Var sum_all(Tape& t, const std::vector<Var>& vs) {
    Var acc = vs.front();
    for (std::size_t i = 1; i < vs.size(); ++i) acc = ops::add(t, acc, vs[i]);
    return acc;
}

void require_geometry(const Geometry& a, const Geometry& b, const char* what) {
    if (!(a == b)) throw InvalidArgument(std::string(what) + ": geometry mismatch");
}

} // namespace

Var apply_net(Tape& t, const nn::Network& net, Var x, const nn::ParamVars& pv, Mode m, nn::BatchStats* stats) {
    const Shape s = t.value(x).shape();
    const std::size_t h = padded(s.h, net.depth()), w = padded(s.w, net.depth());
    if (h == s.h && w == s.w) return net.forward(t, x, pv, m, stats);
    const Var y = net.forward(t, ops::pad_to(t, x, h, w), pv, m, stats);
    return ops::crop(t, y, s.h, s.w);
}

std::pair<Var, Var> apply_net_tangent(Tape& t, const nn::Network& net, Var x, Var e, const nn::ParamVars& pv,
                                      Mode m) {
    const Shape s = t.value(x).shape();
    const std::size_t h = padded(s.h, net.depth()), w = padded(s.w, net.depth());
    if (h == s.h && w == s.w) return net.forward_tangent(t, x, e, pv, m);
    auto [y, dy] = net.forward_tangent(t, ops::pad_to(t, x, h, w), ops::pad_to(t, e, h, w), pv, m);
    return {ops::crop(t, y, s.h, s.w), ops::crop(t, dy, s.h, s.w)};
}

Image apply_net(const nn::Network& net, const Image& img, Mode m) {
    Tape t;
    const nn::ParamVars pv = net.bind(t, false);
    const Var x = t.constant(stack_images({&img}));
    const Var y = apply_net(t, net, x, pv, m);
    return unstack_image(t.value(y), 0, img.geom);
}

Tensor4 stack_images(const std::vector<const Image*>& imgs) {
    if (imgs.empty()) throw InvalidArgument("stack_images: empty batch");
    const auto side = static_cast<std::size_t>(imgs.front()->side());
    Tensor4 out(Shape{imgs.size(), 1, side, side});
    for (std::size_t n = 0; n < imgs.size(); ++n) {
        require_geometry(imgs[n]->geom, imgs.front()->geom, "stack_images");
        std::copy(imgs[n]->values.vec().begin(), imgs[n]->values.vec().end(), out.ptr(n, 0, 0, 0));
    }
    return out;
}

Tensor4 stack_sinograms(const std::vector<const Sinogram*>& sinos) {
    if (sinos.empty()) throw InvalidArgument("stack_sinograms: empty batch");
    const Array2& first = sinos.front()->values;
    Tensor4 out(Shape{sinos.size(), 1, first.rows(), first.cols()});
    for (std::size_t n = 0; n < sinos.size(); ++n) {
        require_geometry(sinos[n]->geom, sinos.front()->geom, "stack_sinograms");
        std::copy(sinos[n]->values.vec().begin(), sinos[n]->values.vec().end(), out.ptr(n, 0, 0, 0));
    }
    return out;
}

Image unstack_image(const Tensor4& t, std::size_t n, const Geometry& geom) {
    const auto side = static_cast<std::size_t>(geom.image_side());
    if (t.shape().c != 1 || t.shape().h != side || t.shape().w != side || n >= t.shape().n)
        throw InvalidArgument("unstack_image: tensor " + t.shape().str() + " does not hold that image");
    const double* p = t.ptr(n, 0, 0, 0);
    return Image(geom, Array2(side, side, std::vector<double>(p, p + side * side)));
}

namespace {

bool is_kernel_layer(nn::LayerKind k) {
    return k == nn::LayerKind::Conv3x3 || k == nn::LayerKind::Conv1x1 || k == nn::LayerKind::TConv2x2s2;
}

} // namespace

std::vector<double> kernel_weights(const nn::Network& net) {
    std::vector<double> out;
    for (const auto& l : net.layers()) {
        if (!is_kernel_layer(l.kind)) continue;
        const auto begin = net.params().begin() + static_cast<std::ptrdiff_t>(l.param_offset);
        out.insert(out.end(), begin, begin + static_cast<std::ptrdiff_t>(l.param_count - l.out_channels));
    }
    return out;
}

namespace {

/// Mean of squared kernel weights as a tape value; nullopt without kernels.
std::optional<Var> kernel_term(Tape& t, const nn::Network& net, const nn::ParamVars& pv) {
    std::size_t total = 0;
    for (const auto& l : net.layers())
        if (is_kernel_layer(l.kind)) total += l.param_count - l.out_channels;
    if (total == 0) return std::nullopt;
    std::vector<Var> parts;
    for (std::size_t i = 0; i < net.layers().size(); ++i) {
        const auto& l = net.layers()[i];
        if (!is_kernel_layer(l.kind)) continue;
        const Var w = pv.vars[static_cast<std::size_t>(pv.first[i])];
        const double share = static_cast<double>(l.param_count - l.out_channels) / static_cast<double>(total);
        parts.push_back(ops::scale(t, ops::mean_sq(t, w), share));
    }
    return sum_all(t, parts);
}

struct PostVars {
    Var total, fid, tvdiff, radon, logsp;
    std::optional<Var> kernel;
};

PostVars post_terms(Tape& t, const RadonContext& ctx, const nn::Network& net, const nn::ParamVars& pv, Var out,
                    Var truth, Var expected, const PostLossConfig& cfg) {
    PostVars v;
    const Var diff = ops::sub(t, out, truth);
    v.fid = ops::mean_sq(t, diff);
    v.tvdiff = ops::mean_all(t, ops::tv_map(t, diff));
    v.radon = ops::mean_sq(t, ops::sub(t, ops::linop(t, out, ctx.op, sino_item(ctx)), expected));
    v.logsp = ops::mean_all(t, ops::log_eps(t, ops::tv_map(t, out), cfg.eps));
    v.kernel = kernel_term(t, net, pv);
    std::vector<Var> parts{ops::scale(t, v.fid, cfg.tau1), ops::scale(t, v.tvdiff, cfg.tau1 * cfg.gamma),
                           ops::scale(t, v.radon, cfg.resolved_tau2(ctx.side())), ops::scale(t, v.logsp, cfg.tau3)};
    if (v.kernel) parts.push_back(ops::scale(t, *v.kernel, cfg.tau4));
    v.total = sum_all(t, parts);
    return v;
}

PostLoss read_post(const Tape& t, const PostVars& v, const PostLossConfig& cfg, std::size_t side) {
    PostLoss r;
    r.raw = {value_of(t, v.fid), value_of(t, v.tvdiff), value_of(t, v.radon), value_of(t, v.logsp),
             v.kernel ? value_of(t, *v.kernel) : 0.0};
    r.weighted = {cfg.tau1 * r.raw.fid, cfg.tau1 * cfg.gamma * r.raw.tvdiff, cfg.resolved_tau2(side) * r.raw.radon,
                  cfg.tau3 * r.raw.logsp, cfg.tau4 * r.raw.kernel};
    r.total = value_of(t, v.total);
    return r;
}

} // namespace

void PostLossConfig::validate() const {
    for (double w : {tau1, tau3, tau4, gamma})
        if (!std::isfinite(w) || w < 0.0) throw InvalidArgument("post loss: weights must be finite and >= 0");
    if (!std::isfinite(tau2)) throw InvalidArgument("post loss: tau2 must be finite");
    if (!(eps > 0.0) || !std::isfinite(eps)) throw InvalidArgument("post loss: eps must be positive");
}

PostLoss post_loss(const Image& out, const Image& truth, const Sinogram& expected, const RadonContext& ctx,
                   const nn::Network& net, const PostLossConfig& cfg) {
    cfg.validate();
    require_geometry(out.geom, ctx.geometry(), "post_loss");
    require_geometry(truth.geom, ctx.geometry(), "post_loss");
    require_geometry(expected.geom, ctx.geometry(), "post_loss");
    Tape t;
    const nn::ParamVars pv = net.bind(t, false);
    const Var o = t.constant(stack_images({&out}));
    const Var f = t.constant(stack_images({&truth}));
    const Var g = t.constant(stack_sinograms({&expected}));
    return read_post(t, post_terms(t, ctx, net, pv, o, f, g, cfg), cfg, ctx.side());
}

// ---- unrolled ------------------------------------------------------------

void UnrolledConfig::validate() const {
    if (s < 1) throw InvalidArgument("unrolled: s must be >= 1");
    if (depth < 1) throw InvalidArgument("unrolled: depth must be >= 1");
    if (p_init < 0) throw InvalidArgument("unrolled: p_init must be >= 0");
    if (!(gamma_a >= 1.0) || !std::isfinite(gamma_a)) throw InvalidArgument("unrolled: gamma_a must be >= 1");
    if (!(gamma_s >= 0.0) || !(gamma_g >= 0.0) || !std::isfinite(gamma_s) || !std::isfinite(gamma_g))
        throw InvalidArgument("unrolled: gamma_s and gamma_g must be finite and >= 0");
}

double UnrolledConfig::resolved_omega(const RadonContext& ctx) const {
    const double s2 = ctx.sigma_max * ctx.sigma_max;
    const double w = omega > 0.0 ? omega : 1.0 / s2;
    if (!(w > 0.0) || !(w < 2.0 / s2))
        throw InvalidArgument("unrolled: omega = " + io::format_double(w) + " outside (0, " +
                              io::format_double(2.0 / s2) + ")");
    return w;
}

namespace {

Image landweber_steps(const RadonContext& ctx, const Sinogram& g, Image f, int steps, double omega) {
    for (int i = 0; i < steps; ++i)
        f.values.vec() = landweber_step(*ctx.op, g.values.flat(), f.values.flat(), omega);
    return f;
}

} // namespace

Image landweber_start(const RadonContext& ctx, const UnrolledConfig& cfg, const Sinogram& g) {
    cfg.validate();
    require_geometry(g.geom, ctx.geometry(), "landweber_start");
    return landweber_steps(ctx, g, Image(ctx.geometry()), cfg.p_init, cfg.resolved_omega(ctx));
}

std::vector<Image> unrolled_apply(const RadonContext& ctx, const UnrolledConfig& cfg, const nn::Network& net,
                                  const Sinogram& g, const std::optional<Image>& f0, int K) {
    cfg.validate();
    const double omega = cfg.resolved_omega(ctx);
    if (K < 0) throw InvalidArgument("unrolled_apply: K must be >= 0");
    require_geometry(g.geom, ctx.geometry(), "unrolled_apply");
    if (f0) require_geometry(f0->geom, ctx.geometry(), "unrolled_apply");
    std::vector<Image> out;
    if (K == 0) return out;
    Image f = f0 ? *f0 : landweber_steps(ctx, g, Image(ctx.geometry()), cfg.p_init, omega);
    out.reserve(static_cast<std::size_t>(K));
    for (int k = 0; k < K; ++k) {
        f = apply_net(net, landweber_steps(ctx, g, std::move(f), cfg.s, omega));
        out.push_back(f);
    }
    return out;
}

double UnrolledLoss::support_sum() const { return std::accumulate(support.begin(), support.end(), 0.0); }
double UnrolledLoss::inputgrad_sum() const { return std::accumulate(inputgrad.begin(), inputgrad.end(), 0.0); }

namespace {

Var landweber_tape(Tape& t, const RadonContext& ctx, Var f, Var g, double omega) {
    const Var r = ops::sub(t, g, ops::linop(t, f, ctx.op, sino_item(ctx)));
    return ops::add(t, f, ops::scale(t, ops::linop_adjoint(t, r, ctx.op, image_item(ctx)), omega));
}

/// Tangent of one Landweber step: e - omega R^T R e.
Var landweber_tangent(Tape& t, const RadonContext& ctx, Var e, double omega) {
    const Var u = ops::linop_adjoint(t, ops::linop(t, e, ctx.op, sino_item(ctx)), ctx.op, image_item(ctx));
    return ops::sub(t, e, ops::scale(t, u, omega));
}

/// Per-item unit vectors along truth - f; items with norm below 1e-12 get 0.
Var unit_direction(Tape& t, Var f, Var truth) {
    const Var d = ops::sub(t, truth, f);
    const Tensor4& dv = t.value(d);
    const std::size_t n = dv.shape().n, item = dv.size() / n;
    Tensor4 mask(Shape{n, 1, 1, 1}), fill(Shape{n, 1, 1, 1});
    for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < item; ++j) s += dv.flat()[i * item + j] * dv.flat()[i * item + j];
        const bool ok = std::sqrt(s) >= 1e-12;
        mask.flat()[i] = ok ? 1.0 : 0.0;
        fill.flat()[i] = ok ? 0.0 : 1.0;
    }
    const Var sq = ops::add(t, ops::reduce_sum(t, ops::mul(t, d, d), true, false), t.constant(fill));
    const Var inv = ops::mul(t, ops::pow_c(t, sq, -0.5, 1.0), t.constant(mask));
    return ops::bmul(t, d, inv);
}

struct UnrolledVars {
    std::vector<Var> fid, support, inputgrad;
    Var total;
};

UnrolledVars unrolled_terms(Tape& t, const RadonContext& ctx, const UnrolledConfig& cfg, const nn::Network& net,
                            const nn::ParamVars& pv, Var f, Var g, Var truth) {
    const double omega = cfg.resolved_omega(ctx);
    UnrolledVars v;
    std::vector<Var> all;
    double amp = 1.0;
    for (int k = 0; k < cfg.depth; ++k) {
        Var u = f;
        for (int i = 0; i < cfg.s; ++i) u = landweber_tape(t, ctx, u, g, omega);
        Var y;
        if (cfg.gamma_g > 0.0) {
            Var e = unit_direction(t, f, truth);
            for (int i = 0; i < cfg.s; ++i) e = landweber_tangent(t, ctx, e, omega);
            auto [out, dy] = apply_net_tangent(t, net, u, e, pv, Mode::Eval);
            y = out;
            v.inputgrad.push_back(ops::scale(t, ops::mean_sq(t, dy), cfg.gamma_g));
        } else {
            y = apply_net(t, net, u, pv, Mode::Eval);
        }
        v.fid.push_back(ops::scale(t, ops::mean_sq(t, ops::sub(t, y, truth)), amp));
        if (cfg.gamma_s > 0.0) {
            const Var c = ops::sub(t, y, u);
            v.support.push_back(
                ops::scale(t, ops::mean_sq(t, ops::linop(t, c, ctx.op, sino_item(ctx))), cfg.gamma_s));
        }
        all.push_back(v.fid.back());
        if (cfg.gamma_s > 0.0) all.push_back(v.support.back());
        if (cfg.gamma_g > 0.0) all.push_back(v.inputgrad.back());
        amp *= cfg.gamma_a;
        f = y;
    }
    v.total = sum_all(t, all);
    return v;
}

UnrolledLoss read_unrolled(const Tape& t, const UnrolledVars& v, int depth) {
    UnrolledLoss r;
    const auto d = static_cast<std::size_t>(depth);
    r.fid.resize(d);
    r.support.assign(d, 0.0);
    r.inputgrad.assign(d, 0.0);
    for (std::size_t k = 0; k < d; ++k) r.fid[k] = value_of(t, v.fid[k]);
    for (std::size_t k = 0; k < v.support.size(); ++k) r.support[k] = value_of(t, v.support[k]);
    for (std::size_t k = 0; k < v.inputgrad.size(); ++k) r.inputgrad[k] = value_of(t, v.inputgrad[k]);
    r.total = value_of(t, v.total);
    return r;
}

UnrolledLossGrad unrolled_eval(const RadonContext& ctx, const UnrolledConfig& cfg, const nn::Network& net,
                               const Sinogram& g, const Image& truth, const std::optional<Image>& f0, bool grad) {
    cfg.validate();
    require_geometry(g.geom, ctx.geometry(), "unrolled_loss");
    require_geometry(truth.geom, ctx.geometry(), "unrolled_loss");
    const Image start = f0 ? *f0 : landweber_start(ctx, cfg, g);
    require_geometry(start.geom, ctx.geometry(), "unrolled_loss");
    Tape t;
    const nn::ParamVars pv = net.bind(t, grad);
    const UnrolledVars v = unrolled_terms(t, ctx, cfg, net, pv, t.constant(stack_images({&start})),
                                          t.constant(stack_sinograms({&g})), t.constant(stack_images({&truth})));
    UnrolledLossGrad out{read_unrolled(t, v, cfg.depth), {}};
    if (grad) {
        t.backward(v.total);
        out.grad = net.gather_grad(t, pv);
    }
    return out;
}

} // namespace

UnrolledLoss unrolled_loss(const RadonContext& ctx, const UnrolledConfig& cfg, const nn::Network& net,
                           const Sinogram& g, const Image& truth, const std::optional<Image>& f0) {
    return unrolled_eval(ctx, cfg, net, g, truth, f0, false).loss;
}

UnrolledLossGrad unrolled_loss_grad(const RadonContext& ctx, const UnrolledConfig& cfg, const nn::Network& net,
                                    const Sinogram& g, const Image& truth, const std::optional<Image>& f0) {
    return unrolled_eval(ctx, cfg, net, g, truth, f0, true);
}

// ---- training ------------------------------------------------------------

void TrainSchedule::validate() const {
    if (epochs < 1) throw InvalidArgument("train: epochs must be >= 1");
    if (batch_size < 1) throw InvalidArgument("train: batch size must be >= 1");
    if (!(lr > 0.0) || !std::isfinite(lr)) throw InvalidArgument("train: learning rate must be positive");
    if (!(lr_decay > 0.0) || lr_decay > 1.0) throw InvalidArgument("train: lr decay must lie in (0, 1]");
    if (decay_every < 1) throw InvalidArgument("train: decay interval must be >= 1");
    if (max_steps < 0) throw InvalidArgument("train: max steps must be >= 0");
}

double TrainSchedule::lr_at(int epoch) const {
    return lr * std::pow(lr_decay, static_cast<double>((std::max(epoch, 1) - 1) / decay_every));
}

std::string SchemeState::log_csv() const {
    std::ostringstream os;
    os << "step,epoch,total";
    for (const auto& c : columns) os << ',' << c;
    os << '\n';
    for (const auto& r : trace) {
        os << r.step << ',' << r.epoch << ',' << io::format_double(r.total);
        for (double v : r.terms) os << ',' << io::format_double(v);
        os << '\n';
    }
    return os.str();
}

double validate_post(const nn::Network& net, const std::vector<Sample>& val, const HuScale& hu) {
    if (val.empty()) throw InvalidArgument("validate: empty validation set");
    std::vector<double> mae(val.size());
    parallel_for(0, val.size(), [&](std::size_t i) {
        const Image out = apply_net(net, val[i].input);
        mae[i] = mae_hu(out.values.flat(), val[i].truth.values.flat(), hu);
    });
    return std::accumulate(mae.begin(), mae.end(), 0.0) / static_cast<double>(val.size());
}

double validate_unrolled(const RadonContext& ctx, const UnrolledConfig& cfg, const nn::Network& net,
                         const std::vector<Sample>& val, const HuScale& hu) {
    if (val.empty()) throw InvalidArgument("validate: empty validation set");
    std::vector<double> mae(val.size());
    parallel_for(0, val.size(), [&](std::size_t i) {
        const auto it = unrolled_apply(ctx, cfg, net, val[i].noisy, val[i].input, cfg.depth);
        mae[i] = mae_hu(it.back().values.flat(), val[i].truth.values.flat(), hu);
    });
    return std::accumulate(mae.begin(), mae.end(), 0.0) / static_cast<double>(val.size());
}

namespace {

struct StepResult {
    double total;
    std::vector<double> terms;
    std::vector<double> grad;
    nn::BatchStats stats;
};

using StepFn = std::function<StepResult(const nn::Network&, const std::vector<const Sample*>&)>;
using ValidateFn = std::function<double(const nn::Network&)>;

fs::path save_to(const TrainSchedule& sch, const char* name, const nn::Network& net) {
    fs::create_directories(*sch.checkpoint_dir);
    const fs::path p = *sch.checkpoint_dir / name;
    nn::save_checkpoint(p, net);
    return p;
}

[[noreturn]] void diverged(const TrainSchedule& sch, const nn::Network& good, long step, const std::string& why) {
    std::string msg = "training diverged at step " + std::to_string(step) + ": " + why;
    if (sch.checkpoint_dir) msg += "; last good checkpoint " + save_to(sch, kLastGoodCheckpoint, good).string();
    throw TrainingDiverged(msg);
}

SchemeState train_loop(const std::vector<Sample>& train, const nn::Network& net, const TrainSchedule& sch,
                       std::vector<std::string> columns, const StepFn& step_fn, const ValidateFn& validate) {
    sch.validate();
    if (train.empty()) throw InvalidArgument("train: empty training set");
    SchemeState st{.net = net, .last = net, .adam = nn::AdamState(net.param_count(), sch.lr)};
    st.columns = std::move(columns);
    st.initial_val_mae_hu = validate(net);
    st.best_val_mae_hu = std::numeric_limits<double>::infinity();

    nn::Network cur = net;
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(sch.seed);
    bool stop = false;
    for (int epoch = 1; epoch <= sch.epochs && !stop; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        st.adam.lr = sch.lr_at(epoch);
        for (std::size_t b = 0; b < order.size(); b += sch.batch_size) {
            if (sch.max_steps > 0 && st.step >= sch.max_steps) {
                stop = true;
                break;
            }
            std::vector<const Sample*> batch;
            for (std::size_t i = b; i < std::min(order.size(), b + sch.batch_size); ++i)
                batch.push_back(&train[order[i]]);
            StepResult r = step_fn(cur, batch);
            if (!std::isfinite(r.total)) diverged(sch, cur, st.step + 1, "non-finite loss");
            std::vector<double> params = cur.params();
            try {
                nn::adam_step(st.adam, params, r.grad);
            } catch (const TrainingDiverged& e) {
                diverged(sch, cur, st.step + 1, e.what());
            }
            cur.set_params(params);
            if (cur.has_batchnorm()) cur.update_running_stats(r.stats);
            ++st.step;
            st.trace.push_back({st.step, epoch, r.total, std::move(r.terms)});
        }
        const double v = validate(cur);
        st.val_mae_hu.push_back(v);
        st.epoch = epoch;
        if (v < st.best_val_mae_hu) {
            st.best_val_mae_hu = v;
            st.best_epoch = epoch;
            st.net = cur;
            if (sch.checkpoint_dir) st.checkpoints.push_back(save_to(sch, kBestCheckpoint, cur));
        }
    }
    st.last = cur;
    if (sch.checkpoint_dir) st.checkpoints.push_back(save_to(sch, kLastCheckpoint, cur));
    if (sch.log_path) {
        if (sch.log_path->has_parent_path()) fs::create_directories(sch.log_path->parent_path());
        std::ofstream os(*sch.log_path, std::ios::binary);
        os << st.log_csv();
        if (!os) throw IoError("cannot write training log " + sch.log_path->string());
    }
    return st;
}

void require_samples(const RadonContext& ctx, const std::vector<Sample>& s, const char* what) {
    for (const auto& x : s) {
        require_geometry(x.truth.geom, ctx.geometry(), what);
        require_geometry(x.input.geom, ctx.geometry(), what);
        require_geometry(x.noisy.geom, ctx.geometry(), what);
    }
}

} // namespace

SchemeState train_postprocess(const RadonContext& ctx, const std::vector<Sample>& train,
                              const std::vector<Sample>& val, const nn::Network& net, const PostLossConfig& cfg,
                              const TrainSchedule& schedule, const HuScale& hu) {
    cfg.validate();
    require_samples(ctx, train, "train_postprocess");
    require_samples(ctx, val, "train_postprocess");
    const StepFn step = [&](const nn::Network& cur, const std::vector<const Sample*>& batch) {
        std::vector<const Image*> in, truth;
        std::vector<const Sinogram*> ideal;
        for (const Sample* s : batch) {
            in.push_back(&s->input);
            truth.push_back(&s->truth);
            ideal.push_back(&s->ideal);
        }
        Tape t;
        const nn::ParamVars pv = cur.bind(t, true);
        StepResult r;
        const Mode m = cur.has_batchnorm() ? Mode::Train : Mode::Eval;
        const Var out = apply_net(t, cur, t.constant(stack_images(in)), pv, m, &r.stats);
        const PostVars v =
            post_terms(t, ctx, cur, pv, out, t.constant(stack_images(truth)), t.constant(stack_sinograms(ideal)), cfg);
        const PostLoss l = read_post(t, v, cfg, ctx.side());
        r.total = l.total;
        r.terms = {l.weighted.fid, l.weighted.tvdiff, l.weighted.radon, l.weighted.logsp, l.weighted.kernel};
        if (std::isfinite(r.total)) {
            t.backward(v.total);
            r.grad = cur.gather_grad(t, pv);
        }
        return r;
    };
    const ValidateFn validate = [&](const nn::Network& cur) { return validate_post(cur, val, hu); };
    return train_loop(train, net, schedule, {"fid", "tvdiff", "radon", "logsp", "kernel"}, step, validate);
}

SchemeState train_unrolled(const RadonContext& ctx, const std::vector<Sample>& train, const std::vector<Sample>& val,
                           const nn::Network& net, const UnrolledConfig& cfg, const TrainSchedule& schedule,
                           const HuScale& hu) {
    cfg.validate();
    cfg.resolved_omega(ctx);
    if (net.has_batchnorm()) throw InvalidArgument("train_unrolled: batchnorm is not supported across depths");
    require_samples(ctx, train, "train_unrolled");
    require_samples(ctx, val, "train_unrolled");
    const StepFn step = [&](const nn::Network& cur, const std::vector<const Sample*>& batch) {
        std::vector<const Image*> in, truth;
        std::vector<const Sinogram*> noisy;
        for (const Sample* s : batch) {
            in.push_back(&s->input);
            truth.push_back(&s->truth);
            noisy.push_back(&s->noisy);
        }
        Tape t;
        const nn::ParamVars pv = cur.bind(t, true);
        const UnrolledVars v =
            unrolled_terms(t, ctx, cfg, cur, pv, t.constant(stack_images(in)), t.constant(stack_sinograms(noisy)),
                           t.constant(stack_images(truth)));
        const UnrolledLoss l = read_unrolled(t, v, cfg.depth);
        StepResult r;
        r.total = l.total;
        r.terms = l.fid;
        r.terms.push_back(l.support_sum());
        r.terms.push_back(l.inputgrad_sum());
        if (std::isfinite(r.total)) {
            t.backward(v.total);
            r.grad = cur.gather_grad(t, pv);
        }
        return r;
    };
    std::vector<std::string> cols;
    for (int k = 0; k < cfg.depth; ++k) cols.push_back("fid_k" + std::to_string(k));
    cols.push_back("support");
    cols.push_back("inputgrad");
    const ValidateFn validate = [&](const nn::Network& cur) { return validate_unrolled(ctx, cfg, cur, val, hu); };
    return train_loop(train, net, schedule, std::move(cols), step, validate);
}

// ---- evaluation ----------------------------------------------------------

std::string DepthCurve::to_csv() const {
    std::ostringstream os;
    os << "k,mae_hu,rel_error,ssim\n";
    for (std::size_t k = 0; k < mae_hu.size(); ++k)
        os << k + 1 << ',' << io::format_double(mae_hu[k]) << ',' << io::format_double(rel_error[k]) << ','
           << io::format_double(ssim[k]) << '\n';
    return os.str();
}

DepthCurve semi_convergence_eval(const RadonContext& ctx, const UnrolledConfig& cfg, const nn::Network& net,
                                 const std::vector<Sample>& samples, int K_max, const HuScale& hu) {
    cfg.validate();
    if (K_max < cfg.depth) throw InvalidArgument("semi_convergence_eval: K_max must be >= depth");
    if (samples.empty()) throw InvalidArgument("semi_convergence_eval: empty evaluation set");
    const auto K = static_cast<std::size_t>(K_max);
    std::vector<std::vector<double>> mae(samples.size()), rel(samples.size()), ss(samples.size());
    parallel_for(0, samples.size(), [&](std::size_t i) {
        const auto it = unrolled_apply(ctx, cfg, net, samples[i].noisy, samples[i].input, K_max);
        for (const Image& f : it) {
            mae[i].push_back(mae_hu(f.values.flat(), samples[i].truth.values.flat(), hu));
            rel[i].push_back(rel_error(f.values.flat(), samples[i].truth.values.flat()));
            ss[i].push_back(ssim(f.values, samples[i].truth.values));
        }
    });
    DepthCurve c;
    c.mae_hu.assign(K, 0.0);
    c.rel_error.assign(K, 0.0);
    c.ssim.assign(K, 0.0);
    const double inv = 1.0 / static_cast<double>(samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i)
        for (std::size_t k = 0; k < K; ++k) {
            c.mae_hu[k] += mae[i][k] * inv;
            c.rel_error[k] += rel[i][k] * inv;
            c.ssim[k] += ss[i][k] * inv;
        }
    c.argmin = static_cast<int>(std::min_element(c.mae_hu.begin(), c.mae_hu.end()) - c.mae_hu.begin()) + 1;
    return c;
}

namespace {

Image h_map(const RadonContext& ctx, const nn::Network& net, const Sinogram& g, const Image& f, int s, double omega) {
    return apply_net(net, landweber_steps(ctx, g, f, s, omega));
}

double median(std::vector<double> v) {
    if (v.empty()) throw InvalidArgument("median of an empty set");
    std::sort(v.begin(), v.end());
    const std::size_t m = v.size() / 2;
    return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

std::vector<Image> depth_inputs(const RadonContext& ctx, const UnrolledConfig& cfg, const nn::Network& net,
                                const Sample& s) {
    std::vector<Image> f{s.input};
    if (cfg.depth > 1) {
        auto it = unrolled_apply(ctx, cfg, net, s.noisy, s.input, cfg.depth - 1);
        for (auto& x : it) f.push_back(std::move(x));
    }
    return f;
}

} // namespace

double lipschitz_probe(const RadonContext& ctx, const UnrolledConfig& cfg, const nn::Network& net, const Sinogram& g,
                       const Image& f, int probes, double eps, std::uint64_t seed) {
    cfg.validate();
    if (probes < 1 || !(eps > 0.0)) throw InvalidArgument("lipschitz_probe: need probes >= 1 and eps > 0");
    const double omega = cfg.resolved_omega(ctx);
    const Image base = h_map(ctx, net, g, f, cfg.s, omega);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss;
    std::vector<double> ratios;
    for (int i = 0; i < probes; ++i) {
        Image pert = f;
        std::vector<double> e(pert.values.size());
        for (auto& v : e) v = gauss(rng);
        axpy(eps, e, pert.values.flat());
        const Image out = h_map(ctx, net, g, pert, cfg.s, omega);
        std::vector<double> d(out.values.vec());
        axpy(-1.0, base.values.flat(), d);
        ratios.push_back(norm2(d) / (eps * norm2(e)));
    }
    return median(std::move(ratios));
}

double median_lipschitz(const RadonContext& ctx, const UnrolledConfig& cfg, const nn::Network& net,
                        const std::vector<Sample>& samples, int probes, double eps, std::uint64_t seed) {
    std::vector<std::vector<double>> per(samples.size());
    parallel_for(0, samples.size(), [&](std::size_t i) {
        const auto fs_ = depth_inputs(ctx, cfg, net, samples[i]);
        for (std::size_t k = 0; k < fs_.size(); ++k)
            per[i].push_back(lipschitz_probe(ctx, cfg, net, samples[i].noisy, fs_[k], probes, eps,
                                             seed + 1000003ULL * i + k));
    });
    std::vector<double> all;
    for (auto& v : per) all.insert(all.end(), v.begin(), v.end());
    return median(std::move(all));
}

namespace {

/// C(L^s f(k)) for every depth k < D of a sample, with the matching L^s f(k).
std::vector<std::vector<double>> changes(const RadonContext& ctx, const UnrolledConfig& cfg, const nn::Network& net,
                                         const Sample& s) {
    const double omega = cfg.resolved_omega(ctx);
    std::vector<std::vector<double>> out;
    for (const Image& f : depth_inputs(ctx, cfg, net, s)) {
        const Image u = landweber_steps(ctx, s.noisy, f, cfg.s, omega);
        const Image y = apply_net(net, u);
        std::vector<double> c(y.values.vec());
        axpy(-1.0, u.values.flat(), c);
        out.push_back(std::move(c));
    }
    return out;
}

} // namespace

double support_leakage(const RadonContext& ctx, const UnrolledConfig& cfg, const nn::Network& net,
                       const std::vector<Sample>& samples) {
    cfg.validate();
    if (samples.empty()) throw InvalidArgument("support_leakage: empty set");
    std::vector<std::vector<double>> per(samples.size());
    parallel_for(0, samples.size(), [&](std::size_t i) {
        for (const auto& c : changes(ctx, cfg, net, samples[i])) {
            const auto rc = ctx.op->apply(c);
            per[i].push_back(dot(rc, rc) / static_cast<double>(rc.size()));
        }
    });
    double acc = 0.0;
    std::size_t n = 0;
    for (const auto& v : per)
        for (double x : v) {
            acc += x;
            ++n;
        }
    return acc / static_cast<double>(n);
}

double support_energy_fraction(const RadonContext& ctx, const SvdOracle& oracle, const UnrolledConfig& cfg,
                               const nn::Network& net, const std::vector<Sample>& samples) {
    cfg.validate();
    if (oracle.v.rows() != ctx.proj->num_pixels())
        throw InvalidArgument("support_energy_fraction: oracle does not match the geometry");
    double supp = 0.0, total = 0.0;
    for (const auto& s : samples)
        for (const auto& c : changes(ctx, cfg, net, s)) {
            const auto p = oracle.support_projection(c);
            supp += dot(p, p);
            total += dot(c, c);
        }
    return total > 0.0 ? supp / total : 0.0;
}

std::vector<double> step_norms(const RadonContext& ctx, const UnrolledConfig& cfg, const nn::Network& net,
                               const Sample& sample, int K) {
    const auto it = unrolled_apply(ctx, cfg, net, sample.noisy, sample.input, K);
    std::vector<double> out;
    const Image* prev = &sample.input;
    for (const Image& f : it) {
        std::vector<double> d(f.values.vec());
        axpy(-1.0, prev->values.flat(), d);
        out.push_back(norm2(d));
        prev = &f;
    }
    return out;
}

} // namespace parbeam
