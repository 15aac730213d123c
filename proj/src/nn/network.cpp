#include "parbeam/nn/network.hpp"

#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include <json.hpp>

#include "parbeam/errors.hpp"
#include "parbeam/io.hpp"

namespace parbeam::nn {

namespace {

bool has_params(LayerKind k) {
    return k == LayerKind::Conv3x3 || k == LayerKind::Conv1x1 || k == LayerKind::TConv2x2s2 || k == LayerKind::BatchNorm;
}

// Weight shape, then bias shape.
std::pair<Shape, Shape> param_shapes(const LayerSpec& l) {
    const Shape channel{1, l.out_channels, 1, 1};
    switch (l.kind) {
    case LayerKind::Conv3x3:
        return {Shape{l.out_channels, l.in_channels, 3, 3}, channel};
    case LayerKind::Conv1x1:
        return {Shape{l.out_channels, l.in_channels, 1, 1}, channel};
    case LayerKind::TConv2x2s2:
        return {Shape{l.in_channels, l.out_channels, 2, 2}, channel};
    case LayerKind::BatchNorm:
        return {channel, channel};
    default:
        return {};
    }
}

std::size_t count_params(const LayerSpec& l) {
    if (!has_params(l.kind)) return 0;
    const auto [w, b] = param_shapes(l);
    return w.size() + b.size();
}

} // namespace

std::string to_string(LayerKind k) {
    switch (k) {
    case LayerKind::Conv3x3: return "conv3x3";
    case LayerKind::Conv1x1: return "conv1x1";
    case LayerKind::ReLU: return "relu";
    case LayerKind::MaxPool2: return "maxpool2";
    case LayerKind::TConv2x2s2: return "tconv2x2s2";
    case LayerKind::BatchNorm: return "batchnorm";
    case LayerKind::Concat: return "concat";
    case LayerKind::Add: return "add";
    }
    return "?";
}

struct Network::Cache {
    Tape tape;
    Var x, out;
    ParamVars pv;
};

Network::Network(std::size_t in_channels, std::vector<LayerSpec> layers, int output, std::uint64_t seed)
    : in_channels_(in_channels), layers_(std::move(layers)), output_(output) {
    if (in_channels_ == 0) throw InvalidArgument("Network: zero input channels");
    if (output_ < 0 || output_ > static_cast<int>(layers_.size())) throw InvalidArgument("Network: bad output node");
    std::size_t offset = 0;
    int bn = 0;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        auto& l = layers_[i];
        for (int in : l.inputs)
            if (in < 0 || in > static_cast<int>(i)) throw InvalidArgument("Network: layer input must precede the layer");
        l.param_offset = offset;
        l.param_count = count_params(l);
        offset += l.param_count;
        l.bn_index = l.kind == LayerKind::BatchNorm ? bn++ : -1;
    }
    params_.assign(offset, 0.0);
    std::mt19937_64 rng(seed);
    for (const auto& l : layers_) {
        if (!has_params(l.kind)) continue;
        const auto [ws, bs] = param_shapes(l);
        double* w = params_.data() + l.param_offset;
        if (l.kind == LayerKind::BatchNorm) {
            std::fill(w, w + ws.size(), 1.0);
            continue;
        }
        const double fan_in = l.kind == LayerKind::TConv2x2s2 ? static_cast<double>(l.in_channels)
                                                             : static_cast<double>(ws.c * ws.h * ws.w);
        std::normal_distribution<double> nd(0.0, std::sqrt(2.0 / fan_in));
        for (std::size_t k = 0; k < ws.size(); ++k) w[k] = nd(rng);
    }
    running_mean_.resize(static_cast<std::size_t>(bn));
    running_var_.resize(static_cast<std::size_t>(bn));
    for (const auto& l : layers_)
        if (l.bn_index >= 0) {
            running_mean_[static_cast<std::size_t>(l.bn_index)].assign(l.out_channels, 0.0);
            running_var_[static_cast<std::size_t>(l.bn_index)].assign(l.out_channels, 1.0);
        }
}

Network::Network(const Network& o)
    : unet(o.unet), in_channels_(o.in_channels_), layers_(o.layers_), output_(o.output_), params_(o.params_),
      running_mean_(o.running_mean_), running_var_(o.running_var_) {}

Network& Network::operator=(const Network& o) {
    if (this != &o) {
        unet = o.unet;
        in_channels_ = o.in_channels_;
        layers_ = o.layers_;
        output_ = o.output_;
        params_ = o.params_;
        running_mean_ = o.running_mean_;
        running_var_ = o.running_var_;
        cache_.reset();
    }
    return *this;
}

std::size_t Network::out_channels() const {
    return output_ == 0 ? in_channels_ : layers_[static_cast<std::size_t>(output_ - 1)].out_channels;
}

int Network::depth() const {
    int d = 0;
    for (const auto& l : layers_) d = std::max(d, l.level);
    return d;
}

void Network::set_params(std::span<const double> p) {
    if (p.size() != params_.size())
        throw InvalidArgument("set_params: expected " + std::to_string(params_.size()) + " values, got " +
                              std::to_string(p.size()));
    params_.assign(p.begin(), p.end());
}

void Network::zero_final_layer() {
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it)
        if (it->param_count > 0) {
            std::fill_n(params_.begin() + static_cast<long>(it->param_offset), it->param_count, 0.0);
            return;
        }
}

void Network::set_running_stats(std::vector<std::vector<double>> mean, std::vector<std::vector<double>> var) {
    if (mean.size() != running_mean_.size() || var.size() != running_var_.size())
        throw InvalidArgument("set_running_stats: layer count mismatch");
    for (std::size_t i = 0; i < mean.size(); ++i)
        if (mean[i].size() != running_mean_[i].size() || var[i].size() != running_var_[i].size())
            throw InvalidArgument("set_running_stats: channel count mismatch");
    running_mean_ = std::move(mean);
    running_var_ = std::move(var);
}

void Network::update_running_stats(const BatchStats& batch, double momentum) {
    if (batch.mean.size() != running_mean_.size()) throw InvalidArgument("update_running_stats: layer count mismatch");
    for (std::size_t i = 0; i < batch.mean.size(); ++i)
        for (std::size_t c = 0; c < running_mean_[i].size(); ++c) {
            running_mean_[i][c] = (1.0 - momentum) * running_mean_[i][c] + momentum * batch.mean[i][c];
            running_var_[i][c] = (1.0 - momentum) * running_var_[i][c] + momentum * batch.var[i][c];
        }
}

ParamVars Network::bind(Tape& t, bool requires_grad) const {
    ParamVars pv;
    for (const auto& l : layers_) {
        if (!has_params(l.kind)) {
            pv.first.push_back(-1);
            continue;
        }
        pv.first.push_back(static_cast<int>(pv.vars.size()));
        const auto [ws, bs] = param_shapes(l);
        const auto* p = params_.data() + l.param_offset;
        pv.vars.push_back(t.leaf(Tensor4(ws, std::vector<double>(p, p + ws.size())), requires_grad));
        pv.vars.push_back(t.leaf(Tensor4(bs, std::vector<double>(p + ws.size(), p + ws.size() + bs.size())), requires_grad));
    }
    return pv;
}

std::vector<double> Network::gather_grad(const Tape& t, const ParamVars& pv) const {
    std::vector<double> g(params_.size(), 0.0);
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        if (pv.first[i] < 0) continue;
        const auto& l = layers_[i];
        const Tensor4 gw = t.grad(pv.vars[static_cast<std::size_t>(pv.first[i])]);
        const Tensor4 gb = t.grad(pv.vars[static_cast<std::size_t>(pv.first[i]) + 1]);
        std::copy(gw.flat().begin(), gw.flat().end(), g.begin() + static_cast<long>(l.param_offset));
        std::copy(gb.flat().begin(), gb.flat().end(), g.begin() + static_cast<long>(l.param_offset + gw.size()));
    }
    return g;
}

void Network::check_input(const Shape& s) const {
    if (s.c != in_channels_)
        throw InvalidArgument("network: expected " + std::to_string(in_channels_) + " input channels, got " + s.str());
    const std::size_t div = std::size_t{1} << depth();
    if (s.h % div != 0 || s.w % div != 0)
        throw InvalidArgument("network: input " + s.str() + " not divisible by " + std::to_string(div));
}

std::vector<Var> Network::run(Tape& t, Var x, const Var* e, const ParamVars& pv, Mode m, BatchStats* stats,
                              std::vector<Var>* tangents) const {
    check_input(t.value(x).shape());
    if (e && !(t.value(*e).shape() == t.value(x).shape())) throw InvalidArgument("jvp: direction shape differs from input");
    std::vector<Var> val{x};
    std::vector<Var> tan;
    if (e) tan.push_back(*e);
    if (stats) {
        stats->mean.assign(running_mean_.size(), {});
        stats->var.assign(running_var_.size(), {});
    }
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        const auto& l = layers_[i];
        const Var a = val[static_cast<std::size_t>(l.inputs[0])];
        const Var ta = e ? tan[static_cast<std::size_t>(l.inputs[0])] : Var{};
        const Var w = pv.first[i] >= 0 ? pv.vars[static_cast<std::size_t>(pv.first[i])] : Var{};
        const Var b = pv.first[i] >= 0 ? pv.vars[static_cast<std::size_t>(pv.first[i]) + 1] : Var{};
        Var y, ty;
        switch (l.kind) {
        case LayerKind::Conv3x3:
        case LayerKind::Conv1x1:
            y = ops::badd(t, ops::conv(t, a, w), b);
            if (e) ty = ops::conv(t, ta, w);
            break;
        case LayerKind::TConv2x2s2:
            y = ops::badd(t, ops::tconv2(t, a, w), b);
            if (e) ty = ops::tconv2(t, ta, w);
            break;
        case LayerKind::ReLU:
            y = ops::relu(t, a);
            if (e) ty = ops::mask_mul(t, ta, a);
            break;
        case LayerKind::MaxPool2:
            y = ops::maxpool2(t, a);
            if (e) ty = ops::pool_route(t, ta, a);
            break;
        case LayerKind::Concat:
            y = ops::concat(t, a, val[static_cast<std::size_t>(l.inputs[1])]);
            if (e) ty = ops::concat(t, ta, tan[static_cast<std::size_t>(l.inputs[1])]);
            break;
        case LayerKind::Add:
            y = ops::add(t, a, val[static_cast<std::size_t>(l.inputs[1])]);
            if (e) ty = ops::add(t, ta, tan[static_cast<std::size_t>(l.inputs[1])]);
            break;
        case LayerKind::BatchNorm: {
            const auto slot = static_cast<std::size_t>(l.bn_index);
            if (m == Mode::Train) {
                const Var mu = ops::channel_mean(t, a);
                const Var xc = ops::badd(t, a, ops::scale(t, mu, -1.0));
                const Var var = ops::channel_mean(t, ops::mul(t, xc, xc));
                const Var inv = ops::pow_c(t, ops::add_scalar(t, var, kBatchNormEps), -0.5, 1.0);
                const Var xhat = ops::bmul(t, xc, inv);
                y = ops::badd(t, ops::bmul(t, xhat, w), b);
                if (e) {
                    const Var m1 = ops::channel_mean(t, ta);
                    const Var m2 = ops::channel_mean(t, ops::mul(t, ta, xhat));
                    const Var u = ops::sub(t, ops::badd(t, ta, ops::scale(t, m1, -1.0)), ops::bmul(t, xhat, m2));
                    ty = ops::bmul(t, u, ops::mul(t, w, inv));
                }
                if (stats) {
                    stats->mean[slot] = t.value(mu).vec();
                    stats->var[slot] = t.value(var).vec();
                }
            } else {
                Tensor4 inv(Shape{1, l.out_channels, 1, 1}), mean(Shape{1, l.out_channels, 1, 1});
                for (std::size_t c = 0; c < l.out_channels; ++c) {
                    inv.flat()[c] = 1.0 / std::sqrt(running_var_[slot][c] + kBatchNormEps);
                    mean.flat()[c] = running_mean_[slot][c];
                }
                const Var s = ops::mul(t, w, t.constant(std::move(inv)));
                const Var shift = ops::sub(t, b, ops::mul(t, s, t.constant(std::move(mean))));
                y = ops::badd(t, ops::bmul(t, a, s), shift);
                if (e) ty = ops::bmul(t, ta, s);
            }
            break;
        }
        }
        val.push_back(y);
        if (e) tan.push_back(ty);
    }
    if (tangents) *tangents = std::move(tan);
    return val;
}

Var Network::forward(Tape& t, Var x, const ParamVars& pv, Mode m, BatchStats* stats) const {
    return run(t, x, nullptr, pv, m, stats, nullptr)[static_cast<std::size_t>(output_)];
}

std::pair<Var, Var> Network::forward_tangent(Tape& t, Var x, Var e, const ParamVars& pv, Mode m,
                                             BatchStats* stats) const {
    std::vector<Var> tan;
    const auto val = run(t, x, &e, pv, m, stats, &tan);
    return {val[static_cast<std::size_t>(output_)], tan[static_cast<std::size_t>(output_)]};
}

Tensor4 Network::apply(const Tensor4& x, Mode m) const {
    Tape t;
    const auto pv = bind(t, false);
    return t.value(forward(t, t.constant(x), pv, m));
}

Tensor4 Network::forward(const Tensor4& x, Mode m) {
    auto c = std::make_shared<Cache>();
    c->pv = bind(c->tape, true);
    c->x = c->tape.leaf(x, true);
    c->out = forward(c->tape, c->x, c->pv, m);
    cache_ = c;
    return c->tape.value(c->out);
}

Gradients Network::backward(const Tensor4& upstream) {
    if (!cache_) throw ContractViolation("backward: no recorded forward pass");
    auto c = std::move(cache_);
    c->tape.backward(c->out, upstream);
    return Gradients{c->tape.grad(c->x), gather_grad(c->tape, c->pv)};
}

Tensor4 Network::jvp(const Tensor4& x, const Tensor4& e, Mode m) const {
    Tape t;
    const auto pv = bind(t, false);
    return t.value(forward_tangent(t, t.constant(x), t.constant(e), pv, m).second);
}

std::vector<double> Network::second_order_param_grad(const Tensor4& x, const Tensor4& e, const Tensor4& upstream,
                                                     Mode m) const {
    Tape t;
    const auto pv = bind(t, true);
    const auto [out, tan] = forward_tangent(t, t.constant(x), t.constant(e), pv, m);
    t.backward(tan, upstream);
    return gather_grad(t, pv);
}

std::vector<Shape> Network::declared_shapes(const Shape& input) const {
    std::vector<Shape> s{input};
    for (const auto& l : layers_) s.push_back(Shape{input.n, l.out_channels, input.h >> l.level, input.w >> l.level});
    return s;
}

std::vector<Shape> Network::runtime_shapes(const Tensor4& x, Mode m) const {
    Tape t;
    const auto pv = bind(t, false);
    const auto vals = run(t, t.constant(x), nullptr, pv, m, nullptr, nullptr);
    std::vector<Shape> s;
    for (Var v : vals) s.push_back(t.value(v).shape());
    return s;
}

NetBuilder::NetBuilder(std::size_t in_channels) : in_channels_(in_channels), channels_{in_channels}, levels_{0} {}

std::size_t NetBuilder::channels(int node) const { return channels_.at(static_cast<std::size_t>(node)); }

int NetBuilder::push(LayerSpec s) {
    for (int in : s.inputs)
        if (in < 0 || in >= static_cast<int>(channels_.size())) throw InvalidArgument("NetBuilder: unknown node");
    layers_.push_back(s);
    channels_.push_back(s.out_channels);
    levels_.push_back(s.level);
    return static_cast<int>(layers_.size());
}

namespace {
LayerSpec spec(LayerKind k, std::vector<int> in, std::size_t ci, std::size_t co, int level) {
    LayerSpec s;
    s.kind = k;
    s.inputs = std::move(in);
    s.in_channels = ci;
    s.out_channels = co;
    s.level = level;
    return s;
}
} // namespace

int NetBuilder::conv3(int from, std::size_t out) {
    return push(spec(LayerKind::Conv3x3, {from}, channels(from), out, levels_.at(static_cast<std::size_t>(from))));
}
int NetBuilder::conv1(int from, std::size_t out) {
    return push(spec(LayerKind::Conv1x1, {from}, channels(from), out, levels_.at(static_cast<std::size_t>(from))));
}
int NetBuilder::relu(int from) {
    return push(spec(LayerKind::ReLU, {from}, channels(from), channels(from), levels_.at(static_cast<std::size_t>(from))));
}
int NetBuilder::maxpool(int from) {
    return push(spec(LayerKind::MaxPool2, {from}, channels(from), channels(from),
                     levels_.at(static_cast<std::size_t>(from)) + 1));
}
int NetBuilder::tconv(int from, std::size_t out) {
    const int lv = levels_.at(static_cast<std::size_t>(from));
    if (lv < 1) throw InvalidArgument("NetBuilder: upsampling above full resolution");
    return push(spec(LayerKind::TConv2x2s2, {from}, channels(from), out, lv - 1));
}
int NetBuilder::batchnorm(int from) {
    return push(
        spec(LayerKind::BatchNorm, {from}, channels(from), channels(from), levels_.at(static_cast<std::size_t>(from))));
}
int NetBuilder::concat(int a, int b) {
    if (levels_.at(static_cast<std::size_t>(a)) != levels_.at(static_cast<std::size_t>(b)))
        throw InvalidArgument("NetBuilder: concat across resolutions");
    return push(spec(LayerKind::Concat, {a, b}, channels(a) + channels(b), channels(a) + channels(b),
                     levels_.at(static_cast<std::size_t>(a))));
}
int NetBuilder::add(int a, int b) {
    if (channels(a) != channels(b) || levels_.at(static_cast<std::size_t>(a)) != levels_.at(static_cast<std::size_t>(b)))
        throw InvalidArgument("NetBuilder: add of mismatched nodes");
    return push(spec(LayerKind::Add, {a, b}, channels(a), channels(a), levels_.at(static_cast<std::size_t>(a))));
}

Network NetBuilder::build(int output, std::uint64_t seed) const { return Network(in_channels_, layers_, output, seed); }

Network build_mini_unet(const UNetConfig& cfg) {
    if (cfg.levels < 1 || cfg.levels > 3) throw InvalidArgument("build_mini_unet: levels must be in {1, 2, 3}");
    if (cfg.base_channels < 1) throw InvalidArgument("build_mini_unet: base channels must be >= 1");
    NetBuilder nb(cfg.in_channels);
    auto block = [&](int from, std::size_t ch) { return nb.relu(nb.conv3(nb.relu(nb.conv3(from, ch)), ch)); };
    std::vector<int> skips;
    int cur = block(nb.input(), cfg.base_channels);
    for (int l = 1; l <= cfg.levels; ++l) {
        skips.push_back(cur);
        cur = nb.maxpool(cur);
        if (cfg.batchnorm) cur = nb.batchnorm(cur);
        cur = block(cur, cfg.base_channels << l);
    }
    for (int l = cfg.levels - 1; l >= 0; --l) {
        const std::size_t ch = cfg.base_channels << l;
        const int up = nb.tconv(cur, ch);
        cur = nb.concat(skips[static_cast<std::size_t>(l)], up);
        if (cfg.batchnorm) cur = nb.batchnorm(cur);
        cur = block(cur, ch);
    }
    const int c = nb.conv1(cur, cfg.in_channels);
    Network net = nb.build(nb.add(nb.input(), c), cfg.seed);
    net.unet = cfg;
    if (cfg.zero_final) net.zero_final_layer();
    return net;
}

std::size_t mini_unet_param_count(const UNetConfig& cfg) {
    const auto conv = [](std::size_t ci, std::size_t co, std::size_t k) { return co * ci * k * k + co; };
    const std::size_t b = cfg.base_channels;
    std::size_t n = conv(cfg.in_channels, b, 3) + conv(b, b, 3);
    for (int l = 1; l <= cfg.levels; ++l) {
        const std::size_t ci = b << (l - 1), co = b << l;
        n += conv(ci, co, 3) + conv(co, co, 3) + (cfg.batchnorm ? 2 * ci : 0);
    }
    for (int l = cfg.levels - 1; l >= 0; --l) {
        const std::size_t ch = b << l;
        n += (2 * ch) * ch * 4 + ch;                   // transposed conv
        n += conv(2 * ch, ch, 3) + conv(ch, ch, 3) + (cfg.batchnorm ? 4 * ch : 0);
    }
    return n + conv(b, cfg.in_channels, 1);
}

void adam_step(AdamState& s, std::span<double> params, std::span<const double> grads) {
    if (params.size() != grads.size() || s.m.size() != params.size() || s.v.size() != params.size())
        throw InvalidArgument("adam_step: size mismatch");
    for (double g : grads)
        if (!std::isfinite(g)) throw TrainingDiverged("adam_step: non-finite gradient");
    ++s.step;
    const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.step));
    const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        s.m[i] = s.beta1 * s.m[i] + (1.0 - s.beta1) * grads[i];
        s.v[i] = s.beta2 * s.v[i] + (1.0 - s.beta2) * grads[i] * grads[i];
        const double mh = s.m[i] / c1, vh = s.v[i] / c2;
        params[i] -= s.lr * mh / (std::sqrt(vh) + s.eps);
    }
}

void save_checkpoint(const std::filesystem::path& path, const Network& net) {
    io::write_pbtk1(path, io::Kind::Parameters, Array2(1, net.param_count(), net.params()));
    nlohmann::json j;
    j["in_channels"] = net.in_channels();
    j["output"] = net.output_node();
    j["unet"] = {{"levels", net.unet.levels},
                 {"base_channels", net.unet.base_channels},
                 {"batchnorm", net.unet.batchnorm},
                 {"in_channels", net.unet.in_channels},
                 {"zero_final", net.unet.zero_final},
                 {"seed", net.unet.seed}};
    auto& layers = j["layers"] = nlohmann::json::array();
    for (const auto& l : net.layers())
        layers.push_back({{"kind", to_string(l.kind)},
                          {"inputs", l.inputs},
                          {"in", l.in_channels},
                          {"out", l.out_channels},
                          {"level", l.level}});
    j["running_mean"] = net.running_mean();
    j["running_var"] = net.running_var();
    const auto side = std::filesystem::path(path.string() + ".json");
    std::ofstream f(side, std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + side.string());
    f << j.dump(2) << "\n";
    if (!f) throw IoError("write failed: " + side.string());
}

Network load_checkpoint(const std::filesystem::path& path) {
    const auto blob = io::read_pbtk1(path);
    if (blob.kind != io::Kind::Parameters) throw IoError(path.string() + ": not a parameter checkpoint");
    const auto side = std::filesystem::path(path.string() + ".json");
    std::ifstream f(side);
    if (!f) throw IoError("cannot open for reading: " + side.string());
    nlohmann::json j;
    try {
        f >> j;
        std::vector<LayerSpec> layers;
        for (const auto& l : j.at("layers")) {
            LayerSpec s;
            const auto kind = l.at("kind").get<std::string>();
            bool found = false;
            for (int k = 0; k <= static_cast<int>(LayerKind::Add); ++k)
                if (to_string(static_cast<LayerKind>(k)) == kind) {
                    s.kind = static_cast<LayerKind>(k);
                    found = true;
                }
            if (!found) throw IoError(side.string() + ": unknown layer kind " + kind);
            s.inputs = l.at("inputs").get<std::vector<int>>();
            s.in_channels = l.at("in").get<std::size_t>();
            s.out_channels = l.at("out").get<std::size_t>();
            s.level = l.at("level").get<int>();
            layers.push_back(std::move(s));
        }
        Network net(j.at("in_channels").get<std::size_t>(), std::move(layers), j.at("output").get<int>(), 0);
        const auto& u = j.at("unet");
        net.unet.levels = u.at("levels").get<int>();
        net.unet.base_channels = u.at("base_channels").get<std::size_t>();
        net.unet.batchnorm = u.at("batchnorm").get<bool>();
        net.unet.in_channels = u.at("in_channels").get<std::size_t>();
        net.unet.zero_final = u.at("zero_final").get<bool>();
        net.unet.seed = u.at("seed").get<std::uint64_t>();
        net.set_params(blob.data.flat());
        net.set_running_stats(j.at("running_mean").get<std::vector<std::vector<double>>>(),
                              j.at("running_var").get<std::vector<std::vector<double>>>());
        return net;
    } catch (const nlohmann::json::exception& e) {
        throw IoError(side.string() + ": " + e.what());
    } catch (const InvalidArgument& e) {
        throw IoError(side.string() + ": " + e.what());
    }
}

} // namespace parbeam::nn
