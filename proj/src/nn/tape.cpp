#include "parbeam/nn/tape.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "parbeam/errors.hpp"
#include "parbeam/parallel.hpp"

namespace parbeam::nn {

Var Tape::leaf(Tensor4 value, bool requires_grad) {
    nodes_.push_back(Node{std::move(value), requires_grad, {}, {}, false});
    return Var{nodes_.size() - 1};
}

Var Tape::push(Tensor4 value, std::initializer_list<Var> parents, Rule rule) {
    bool rg = false;
    for (Var p : parents) rg = rg || node(p).requires_grad;
    nodes_.push_back(Node{std::move(value), rg, rg ? std::move(rule) : Rule{}, {}, false});
    return Var{nodes_.size() - 1};
}

const Tape::Node& Tape::node(Var v) const {
    if (v.id >= nodes_.size()) throw ContractViolation("tape: handle " + std::to_string(v.id) + " is not recorded");
    return nodes_[v.id];
}

const Tensor4& Tape::value(Var v) const { return node(v).value; }
bool Tape::requires_grad(Var v) const { return node(v).requires_grad; }

Tensor4 Tape::grad(Var v) const {
    const Node& nd = node(v);
    return nd.has_grad ? nd.grad : Tensor4(nd.value.shape());
}

void Tape::accumulate(Var v, const Tensor4& g) {
    Node& nd = nodes_[v.id];
    if (!nd.requires_grad) return;
    if (!(g.shape() == nd.value.shape()))
        throw ContractViolation("tape: gradient shape " + g.shape().str() + " for value " + nd.value.shape().str());
    if (!nd.has_grad) {
        nd.grad = g;
        nd.has_grad = true;
        return;
    }
    auto dst = nd.grad.flat();
    const auto src = g.flat();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

void Tape::zero_grads() {
    for (auto& nd : nodes_) {
        nd.grad = Tensor4();
        nd.has_grad = false;
    }
}

void Tape::backward(Var out, const Tensor4& seed) {
    const Node& o = node(out);
    if (!(seed.shape() == o.value.shape())) throw InvalidArgument("tape: seed shape differs from output");
    accumulate(out, seed);
    for (std::size_t i = out.id + 1; i-- > 0;) {
        Node& nd = nodes_[i];
        if (!nd.has_grad || !nd.rule) continue;
        const Tensor4 g = nd.grad;
        nd.rule(*this, g);
    }
}

void Tape::backward(Var out) {
    if (value(out).size() != 1) throw InvalidArgument("tape: unit seed needs a single-valued output");
    backward(out, Tensor4(value(out).shape(), 1.0));
}

namespace ops {

namespace {

void same_shape(const Tensor4& a, const Tensor4& b, const char* who) {
    if (!(a.shape() == b.shape()))
        throw InvalidArgument(std::string(who) + ": shape " + a.shape().str() + " vs " + b.shape().str());
}

void check_broadcast(const Tensor4& x, const Tensor4& s, const char* who) {
    const Shape& b = s.shape();
    if (b.h != 1 || b.w != 1 || (b.n != 1 && b.n != x.n()) || (b.c != 1 && b.c != x.c()))
        throw InvalidArgument(std::string(who) + ": cannot broadcast " + b.str() + " to " + x.shape().str());
}

std::size_t bidx(const Tensor4& s, std::size_t n, std::size_t c) {
    return (s.n() == 1 ? 0 : n) * s.c() + (s.c() == 1 ? 0 : c);
}

Tensor4 conv_forward(const Tensor4& x, const Tensor4& w) {
    const std::size_t N = x.n(), Ci = x.c(), H = x.h(), W = x.w(), Co = w.n(), k = w.h();
    const long p = static_cast<long>(k / 2);
    Tensor4 y(Shape{N, Co, H, W});
    parallel_for(0, N * Co, [&](std::size_t job) {
        const std::size_t n = job / Co, co = job % Co;
        double* out = y.ptr(n, co, 0, 0);
        for (std::size_t ci = 0; ci < Ci; ++ci) {
            const double* in = x.ptr(n, ci, 0, 0);
            for (std::size_t kh = 0; kh < k; ++kh)
                for (std::size_t kw = 0; kw < k; ++kw) {
                    const double wv = w(co, ci, kh, kw);
                    const long dy = static_cast<long>(kh) - p, dx = static_cast<long>(kw) - p;
                    for (long oy = 0; oy < static_cast<long>(H); ++oy) {
                        const long iy = oy + dy;
                        if (iy < 0 || iy >= static_cast<long>(H)) continue;
                        const long lo = std::max(0L, -dx), hi = std::min(static_cast<long>(W), static_cast<long>(W) - dx);
                        const double* row = in + iy * static_cast<long>(W) + dx;
                        double* orow = out + oy * static_cast<long>(W);
                        for (long ox = lo; ox < hi; ++ox) orow[ox] += wv * row[ox];
                    }
                }
        }
    });
    return y;
}

Tensor4 conv_input_grad(const Tensor4& g, const Tensor4& w, const Shape& xs) {
    const std::size_t N = xs.n, Ci = xs.c, H = xs.h, W = xs.w, Co = w.n(), k = w.h();
    const long p = static_cast<long>(k / 2);
    Tensor4 dx(xs);
    parallel_for(0, N * Ci, [&](std::size_t job) {
        const std::size_t n = job / Ci, ci = job % Ci;
        double* out = dx.ptr(n, ci, 0, 0);
        for (std::size_t co = 0; co < Co; ++co) {
            const double* gin = g.ptr(n, co, 0, 0);
            for (std::size_t kh = 0; kh < k; ++kh)
                for (std::size_t kw = 0; kw < k; ++kw) {
                    const double wv = w(co, ci, kh, kw);
                    const long dy = static_cast<long>(kh) - p, dxo = static_cast<long>(kw) - p;
                    for (long oy = 0; oy < static_cast<long>(H); ++oy) {
                        const long iy = oy + dy;
                        if (iy < 0 || iy >= static_cast<long>(H)) continue;
                        const long lo = std::max(0L, -dxo), hi = std::min(static_cast<long>(W), static_cast<long>(W) - dxo);
                        double* row = out + iy * static_cast<long>(W) + dxo;
                        const double* grow = gin + oy * static_cast<long>(W);
                        for (long ox = lo; ox < hi; ++ox) row[ox] += wv * grow[ox];
                    }
                }
        }
    });
    return dx;
}

Tensor4 conv_weight_grad(const Tensor4& g, const Tensor4& x, const Shape& ws) {
    const std::size_t N = x.n(), Ci = x.c(), H = x.h(), W = x.w(), Co = ws.n, k = ws.h;
    const long p = static_cast<long>(k / 2);
    Tensor4 dw(ws);
    parallel_for(0, Co * Ci, [&](std::size_t job) {
        const std::size_t co = job / Ci, ci = job % Ci;
        for (std::size_t kh = 0; kh < k; ++kh)
            for (std::size_t kw = 0; kw < k; ++kw) {
                const long dy = static_cast<long>(kh) - p, dxo = static_cast<long>(kw) - p;
                double acc = 0.0;
                for (std::size_t n = 0; n < N; ++n) {
                    const double* in = x.ptr(n, ci, 0, 0);
                    const double* gin = g.ptr(n, co, 0, 0);
                    for (long oy = 0; oy < static_cast<long>(H); ++oy) {
                        const long iy = oy + dy;
                        if (iy < 0 || iy >= static_cast<long>(H)) continue;
                        const long lo = std::max(0L, -dxo), hi = std::min(static_cast<long>(W), static_cast<long>(W) - dxo);
                        const double* row = in + iy * static_cast<long>(W) + dxo;
                        const double* grow = gin + oy * static_cast<long>(W);
                        for (long ox = lo; ox < hi; ++ox) acc += grow[ox] * row[ox];
                    }
                }
                dw(co, ci, kh, kw) = acc;
            }
    });
    return dw;
}

Tensor4 tconv_forward(const Tensor4& x, const Tensor4& w) {
    const std::size_t N = x.n(), Ci = x.c(), H = x.h(), W = x.w(), Co = w.c();
    Tensor4 y(Shape{N, Co, 2 * H, 2 * W});
    parallel_for(0, N * Co, [&](std::size_t job) {
        const std::size_t n = job / Co, co = job % Co;
        for (std::size_t ci = 0; ci < Ci; ++ci)
            for (std::size_t a = 0; a < 2; ++a)
                for (std::size_t b = 0; b < 2; ++b) {
                    const double wv = w(ci, co, a, b);
                    for (std::size_t i = 0; i < H; ++i)
                        for (std::size_t j = 0; j < W; ++j) y(n, co, 2 * i + a, 2 * j + b) += wv * x(n, ci, i, j);
                }
    });
    return y;
}

Tensor4 tconv_input_grad(const Tensor4& g, const Tensor4& w, const Shape& xs) {
    const std::size_t N = xs.n, Ci = xs.c, H = xs.h, W = xs.w, Co = w.c();
    Tensor4 dx(xs);
    parallel_for(0, N * Ci, [&](std::size_t job) {
        const std::size_t n = job / Ci, ci = job % Ci;
        for (std::size_t co = 0; co < Co; ++co)
            for (std::size_t a = 0; a < 2; ++a)
                for (std::size_t b = 0; b < 2; ++b) {
                    const double wv = w(ci, co, a, b);
                    for (std::size_t i = 0; i < H; ++i)
                        for (std::size_t j = 0; j < W; ++j) dx(n, ci, i, j) += wv * g(n, co, 2 * i + a, 2 * j + b);
                }
    });
    return dx;
}

Tensor4 tconv_weight_grad(const Tensor4& g, const Tensor4& x, const Shape& ws) {
    const std::size_t N = x.n(), H = x.h(), W = x.w(), Ci = ws.n, Co = ws.c;
    Tensor4 dw(ws);
    parallel_for(0, Ci * Co, [&](std::size_t job) {
        const std::size_t ci = job / Co, co = job % Co;
        for (std::size_t a = 0; a < 2; ++a)
            for (std::size_t b = 0; b < 2; ++b) {
                double acc = 0.0;
                for (std::size_t n = 0; n < N; ++n)
                    for (std::size_t i = 0; i < H; ++i)
                        for (std::size_t j = 0; j < W; ++j) acc += x(n, ci, i, j) * g(n, co, 2 * i + a, 2 * j + b);
                dw(ci, co, a, b) = acc;
            }
    });
    return dw;
}

// Index of the selected cell per pooled output.
std::vector<std::size_t> pool_argmax(const Tensor4& x) {
    const std::size_t N = x.n(), C = x.c(), H = x.h() / 2, W = x.w() / 2;
    std::vector<std::size_t> idx(N * C * H * W);
    std::size_t o = 0;
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < H; ++i)
                for (std::size_t j = 0; j < W; ++j) {
                    std::size_t best = x.index(n, c, 2 * i, 2 * j);
                    for (std::size_t a = 0; a < 2; ++a)
                        for (std::size_t b = 0; b < 2; ++b) {
                            const std::size_t cand = x.index(n, c, 2 * i + a, 2 * j + b);
                            if (x.flat()[cand] > x.flat()[best]) best = cand;
                        }
                    idx[o++] = best;
                }
    return idx;
}

Shape pooled(const Shape& s) { return Shape{s.n, s.c, s.h / 2, s.w / 2}; }

void check_poolable(const Tensor4& x) {
    if (x.h() % 2 != 0 || x.w() % 2 != 0) throw InvalidArgument("maxpool2: odd spatial size " + x.shape().str());
}

} // namespace

Var conv(Tape& t, Var x, Var w) {
    const Tensor4& xv = t.value(x);
    const Tensor4& wv = t.value(w);
    if (wv.h() != wv.w() || wv.h() % 2 == 0) throw InvalidArgument("conv: kernel must be square and odd");
    if (wv.c() != xv.c())
        throw InvalidArgument("conv: input has " + std::to_string(xv.c()) + " channels, kernel expects " +
                              std::to_string(wv.c()));
    return t.push(conv_forward(xv, wv), {x, w}, [x, w](Tape& tp, const Tensor4& g) {
        if (tp.requires_grad(x)) tp.accumulate(x, conv_input_grad(g, tp.value(w), tp.value(x).shape()));
        if (tp.requires_grad(w)) tp.accumulate(w, conv_weight_grad(g, tp.value(x), tp.value(w).shape()));
    });
}

Var tconv2(Tape& t, Var x, Var w) {
    const Tensor4& xv = t.value(x);
    const Tensor4& wv = t.value(w);
    if (wv.h() != 2 || wv.w() != 2) throw InvalidArgument("tconv2: kernel must be 2x2");
    if (wv.n() != xv.c()) throw InvalidArgument("tconv2: channel mismatch");
    return t.push(tconv_forward(xv, wv), {x, w}, [x, w](Tape& tp, const Tensor4& g) {
        if (tp.requires_grad(x)) tp.accumulate(x, tconv_input_grad(g, tp.value(w), tp.value(x).shape()));
        if (tp.requires_grad(w)) tp.accumulate(w, tconv_weight_grad(g, tp.value(x), tp.value(w).shape()));
    });
}

Var badd(Tape& t, Var x, Var s) {
    const Tensor4& xv = t.value(x);
    const Tensor4& sv = t.value(s);
    check_broadcast(xv, sv, "badd");
    Tensor4 y = xv;
    const std::size_t hw = xv.h() * xv.w();
    for (std::size_t n = 0; n < xv.n(); ++n)
        for (std::size_t c = 0; c < xv.c(); ++c) {
            const double b = sv.flat()[bidx(sv, n, c)];
            double* p = y.ptr(n, c, 0, 0);
            for (std::size_t i = 0; i < hw; ++i) p[i] += b;
        }
    return t.push(std::move(y), {x, s}, [x, s](Tape& tp, const Tensor4& g) {
        tp.accumulate(x, g);
        if (!tp.requires_grad(s)) return;
        const Tensor4& sv = tp.value(s);
        Tensor4 ds(sv.shape());
        const std::size_t hw = g.h() * g.w();
        for (std::size_t n = 0; n < g.n(); ++n)
            for (std::size_t c = 0; c < g.c(); ++c) {
                const double* p = g.ptr(n, c, 0, 0);
                double acc = 0.0;
                for (std::size_t i = 0; i < hw; ++i) acc += p[i];
                ds.flat()[bidx(sv, n, c)] += acc;
            }
        tp.accumulate(s, ds);
    });
}

Var bmul(Tape& t, Var x, Var s) {
    const Tensor4& xv = t.value(x);
    const Tensor4& sv = t.value(s);
    check_broadcast(xv, sv, "bmul");
    Tensor4 y = xv;
    const std::size_t hw = xv.h() * xv.w();
    for (std::size_t n = 0; n < xv.n(); ++n)
        for (std::size_t c = 0; c < xv.c(); ++c) {
            const double b = sv.flat()[bidx(sv, n, c)];
            double* p = y.ptr(n, c, 0, 0);
            for (std::size_t i = 0; i < hw; ++i) p[i] *= b;
        }
    return t.push(std::move(y), {x, s}, [x, s](Tape& tp, const Tensor4& g) {
        const Tensor4& xv = tp.value(x);
        const Tensor4& sv = tp.value(s);
        const std::size_t hw = g.h() * g.w();
        if (tp.requires_grad(x)) {
            Tensor4 dx = g;
            for (std::size_t n = 0; n < g.n(); ++n)
                for (std::size_t c = 0; c < g.c(); ++c) {
                    const double b = sv.flat()[bidx(sv, n, c)];
                    double* p = dx.ptr(n, c, 0, 0);
                    for (std::size_t i = 0; i < hw; ++i) p[i] *= b;
                }
            tp.accumulate(x, dx);
        }
        if (tp.requires_grad(s)) {
            Tensor4 ds(sv.shape());
            for (std::size_t n = 0; n < g.n(); ++n)
                for (std::size_t c = 0; c < g.c(); ++c) {
                    const double* p = g.ptr(n, c, 0, 0);
                    const double* q = xv.ptr(n, c, 0, 0);
                    double acc = 0.0;
                    for (std::size_t i = 0; i < hw; ++i) acc += p[i] * q[i];
                    ds.flat()[bidx(sv, n, c)] += acc;
                }
            tp.accumulate(s, ds);
        }
    });
}

Var relu(Tape& t, Var x) {
    Tensor4 y = t.value(x);
    for (auto& v : y.flat()) v = v > 0.0 ? v : 0.0;
    return t.push(std::move(y), {x}, [x](Tape& tp, const Tensor4& g) {
        Tensor4 dx = g;
        const auto xv = tp.value(x).flat();
        for (std::size_t i = 0; i < dx.size(); ++i)
            if (!(xv[i] > 0.0)) dx.flat()[i] = 0.0;
        tp.accumulate(x, dx);
    });
}

Var mask_mul(Tape& t, Var v, Var ref) {
    same_shape(t.value(v), t.value(ref), "mask_mul");
    Tensor4 y = t.value(v);
    const auto r = t.value(ref).flat();
    for (std::size_t i = 0; i < y.size(); ++i)
        if (!(r[i] > 0.0)) y.flat()[i] = 0.0;
    return t.push(std::move(y), {v}, [v, ref](Tape& tp, const Tensor4& g) {
        Tensor4 dv = g;
        const auto r = tp.value(ref).flat();
        for (std::size_t i = 0; i < dv.size(); ++i)
            if (!(r[i] > 0.0)) dv.flat()[i] = 0.0;
        tp.accumulate(v, dv);
    });
}

Var maxpool2(Tape& t, Var x) {
    const Tensor4& xv = t.value(x);
    check_poolable(xv);
    const auto idx = pool_argmax(xv);
    Tensor4 y(pooled(xv.shape()));
    for (std::size_t i = 0; i < idx.size(); ++i) y.flat()[i] = xv.flat()[idx[i]];
    return t.push(std::move(y), {x}, [x, idx](Tape& tp, const Tensor4& g) {
        Tensor4 dx(tp.value(x).shape());
        for (std::size_t i = 0; i < idx.size(); ++i) dx.flat()[idx[i]] += g.flat()[i];
        tp.accumulate(x, dx);
    });
}

Var pool_route(Tape& t, Var v, Var ref) {
    same_shape(t.value(v), t.value(ref), "pool_route");
    check_poolable(t.value(ref));
    const auto idx = pool_argmax(t.value(ref));
    const Tensor4& vv = t.value(v);
    Tensor4 y(pooled(vv.shape()));
    for (std::size_t i = 0; i < idx.size(); ++i) y.flat()[i] = vv.flat()[idx[i]];
    return t.push(std::move(y), {v}, [v, idx](Tape& tp, const Tensor4& g) {
        Tensor4 dv(tp.value(v).shape());
        for (std::size_t i = 0; i < idx.size(); ++i) dv.flat()[idx[i]] += g.flat()[i];
        tp.accumulate(v, dv);
    });
}

Var concat(Tape& t, Var a, Var b) {
    const Tensor4& av = t.value(a);
    const Tensor4& bv = t.value(b);
    if (av.n() != bv.n() || av.h() != bv.h() || av.w() != bv.w())
        throw InvalidArgument("concat: shape " + av.shape().str() + " vs " + bv.shape().str());
    const std::size_t N = av.n(), Ca = av.c(), Cb = bv.c(), hw = av.h() * av.w();
    Tensor4 y(Shape{N, Ca + Cb, av.h(), av.w()});
    for (std::size_t n = 0; n < N; ++n) {
        std::copy_n(av.ptr(n, 0, 0, 0), Ca * hw, y.ptr(n, 0, 0, 0));
        std::copy_n(bv.ptr(n, 0, 0, 0), Cb * hw, y.ptr(n, Ca, 0, 0));
    }
    return t.push(std::move(y), {a, b}, [a, b, N, Ca, Cb, hw](Tape& tp, const Tensor4& g) {
        Tensor4 da(tp.value(a).shape()), db(tp.value(b).shape());
        for (std::size_t n = 0; n < N; ++n) {
            std::copy_n(g.ptr(n, 0, 0, 0), Ca * hw, da.ptr(n, 0, 0, 0));
            std::copy_n(g.ptr(n, Ca, 0, 0), Cb * hw, db.ptr(n, 0, 0, 0));
        }
        tp.accumulate(a, da);
        tp.accumulate(b, db);
    });
}

Var add(Tape& t, Var a, Var b) {
    same_shape(t.value(a), t.value(b), "add");
    Tensor4 y = t.value(a);
    const auto bv = t.value(b).flat();
    for (std::size_t i = 0; i < y.size(); ++i) y.flat()[i] += bv[i];
    return t.push(std::move(y), {a, b}, [a, b](Tape& tp, const Tensor4& g) {
        tp.accumulate(a, g);
        tp.accumulate(b, g);
    });
}

Var sub(Tape& t, Var a, Var b) {
    same_shape(t.value(a), t.value(b), "sub");
    Tensor4 y = t.value(a);
    const auto bv = t.value(b).flat();
    for (std::size_t i = 0; i < y.size(); ++i) y.flat()[i] -= bv[i];
    return t.push(std::move(y), {a, b}, [a, b](Tape& tp, const Tensor4& g) {
        tp.accumulate(a, g);
        if (!tp.requires_grad(b)) return;
        Tensor4 nb = g;
        for (auto& v : nb.flat()) v = -v;
        tp.accumulate(b, nb);
    });
}

Var mul(Tape& t, Var a, Var b) {
    same_shape(t.value(a), t.value(b), "mul");
    Tensor4 y = t.value(a);
    const auto bv = t.value(b).flat();
    for (std::size_t i = 0; i < y.size(); ++i) y.flat()[i] *= bv[i];
    return t.push(std::move(y), {a, b}, [a, b](Tape& tp, const Tensor4& g) {
        if (tp.requires_grad(a)) {
            Tensor4 da = g;
            const auto bv = tp.value(b).flat();
            for (std::size_t i = 0; i < da.size(); ++i) da.flat()[i] *= bv[i];
            tp.accumulate(a, da);
        }
        if (tp.requires_grad(b)) {
            Tensor4 db = g;
            const auto av = tp.value(a).flat();
            for (std::size_t i = 0; i < db.size(); ++i) db.flat()[i] *= av[i];
            tp.accumulate(b, db);
        }
    });
}

Var scale(Tape& t, Var a, double c) {
    Tensor4 y = t.value(a);
    for (auto& v : y.flat()) v *= c;
    return t.push(std::move(y), {a}, [a, c](Tape& tp, const Tensor4& g) {
        Tensor4 da = g;
        for (auto& v : da.flat()) v *= c;
        tp.accumulate(a, da);
    });
}

Var add_scalar(Tape& t, Var a, double c) {
    Tensor4 y = t.value(a);
    for (auto& v : y.flat()) v += c;
    return t.push(std::move(y), {a}, [a](Tape& tp, const Tensor4& g) { tp.accumulate(a, g); });
}

Var pow_c(Tape& t, Var x, double p, double c) {
    Tensor4 y = t.value(x);
    for (auto& v : y.flat()) v = c * std::pow(v, p);
    return t.push(std::move(y), {x}, [x, p, c](Tape& tp, const Tensor4& g) {
        Tensor4 dx = g;
        const auto xv = tp.value(x).flat();
        for (std::size_t i = 0; i < dx.size(); ++i) dx.flat()[i] *= c * p * std::pow(xv[i], p - 1.0);
        tp.accumulate(x, dx);
    });
}

Var reduce_sum(Tape& t, Var x, bool keep_n, bool keep_c) {
    const Tensor4& xv = t.value(x);
    const Shape os{keep_n ? xv.n() : 1, keep_c ? xv.c() : 1, 1, 1};
    Tensor4 y(os);
    const std::size_t hw = xv.h() * xv.w();
    for (std::size_t n = 0; n < xv.n(); ++n)
        for (std::size_t c = 0; c < xv.c(); ++c) {
            const double* p = xv.ptr(n, c, 0, 0);
            double acc = 0.0;
            for (std::size_t i = 0; i < hw; ++i) acc += p[i];
            y.flat()[bidx(y, n, c)] += acc;
        }
    return t.push(std::move(y), {x}, [x](Tape& tp, const Tensor4& g) {
        Tensor4 dx(tp.value(x).shape());
        const std::size_t hw = dx.h() * dx.w();
        for (std::size_t n = 0; n < dx.n(); ++n)
            for (std::size_t c = 0; c < dx.c(); ++c) {
                const double b = g.flat()[bidx(g, n, c)];
                double* p = dx.ptr(n, c, 0, 0);
                for (std::size_t i = 0; i < hw; ++i) p[i] = b;
            }
        tp.accumulate(x, dx);
    });
}

Var channel_mean(Tape& t, Var x) {
    const Tensor4& xv = t.value(x);
    const double count = static_cast<double>(xv.n() * xv.h() * xv.w());
    return scale(t, reduce_sum(t, x, false, true), 1.0 / count);
}

Var mean_sq(Tape& t, Var x) {
    const Tensor4& xv = t.value(x);
    double acc = 0.0;
    for (double v : xv.flat()) acc += v * v;
    const double inv = 1.0 / static_cast<double>(xv.size());
    return t.push(Tensor4(Shape{}, acc * inv), {x}, [x, inv](Tape& tp, const Tensor4& g) {
        Tensor4 dx = tp.value(x);
        const double s = 2.0 * inv * g.flat()[0];
        for (auto& v : dx.flat()) v *= s;
        tp.accumulate(x, dx);
    });
}

Var mean_all(Tape& t, Var x) {
    const Tensor4& xv = t.value(x);
    double acc = 0.0;
    for (double v : xv.flat()) acc += v;
    const double inv = 1.0 / static_cast<double>(xv.size());
    return t.push(Tensor4(Shape{}, acc * inv), {x}, [x, inv](Tape& tp, const Tensor4& g) {
        tp.accumulate(x, Tensor4(tp.value(x).shape(), g.flat()[0] * inv));
    });
}

Var log_eps(Tape& t, Var x, double eps) {
    if (!(eps > 0.0)) throw InvalidArgument("log_eps: eps must be positive");
    Tensor4 y = t.value(x);
    for (auto& v : y.flat()) v = std::log(v + eps);
    return t.push(std::move(y), {x}, [x, eps](Tape& tp, const Tensor4& g) {
        Tensor4 dx = tp.value(x);
        const auto gv = g.flat();
        for (std::size_t i = 0; i < dx.size(); ++i) dx.flat()[i] = gv[i] / (dx.flat()[i] + eps);
        tp.accumulate(x, dx);
    });
}

Var tv_map(Tape& t, Var x) {
    const Tensor4& xv = t.value(x);
    const Shape s = xv.shape();
    if (s.h < 2 || s.w < 2) throw InvalidArgument("tv_map: needs at least 2x2, got " + s.str());
    Tensor4 y(Shape{s.n, s.c, s.h - 1, s.w - 1});
    for (std::size_t n = 0; n < s.n; ++n)
        for (std::size_t c = 0; c < s.c; ++c)
            for (std::size_t i = 0; i + 1 < s.h; ++i)
                for (std::size_t j = 0; j + 1 < s.w; ++j) {
                    const double a = xv(n, c, i, j) - xv(n, c, i + 1, j);
                    const double b = xv(n, c, i, j) - xv(n, c, i, j + 1);
                    y(n, c, i, j) = std::sqrt(a * a + b * b);
                }
    return t.push(std::move(y), {x}, [x](Tape& tp, const Tensor4& g) {
        const Tensor4& xv = tp.value(x);
        const Shape s = xv.shape();
        Tensor4 dx(s);
        for (std::size_t n = 0; n < s.n; ++n)
            for (std::size_t c = 0; c < s.c; ++c)
                for (std::size_t i = 0; i + 1 < s.h; ++i)
                    for (std::size_t j = 0; j + 1 < s.w; ++j) {
                        const double a = xv(n, c, i, j) - xv(n, c, i + 1, j);
                        const double b = xv(n, c, i, j) - xv(n, c, i, j + 1);
                        const double tv = std::sqrt(a * a + b * b);
                        if (tv == 0.0) continue;
                        const double k = g(n, c, i, j) / tv;
                        dx(n, c, i, j) += k * (a + b);
                        dx(n, c, i + 1, j) -= k * a;
                        dx(n, c, i, j + 1) -= k * b;
                    }
        tp.accumulate(x, dx);
    });
}

Var pad_to(Tape& t, Var x, std::size_t h, std::size_t w) {
    const Tensor4& xv = t.value(x);
    const Shape s = xv.shape();
    if (h < s.h || w < s.w) throw InvalidArgument("pad_to: target smaller than " + s.str());
    Tensor4 y(Shape{s.n, s.c, h, w});
    for (std::size_t n = 0; n < s.n; ++n)
        for (std::size_t c = 0; c < s.c; ++c)
            for (std::size_t i = 0; i < s.h; ++i)
                std::copy_n(xv.ptr(n, c, i, 0), s.w, y.ptr(n, c, i, 0));
    return t.push(std::move(y), {x}, [x](Tape& tp, const Tensor4& g) {
        const Shape s = tp.value(x).shape();
        Tensor4 dx(s);
        for (std::size_t n = 0; n < s.n; ++n)
            for (std::size_t c = 0; c < s.c; ++c)
                for (std::size_t i = 0; i < s.h; ++i) std::copy_n(g.ptr(n, c, i, 0), s.w, dx.ptr(n, c, i, 0));
        tp.accumulate(x, dx);
    });
}

Var crop(Tape& t, Var x, std::size_t h, std::size_t w) {
    const Tensor4& xv = t.value(x);
    const Shape s = xv.shape();
    if (h > s.h || w > s.w) throw InvalidArgument("crop: target larger than " + s.str());
    Tensor4 y(Shape{s.n, s.c, h, w});
    for (std::size_t n = 0; n < s.n; ++n)
        for (std::size_t c = 0; c < s.c; ++c)
            for (std::size_t i = 0; i < h; ++i) std::copy_n(xv.ptr(n, c, i, 0), w, y.ptr(n, c, i, 0));
    return t.push(std::move(y), {x}, [x, h, w](Tape& tp, const Tensor4& g) {
        Tensor4 dx(tp.value(x).shape());
        const Shape s = dx.shape();
        for (std::size_t n = 0; n < s.n; ++n)
            for (std::size_t c = 0; c < s.c; ++c)
                for (std::size_t i = 0; i < h; ++i) std::copy_n(g.ptr(n, c, i, 0), w, dx.ptr(n, c, i, 0));
        tp.accumulate(x, dx);
    });
}

namespace {

Tensor4 apply_items(const Tensor4& x, const LinearOperator& op, bool adjoint, Shape item_out) {
    const std::size_t in_size = adjoint ? op.rows() : op.cols();
    const std::size_t out_size = adjoint ? op.cols() : op.rows();
    const std::size_t item = x.size() / x.n();
    if (item != in_size || item_out.n != 1 || item_out.size() != out_size)
        throw InvalidArgument("linop: item size " + std::to_string(item) + " does not match the operator");
    Tensor4 y(Shape{x.n(), item_out.c, item_out.h, item_out.w});
    for (std::size_t n = 0; n < x.n(); ++n) {
        const std::span<const double> in(x.flat().data() + n * item, item);
        const std::span<double> out(y.flat().data() + n * out_size, out_size);
        if (adjoint)
            op.adjoint(in, out);
        else
            op.apply(in, out);
    }
    return y;
}

Shape item_shape(const Tensor4& x) { return Shape{1, x.c(), x.h(), x.w()}; }

} // namespace

Var linop(Tape& t, Var x, std::shared_ptr<const LinearOperator> op, Shape item_out) {
    Tensor4 y = apply_items(t.value(x), *op, false, item_out);
    return t.push(std::move(y), {x}, [x, op](Tape& tp, const Tensor4& g) {
        tp.accumulate(x, apply_items(g, *op, true, item_shape(tp.value(x))));
    });
}

Var linop_adjoint(Tape& t, Var y, std::shared_ptr<const LinearOperator> op, Shape item_out) {
    Tensor4 x = apply_items(t.value(y), *op, true, item_out);
    return t.push(std::move(x), {y}, [y, op](Tape& tp, const Tensor4& g) {
        tp.accumulate(y, apply_items(g, *op, false, item_shape(tp.value(y))));
    });
}

} // namespace ops

} // namespace parbeam::nn
