#include "parbeam/regularizers.hpp"

#include <algorithm>
#include <cfloat>
#include <chrono>
#include <cmath>
#include <limits>
#include <string>

#include "parbeam/errors.hpp"
#include "parbeam/io.hpp"

namespace parbeam {

namespace {

void require_2x2(const Array2& x, const char* who) {
    if (x.rows() < 2 || x.cols() < 2) throw InvalidArgument(std::string(who) + ": image must be at least 2x2");
}

// Forward differences restricted to the (M-1) x (N-1) field.
void grad(const Array2& u, Array2& p1, Array2& p2) {
    const std::size_t m = u.rows() - 1, n = u.cols() - 1;
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            p1(i, j) = u(i, j) - u(i + 1, j);
            p2(i, j) = u(i, j) - u(i, j + 1);
        }
}

// Transpose of grad.
void grad_t(const Array2& p1, const Array2& p2, Array2& out) {
    std::fill(out.vec().begin(), out.vec().end(), 0.0);
    for (std::size_t i = 0; i < p1.rows(); ++i)
        for (std::size_t j = 0; j < p1.cols(); ++j) {
            out(i, j) += p1(i, j) + p2(i, j);
            out(i + 1, j) -= p1(i, j);
            out(i, j + 1) -= p2(i, j);
        }
}

std::size_t offset(std::size_t i, int d) { return static_cast<std::size_t>(static_cast<long>(i) + d); }

std::size_t image_rows_for(std::size_t cols, std::size_t hint) {
    if (hint) {
        if (cols % hint) throw InvalidArgument("image_rows does not divide the unknown count");
        return hint;
    }
    const auto side = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(cols))));
    if (side * side != cols) throw InvalidArgument("unknowns do not form a square image; set image_rows");
    return side;
}

double half_sq_residual(const LinearOperator& op, std::span<const double> f, std::span<const double> g) {
    const auto r = op.apply(f);
    double s = 0.0;
    for (std::size_t i = 0; i < r.size(); ++i) s += (r[i] - g[i]) * (r[i] - g[i]);
    return 0.5 * s;
}

double step_from_norm(const LinearOperator& op) {
    const auto pm = power_method_norm(op, kBoundPowerIters, kBoundPowerSeed);
    if (pm.zero_operator) throw InvalidArgument("step selection: zero operator");
    return 1.0 / (pm.sigma_max * pm.sigma_max);
}

class TraceWriter {
public:
    TraceWriter(const LinearProblem& p, const TraceOptions& o) : p_(p), o_(o) {}
    void record(int k, std::span<const double> f) {
        if (!o_.enabled) return;
        TraceRecord rec;
        rec.k = k;
        const auto r = p_.op().apply(f);
        double s = 0.0;
        for (std::size_t i = 0; i < r.size(); ++i) s += (r[i] - p_.data()[i]) * (r[i] - p_.data()[i]);
        rec.residual = std::sqrt(s);
        rec.error = rec.mae_hu = std::numeric_limits<double>::quiet_NaN();
        if (p_.truth()) {
            double sq = 0.0, ab = 0.0;
            for (std::size_t i = 0; i < f.size(); ++i) {
                const double d = f[i] - (*p_.truth())[i];
                sq += d * d;
                ab += std::abs(d);
            }
            rec.error = std::sqrt(sq);
            rec.mae_hu = 1000.0 * ab / static_cast<double>(f.size()) / o_.hu.mu_water;
        }
        rec.ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start_).count();
        trace_.records.push_back(rec);
    }
    IterationTrace take() { return std::move(trace_); }

private:
    const LinearProblem& p_;
    TraceOptions o_;
    std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
    IterationTrace trace_;
};

} // namespace

Array2 tv_map(const Array2& x) {
    require_2x2(x, "tv_map");
    Array2 out(x.rows() - 1, x.cols() - 1);
    for (std::size_t i = 0; i + 1 < x.rows(); ++i)
        for (std::size_t j = 0; j + 1 < x.cols(); ++j) {
            const double a = x(i, j) - x(i + 1, j);
            const double b = x(i, j) - x(i, j + 1);
            out(i, j) = std::sqrt(a * a + b * b);
        }
    return out;
}

double tv_l1(const Array2& x) {
    const Array2 field = tv_map(x);
    double s = 0.0;
    for (double v : field.flat()) s += v;
    return s;
}

double log_sparsity(const Array2& x, double eps) {
    if (!(eps > 0.0)) throw InvalidArgument("log_sparsity: eps must be positive");
    const Array2 t = tv_map(x);
    double s = 0.0;
    for (double v : t.flat()) s += std::log(v + eps);
    return s / static_cast<double>(t.size());
}

double rwl1(std::span<const double> x, double delta) {
    if (!(delta > 0.0)) throw InvalidArgument("rwl1: delta must be positive");
    double s = 0.0;
    for (double v : x) {
        if (v < 0.0) throw InvalidArgument("rwl1: entries must be nonnegative");
        s += v / (v + delta);
    }
    return s;
}

NltvWeights::NltvWeights(const Array2& img, const NltvConfig& cfg)
    : rows_(img.rows()), cols_(img.cols()), w_(cfg.window), eps_(cfg.eps) {
    if (cfg.window < 1 || cfg.patch < 0 || !(cfg.h0 > 0.0) || !(cfg.eps >= 0.0))
        throw InvalidArgument("NltvConfig: need window >= 1, patch >= 0, h0 > 0, eps >= 0");
    const auto span = static_cast<std::size_t>(2 * (cfg.window + cfg.patch) + 1);
    if (rows_ < span || cols_ < span)
        throw InvalidArgument("nltv: window plus patch (" + std::to_string(span) + ") exceeds the image");

    const int a = cfg.patch;
    const double sg = 0.5 * (a + 1);
    std::vector<double> g1(static_cast<std::size_t>(2 * a + 1));
    double total = 0.0;
    for (int k = -a; k <= a; ++k) g1[static_cast<std::size_t>(k + a)] = std::exp(-0.5 * k * k / (sg * sg));
    for (double v : g1) total += v;
    for (auto& v : g1) v /= total;

    const int w = w_;
    const auto side = static_cast<std::size_t>(2 * w + 1);
    weights_.assign(rows_ * cols_ * side * side, 0.0);
    const long R = static_cast<long>(rows_), C = static_cast<long>(cols_);
    auto px = [&](long r, long c) {
        r = std::clamp(r, 0L, R - 1);
        c = std::clamp(c, 0L, C - 1);
        return img(static_cast<std::size_t>(r), static_cast<std::size_t>(c));
    };
    const double inv = 1.0 / (2.0 * cfg.h0 * cfg.h0);
    for (long r = 0; r < R; ++r)
        for (long c = 0; c < C; ++c)
            for (int dr = -w; dr <= w; ++dr)
                for (int dc = -w; dc <= w; ++dc) {
                    const long r2 = r + dr, c2 = c + dc;
                    if (r2 < 0 || r2 >= R || c2 < 0 || c2 >= C) continue;
                    double d = 0.0;
                    for (int kr = -a; kr <= a; ++kr)
                        for (int kc = -a; kc <= a; ++kc) {
                            const double diff = px(r + kr, c + kc) - px(r2 + kr, c2 + kc);
                            d += g1[static_cast<std::size_t>(kr + a)] * g1[static_cast<std::size_t>(kc + a)] * diff * diff;
                        }
                    weights_[index(static_cast<std::size_t>(r), static_cast<std::size_t>(c), dr, dc)] =
                        std::max(std::exp(-d * inv), DBL_MIN);
                }
}

std::size_t NltvWeights::index(std::size_t r, std::size_t c, int dr, int dc) const {
    const auto side = static_cast<std::size_t>(2 * w_ + 1);
    return ((r * cols_ + c) * side + static_cast<std::size_t>(dr + w_)) * side + static_cast<std::size_t>(dc + w_);
}

bool NltvWeights::valid(std::size_t r, std::size_t c, int dr, int dc) const {
    const long r2 = static_cast<long>(r) + dr, c2 = static_cast<long>(c) + dc;
    return r2 >= 0 && c2 >= 0 && r2 < static_cast<long>(rows_) && c2 < static_cast<long>(cols_);
}

double NltvWeights::at(std::size_t r, std::size_t c, int dr, int dc) const { return weights_[index(r, c, dr, dc)]; }

Array2 NltvWeights::magnitudes(const Array2& u) const {
    if (u.rows() != rows_ || u.cols() != cols_) throw InvalidArgument("nltv: image shape differs from weights");
    Array2 out(rows_, cols_);
    for (std::size_t r = 0; r < rows_; ++r)
        for (std::size_t c = 0; c < cols_; ++c) {
            double s = eps_;
            for (int dr = -w_; dr <= w_; ++dr)
                for (int dc = -w_; dc <= w_; ++dc) {
                    if (!valid(r, c, dr, dc)) continue;
                    const double d = u(offset(r, dr), offset(c, dc)) - u(r, c);
                    s += at(r, c, dr, dc) * d * d;
                }
            out(r, c) = std::sqrt(s);
        }
    return out;
}

double NltvWeights::norm(const Array2& u) const {
    const Array2 m = magnitudes(u);
    double s = 0.0;
    for (double v : m.flat()) s += v;
    return s;
}

double NltvWeights::rwl1_value(const Array2& u, double delta) const {
    const Array2 m = magnitudes(u);
    return rwl1(m.flat(), delta);
}

Array2 NltvWeights::rwl1_gradient(const Array2& u, double delta) const {
    const Array2 m = magnitudes(u);
    Array2 g(rows_, cols_);
    for (std::size_t r = 0; r < rows_; ++r)
        for (std::size_t c = 0; c < cols_; ++c) {
            const double s = m(r, c);
            if (s == 0.0) continue;
            const double coef = delta / ((s + delta) * (s + delta)) / s;
            for (int dr = -w_; dr <= w_; ++dr)
                for (int dc = -w_; dc <= w_; ++dc) {
                    if (!valid(r, c, dr, dc) || (dr == 0 && dc == 0)) continue;
                    const std::size_t r2 = offset(r, dr);
                    const std::size_t c2 = offset(c, dc);
                    const double t = coef * at(r, c, dr, dc) * (u(r2, c2) - u(r, c));
                    g(r2, c2) += t;
                    g(r, c) -= t;
                }
        }
    return g;
}

NltvWeights nltv_weights(const Array2& img, const NltvConfig& cfg) { return NltvWeights(img, cfg); }

double nltv_norm(const Array2& img, const NltvConfig& cfg) { return NltvWeights(img, cfg).norm(img); }

double prox_tv_objective(const Array2& u, const Array2& x, double t) {
    double q = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) q += (u.flat()[i] - x.flat()[i]) * (u.flat()[i] - x.flat()[i]);
    return tv_l1(u) + q / (2.0 * t);
}

Array2 prox_tv(const Array2& x, double t, int inner_iters) {
    if (!(t > 0.0)) throw InvalidArgument("prox_tv: t must be positive");
    require_2x2(x, "prox_tv");
    const std::size_t m = x.rows() - 1, n = x.cols() - 1;
    // Fast gradient projection on the dual (q1, q2) with |q| <= 1 per cell;
    // the primal point is x - t grad^T q.
    Array2 q1(m, n), q2(m, n), r1(m, n), r2(m, n), p1(m, n), p2(m, n), dtq(x.rows(), x.cols());
    Array2 u = x;
    Array2 best = x;
    double best_obj = prox_tv_objective(x, x, t);
    const double tau = 1.0 / (8.0 * t);
    double tk = 1.0;
    for (int it = 0; it < inner_iters; ++it) {
        grad_t(r1, r2, dtq);
        for (std::size_t i = 0; i < u.size(); ++i) u.flat()[i] = x.flat()[i] - t * dtq.flat()[i];
        grad(u, p1, p2);
        const double tn = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * tk * tk));
        const double beta = (tk - 1.0) / tn;
        for (std::size_t i = 0; i < q1.size(); ++i) {
            const double a = r1.flat()[i] + tau * p1.flat()[i];
            const double b = r2.flat()[i] + tau * p2.flat()[i];
            const double nrm = std::max(1.0, std::sqrt(a * a + b * b));
            const double na = a / nrm, nb = b / nrm;
            r1.flat()[i] = na + beta * (na - q1.flat()[i]);
            r2.flat()[i] = nb + beta * (nb - q2.flat()[i]);
            q1.flat()[i] = na;
            q2.flat()[i] = nb;
        }
        tk = tn;
        grad_t(q1, q2, dtq);
        for (std::size_t i = 0; i < u.size(); ++i) u.flat()[i] = x.flat()[i] - t * dtq.flat()[i];
        const double obj = prox_tv_objective(u, x, t);
        if (obj < best_obj) {
            best_obj = obj;
            best = u;
        }
    }
    return best;
}

RegularizedResult fista_tv(const LinearProblem& problem, const FistaOptions& opts) {
    if (opts.lambda < 0.0) throw InvalidArgument("fista_tv: lambda must be >= 0");
    if (opts.iters < 0) throw InvalidArgument("fista_tv: iters must be >= 0");
    const LinearOperator& op = problem.op();
    const std::size_t rows = image_rows_for(op.cols(), opts.image_rows);
    const std::size_t cols = op.cols() / rows;
    const double bound = step_from_norm(op);
    const double step = opts.step > 0.0 ? opts.step : bound;
    if (step > bound && !opts.allow_large_step)
        throw InvalidArgument("fista_tv: step " + io::format_double(step) + " exceeds 1/sigma^2 = " +
                              io::format_double(bound));
    const auto& g = problem.data();

    auto objective = [&](const std::vector<double>& f) {
        return half_sq_residual(op, f, g) + opts.lambda * tv_l1(Array2(rows, cols, f));
    };

    RegularizedResult out;
    TraceWriter tracer(problem, opts.trace);
    std::vector<double> f = problem.initial();
    std::vector<double> prev = f;
    std::vector<double> y = f;
    double tk = 1.0;
    tracer.record(0, f);
    out.objective.push_back(objective(f));
    for (int k = 0; k < opts.iters; ++k) {
        auto r = op.apply(y);
        for (std::size_t i = 0; i < r.size(); ++i) r[i] -= g[i];
        const auto gr = op.adjoint(r);
        std::vector<double> z(y);
        axpy(-step, gr, z);
        if (opts.lambda > 0.0)
            f = prox_tv(Array2(rows, cols, std::move(z)), opts.lambda * step, opts.prox_iters).vec();
        else
            f = std::move(z);
        const double tn = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * tk * tk));
        const double beta = (tk - 1.0) / tn;
        for (std::size_t i = 0; i < f.size(); ++i) y[i] = f[i] + beta * (f[i] - prev[i]);
        prev = f;
        tk = tn;
        tracer.record(k + 1, f);
        out.objective.push_back(objective(f));
    }
    out.solve.f = std::move(f);
    out.solve.trace = tracer.take();
    return out;
}

RegularizedResult nltv_scheme(const LinearProblem& problem, const NltvSchemeOptions& opts) {
    if (opts.gamma < 0.0) throw InvalidArgument("nltv_scheme: gamma must be >= 0");
    if (opts.outer_iters < 0 || opts.prox_steps < 0) throw InvalidArgument("nltv_scheme: negative iteration count");
    if (!(opts.delta > 0.0)) throw InvalidArgument("nltv_scheme: delta must be positive");
    const LinearOperator& op = problem.op();
    const std::size_t rows = image_rows_for(op.cols(), opts.image_rows);
    const std::size_t cols = op.cols() / rows;
    const double omega = opts.omega > 0.0 ? opts.omega : step_from_norm(op);
    const auto& g = problem.data();

    RegularizedResult out;
    TraceWriter tracer(problem, opts.trace);
    std::vector<double> f = problem.initial();
    std::vector<double> u = f;
    std::vector<double> gk = g;
    tracer.record(0, u);
    for (int k = 0; k < opts.outer_iters; ++k) {
        auto r = op.apply(u);
        for (std::size_t i = 0; i < r.size(); ++i) r[i] = gk[i] - r[i];
        axpy(omega, op.adjoint(r), f);

        u = f;
        std::vector<double> reg_trace;
        if (opts.gamma > 0.0) {
            const Array2 fa(rows, cols, f);
            const NltvWeights weights(fa, opts.nltv);
            auto prox_obj = [&](const Array2& v) {
                double q = 0.0;
                for (std::size_t i = 0; i < v.size(); ++i) q += (v.flat()[i] - f[i]) * (v.flat()[i] - f[i]);
                return opts.gamma * weights.rwl1_value(v, opts.delta) + 0.5 * q;
            };
            Array2 ua = fa;
            double obj = prox_obj(ua);
            reg_trace.push_back(weights.rwl1_value(ua, opts.delta));
            double alpha = opts.prox_step;
            for (int s = 0; s < opts.prox_steps; ++s) {
                Array2 gr = weights.rwl1_gradient(ua, opts.delta);
                for (std::size_t i = 0; i < gr.size(); ++i) gr.flat()[i] = opts.gamma * gr.flat()[i] + (ua.flat()[i] - f[i]);
                bool moved = false;
                for (int halvings = 0; halvings < 40; ++halvings) {
                    Array2 trial = ua;
                    axpy(-alpha, gr.flat(), trial.flat());
                    const double tobj = prox_obj(trial);
                    if (tobj < obj) {
                        ua = std::move(trial);
                        obj = tobj;
                        moved = true;
                        break;
                    }
                    alpha *= 0.5;
                }
                if (!moved) break;
                reg_trace.push_back(weights.rwl1_value(ua, opts.delta));
            }
            u = ua.vec();
        }
        out.prox_trace.push_back(std::move(reg_trace));

        auto ru = op.apply(u);
        for (std::size_t i = 0; i < gk.size(); ++i) gk[i] += g[i] - ru[i];
        tracer.record(k + 1, u);
    }
    out.solve.f = std::move(u);
    out.solve.trace = tracer.take();
    return out;
}

} // namespace parbeam
