#include "parbeam/solvers.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include "parbeam/errors.hpp"
#include "parbeam/io.hpp"

namespace parbeam {

namespace {

std::vector<double> random_unit(std::size_t n, std::mt19937_64& rng) {
    std::normal_distribution<double> nd(0.0, 1.0);
    std::vector<double> x(n);
    for (auto& v : x) v = nd(rng);
    const double nrm = norm2(x);
    if (nrm > 0.0)
        for (auto& v : x) v /= nrm;
    return x;
}

std::vector<double> residual(const LinearOperator& op, std::span<const double> g, std::span<const double> f) {
    std::vector<double> r = op.apply(f);
    for (std::size_t i = 0; i < r.size(); ++i) r[i] = g[i] - r[i];
    return r;
}

// Rows of an operator as an operator of their own.
class RowSubset final : public LinearOperator {
public:
    RowSubset(const LinearOperator& op, std::span<const std::size_t> rows) : op_(op), rows_(rows) {}
    std::size_t rows() const override { return rows_.size(); }
    std::size_t cols() const override { return op_.cols(); }
    void apply(std::span<const double> x, std::span<double> y) const override { op_.apply_rows(rows_, x, y); }
    void adjoint(std::span<const double> y, std::span<double> x) const override {
        std::fill(x.begin(), x.end(), 0.0);
        op_.adjoint_rows_add(rows_, y, x);
    }
    using LinearOperator::adjoint;
    using LinearOperator::apply;

private:
    const LinearOperator& op_;
    std::span<const std::size_t> rows_;
};

class Tracer {
public:
    Tracer(const LinearProblem& problem, const TraceOptions& opts)
        : problem_(problem), opts_(opts), start_(std::chrono::steady_clock::now()) {}

    void record(int k, std::span<const double> f, std::span<const double> r) {
        if (!opts_.enabled) return;
        TraceRecord rec;
        rec.k = k;
        rec.residual = norm2(r);
        const auto& truth = problem_.truth();
        if (truth) {
            double sq = 0.0;
            double abs_sum = 0.0;
            for (std::size_t i = 0; i < f.size(); ++i) {
                const double d = f[i] - (*truth)[i];
                sq += d * d;
                abs_sum += std::abs(d);
            }
            rec.error = std::sqrt(sq);
            rec.mae_hu = 1000.0 * abs_sum / static_cast<double>(f.size()) / opts_.hu.mu_water;
        } else {
            rec.error = std::numeric_limits<double>::quiet_NaN();
            rec.mae_hu = std::numeric_limits<double>::quiet_NaN();
        }
        rec.ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start_).count();
        trace_.records.push_back(rec);
    }

    void record(int k, std::span<const double> f) {
        if (!opts_.enabled) return;
        const auto r = residual(problem_.op(), problem_.data(), f);
        record(k, f, r);
    }

    IterationTrace take() { return std::move(trace_); }

private:
    const LinearProblem& problem_;
    TraceOptions opts_;
    std::chrono::steady_clock::time_point start_;
    IterationTrace trace_;
};

void validate_blocks(const LinearProblem& problem, const Blocks& blocks) {
    const std::size_t m = problem.op().rows();
    std::vector<char> seen(m, 0);
    for (const auto& b : blocks) {
        if (b.empty()) throw InvalidArgument("block solver: empty block");
        for (auto r : b) {
            if (r >= m) throw InvalidArgument("block solver: row index out of range");
            if (seen[r]) throw InvalidArgument("block solver: blocks overlap at row " + std::to_string(r));
            seen[r] = 1;
        }
    }
    if (std::find(seen.begin(), seen.end(), 0) != seen.end())
        throw InvalidArgument("block solver: blocks do not cover every row");
}

// Per-row weights c_i with C_j = diag(c) for each block; zero marks a zero
// row. Sequential sweeps only need C_j to dominate R_j R_j^T. A simultaneous
// update sums all blocks, so there the diagonal must dominate R R^T as a
// whole: the bound uses the full operator norm and the row sums use the
// column sums of the full matrix.
std::vector<double> block_weights(const LinearOperator& op, const Blocks& blocks, BlockWeight mode,
                                  bool simultaneous) {
    std::vector<double> c(op.rows(), 0.0);
    const std::size_t n = op.cols();
    if (simultaneous && mode == BlockWeight::Bound) {
        const auto pm = power_method_norm(op, kBoundPowerIters, kBoundPowerSeed);
        const double gamma = pm.zero_operator ? 0.0 : 1.05 * pm.sigma_max * pm.sigma_max;
        std::fill(c.begin(), c.end(), gamma);
        return c;
    }
    std::vector<double> global_colsum;
    if (simultaneous && mode == BlockWeight::RowSum) {
        std::vector<double> ones(op.rows(), 1.0);
        global_colsum = op.adjoint(ones);
        for (auto& v : global_colsum) v = std::abs(v);
    }
    for (const auto& b : blocks) {
        switch (mode) {
        case BlockWeight::Exact: {
            if (b.size() != 1) throw InvalidArgument("exact block weights need single-row blocks");
            std::vector<double> row(n, 0.0);
            const double one = 1.0;
            op.adjoint_rows_add(b, std::span<const double>(&one, 1), row);
            c[b[0]] = dot(row, row);
            break;
        }
        case BlockWeight::Bound: {
            const RowSubset sub(op, b);
            const auto pm = power_method_norm(sub, kBoundPowerIters, kBoundPowerSeed);
            const double gamma = pm.zero_operator ? 0.0 : 1.05 * pm.sigma_max * pm.sigma_max;
            for (auto r : b) c[r] = gamma;
            break;
        }
        case BlockWeight::RowSum: {
            // Projector weights are nonnegative, so |R| acts like R on
            // nonnegative vectors.
            std::vector<double> colsum;
            if (simultaneous) {
                colsum = global_colsum;
            } else {
                std::vector<double> ones_rows(b.size(), 1.0);
                colsum.assign(n, 0.0);
                op.adjoint_rows_add(b, ones_rows, colsum);
                for (auto& v : colsum) v = std::abs(v);
            }
            std::vector<double> out(b.size());
            op.apply_rows(b, colsum, out);
            for (std::size_t i = 0; i < b.size(); ++i) c[b[i]] = std::abs(out[i]);
            break;
        }
        }
    }
    return c;
}

} // namespace

PowerMethodResult power_method_norm(const LinearOperator& op, int iters, std::uint64_t seed) {
    if (iters < 1) throw InvalidArgument("power_method_norm: iters must be >= 1");
    std::mt19937_64 rng(seed);
    std::vector<double> x = random_unit(op.cols(), rng);
    PowerMethodResult res;
    double lambda = 0.0;
    for (int it = 0; it < iters; ++it) {
        std::vector<double> y = op.adjoint(op.apply(x));
        const double next = norm2(y);
        if (next == 0.0) {
            res.zero_operator = true;
            res.sigma_max = 0.0;
            res.last_increment = 0.0;
            return res;
        }
        res.last_increment = std::abs(next - lambda) / next;
        lambda = next;
        for (std::size_t i = 0; i < y.size(); ++i) x[i] = y[i] / next;
    }
    res.sigma_max = std::sqrt(lambda);
    return res;
}

double adjointness_defect(const LinearOperator& op, int probes, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    double worst = 0.0;
    for (int i = 0; i < probes; ++i) {
        const auto x = random_unit(op.cols(), rng);
        const auto y = random_unit(op.rows(), rng);
        const double lhs = dot(op.apply(x), y);
        const double rhs = dot(x, op.adjoint(y));
        worst = std::max(worst, std::abs(lhs - rhs));
    }
    return worst;
}

LinearProblem::LinearProblem(std::shared_ptr<const LinearOperator> op, std::vector<double> g,
                             std::optional<std::vector<double>> truth, std::vector<double> f0)
    : op_(std::move(op)), g_(std::move(g)), truth_(std::move(truth)), f0_(std::move(f0)) {
    if (!op_) throw InvalidArgument("LinearProblem: null operator");
    if (g_.size() != op_->rows()) throw InvalidArgument("LinearProblem: data size does not match operator rows");
    if (truth_ && truth_->size() != op_->cols()) throw InvalidArgument("LinearProblem: ground truth size mismatch");
    if (f0_.empty()) f0_.assign(op_->cols(), 0.0);
    if (f0_.size() != op_->cols()) throw InvalidArgument("LinearProblem: initial guess size mismatch");
    // Scale-free check: probes are unit vectors, so compare against ||A||.
    const double defect = adjointness_defect(*op_, 3, 0xad301ULL);
    const double scale = std::max(power_method_norm(*op_, 5, 0xad302ULL).sigma_max, 1e-300);
    if (defect > 1e-8 * scale) throw ContractViolation("LinearProblem: operator adjoint mismatch");
}

LinearProblem LinearProblem::with_data(std::vector<double> g) const {
    LinearProblem p = *this;
    if (g.size() != op_->rows()) throw InvalidArgument("LinearProblem: data size does not match operator rows");
    p.g_ = std::move(g);
    return p;
}

LinearProblem LinearProblem::with_initial(std::vector<double> f0) const {
    LinearProblem p = *this;
    if (f0.size() != op_->cols()) throw InvalidArgument("LinearProblem: initial guess size mismatch");
    p.f0_ = std::move(f0);
    return p;
}

std::string IterationTrace::to_csv() const {
    std::ostringstream os;
    os << "k,residual,error,mae_hu,ms\n";
    for (const auto& r : records)
        os << r.k << ',' << io::format_double(r.residual) << ',' << io::format_double(r.error) << ','
           << io::format_double(r.mae_hu) << ',' << io::format_double(r.ms) << '\n';
    return os.str();
}

void IterationTrace::write_csv(const std::filesystem::path& path) const {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + path.string());
    f << to_csv();
}

double landweber_step_bound(const LinearOperator& op) {
    const auto pm = power_method_norm(op, kBoundPowerIters, kBoundPowerSeed);
    if (pm.zero_operator) return std::numeric_limits<double>::infinity();
    return 2.0 / (pm.sigma_max * pm.sigma_max);
}

std::vector<double> landweber_step(const LinearOperator& op, std::span<const double> g, std::span<const double> f,
                                   double omega) {
    const auto r = residual(op, g, f);
    const auto u = op.adjoint(r);
    std::vector<double> out(f.begin(), f.end());
    axpy(omega, u, out);
    return out;
}

SolveResult landweber(const LinearProblem& problem, const LandweberOptions& opts) {
    if (opts.iters < 0) throw InvalidArgument("landweber: iters must be >= 0");
    if (!opts.allow_unstable) {
        double bound;
        if (opts.sigma_max) {
            bound = *opts.sigma_max > 0.0 ? 2.0 / (*opts.sigma_max * *opts.sigma_max)
                                          : std::numeric_limits<double>::infinity();
        } else {
            bound = landweber_step_bound(problem.op());
        }
        if (!(opts.omega > 0.0) || !(opts.omega < bound))
            throw InvalidArgument("landweber: omega = " + io::format_double(opts.omega) + " outside (0, " +
                                  io::format_double(bound) + ")");
    }
    const LinearOperator& op = problem.op();
    Tracer tracer(problem, opts.trace);
    std::vector<double> f = problem.initial();
    for (int k = 0; k < opts.iters; ++k) {
        const auto r = residual(op, problem.data(), f);
        tracer.record(k, f, r);
        const auto u = op.adjoint(r);
        axpy(opts.omega, u, f);
    }
    tracer.record(opts.iters, f);
    return {std::move(f), tracer.take(), 0};
}

Blocks single_row_blocks(std::size_t rows) {
    Blocks b(rows);
    for (std::size_t i = 0; i < rows; ++i) b[i] = {i};
    return b;
}

Blocks contiguous_blocks(std::size_t rows, std::size_t size) {
    if (size == 0) throw InvalidArgument("contiguous_blocks: size must be >= 1");
    Blocks b;
    for (std::size_t start = 0; start < rows; start += size) {
        std::vector<std::size_t> blk(std::min(size, rows - start));
        std::iota(blk.begin(), blk.end(), start);
        b.push_back(std::move(blk));
    }
    return b;
}

SolveResult kaczmarz(const LinearProblem& problem, const Blocks& blocks, const BlockOptions& opts) {
    if (!(opts.omega >= 0.0 && opts.omega < 2.0)) throw InvalidArgument("kaczmarz: omega must lie in [0, 2)");
    if (opts.iters < 0) throw InvalidArgument("kaczmarz: sweeps must be >= 0");
    validate_blocks(problem, blocks);
    const LinearOperator& op = problem.op();
    const auto& g = problem.data();
    const auto c = block_weights(op, blocks, opts.weight, false);

    std::size_t inconsistent = 0;
    for (const auto& b : blocks)
        for (auto r : b)
            if (c[r] == 0.0 && g[r] != 0.0) ++inconsistent;

    Tracer tracer(problem, opts.trace);
    std::vector<double> f = problem.initial();
    tracer.record(0, f);
    std::vector<double> vals;
    std::vector<std::size_t> live;
    for (int sweep = 0; sweep < opts.iters && opts.omega != 0.0; ++sweep) {
        for (const auto& b : blocks) {
            live.clear();
            for (auto r : b)
                if (c[r] != 0.0) live.push_back(r);
            if (live.empty()) continue;
            vals.resize(live.size());
            op.apply_rows(live, f, vals);
            for (std::size_t i = 0; i < live.size(); ++i) vals[i] = opts.omega * (g[live[i]] - vals[i]) / c[live[i]];
            op.adjoint_rows_add(live, vals, f);
        }
        tracer.record(sweep + 1, f);
    }
    if (opts.omega == 0.0)
        for (int sweep = 0; sweep < opts.iters; ++sweep) tracer.record(sweep + 1, f);
    return {std::move(f), tracer.take(), inconsistent};
}

SolveResult cimmino(const LinearProblem& problem, const Blocks& blocks, const BlockOptions& opts) {
    if (!(opts.omega >= 0.0 && opts.omega < 2.0)) throw InvalidArgument("cimmino: omega must lie in [0, 2)");
    if (opts.iters < 0) throw InvalidArgument("cimmino: iters must be >= 0");
    validate_blocks(problem, blocks);
    const LinearOperator& op = problem.op();
    const auto& g = problem.data();
    const auto c = block_weights(op, blocks, opts.weight, true);

    std::size_t inconsistent = 0;
    for (std::size_t i = 0; i < c.size(); ++i)
        if (c[i] == 0.0 && g[i] != 0.0) ++inconsistent;

    // A uniform weight is pulled out of the sum so the update is exactly a
    // Landweber step with omega / gamma.
    const bool uniform =
        std::all_of(c.begin(), c.end(), [&](double v) { return v == c.front(); }) && !c.empty() && c.front() != 0.0;

    Tracer tracer(problem, opts.trace);
    std::vector<double> f = problem.initial();
    for (int k = 0; k < opts.iters; ++k) {
        auto r = residual(op, g, f);
        tracer.record(k, f, r);
        if (uniform) {
            const auto u = op.adjoint(r);
            axpy(opts.omega / c.front(), u, f);
        } else {
            for (std::size_t i = 0; i < r.size(); ++i) r[i] = c[i] != 0.0 ? r[i] / c[i] : 0.0;
            const auto u = op.adjoint(r);
            axpy(opts.omega, u, f);
        }
    }
    tracer.record(opts.iters, f);
    return {std::move(f), tracer.take(), inconsistent};
}

std::vector<double> SvdOracle::pinv_apply(std::span<const double> g) const {
    if (g.size() != u.rows()) throw InvalidArgument("SvdOracle::pinv_apply: size mismatch");
    std::vector<double> x(v.rows(), 0.0);
    for (std::size_t i = 0; i < rank(); ++i) {
        double ug = 0.0;
        for (std::size_t r = 0; r < u.rows(); ++r) ug += u(r, i) * g[r];
        const double coef = ug / sigma[i];
        for (std::size_t r = 0; r < v.rows(); ++r) x[r] += coef * v(r, i);
    }
    return x;
}

std::vector<double> SvdOracle::support_projection(std::span<const double> f) const {
    if (f.size() != v.rows()) throw InvalidArgument("SvdOracle::support_projection: size mismatch");
    std::vector<double> x(v.rows(), 0.0);
    for (std::size_t i = 0; i < rank(); ++i) {
        double vf = 0.0;
        for (std::size_t r = 0; r < v.rows(); ++r) vf += v(r, i) * f[r];
        for (std::size_t r = 0; r < v.rows(); ++r) x[r] += vf * v(r, i);
    }
    return x;
}

std::vector<double> SvdOracle::kernel_projection(std::span<const double> f) const {
    auto s = support_projection(f);
    for (std::size_t i = 0; i < s.size(); ++i) s[i] = f[i] - s[i];
    return s;
}

SvdOracle svd_oracle(const Matrix& a) {
    if (a.rows() > kSvdMaxSide || a.cols() > kSvdMaxSide)
        throw ResourceLimit("svd_oracle: " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                            " exceeds " + std::to_string(kSvdMaxSide) + " per side");
    const bool flip = a.rows() < a.cols();
    const Matrix& src = a;
    const std::size_t m = flip ? a.cols() : a.rows();
    const std::size_t n = flip ? a.rows() : a.cols();

    // Columns stored contiguously: w[j] is column j of A (or of A^T).
    std::vector<std::vector<double>> w(n, std::vector<double>(m));
    for (std::size_t r = 0; r < a.rows(); ++r)
        for (std::size_t c = 0; c < a.cols(); ++c) {
            if (flip)
                w[r][c] = src(r, c);
            else
                w[c][r] = src(r, c);
        }
    std::vector<std::vector<double>> vcols(n, std::vector<double>(n, 0.0));
    for (std::size_t j = 0; j < n; ++j) vcols[j][j] = 1.0;

    const double eps = std::numeric_limits<double>::epsilon();
    for (int sweep = 0; sweep < 80; ++sweep) {
        bool rotated = false;
        for (std::size_t i = 0; i + 1 < n; ++i)
            for (std::size_t j = i + 1; j < n; ++j) {
                auto& wi = w[i];
                auto& wj = w[j];
                double alpha = 0.0, beta = 0.0, gamma = 0.0;
                for (std::size_t r = 0; r < m; ++r) {
                    alpha += wi[r] * wi[r];
                    beta += wj[r] * wj[r];
                    gamma += wi[r] * wj[r];
                }
                if (gamma == 0.0 || std::abs(gamma) <= eps * std::sqrt(alpha * beta)) continue;
                rotated = true;
                const double zeta = (beta - alpha) / (2.0 * gamma);
                const double t = (zeta >= 0.0 ? 1.0 : -1.0) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double cs = 1.0 / std::sqrt(1.0 + t * t);
                const double sn = cs * t;
                for (std::size_t r = 0; r < m; ++r) {
                    const double x = wi[r];
                    const double y = wj[r];
                    wi[r] = cs * x - sn * y;
                    wj[r] = sn * x + cs * y;
                }
                auto& vi = vcols[i];
                auto& vj = vcols[j];
                for (std::size_t r = 0; r < n; ++r) {
                    const double x = vi[r];
                    const double y = vj[r];
                    vi[r] = cs * x - sn * y;
                    vj[r] = sn * x + cs * y;
                }
            }
        if (!rotated) break;
    }

    std::vector<double> sig(n);
    for (std::size_t j = 0; j < n; ++j) sig[j] = norm2(w[j]);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return sig[x] > sig[y]; });
    const double smax = n ? sig[order[0]] : 0.0;
    const double tol = static_cast<double>(std::max(m, n)) * eps * smax;
    std::size_t rank = 0;
    while (rank < n && sig[order[rank]] > tol && sig[order[rank]] > 0.0) ++rank;

    // Left factor of the (possibly transposed) matrix from w, right from v.
    Matrix left(m, rank), right(n, rank);
    std::vector<double> sigma(rank);
    for (std::size_t k = 0; k < rank; ++k) {
        const std::size_t j = order[k];
        sigma[k] = sig[j];
        for (std::size_t r = 0; r < m; ++r) left(r, k) = w[j][r] / sig[j];
        for (std::size_t r = 0; r < n; ++r) right(r, k) = vcols[j][r];
    }
    SvdOracle out;
    out.sigma = std::move(sigma);
    if (flip) {
        out.u = std::move(right);
        out.v = std::move(left);
    } else {
        out.u = std::move(left);
        out.v = std::move(right);
    }
    return out;
}

std::string SemiConvergenceTable::to_csv() const {
    std::ostringstream os;
    os << "k,mean_error\n";
    for (std::size_t i = 0; i < mean_error.size(); ++i) os << (i + 1) << ',' << io::format_double(mean_error[i]) << '\n';
    return os.str();
}

SemiConvergenceTable semi_convergence_sweep(const LinearProblem& clean, const NoiseFn& noise,
                                            const SemiConvergenceOptions& opts) {
    if (!clean.truth()) throw InvalidArgument("semi_convergence_sweep: ground truth required");
    if (opts.iters < 1 || opts.trials < 1) throw InvalidArgument("semi_convergence_sweep: iters and trials must be >= 1");
    const LinearOperator& op = clean.op();

    double omega = opts.omega;
    std::optional<double> sigma;
    if (opts.method == SweepMethod::Landweber) {
        sigma = power_method_norm(op, kBoundPowerIters, kBoundPowerSeed).sigma_max;
        if (omega <= 0.0) omega = 1.9 / (*sigma * *sigma);
    } else if (omega <= 0.0) {
        omega = 1.0;
    }

    SemiConvergenceTable table;
    table.mean_error.assign(static_cast<std::size_t>(opts.iters), 0.0);
    std::seed_seq master{opts.seed};
    std::vector<std::uint32_t> trial_seeds(static_cast<std::size_t>(opts.trials));
    master.generate(trial_seeds.begin(), trial_seeds.end());
    int interior = 0;
    for (int t = 0; t < opts.trials; ++t) {
        std::vector<double> g = noise ? noise(clean.data(), trial_seeds[static_cast<std::size_t>(t)]) : clean.data();
        const LinearProblem noisy = clean.with_data(std::move(g));
        SolveResult res;
        switch (opts.method) {
        case SweepMethod::Landweber: {
            LandweberOptions lo;
            lo.omega = omega;
            lo.iters = opts.iters;
            lo.sigma_max = sigma;
            res = landweber(noisy, lo);
            break;
        }
        case SweepMethod::Kaczmarz: {
            BlockOptions bo;
            bo.omega = omega;
            bo.iters = opts.iters;
            res = kaczmarz(noisy, single_row_blocks(op.rows()), bo);
            break;
        }
        case SweepMethod::Cimmino: {
            BlockOptions bo;
            bo.omega = omega;
            bo.iters = opts.iters;
            bo.weight = BlockWeight::RowSum;
            res = cimmino(noisy, contiguous_blocks(op.rows(), op.rows()), bo);
            break;
        }
        }
        int best = 1;
        double best_err = std::numeric_limits<double>::infinity();
        for (const auto& rec : res.trace.records) {
            if (rec.k < 1) continue;
            table.mean_error[static_cast<std::size_t>(rec.k - 1)] += rec.error / opts.trials;
            if (rec.error < best_err) {
                best_err = rec.error;
                best = rec.k;
            }
        }
        table.trial_argmin.push_back(best);
        if (best > 1 && best < opts.iters) ++interior;
    }
    table.argmin = static_cast<int>(std::min_element(table.mean_error.begin(), table.mean_error.end()) -
                                    table.mean_error.begin()) + 1;
    table.interior_fraction = static_cast<double>(interior) / opts.trials;
    return table;
}

} // namespace parbeam
