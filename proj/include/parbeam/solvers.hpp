#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "parbeam/core.hpp"
#include "parbeam/linalg.hpp"

namespace parbeam {

struct PowerMethodResult {
    double sigma_max = 0.0;      ///< estimate of ||A^T A||^(1/2)
    double last_increment = 0.0; ///< relative change of the last step
    bool zero_operator = false;
};

PowerMethodResult power_method_norm(const LinearOperator& op, int iters, std::uint64_t seed);

/// Seed and iteration count used whenever a step bound is derived internally.
inline constexpr int kBoundPowerIters = 200;
inline constexpr std::uint64_t kBoundPowerSeed = 0x5eedULL;

/// Operator plus data. Construction checks adjointness of the operator on
/// three random probes and throws ContractViolation on failure.
class LinearProblem {
public:
    LinearProblem(std::shared_ptr<const LinearOperator> op, std::vector<double> g,
                  std::optional<std::vector<double>> truth = std::nullopt, std::vector<double> f0 = {});

    const LinearOperator& op() const { return *op_; }
    std::shared_ptr<const LinearOperator> op_ptr() const { return op_; }
    const std::vector<double>& data() const { return g_; }
    const std::optional<std::vector<double>>& truth() const { return truth_; }
    const std::vector<double>& initial() const { return f0_; }

    LinearProblem with_data(std::vector<double> g) const;
    LinearProblem with_initial(std::vector<double> f0) const;

private:
    std::shared_ptr<const LinearOperator> op_;
    std::vector<double> g_;
    std::optional<std::vector<double>> truth_;
    std::vector<double> f0_;
};

/// Worst relative adjointness defect |<Ax,y> - <x,A^T y>| / (||x|| ||y||)
/// over `probes` random pairs.
double adjointness_defect(const LinearOperator& op, int probes, std::uint64_t seed);

struct TraceRecord {
    int k = 0;
    double residual = 0.0;
    double error = 0.0;  ///< NaN without ground truth
    double mae_hu = 0.0; ///< NaN without ground truth
    double ms = 0.0;     ///< wall-clock milliseconds since the solver started
};

struct IterationTrace {
    std::vector<TraceRecord> records;
    std::string to_csv() const;
    void write_csv(const std::filesystem::path& path) const;
};

struct TraceOptions {
    bool enabled = true;
    HuScale hu{};
};

struct SolveResult {
    std::vector<double> f;
    IterationTrace trace;
    std::size_t inconsistent_rows = 0; ///< zero rows with nonzero data, skipped
};

struct LandweberOptions {
    double omega = 0.0;
    int iters = 1;
    bool allow_unstable = false;           ///< skip the 0 < omega < 2/sigma^2 check
    std::optional<double> sigma_max;       ///< reuse a known norm instead of estimating
    TraceOptions trace{};
};

/// Largest admissible Landweber step 2/sigma^2 for the operator.
double landweber_step_bound(const LinearOperator& op);

SolveResult landweber(const LinearProblem& problem, const LandweberOptions& opts);

/// One step f + omega * A^T (g - A f).
std::vector<double> landweber_step(const LinearOperator& op, std::span<const double> g, std::span<const double> f,
                                   double omega);

/// Diagonal weighting C_j per block.
enum class BlockWeight {
    Exact,  ///< C_j = R_j R_j^T, single-row blocks only
    Bound,  ///< C_j = gamma_j I, gamma_j = 1.05 * power-method ||R_j R_j^T||
    RowSum, ///< diag(R_j R^T 1), a SART-like diagonal; needs nonnegative entries
};
// kaczmarz uses the weights of each block on its own; cimmino sums all
// blocks, so its Bound is the full ||R R^T|| and its RowSum uses the column
// sums of the whole operator.

using Blocks = std::vector<std::vector<std::size_t>>;

/// One block per row, in row order.
Blocks single_row_blocks(std::size_t rows);
/// Contiguous blocks of `size` rows (the last may be shorter).
Blocks contiguous_blocks(std::size_t rows, std::size_t size);

struct BlockOptions {
    double omega = 1.0;
    int iters = 1; ///< sweeps for kaczmarz, iterations for cimmino
    BlockWeight weight = BlockWeight::Exact;
    TraceOptions trace{};
};

SolveResult kaczmarz(const LinearProblem& problem, const Blocks& blocks, const BlockOptions& opts);
SolveResult cimmino(const LinearProblem& problem, const Blocks& blocks, const BlockOptions& opts);

/// Thin SVD A = U diag(sigma) V^T restricted to the numerical rank.
struct SvdOracle {
    Matrix u;                  ///< m x r
    std::vector<double> sigma; ///< r, descending, positive
    Matrix v;                  ///< n x r
    std::size_t rank() const { return sigma.size(); }

    std::vector<double> pinv_apply(std::span<const double> g) const;
    /// Component of f in the orthogonal complement of ker A.
    std::vector<double> support_projection(std::span<const double> f) const;
    std::vector<double> kernel_projection(std::span<const double> f) const;
};

inline constexpr std::size_t kSvdMaxSide = 4096;

/// One-sided Jacobi SVD; throws ResourceLimit beyond kSvdMaxSide per side.
SvdOracle svd_oracle(const Matrix& a);

enum class SweepMethod { Landweber, Kaczmarz, Cimmino };

struct SemiConvergenceOptions {
    SweepMethod method = SweepMethod::Landweber;
    int iters = 1;
    int trials = 1;
    double omega = 0.0; ///< <= 0 picks 1.9/sigma^2 for Landweber, 1 otherwise
    std::uint64_t seed = 0;
};

struct SemiConvergenceTable {
    std::vector<double> mean_error;   ///< entry k-1 is iteration k
    std::vector<int> trial_argmin;    ///< per trial, in 1..iters
    int argmin = 0;                   ///< argmin of mean_error, in 1..iters
    double interior_fraction = 0.0;   ///< trials with 1 < argmin < iters
    std::string to_csv() const;
};

/// Produces noisy data from clean data for a trial seed.
using NoiseFn = std::function<std::vector<double>(std::span<const double> clean, std::uint64_t seed)>;

/// Runs `trials` noisy solves from the clean problem (which must carry the
/// ground truth) and tabulates the mean error per iteration.
SemiConvergenceTable semi_convergence_sweep(const LinearProblem& clean, const NoiseFn& noise,
                                            const SemiConvergenceOptions& opts);

} // namespace parbeam
