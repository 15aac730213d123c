#pragma once

#include <span>
#include <vector>

#include "parbeam/core.hpp"
#include "parbeam/solvers.hpp"

namespace parbeam {

/// Gradient magnitudes sqrt((x[i][j]-x[i+1][j])^2 + (x[i][j]-x[i][j+1])^2),
/// shape (M-1) x (N-1). Throws InvalidArgument below 2x2.
Array2 tv_map(const Array2& x);
/// Sum of tv_map entries.
double tv_l1(const Array2& x);
/// Mean of ln(tv + eps) over the tv_map entries.
double log_sparsity(const Array2& x, double eps);
/// Sum of x_i / (x_i + delta) for nonnegative x.
double rwl1(std::span<const double> x, double delta);

struct NltvConfig {
    int window = 2;      ///< search window (2w+1)^2
    int patch = 1;       ///< patch (2a+1)^2
    double h0 = 0.1;     ///< similarity scale
    double eps = 1e-8;   ///< smoothing inside the square root
};

/// Weights w(i, j) for every pixel i and every offset j in its window. The
/// patch kernel is a separable Gaussian with sigma (a+1)/2, normalised to 1;
/// patch samples beyond the border take the nearest edge pixel.
class NltvWeights {
public:
    NltvWeights(const Array2& img, const NltvConfig& cfg);

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    int window() const { return w_; }
    /// False when pixel (r + dr, c + dc) is outside the image.
    bool valid(std::size_t r, std::size_t c, int dr, int dc) const;
    /// Weight in (0, 1]; only meaningful when valid.
    double at(std::size_t r, std::size_t c, int dr, int dc) const;

    /// Per-pixel magnitudes sqrt(eps + sum_j w_ij (u_j - u_i)^2).
    Array2 magnitudes(const Array2& u) const;
    double norm(const Array2& u) const;
    double eps() const { return eps_; }

    /// Gradient of sum_i rwl1(magnitude_i) with the weights held fixed.
    Array2 rwl1_gradient(const Array2& u, double delta) const;
    double rwl1_value(const Array2& u, double delta) const;

private:
    std::size_t index(std::size_t r, std::size_t c, int dr, int dc) const;
    std::size_t rows_, cols_;
    int w_;
    double eps_;
    std::vector<double> weights_;
};

NltvWeights nltv_weights(const Array2& img, const NltvConfig& cfg);
double nltv_norm(const Array2& img, const NltvConfig& cfg);

/// Approximate argmin_u tv_l1(u) + ||u - x||^2 / (2t) by accelerated
/// projected gradient on the dual with step 1/(8t). Returns the visited
/// primal point (x itself included) with the lowest objective.
Array2 prox_tv(const Array2& x, double t, int inner_iters = 30);
double prox_tv_objective(const Array2& u, const Array2& x, double t);

struct FistaOptions {
    double lambda = 0.0;
    double step = 0.0;          ///< <= 0 picks 1/sigma^2
    int iters = 1;
    int prox_iters = 30;
    bool allow_large_step = false;
    std::size_t image_rows = 0; ///< 0 means a square image
    TraceOptions trace{};
};

struct RegularizedResult {
    SolveResult solve;
    std::vector<double> objective;               ///< per iteration, index 0 is the start
    std::vector<std::vector<double>> prox_trace; ///< regularizer value per prox sub-step
};

/// FISTA on 0.5 ||Rf - g||^2 + lambda * tv_l1(f).
RegularizedResult fista_tv(const LinearProblem& problem, const FistaOptions& opts);

struct NltvSchemeOptions {
    NltvConfig nltv{};
    double gamma = 0.0;
    double delta = 0.05;     ///< rwl1 scale applied to NLTV magnitudes
    int outer_iters = 1;
    double omega = 0.0;      ///< Landweber step, <= 0 picks 1/sigma^2
    int prox_steps = 5;
    double prox_step = 1e-2; ///< initial step, halved until the prox objective drops
    std::size_t image_rows = 0;
    TraceOptions trace{};
};

/// Iterates
///   f <- f + omega R^T (g_k - R u),
///   u <- approx argmin gamma rwl1(NLTV(u)) + 0.5 ||u - f||^2,
///   g_k <- g_k + (g - R u),
/// starting from u = f = f0 and g_k = g. Returns u.
RegularizedResult nltv_scheme(const LinearProblem& problem, const NltvSchemeOptions& opts);

} // namespace parbeam
