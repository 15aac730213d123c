#pragma once

#include <optional>
#include <span>
#include <string>

#include "parbeam/core.hpp"
#include "parbeam/linalg.hpp"

namespace parbeam {

struct MetricReport {
    double mae_hu = 0.0;
    double ssim = 0.0;
    double snr_db = 0.0;
    double rel_error = 0.0;
    double radon_rel_error = 0.0;

    static std::string csv_header(); ///< mae_hu,ssim,snr_db,rel_error,radon_rel_error
    std::string csv_row() const;
};

struct SsimWindow {
    int size = 11;
    double sigma = 1.5;
    double k1 = 0.01;
    double k2 = 0.03;
    /// Dynamic range L; unset takes max - min of the second argument.
    std::optional<double> dynamic_range;
};

inline constexpr double kSnrCapDb = 300.0;

/// Mean SSIM over all fully contained windows (stride 1). Throws
/// InvalidArgument on shape mismatch or when the window does not fit, and
/// UndefinedMetric when the dynamic range is zero.
double ssim(const Array2& x, const Array2& y, const SsimWindow& win = {});
/// Every windowed index, row-major over window positions.
Array2 ssim_map(const Array2& x, const Array2& y, const SsimWindow& win = {});

double mae_hu(std::span<const double> x, std::span<const double> y, const HuScale& scale = HuScale{});
/// 10 log10(||ref||^2 / ||x - ref||^2), capped at kSnrCapDb.
double snr_db(std::span<const double> x, std::span<const double> ref);
double rel_error(std::span<const double> x, std::span<const double> ref);
double radon_rel_error(std::span<const double> x, std::span<const double> ref, const LinearOperator& radon);

MetricReport evaluate(const Image& x, const Image& ref, const LinearOperator& radon, const HuScale& scale = HuScale{});

} // namespace parbeam
