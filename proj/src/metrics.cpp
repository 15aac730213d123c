#include "parbeam/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "parbeam/errors.hpp"
#include "parbeam/io.hpp"

namespace parbeam {

namespace {

void require_same_size(std::span<const double> a, std::span<const double> b, const char* who) {
    if (a.size() != b.size()) throw InvalidArgument(std::string(who) + ": size mismatch");
}

std::vector<double> gaussian_taps(int size, double sigma) {
    std::vector<double> w(static_cast<std::size_t>(size));
    const double c = 0.5 * (size - 1);
    double sum = 0.0;
    for (int i = 0; i < size; ++i) {
        const double d = i - c;
        w[static_cast<std::size_t>(i)] = std::exp(-d * d / (2.0 * sigma * sigma));
        sum += w[static_cast<std::size_t>(i)];
    }
    for (auto& v : w) v /= sum;
    return w;
}

// Valid-mode separable filtering.
Array2 filter_valid(const Array2& a, const std::vector<double>& w) {
    const std::size_t n = w.size();
    const std::size_t orows = a.rows() - n + 1, ocols = a.cols() - n + 1;
    Array2 tmp(a.rows(), ocols);
    for (std::size_t r = 0; r < a.rows(); ++r)
        for (std::size_t c = 0; c < ocols; ++c) {
            double acc = 0.0;
            for (std::size_t k = 0; k < n; ++k) acc += w[k] * a(r, c + k);
            tmp(r, c) = acc;
        }
    Array2 out(orows, ocols);
    for (std::size_t r = 0; r < orows; ++r)
        for (std::size_t c = 0; c < ocols; ++c) {
            double acc = 0.0;
            for (std::size_t k = 0; k < n; ++k) acc += w[k] * tmp(r + k, c);
            out(r, c) = acc;
        }
    return out;
}

} // namespace

std::string MetricReport::csv_header() { return "mae_hu,ssim,snr_db,rel_error,radon_rel_error"; }

std::string MetricReport::csv_row() const {
    return io::format_double(mae_hu) + "," + io::format_double(ssim) + "," + io::format_double(snr_db) + "," +
           io::format_double(rel_error) + "," + io::format_double(radon_rel_error);
}

Array2 ssim_map(const Array2& x, const Array2& y, const SsimWindow& win) {
    if (x.rows() != y.rows() || x.cols() != y.cols()) throw InvalidArgument("ssim: shape mismatch");
    if (win.size < 1 || !(win.sigma > 0.0)) throw InvalidArgument("ssim: bad window");
    const auto n = static_cast<std::size_t>(win.size);
    if (x.rows() < n || x.cols() < n) throw InvalidArgument("ssim: window larger than image");
    double range = 0.0;
    if (win.dynamic_range) {
        range = *win.dynamic_range;
    } else {
        const auto [lo, hi] = std::minmax_element(y.flat().begin(), y.flat().end());
        range = *hi - *lo;
    }
    if (!(range > 0.0)) throw UndefinedMetric("ssim: zero dynamic range");
    const double c1 = (win.k1 * range) * (win.k1 * range);
    const double c2 = (win.k2 * range) * (win.k2 * range);

    const auto w = gaussian_taps(win.size, win.sigma);
    Array2 xx(x.rows(), x.cols()), yy(x.rows(), x.cols()), xy(x.rows(), x.cols());
    for (std::size_t i = 0; i < x.size(); ++i) {
        xx.flat()[i] = x.flat()[i] * x.flat()[i];
        yy.flat()[i] = y.flat()[i] * y.flat()[i];
        xy.flat()[i] = x.flat()[i] * y.flat()[i];
    }
    const Array2 mx = filter_valid(x, w), my = filter_valid(y, w);
    const Array2 sxx = filter_valid(xx, w), syy = filter_valid(yy, w), sxy = filter_valid(xy, w);
    Array2 out(mx.rows(), mx.cols());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double ux = mx.flat()[i], uy = my.flat()[i];
        const double vx = std::max(0.0, sxx.flat()[i] - ux * ux);
        const double vy = std::max(0.0, syy.flat()[i] - uy * uy);
        const double cov = sxy.flat()[i] - ux * uy;
        out.flat()[i] = ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
    }
    return out;
}

double ssim(const Array2& x, const Array2& y, const SsimWindow& win) {
    const Array2 m = ssim_map(x, y, win);
    double s = 0.0;
    for (double v : m.flat()) s += v;
    return s / static_cast<double>(m.size());
}

double mae_hu(std::span<const double> x, std::span<const double> y, const HuScale& scale) {
    require_same_size(x, y, "mae_hu");
    if (x.empty()) throw UndefinedMetric("mae_hu: empty input");
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) s += std::abs(mu_to_hu(x[i], scale) - mu_to_hu(y[i], scale));
    return s / static_cast<double>(x.size());
}

double snr_db(std::span<const double> x, std::span<const double> ref) {
    require_same_size(x, ref, "snr_db");
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        num += ref[i] * ref[i];
        den += (x[i] - ref[i]) * (x[i] - ref[i]);
    }
    if (num == 0.0) throw UndefinedMetric("snr_db: zero reference");
    if (den == 0.0) return kSnrCapDb;
    return std::min(kSnrCapDb, 10.0 * std::log10(num / den));
}

double rel_error(std::span<const double> x, std::span<const double> ref) {
    require_same_size(x, ref, "rel_error");
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        num += (x[i] - ref[i]) * (x[i] - ref[i]);
        den += ref[i] * ref[i];
    }
    if (den == 0.0) throw UndefinedMetric("rel_error: zero reference");
    return std::sqrt(num / den);
}

double radon_rel_error(std::span<const double> x, std::span<const double> ref, const LinearOperator& radon) {
    require_same_size(x, ref, "radon_rel_error");
    return rel_error(radon.apply(x), radon.apply(ref));
}

MetricReport evaluate(const Image& x, const Image& ref, const LinearOperator& radon, const HuScale& scale) {
    MetricReport r;
    r.mae_hu = mae_hu(x.values.flat(), ref.values.flat(), scale);
    r.ssim = ssim(x.values, ref.values);
    r.snr_db = snr_db(x.values.flat(), ref.values.flat());
    r.rel_error = rel_error(x.values.flat(), ref.values.flat());
    r.radon_rel_error = radon_rel_error(x.values.flat(), ref.values.flat(), radon);
    return r;
}

} // namespace parbeam
