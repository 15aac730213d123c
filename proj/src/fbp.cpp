#include "parbeam/fbp.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "parbeam/errors.hpp"
#include "parbeam/linalg.hpp"
#include "parbeam/parallel.hpp"

namespace parbeam {

namespace {

constexpr double kPi = std::numbers::pi;

double sinc(double x) { return x == 0.0 ? 1.0 : std::sin(x) / x; }

// Closed form at s = pi*l/omega.
double ramlak_grid_tap(double omega, int l) {
    const double scale = omega * omega / (2.0 * kPi * kPi);
    if (l == 0) return scale * 0.25;
    if (l % 2 == 0) return 0.0;
    return -scale / (kPi * kPi * static_cast<double>(l) * static_cast<double>(l));
}

} // namespace

double ramlak_value(double omega, double s) {
    const double x = omega * s;
    const double half = sinc(0.5 * x);
    return omega * omega / (4.0 * kPi * kPi) * (sinc(x) - 0.5 * half * half);
}

std::vector<double> ramlak_taps(double omega, int half_length) {
    if (!(omega > 0.0)) throw InvalidArgument("ramlak_taps: band limit must be positive");
    if (half_length < 1) throw InvalidArgument("ramlak_taps: half length must be >= 1");
    std::vector<double> taps(static_cast<std::size_t>(2 * half_length + 1));
    for (int l = -half_length; l <= half_length; ++l)
        taps[static_cast<std::size_t>(l + half_length)] = ramlak_grid_tap(omega, l);
    return taps;
}

Filter Filter::ram_lak(const Geometry& geom, double omega) {
    if (!(omega > 0.0)) throw InvalidArgument("Filter::ram_lak: band limit must be positive");
    Filter f;
    f.kind = FilterKind::RamLak;
    f.omega = omega;
    f.half_length = 2 * geom.half_bins();
    const double ds = geom.bin_step();
    if (omega == kPi / ds) {
        f.taps = ramlak_taps(omega, f.half_length);
    } else {
        f.taps.resize(static_cast<std::size_t>(2 * f.half_length + 1));
        for (int m = -f.half_length; m <= f.half_length; ++m)
            f.taps[static_cast<std::size_t>(m + f.half_length)] = ramlak_value(omega, m * ds);
    }
    return f;
}

Filter Filter::custom(std::vector<double> taps, double omega) {
    if (taps.size() % 2 == 0 || taps.empty()) throw InvalidArgument("Filter::custom: tap count must be odd");
    Filter f;
    f.kind = FilterKind::Custom;
    f.omega = omega;
    f.half_length = static_cast<int>(taps.size() / 2);
    f.taps = std::move(taps);
    return f;
}

FbpPlan make_fbp_plan(const Geometry& geom, double omega) {
    const double w = omega > 0.0 ? omega : kPi / geom.bin_step();
    return make_fbp_plan(geom, Filter::ram_lak(geom, w));
}

FbpPlan make_fbp_plan(const Geometry& geom, Filter filter) {
    if (filter.half_length < 2 * geom.half_bins())
        throw InvalidArgument("make_fbp_plan: filter must span 2q = " + std::to_string(2 * geom.half_bins()) + " bins");
    FbpPlan plan{geom, std::move(filter), false, false};
    if (plan.filter.omega > 0.0) {
        plan.detector_sampling_ok = geom.bin_step() <= kPi / plan.filter.omega * (1.0 + 1e-12);
        plan.angular_sampling_ok = geom.num_angles() >= plan.filter.omega * geom.radius() * (1.0 - 1e-12);
    }
    return plan;
}

Sinogram filter_projections(const Sinogram& sino, const Filter& filter) {
    const Geometry& g = sino.geom;
    const int q = g.half_bins();
    if (filter.half_length < 2 * q)
        throw InvalidArgument("filter_projections: filter spans " + std::to_string(filter.half_length) +
                              " bins, need " + std::to_string(2 * q));
    const double ds = g.bin_step();
    Sinogram out(g);
    parallel_for(0, static_cast<std::size_t>(g.num_angles()), [&](std::size_t j) {
        for (int k = -q; k <= q; ++k) {
            double acc = 0.0;
            for (int l = -q; l <= q; ++l) acc += filter.tap(k - l) * sino.values(j, static_cast<std::size_t>(l + q));
            out.values(j, static_cast<std::size_t>(k + q)) = ds * acc;
        }
    });
    return out;
}

Image reconstruct_fbp(const Sinogram& sino, const FbpPlan& plan) {
    if (!(sino.geom == plan.geom)) throw InvalidArgument("reconstruct_fbp: sinogram geometry differs from plan");
    const Sinogram h = filter_projections(sino, plan.filter);
    const Geometry& g = plan.geom;
    const int q = g.half_bins();
    const int p = g.num_angles();
    const double weight = 2.0 * kPi / p;
    Image out(g);
    parallel_for(0, static_cast<std::size_t>(g.image_side()), [&](std::size_t row) {
        const int k = static_cast<int>(row) - q;
        for (int l = -q; l <= q; ++l) {
            if (!inside_disk(g, k, l)) continue;
            double acc = 0.0;
            for (int j = 0; j < p; ++j) {
                const Direction d = g.direction(j);
                const double t = k * d.c + l * d.s;
                const double ft = std::floor(t);
                const double nu = t - ft;
                const int b0 = static_cast<int>(ft);
                const double h0 = (b0 >= -q && b0 <= q) ? h.values(static_cast<std::size_t>(j), static_cast<std::size_t>(b0 + q)) : 0.0;
                const double h1 =
                    (b0 + 1 >= -q && b0 + 1 <= q) ? h.values(static_cast<std::size_t>(j), static_cast<std::size_t>(b0 + 1 + q)) : 0.0;
                acc += (1.0 - nu) * h0 + nu * h1;
            }
            out.values(row, static_cast<std::size_t>(l + q)) = weight * acc;
        }
    });
    return out;
}

double shift_invariance_defect(const Projector& proj, const FbpPlan& plan, const Image& img, int a, int b) {
    const Image shifted = shift_image(img, a, b);
    const Image w_f = reconstruct_fbp(proj.forward(img), plan);
    const Image w_shifted = reconstruct_fbp(proj.forward(shifted), plan);
    // Shifting the reconstruction may push small ringing outside the disk;
    // that part is dropped rather than treated as a support violation.
    const Geometry& g = img.geom;
    const int q = g.half_bins();
    Image shift_w(g);
    for (int k = -q; k <= q; ++k)
        for (int l = -q; l <= q; ++l) {
            const int sk = k - a;
            const int sl = l - b;
            if (sk < -q || sk > q || sl < -q || sl > q) continue;
            if (inside_disk(g, k, l)) shift_w.at(k, l) = w_f.at(sk, sl);
        }
    const double denom = norm2(w_f.values.flat());
    if (denom == 0.0) return 0.0;
    std::vector<double> diff(w_shifted.values.flat().begin(), w_shifted.values.flat().end());
    axpy(-1.0, shift_w.values.flat(), diff);
    return norm2(diff) / denom;
}

} // namespace parbeam
