#include "parbeam/core.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "parbeam/errors.hpp"

namespace parbeam {

Array2::Array2(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
        throw InvalidArgument("Array2: data size " + std::to_string(data_.size()) + " != " +
                              std::to_string(rows_) + "x" + std::to_string(cols_));
    }
}

Array2 transpose(const Array2& a) {
    Array2 t(a.cols(), a.rows());
    for (std::size_t r = 0; r < a.rows(); ++r)
        for (std::size_t c = 0; c < a.cols(); ++c) t(c, r) = a(r, c);
    return t;
}

Geometry::Geometry(int p, int q, double rho) : p_(p), q_(q), rho_(rho) {
    dirs_.reserve(static_cast<std::size_t>(p));
    for (int j = 0; j < p; ++j) {
        const double phi = j * angle_step();
        dirs_.push_back({std::cos(phi), std::sin(phi)});
    }
}

double Geometry::angle_step() const { return std::numbers::pi / p_; }

Geometry make_geometry(int p, int q, double radius) {
    if (p < 1) throw InvalidArgument("make_geometry: num_angles must be >= 1, got " + std::to_string(p));
    if (q < 1) throw InvalidArgument("make_geometry: half_bins must be >= 1, got " + std::to_string(q));
    if (!(radius > 0.0) || !std::isfinite(radius))
        throw InvalidArgument("make_geometry: radius must be positive and finite");
    return Geometry(p, q, radius);
}

Image::Image(const Geometry& g)
    : geom(g), values(static_cast<std::size_t>(g.image_side()), static_cast<std::size_t>(g.image_side())) {}

Image::Image(const Geometry& g, Array2 v) : geom(g), values(std::move(v)) {
    const auto n = static_cast<std::size_t>(g.image_side());
    if (values.rows() != n || values.cols() != n)
        throw InvalidArgument("Image: array shape does not match geometry side " + std::to_string(n));
}

double Image::at(int k, int l) const {
    const int q = geom.half_bins();
    return values(static_cast<std::size_t>(k + q), static_cast<std::size_t>(l + q));
}

double& Image::at(int k, int l) {
    const int q = geom.half_bins();
    return values(static_cast<std::size_t>(k + q), static_cast<std::size_t>(l + q));
}

Sinogram::Sinogram(const Geometry& g)
    : geom(g), values(static_cast<std::size_t>(g.num_angles()), static_cast<std::size_t>(g.num_bins())) {}

Sinogram::Sinogram(const Geometry& g, Array2 v) : geom(g), values(std::move(v)) {
    if (values.rows() != static_cast<std::size_t>(g.num_angles()) ||
        values.cols() != static_cast<std::size_t>(g.num_bins()))
        throw InvalidArgument("Sinogram: array shape does not match geometry");
}

HuScale::HuScale(double mu_w) : mu_water(mu_w) {
    if (!(mu_w > 0.0)) throw InvalidArgument("HuScale: mu_water must be positive");
}

double hu_to_mu(double hu, const HuScale& scale) { return scale.mu_water * (1.0 + hu / 1000.0); }

double mu_to_hu(double mu, const HuScale& scale) { return 1000.0 * (mu / scale.mu_water - 1.0); }

namespace {

// Extent of the ellipse from the origin, maximised over its boundary.
double ellipse_reach(const Ellipse& e) {
    return std::hypot(e.cx, e.cy) + std::max(e.a, e.b);
}

bool ellipse_contains(const Ellipse& e, double x, double y) {
    const double c = std::cos(e.theta);
    const double s = std::sin(e.theta);
    const double dx = x - e.cx;
    const double dy = y - e.cy;
    const double u = c * dx + s * dy;
    const double v = -s * dx + c * dy;
    return (u * u) / (e.a * e.a) + (v * v) / (e.b * e.b) <= 1.0;
}

} // namespace

bool inside_disk(const Geometry& geom, int k, int l) {
    const double ds = geom.bin_step();
    const double r2 = (static_cast<double>(k) * k + static_cast<double>(l) * l) * ds * ds;
    return r2 <= geom.radius() * geom.radius() * (1.0 + 1e-12);
}

Image rasterize_phantom(const Phantom& ph, const Geometry& geom) {
    for (const auto& e : ph.ellipses) {
        if (!(e.a > 0.0) || !(e.b > 0.0))
            throw InvalidArgument("rasterize_phantom: ellipse semi-axes must be positive");
        if (ellipse_reach(e) > geom.radius() * (1.0 + 1e-12))
            throw InvalidArgument("rasterize_phantom: ellipse escapes the reconstruction disk");
    }
    Image img(geom);
    const int q = geom.half_bins();
    const double ds = geom.bin_step();
    for (int k = -q; k <= q; ++k) {
        for (int l = -q; l <= q; ++l) {
            if (!inside_disk(geom, k, l)) continue;
            double v = ph.background;
            for (const auto& e : ph.ellipses)
                if (ellipse_contains(e, k * ds, l * ds)) v += e.value;
            img.at(k, l) = v;
        }
    }
    return img;
}

double phantom_line_integral(const Phantom& ph, Direction theta, double s) {
    // Line x(t) = s*theta + t*theta_perp.
    double total = 0.0;
    const double px = s * theta.c;
    const double py = s * theta.s;
    const double tx = -theta.s;
    const double ty = theta.c;
    for (const auto& e : ph.ellipses) {
        const double c = std::cos(e.theta);
        const double sn = std::sin(e.theta);
        // Coordinates in the ellipse frame: u = u0 + t*du, v = v0 + t*dv.
        const double u0 = c * (px - e.cx) + sn * (py - e.cy);
        const double v0 = -sn * (px - e.cx) + c * (py - e.cy);
        const double du = c * tx + sn * ty;
        const double dv = -sn * tx + c * ty;
        const double A = du * du / (e.a * e.a) + dv * dv / (e.b * e.b);
        const double B = 2.0 * (u0 * du / (e.a * e.a) + v0 * dv / (e.b * e.b));
        const double C = u0 * u0 / (e.a * e.a) + v0 * v0 / (e.b * e.b) - 1.0;
        const double disc = B * B - 4.0 * A * C;
        if (disc > 0.0) total += e.value * std::sqrt(disc) / A;
    }
    return total;
}

Phantom shepp_logan(const Geometry& geom, const HuScale& scale) {
    // Modified Shepp-Logan layout: bone rim, water-like brain, darker
    // ventricles and small dense nodules. Values are HU increments over air.
    struct Spec {
        double value_hu, a, b, cx, cy, deg;
    };
    static constexpr Spec table[] = {
        {1800.0, 0.69, 0.92, 0.0, 0.0, 0.0},     {-800.0, 0.6624, 0.8740, 0.0, -0.0184, 0.0},
        {-150.0, 0.11, 0.31, 0.22, 0.0, -18.0},  {-150.0, 0.16, 0.41, -0.22, 0.0, 18.0},
        {60.0, 0.21, 0.25, 0.0, 0.35, 0.0},      {60.0, 0.046, 0.046, 0.0, 0.1, 0.0},
        {60.0, 0.046, 0.046, 0.0, -0.1, 0.0},    {60.0, 0.046, 0.023, -0.08, -0.605, 0.0},
        {60.0, 0.023, 0.023, 0.0, -0.606, 0.0},  {60.0, 0.023, 0.046, 0.06, -0.605, 0.0},
    };
    // The outer ellipse reaches 0.92; scale so it fits inside the disk.
    const double k = 0.95 * geom.radius() / 0.92;
    Phantom ph;
    for (const auto& t : table) {
        Ellipse e;
        // Table is in (x, y) image coordinates with y vertical; map y to the
        // first array axis so the head is upright in row-major previews.
        e.cx = -t.cy * k;
        e.cy = t.cx * k;
        e.a = t.b * k;
        e.b = t.a * k;
        e.theta = t.deg * std::numbers::pi / 180.0;
        e.value = t.value_hu / 1000.0 * scale.mu_water;
        ph.ellipses.push_back(e);
    }
    return ph;
}

Image gaussian_blob(const Geometry& geom, double cx, double cy, double sigma, double amplitude) {
    if (!(sigma > 0.0)) throw InvalidArgument("gaussian_blob: sigma must be positive");
    Image img(geom);
    const int q = geom.half_bins();
    const double ds = geom.bin_step();
    for (int k = -q; k <= q; ++k)
        for (int l = -q; l <= q; ++l) {
            if (!inside_disk(geom, k, l)) continue;
            const double dx = k * ds - cx;
            const double dy = l * ds - cy;
            const double r2 = dx * dx + dy * dy;
            if (r2 > kBlobCutoff * kBlobCutoff * sigma * sigma) continue;
            img.at(k, l) = amplitude * std::exp(-r2 / (2.0 * sigma * sigma));
        }
    return img;
}

Image shift_image(const Image& img, int a, int b) {
    const Geometry& g = img.geom;
    const int q = g.half_bins();
    Image out(g);
    for (int k = -q; k <= q; ++k) {
        for (int l = -q; l <= q; ++l) {
            const double v = img.at(k, l);
            if (v == 0.0) continue;
            const int nk = k + a;
            const int nl = l + b;
            if (nk < -q || nk > q || nl < -q || nl > q || !inside_disk(g, nk, nl))
                throw SupportViolation("shift_image: pixel (" + std::to_string(k) + "," + std::to_string(l) +
                                       ") would leave the reconstruction disk");
            out.at(nk, nl) = v;
        }
    }
    return out;
}

} // namespace parbeam
