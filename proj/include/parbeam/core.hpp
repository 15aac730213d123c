#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace parbeam {

/// Dense row-major 2-D array of doubles.
class Array2 {
public:
    Array2() = default;
    Array2(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    Array2(std::size_t rows, std::size_t cols, std::vector<double> data);

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<double> flat() { return data_; }
    std::span<const double> flat() const { return data_; }
    std::vector<double>& vec() { return data_; }
    const std::vector<double>& vec() const { return data_; }

    bool operator==(const Array2&) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

Array2 transpose(const Array2& a);

struct Direction {
    double c; ///< cos(phi)
    double s; ///< sin(phi)
};

/// Parallel-beam scan: p angles evenly spread over [0, pi), 2q+1 detector
/// bins at l*ds for l = -q..q, reconstruction disk of the given radius.
class Geometry {
public:
    int num_angles() const { return p_; }
    int half_bins() const { return q_; }
    int num_bins() const { return 2 * q_ + 1; }
    int image_side() const { return 2 * q_ + 1; }
    double radius() const { return rho_; }
    double angle_step() const;
    double bin_step() const { return rho_ / q_; }
    double angle(int j) const { return j * angle_step(); }
    Direction direction(int j) const { return dirs_[static_cast<std::size_t>(j)]; }
    /// Detector offset of bin l, l in [-q, q].
    double bin_offset(int l) const { return l * bin_step(); }

    bool operator==(const Geometry& o) const { return p_ == o.p_ && q_ == o.q_ && rho_ == o.rho_; }

    friend Geometry make_geometry(int p, int q, double radius);

private:
    Geometry(int p, int q, double rho);
    int p_;
    int q_;
    double rho_;
    std::vector<Direction> dirs_;
};

/// Validates p >= 1, q >= 1, radius > 0; throws InvalidArgument otherwise.
Geometry make_geometry(int p, int q, double radius);

/// N x N image with N = 2q+1; pixel (k, l), k,l in [-q, q], sits at
/// (k ds, l ds) and is stored at row k+q, column l+q.
struct Image {
    Geometry geom;
    Array2 values;

    explicit Image(const Geometry& g);
    Image(const Geometry& g, Array2 v);

    int side() const { return geom.image_side(); }
    double spacing() const { return geom.bin_step(); }
    /// Pixel by centred coordinates.
    double at(int k, int l) const;
    double& at(int k, int l);
};

/// p x (2q+1) line-integral table indexed (angle j, bin l+q).
struct Sinogram {
    Geometry geom;
    Array2 values;

    explicit Sinogram(const Geometry& g);
    Sinogram(const Geometry& g, Array2 v);
};

struct HuScale {
    double mu_water = 0.2;

    explicit HuScale(double mu_w = 0.2);
};

double hu_to_mu(double hu, const HuScale& scale);
double mu_to_hu(double mu, const HuScale& scale);

struct Ellipse {
    double cx = 0.0;
    double cy = 0.0;
    double a = 0.0;     ///< semi-axis along the rotated first coordinate
    double b = 0.0;     ///< semi-axis along the rotated second coordinate
    double theta = 0.0; ///< rotation in radians
    double value = 0.0; ///< additive attenuation
};

struct Phantom {
    std::vector<Ellipse> ellipses;
    double background = 0.0;
};

/// Sums ellipse values at every pixel centre; pixels beyond the disk are 0.
/// Throws InvalidArgument if an ellipse reaches outside the disk.
Image rasterize_phantom(const Phantom& ph, const Geometry& geom);

/// Exact line integral of the phantom along {x : <x, theta> = s}, for
/// analytic comparisons against the discrete projector.
double phantom_line_integral(const Phantom& ph, Direction theta, double s);

/// Shepp-Logan style head phantom scaled to the disk, in attenuation units
/// of the given HU scale (soft tissue near water).
Phantom shepp_logan(const Geometry& geom, const HuScale& scale = HuScale{});

/// Isotropic Gaussian blob cut off at kBlobCutoff * sigma, zero outside the disk.
inline constexpr double kBlobCutoff = 8.0;
Image gaussian_blob(const Geometry& geom, double cx, double cy, double sigma, double amplitude = 1.0);

/// Translates by (a, b) pixels: out(k, l) = in(k - a, l - b).
/// Throws SupportViolation if a nonzero pixel would land outside the disk.
Image shift_image(const Image& img, int a, int b);

/// True when the pixel centre (k, l) lies inside the closed disk.
bool inside_disk(const Geometry& geom, int k, int l);

} // namespace parbeam
