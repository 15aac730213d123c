#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <vector>

#include "parbeam/core.hpp"
#include "parbeam/linalg.hpp"

namespace parbeam {

/// One sinogram entry as a sparse row over flattened pixels. Indices are
/// strictly ascending; weights already include the ray step ds.
struct RayRow {
    std::vector<std::int32_t> pixels;
    std::vector<double> weights;
};

struct ProjectorOptions {
    /// Rows are precomputed when the total nonzero count stays below this.
    std::size_t cache_entries = std::size_t{1} << 22;
};

/// Discrete parallel-beam Radon transform with bilinear line sampling.
///
/// Ray (j, l) is sampled at s_l*theta_j + k*ds*theta_j_perp for
/// |k*ds| <= radius + ds, every sample interpolated with the tent kernel
/// max(0, 1-|u|/ds) * max(0, 1-|v|/ds), and the samples summed times ds so
/// the result approximates the line integral. Per ray, the kernel weights
/// are merged per pixel and the dot product runs in ascending pixel order;
/// the materialized matrix reproduces it bit for bit.
class Projector {
public:
    explicit Projector(const Geometry& geom, ProjectorOptions opts = {});

    const Geometry& geometry() const { return geom_; }
    std::size_t num_rays() const { return static_cast<std::size_t>(geom_.num_angles() * geom_.num_bins()); }
    std::size_t num_pixels() const {
        const auto n = static_cast<std::size_t>(geom_.image_side());
        return n * n;
    }
    bool cached() const { return !rows_.empty(); }

    Sinogram forward(const Image& img) const;
    /// Quadrature backprojection: pixel x gets (2 pi / p) * sum_j of row j
    /// linearly interpolated at <x, theta_j>.
    Image backproject(const Sinogram& sino) const;
    /// Exact transpose of forward.
    Image adjoint_backproject(const Sinogram& sino) const;

    void forward(std::span<const double> image, std::span<double> sino) const;
    void adjoint(std::span<const double> sino, std::span<double> image) const;

    /// Sparse row of ray r = j*(2q+1) + (l+q).
    RayRow row(std::size_t r) const;
    double row_dot(std::size_t r, std::span<const double> image) const;
    void row_scatter_add(std::size_t r, double value, std::span<double> image) const;

private:
    RayRow build_row(std::size_t r) const;

    Geometry geom_;
    std::vector<RayRow> rows_;
    // Column-major copy of the cached rows: for each pixel, (ray, weight) in
    // ascending ray order.
    std::vector<std::size_t> col_start_;
    std::vector<std::int32_t> col_rays_;
    std::vector<double> col_weights_;
};

/// Materialized matrix of a projector: rows p(2q+1), cols N^2.
struct DenseOperator {
    Geometry geom;
    Matrix matrix;
};

/// Throws ResourceLimit when N^2 * p(2q+1) exceeds max_entries.
DenseOperator materialize(const Projector& proj, std::size_t max_entries = std::size_t{1} << 26);

/// Projector viewed as a LinearOperator (adjoint = exact transpose).
class ProjectorOperator final : public LinearOperator {
public:
    explicit ProjectorOperator(std::shared_ptr<const Projector> proj) : proj_(std::move(proj)) {}
    std::size_t rows() const override { return proj_->num_rays(); }
    std::size_t cols() const override { return proj_->num_pixels(); }
    void apply(std::span<const double> x, std::span<double> y) const override { proj_->forward(x, y); }
    void adjoint(std::span<const double> y, std::span<double> x) const override { proj_->adjoint(y, x); }
    void apply_rows(std::span<const std::size_t> rows, std::span<const double> x, std::span<double> out) const override;
    void adjoint_rows_add(std::span<const std::size_t> rows, std::span<const double> vals,
                          std::span<double> x) const override;
    const Projector& projector() const { return *proj_; }

    using LinearOperator::adjoint;
    using LinearOperator::apply;

private:
    std::shared_ptr<const Projector> proj_;
};

} // namespace parbeam
