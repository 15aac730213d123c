#include "parbeam/radon.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "parbeam/errors.hpp"
#include "parbeam/parallel.hpp"

namespace parbeam {

Projector::Projector(const Geometry& geom, ProjectorOptions opts) : geom_(geom) {
    const int q = geom.half_bins();
    // Each of the 2q+3 samples touches at most 4 pixels.
    const std::size_t estimate = num_rays() * static_cast<std::size_t>(2 * q + 3) * 4;
    if (estimate > opts.cache_entries) return;

    rows_.resize(num_rays());
    parallel_for(0, num_rays(), [&](std::size_t r) { rows_[r] = build_row(r); });

    const std::size_t npix = num_pixels();
    col_start_.assign(npix + 1, 0);
    for (const auto& row : rows_)
        for (auto p : row.pixels) ++col_start_[static_cast<std::size_t>(p) + 1];
    for (std::size_t e = 0; e < npix; ++e) col_start_[e + 1] += col_start_[e];
    col_rays_.resize(col_start_.back());
    col_weights_.resize(col_start_.back());
    std::vector<std::size_t> fill(col_start_.begin(), col_start_.end() - 1);
    for (std::size_t r = 0; r < rows_.size(); ++r) {
        const auto& row = rows_[r];
        for (std::size_t i = 0; i < row.pixels.size(); ++i) {
            const auto e = static_cast<std::size_t>(row.pixels[i]);
            col_rays_[fill[e]] = static_cast<std::int32_t>(r);
            col_weights_[fill[e]] = row.weights[i];
            ++fill[e];
        }
    }
}

RayRow Projector::build_row(std::size_t r) const {
    const int q = geom_.half_bins();
    const int nb = geom_.num_bins();
    const int n = geom_.image_side();
    const int j = static_cast<int>(r) / nb;
    const int l = static_cast<int>(r) % nb - q;
    const Direction d = geom_.direction(j);

    std::vector<std::pair<std::int32_t, double>> taps;
    taps.reserve(static_cast<std::size_t>(4 * (2 * q + 3)));
    for (int k = -(q + 1); k <= q + 1; ++k) {
        // Sample point in pixel units, origin at the centre pixel.
        const double u = l * d.c - k * d.s;
        const double v = l * d.s + k * d.c;
        const double fu0 = std::floor(u);
        const double fv0 = std::floor(v);
        const double au = u - fu0;
        const double av = v - fv0;
        const int i0 = static_cast<int>(fu0) + q;
        const int j0 = static_cast<int>(fv0) + q;
        const double wts[4] = {(1.0 - au) * (1.0 - av), (1.0 - au) * av, au * (1.0 - av), au * av};
        const int di[4] = {0, 0, 1, 1};
        const int dj[4] = {0, 1, 0, 1};
        for (int c = 0; c < 4; ++c) {
            const int ii = i0 + di[c];
            const int jj = j0 + dj[c];
            if (wts[c] == 0.0 || ii < 0 || ii >= n || jj < 0 || jj >= n) continue;
            taps.emplace_back(ii * n + jj, wts[c]);
        }
    }
    std::stable_sort(taps.begin(), taps.end(), [](const auto& a, const auto& b) { return a.first < b.first; });

    RayRow row;
    const double ds = geom_.bin_step();
    for (std::size_t i = 0; i < taps.size();) {
        const std::int32_t pix = taps[i].first;
        double w = 0.0;
        for (; i < taps.size() && taps[i].first == pix; ++i) w += taps[i].second;
        row.pixels.push_back(pix);
        row.weights.push_back(w * ds);
    }
    return row;
}

RayRow Projector::row(std::size_t r) const { return cached() ? rows_[r] : build_row(r); }

double Projector::row_dot(std::size_t r, std::span<const double> image) const {
    auto dot_row = [&](const RayRow& row) {
        double acc = 0.0;
        for (std::size_t i = 0; i < row.pixels.size(); ++i)
            acc += row.weights[i] * image[static_cast<std::size_t>(row.pixels[i])];
        return acc;
    };
    return cached() ? dot_row(rows_[r]) : dot_row(build_row(r));
}

void Projector::row_scatter_add(std::size_t r, double value, std::span<double> image) const {
    auto scatter = [&](const RayRow& row) {
        for (std::size_t i = 0; i < row.pixels.size(); ++i)
            image[static_cast<std::size_t>(row.pixels[i])] += row.weights[i] * value;
    };
    if (cached())
        scatter(rows_[r]);
    else
        scatter(build_row(r));
}

void Projector::forward(std::span<const double> image, std::span<double> sino) const {
    if (image.size() != num_pixels() || sino.size() != num_rays())
        throw InvalidArgument("Projector::forward: shape mismatch with geometry");
    parallel_for(0, num_rays(), [&](std::size_t r) { sino[r] = row_dot(r, image); });
}

void Projector::adjoint(std::span<const double> sino, std::span<double> image) const {
    if (image.size() != num_pixels() || sino.size() != num_rays())
        throw InvalidArgument("Projector::adjoint: shape mismatch with geometry");
    if (cached()) {
        parallel_for(0, num_pixels(), [&](std::size_t e) {
            double acc = 0.0;
            for (std::size_t i = col_start_[e]; i < col_start_[e + 1]; ++i)
                acc += col_weights_[i] * sino[static_cast<std::size_t>(col_rays_[i])];
            image[e] = acc;
        });
        return;
    }
    std::fill(image.begin(), image.end(), 0.0);
    for (std::size_t r = 0; r < num_rays(); ++r) row_scatter_add(r, sino[r], image);
}

Sinogram Projector::forward(const Image& img) const {
    if (!(img.geom == geom_)) throw InvalidArgument("Projector::forward: image geometry differs from projector");
    Sinogram out(geom_);
    forward(img.values.flat(), out.values.flat());
    return out;
}

Image Projector::adjoint_backproject(const Sinogram& sino) const {
    if (!(sino.geom == geom_))
        throw InvalidArgument("Projector::adjoint_backproject: sinogram geometry differs from projector");
    Image out(geom_);
    adjoint(sino.values.flat(), out.values.flat());
    return out;
}

Image Projector::backproject(const Sinogram& sino) const {
    if (!(sino.geom == geom_)) throw InvalidArgument("Projector::backproject: sinogram geometry differs from projector");
    const int q = geom_.half_bins();
    const int n = geom_.image_side();
    const int p = geom_.num_angles();
    const double alpha = 2.0 * std::numbers::pi / p;
    Image out(geom_);
    auto& vals = out.values;
    parallel_for(0, static_cast<std::size_t>(n), [&](std::size_t row) {
        const int k = static_cast<int>(row) - q;
        for (int l = -q; l <= q; ++l) {
            double acc = 0.0;
            for (int j = 0; j < p; ++j) {
                const Direction d = geom_.direction(j);
                const double t = k * d.c + l * d.s;
                const double ft = std::floor(t);
                const double nu = t - ft;
                const int b0 = static_cast<int>(ft);
                const double h0 = (b0 >= -q && b0 <= q) ? sino.values(static_cast<std::size_t>(j), static_cast<std::size_t>(b0 + q)) : 0.0;
                const double h1 =
                    (b0 + 1 >= -q && b0 + 1 <= q) ? sino.values(static_cast<std::size_t>(j), static_cast<std::size_t>(b0 + 1 + q)) : 0.0;
                acc += (1.0 - nu) * h0 + nu * h1;
            }
            vals(row, static_cast<std::size_t>(l + q)) = alpha * acc;
        }
    });
    return out;
}

DenseOperator materialize(const Projector& proj, std::size_t max_entries) {
    const std::size_t rows = proj.num_rays();
    const std::size_t cols = proj.num_pixels();
    if (cols != 0 && rows > max_entries / cols)
        throw ResourceLimit("materialize: " + std::to_string(rows) + "x" + std::to_string(cols) +
                            " exceeds the cap of " + std::to_string(max_entries) + " entries");
    Matrix m(rows, cols);
    for (std::size_t r = 0; r < rows; ++r) {
        const RayRow row = proj.row(r);
        for (std::size_t i = 0; i < row.pixels.size(); ++i) m(r, static_cast<std::size_t>(row.pixels[i])) = row.weights[i];
    }
    return {proj.geometry(), std::move(m)};
}

void ProjectorOperator::apply_rows(std::span<const std::size_t> rows, std::span<const double> x,
                                   std::span<double> out) const {
    for (std::size_t i = 0; i < rows.size(); ++i) out[i] = proj_->row_dot(rows[i], x);
}

void ProjectorOperator::adjoint_rows_add(std::span<const std::size_t> rows, std::span<const double> vals,
                                         std::span<double> x) const {
    for (std::size_t i = 0; i < rows.size(); ++i) proj_->row_scatter_add(rows[i], vals[i], x);
}

} // namespace parbeam
