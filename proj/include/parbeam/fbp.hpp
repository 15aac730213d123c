#pragma once

#include <vector>

#include "parbeam/core.hpp"
#include "parbeam/radon.hpp"

namespace parbeam {

/// Ram-Lak kernel v(s) = W^2/(4 pi^2) (sinc(W s) - sinc^2(W s / 2) / 2)
/// with sinc(x) = sin(x)/x and band limit W.
double ramlak_value(double omega, double s);

/// Closed-form Ram-Lak taps at s = pi*l/omega for l = -L..L; entry L is l=0.
/// Even l != 0 are exactly zero.
std::vector<double> ramlak_taps(double omega, int half_length);

enum class FilterKind { RamLak, Custom };

/// Convolution taps on the detector grid: taps[L + m] = v(m * ds),
/// m = -L..L.
struct Filter {
    FilterKind kind = FilterKind::RamLak;
    double omega = 0.0;
    int half_length = 0;
    std::vector<double> taps;

    /// Ram-Lak sampled at the detector spacing of geom with L = 2q. Uses the
    /// closed-form tap table when omega == pi/ds.
    static Filter ram_lak(const Geometry& geom, double omega);
    /// Arbitrary symmetric filter-factor table; taps.size() must be odd.
    static Filter custom(std::vector<double> taps, double omega = 0.0);

    double tap(int m) const { return taps[static_cast<std::size_t>(m + half_length)]; }
};

struct FbpPlan {
    Geometry geom;
    Filter filter;
    bool detector_sampling_ok = false; ///< ds <= pi / omega
    bool angular_sampling_ok = false;  ///< p >= omega * radius
};

/// Builds a Ram-Lak plan; omega <= 0 selects the detector Nyquist pi/ds.
FbpPlan make_fbp_plan(const Geometry& geom, double omega = 0.0);
FbpPlan make_fbp_plan(const Geometry& geom, Filter filter);

/// h(j, k) = ds * sum_{l=-q..q} v((k - l) ds) g(j, l), rows independent.
Sinogram filter_projections(const Sinogram& sino, const Filter& filter);

/// Filters each projection, backprojects with linear interpolation and
/// weight 2 pi / p, and zeroes pixels outside the disk.
Image reconstruct_fbp(const Sinogram& sino, const FbpPlan& plan);

/// ||W(shift f) - shift(W f)|| / ||W f|| for W = reconstruct_fbp o forward.
double shift_invariance_defect(const Projector& proj, const FbpPlan& plan, const Image& img, int a, int b);

} // namespace parbeam
