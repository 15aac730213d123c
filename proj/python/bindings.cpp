#include <cmath>
#include <memory>
#include <random>
#include <sstream>

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "cli.hpp"
#include "parbeam/errors.hpp"
#include "parbeam/fbp.hpp"
#include "parbeam/metrics.hpp"
#include "parbeam/parallel.hpp"
#include "parbeam/radon.hpp"
#include "parbeam/regularizers.hpp"
#include "parbeam/simulate.hpp"
#include "parbeam/solvers.hpp"

namespace py = pybind11;
using namespace parbeam;

namespace {

using Arr = py::array_t<double, py::array::c_style | py::array::forcecast>;

Array2 to_array2(const Arr& a, std::size_t rows, std::size_t cols, const char* what) {
    if (a.ndim() != 2 || static_cast<std::size_t>(a.shape(0)) != rows || static_cast<std::size_t>(a.shape(1)) != cols)
        throw InvalidArgument(std::string(what) + ": expected shape (" + std::to_string(rows) + ", " +
                              std::to_string(cols) + ")");
    return Array2(rows, cols, std::vector<double>(a.data(), a.data() + a.size()));
}

Arr to_numpy(const Array2& a) {
    Arr out({a.rows(), a.cols()});
    std::copy(a.vec().begin(), a.vec().end(), out.mutable_data());
    return out;
}

std::size_t side(const Geometry& g) { return static_cast<std::size_t>(g.image_side()); }
std::size_t angles(const Geometry& g) { return static_cast<std::size_t>(g.num_angles()); }
std::size_t bins(const Geometry& g) { return static_cast<std::size_t>(g.num_bins()); }

Image image_of(const Geometry& g, const Arr& a) { return Image(g, to_array2(a, side(g), side(g), "image")); }
Sinogram sino_of(const Geometry& g, const Arr& a) {
    return Sinogram(g, to_array2(a, angles(g), bins(g), "sinogram"));
}

struct Radon {
    std::shared_ptr<const Projector> proj;
    std::shared_ptr<const ProjectorOperator> op;

    explicit Radon(const Geometry& g)
        : proj(std::make_shared<Projector>(g)), op(std::make_shared<ProjectorOperator>(proj)) {}

    LinearProblem problem(const Arr& g, const std::optional<Arr>& truth) const {
        const Geometry& geom = proj->geometry();
        std::optional<std::vector<double>> t;
        if (truth) t = image_of(geom, *truth).values.vec();
        return LinearProblem(op, sino_of(geom, g).values.vec(), t);
    }
    Arr image(std::vector<double> f) const {
        const auto n = side(proj->geometry());
        return to_numpy(Array2(n, n, std::move(f)));
    }
};

} // namespace

PYBIND11_MODULE(parbeam, m) {
    m.doc() = "Parallel-beam tomography toolkit";

    py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
    py::register_exception<InvalidArgument>(m, "InvalidArgument", PyExc_ValueError);

    py::class_<Geometry>(m, "Geometry")
        .def(py::init(&make_geometry), py::arg("p"), py::arg("q"), py::arg("radius") = 1.0)
        .def_property_readonly("p", &Geometry::num_angles)
        .def_property_readonly("q", &Geometry::half_bins)
        .def_property_readonly("radius", &Geometry::radius)
        .def_property_readonly("image_side", &Geometry::image_side)
        .def_property_readonly("num_bins", &Geometry::num_bins)
        .def_property_readonly("bin_step", &Geometry::bin_step)
        .def("__repr__", [](const Geometry& g) {
            std::ostringstream os;
            os << "Geometry(p=" << g.num_angles() << ", q=" << g.half_bins() << ", radius=" << g.radius() << ")";
            return os.str();
        });

    py::class_<Radon>(m, "Radon")
        .def(py::init<const Geometry&>())
        .def_property_readonly("geometry", [](const Radon& r) { return r.proj->geometry(); })
        .def("forward",
             [](const Radon& r, const Arr& f) {
                 return to_numpy(r.proj->forward(image_of(r.proj->geometry(), f)).values);
             })
        .def("adjoint",
             [](const Radon& r, const Arr& g) {
                 return to_numpy(r.proj->adjoint_backproject(sino_of(r.proj->geometry(), g)).values);
             })
        .def("sigma_max", [](const Radon& r) {
            return power_method_norm(*r.op, kBoundPowerIters, kBoundPowerSeed).sigma_max;
        });

    m.def(
        "fbp",
        [](const Geometry& geom, const Arr& g, double omega) {
            return to_numpy(reconstruct_fbp(sino_of(geom, g), make_fbp_plan(geom, omega)).values);
        },
        py::arg("geometry"), py::arg("sinogram"), py::arg("omega") = 0.0);

    m.def(
        "landweber",
        [](const Radon& r, const Arr& g, int iters, double omega) {
            LandweberOptions o;
            o.iters = iters;
            o.omega = omega > 0.0 ? omega : 1.0 / std::pow(power_method_norm(*r.op, kBoundPowerIters,
                                                                              kBoundPowerSeed).sigma_max, 2);
            o.trace.enabled = false;
            return r.image(landweber(r.problem(g, std::nullopt), o).f);
        },
        py::arg("radon"), py::arg("sinogram"), py::arg("iters"), py::arg("omega") = 0.0);

    m.def(
        "fista_tv",
        [](const Radon& r, const Arr& g, double lambda, int iters) {
            FistaOptions o;
            o.lambda = lambda;
            o.iters = iters;
            o.trace.enabled = false;
            return r.image(fista_tv(r.problem(g, std::nullopt), o).solve.f);
        },
        py::arg("radon"), py::arg("sinogram"), py::arg("lam"), py::arg("iters"));

    m.def(
        "random_phantom",
        [](const Geometry& geom, std::uint64_t seed) {
            std::mt19937_64 rng(seed);
            return to_numpy(rasterize_phantom(make_phantom(geom, PhantomConfig{}, rng), geom).values);
        },
        py::arg("geometry"), py::arg("seed") = 0);

    m.def(
        "apply_noise",
        [](const Geometry& geom, const Arr& g, double i0, double sigma_th, std::uint64_t seed) {
            const NoisySinogram ns = apply_noise(sino_of(geom, g), NoiseModel{i0, sigma_th, seed});
            return py::make_tuple(to_numpy(ns.sino.values), ns.snr_db);
        },
        py::arg("geometry"), py::arg("sinogram"), py::arg("i0"), py::arg("sigma_th") = 1e-4, py::arg("seed") = 0);

    m.def(
        "evaluate",
        [](const Radon& r, const Arr& x, const Arr& ref) {
            const Geometry& geom = r.proj->geometry();
            const MetricReport rep = evaluate(image_of(geom, x), image_of(geom, ref), *r.op);
            py::dict d;
            d["mae_hu"] = rep.mae_hu;
            d["ssim"] = rep.ssim;
            d["snr_db"] = rep.snr_db;
            d["rel_error"] = rep.rel_error;
            d["radon_rel_error"] = rep.radon_rel_error;
            return d;
        },
        py::arg("radon"), py::arg("x"), py::arg("reference"));

    m.def("set_threads", &set_thread_count, py::arg("n"));
    m.def("threads", &thread_count);

    m.def(
        "cli",
        [](const std::vector<std::string>& args) {
            std::ostringstream out, err;
            const int code = cli::run(args, out, err);
            return py::make_tuple(code, out.str(), err.str());
        },
        py::arg("args"));
}
