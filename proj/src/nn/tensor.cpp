#include "parbeam/nn/tensor.hpp"

#include <cmath>

#include "parbeam/errors.hpp"

namespace parbeam::nn {

std::string Shape::str() const {
    return "(" + std::to_string(n) + ", " + std::to_string(c) + ", " + std::to_string(h) + ", " + std::to_string(w) + ")";
}

Tensor4::Tensor4(Shape s, double fill) : shape_(s) {
    if (s.n == 0 || s.c == 0 || s.h == 0 || s.w == 0) throw InvalidArgument("Tensor4: zero dimension in " + s.str());
    data_.assign(s.size(), fill);
}

Tensor4::Tensor4(Shape s, std::vector<double> data) : Tensor4(s) {
    if (data.size() != s.size()) throw InvalidArgument("Tensor4: data size does not match " + s.str());
    data_ = std::move(data);
}

void check_finite(const Tensor4& t, const char* where) {
    for (double v : t.flat())
        if (!std::isfinite(v)) throw InvalidArgument(std::string(where) + ": non-finite value");
}

} // namespace parbeam::nn
