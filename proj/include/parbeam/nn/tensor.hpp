#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace parbeam::nn {

struct Shape {
    std::size_t n = 1, c = 1, h = 1, w = 1;
    std::size_t size() const { return n * c * h * w; }
    bool operator==(const Shape&) const = default;
    std::string str() const;
};

/// Dense (batch, channels, height, width) tensor, row-major.
class Tensor4 {
public:
    Tensor4() = default;
    /// Throws InvalidArgument when a dimension is zero.
    explicit Tensor4(Shape s, double fill = 0.0);
    Tensor4(Shape s, std::vector<double> data);

    const Shape& shape() const { return shape_; }
    std::size_t size() const { return data_.size(); }
    std::size_t n() const { return shape_.n; }
    std::size_t c() const { return shape_.c; }
    std::size_t h() const { return shape_.h; }
    std::size_t w() const { return shape_.w; }

    std::size_t index(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const {
        return ((n * shape_.c + c) * shape_.h + y) * shape_.w + x;
    }
    double& operator()(std::size_t n, std::size_t c, std::size_t y, std::size_t x) { return data_[index(n, c, y, x)]; }
    double operator()(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const {
        return data_[index(n, c, y, x)];
    }

    double* ptr(std::size_t n, std::size_t c, std::size_t y, std::size_t x) { return data_.data() + index(n, c, y, x); }
    const double* ptr(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const {
        return data_.data() + index(n, c, y, x);
    }

    std::span<double> flat() { return data_; }
    std::span<const double> flat() const { return data_; }
    std::vector<double>& vec() { return data_; }
    const std::vector<double>& vec() const { return data_; }

    bool operator==(const Tensor4&) const = default;

private:
    Shape shape_{};
    std::vector<double> data_;
};

/// Throws InvalidArgument when a value is NaN or infinite.
void check_finite(const Tensor4& t, const char* where);

} // namespace parbeam::nn
