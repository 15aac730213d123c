#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace parbeam {

/// Small dense row-major matrix for oracles and test systems.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0) : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

    static Matrix identity(std::size_t n);
    static Matrix diagonal(std::span<const double> d);

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
    std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }
    std::vector<double>& data() { return data_; }
    const std::vector<double>& data() const { return data_; }

    Matrix transposed() const;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

Matrix operator*(const Matrix& a, const Matrix& b);
/// y = A x, accumulated in ascending column order.
std::vector<double> matvec(const Matrix& a, std::span<const double> x);
/// x = A^T y, accumulated in ascending row order.
std::vector<double> matTvec(const Matrix& a, std::span<const double> y);
double frobenius_norm(const Matrix& a);

double dot(std::span<const double> a, std::span<const double> b);
double norm2(std::span<const double> a);
/// y += alpha * x
void axpy(double alpha, std::span<const double> x, std::span<double> y);

/// Linear map R^cols -> R^rows with its adjoint.
class LinearOperator {
public:
    virtual ~LinearOperator() = default;
    virtual std::size_t rows() const = 0;
    virtual std::size_t cols() const = 0;
    virtual void apply(std::span<const double> x, std::span<double> y) const = 0;
    virtual void adjoint(std::span<const double> y, std::span<double> x) const = 0;

    /// out[i] = (A x)[rows[i]]. The default evaluates the full product.
    virtual void apply_rows(std::span<const std::size_t> rows, std::span<const double> x, std::span<double> out) const;
    /// x += A_rows^T vals. The default scatters through the full adjoint.
    virtual void adjoint_rows_add(std::span<const std::size_t> rows, std::span<const double> vals,
                                  std::span<double> x) const;

    std::vector<double> apply(std::span<const double> x) const;
    std::vector<double> adjoint(std::span<const double> y) const;
};

class DenseMatrixOperator final : public LinearOperator {
public:
    explicit DenseMatrixOperator(Matrix m) : m_(std::move(m)) {}
    std::size_t rows() const override { return m_.rows(); }
    std::size_t cols() const override { return m_.cols(); }
    void apply(std::span<const double> x, std::span<double> y) const override;
    void adjoint(std::span<const double> y, std::span<double> x) const override;
    void apply_rows(std::span<const std::size_t> rows, std::span<const double> x, std::span<double> out) const override;
    void adjoint_rows_add(std::span<const std::size_t> rows, std::span<const double> vals,
                          std::span<double> x) const override;
    const Matrix& matrix() const { return m_; }

    using LinearOperator::adjoint;
    using LinearOperator::apply;

private:
    Matrix m_;
};

} // namespace parbeam
