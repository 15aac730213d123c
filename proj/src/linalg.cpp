#include "parbeam/linalg.hpp"

#include <cmath>

#include "parbeam/errors.hpp"

namespace parbeam {

Matrix Matrix::identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
}

Matrix Matrix::diagonal(std::span<const double> d) {
    Matrix m(d.size(), d.size());
    for (std::size_t i = 0; i < d.size(); ++i) m(i, i) = d[i];
    return m;
}

Matrix Matrix::transposed() const {
    Matrix t(cols_, rows_);
    for (std::size_t r = 0; r < rows_; ++r)
        for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
    return t;
}

Matrix operator*(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) throw InvalidArgument("Matrix product: inner dimensions differ");
    Matrix c(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double aik = a(i, k);
            if (aik == 0.0) continue;
            for (std::size_t j = 0; j < b.cols(); ++j) c(i, j) += aik * b(k, j);
        }
    return c;
}

std::vector<double> matvec(const Matrix& a, std::span<const double> x) {
    if (x.size() != a.cols()) throw InvalidArgument("matvec: size mismatch");
    std::vector<double> y(a.rows());
    for (std::size_t r = 0; r < a.rows(); ++r) {
        double acc = 0.0;
        const auto row = a.row(r);
        for (std::size_t c = 0; c < a.cols(); ++c) acc += row[c] * x[c];
        y[r] = acc;
    }
    return y;
}

std::vector<double> matTvec(const Matrix& a, std::span<const double> y) {
    if (y.size() != a.rows()) throw InvalidArgument("matTvec: size mismatch");
    std::vector<double> x(a.cols());
    for (std::size_t r = 0; r < a.rows(); ++r) {
        const auto row = a.row(r);
        for (std::size_t c = 0; c < a.cols(); ++c) x[c] += row[c] * y[r];
    }
    return x;
}

double frobenius_norm(const Matrix& a) { return norm2(a.data()); }

double dot(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw InvalidArgument("dot: size mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
}

double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

void axpy(double alpha, std::span<const double> x, std::span<double> y) {
    if (x.size() != y.size()) throw InvalidArgument("axpy: size mismatch");
    for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

void LinearOperator::apply_rows(std::span<const std::size_t> rows, std::span<const double> x,
                                std::span<double> out) const {
    const auto full = apply(x);
    for (std::size_t i = 0; i < rows.size(); ++i) out[i] = full[rows[i]];
}

void LinearOperator::adjoint_rows_add(std::span<const std::size_t> rows, std::span<const double> vals,
                                      std::span<double> x) const {
    std::vector<double> y(this->rows(), 0.0);
    for (std::size_t i = 0; i < rows.size(); ++i) y[rows[i]] = vals[i];
    const auto back = adjoint(y);
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += back[i];
}

std::vector<double> LinearOperator::apply(std::span<const double> x) const {
    std::vector<double> y(rows());
    apply(x, y);
    return y;
}

std::vector<double> LinearOperator::adjoint(std::span<const double> y) const {
    std::vector<double> x(cols());
    adjoint(y, x);
    return x;
}

void DenseMatrixOperator::apply(std::span<const double> x, std::span<double> y) const {
    if (x.size() != m_.cols() || y.size() != m_.rows()) throw InvalidArgument("DenseMatrixOperator::apply: shape");
    const auto v = matvec(m_, x);
    std::copy(v.begin(), v.end(), y.begin());
}

void DenseMatrixOperator::adjoint(std::span<const double> y, std::span<double> x) const {
    if (x.size() != m_.cols() || y.size() != m_.rows()) throw InvalidArgument("DenseMatrixOperator::adjoint: shape");
    const auto v = matTvec(m_, y);
    std::copy(v.begin(), v.end(), x.begin());
}

void DenseMatrixOperator::apply_rows(std::span<const std::size_t> rows, std::span<const double> x,
                                     std::span<double> out) const {
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto row = m_.row(rows[i]);
        double acc = 0.0;
        for (std::size_t c = 0; c < row.size(); ++c) acc += row[c] * x[c];
        out[i] = acc;
    }
}

void DenseMatrixOperator::adjoint_rows_add(std::span<const std::size_t> rows, std::span<const double> vals,
                                           std::span<double> x) const {
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto row = m_.row(rows[i]);
        for (std::size_t c = 0; c < row.size(); ++c) x[c] += row[c] * vals[i];
    }
}

} // namespace parbeam
