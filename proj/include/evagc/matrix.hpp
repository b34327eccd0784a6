#ifndef EVAGC_MATRIX_HPP
#define EVAGC_MATRIX_HPP

#include <cassert>
#include <cmath>
#include <cstddef>
#include <vector>

namespace evagc {

// Row-major dense matrix of doubles. All model math in this project is
// edge-list iteration plus small dense products, so a flat buffer with an
// index operator is all we need.
class Matrix {
public:
    Matrix() = default;
    Matrix(int rows, int cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(static_cast<std::size_t>(rows) * cols, fill) {}

    double& operator()(int r, int c) {
        assert(r >= 0 && r < rows_ && c >= 0 && c < cols_);
        return data_[static_cast<std::size_t>(r) * cols_ + c];
    }
    double operator()(int r, int c) const {
        assert(r >= 0 && r < rows_ && c >= 0 && c < cols_);
        return data_[static_cast<std::size_t>(r) * cols_ + c];
    }

    int rows() const { return rows_; }
    int cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }

    double* row(int r) { return data_.data() + static_cast<std::size_t>(r) * cols_; }
    const double* row(int r) const { return data_.data() + static_cast<std::size_t>(r) * cols_; }

    void fill(double v) { data_.assign(data_.size(), v); }

    void add_scaled(const Matrix& other, double scale) {
        assert(rows_ == other.rows_ && cols_ == other.cols_);
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += scale * other.data_[i];
    }

    bool all_finite() const {
        for (double v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

private:
    int rows_ = 0;
    int cols_ = 0;
    std::vector<double> data_;
};

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
    assert(a.rows() == b.rows() && a.cols() == b.cols());
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = std::fabs(a.data()[i] - b.data()[i]);
        if (d > m) m = d;
    }
    return m;
}

} // namespace evagc

#endif
