#pragma once

#include <algorithm>
#include <cstddef>
#include <vector>

#include "retrec/rng.hpp"

namespace retrec {

// Dense row-major matrix of doubles. The numeric core runs in double
// precision; file formats narrow to float32 at the serialization boundary.
class Matrix {
public:
    Matrix() = default;
    Matrix(int rows, int cols)
        : rows_(rows), cols_(cols),
          data_(static_cast<size_t>(rows) * static_cast<size_t>(cols), 0.0) {}

    int rows() const { return rows_; }
    int cols() const { return cols_; }
    size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    double* row(int i) { return data_.data() + static_cast<size_t>(i) * cols_; }
    const double* row(int i) const {
        return data_.data() + static_cast<size_t>(i) * cols_;
    }
    double& at(int i, int j) {
        return data_[static_cast<size_t>(i) * cols_ + j];
    }
    double at(int i, int j) const {
        return data_[static_cast<size_t>(i) * cols_ + j];
    }

    void fill(double v) { std::fill(data_.begin(), data_.end(), v); }
    void zero() { fill(0.0); }
    // Contents are unspecified after a resize; callers overwrite them.
    void resize(int rows, int cols) {
        if (rows == rows_ && cols == cols_) return;
        rows_ = rows;
        cols_ = cols;
        data_.assign(static_cast<size_t>(rows) * cols, 0.0);
    }

    void randn(Rng& rng, double stddev) {
        for (auto& v : data_) v = rng.normal(0.0, stddev);
    }

    bool same_shape(const Matrix& o) const {
        return rows_ == o.rows_ && cols_ == o.cols_;
    }

    friend bool operator==(const Matrix& a, const Matrix& b) {
        return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
    }

private:
    int rows_ = 0;
    int cols_ = 0;
    std::vector<double> data_;
};

inline double dot(const double* a, const double* b, int n) {
    double s = 0.0;
    for (int i = 0; i < n; ++i) s += a[i] * b[i];
    return s;
}

}  // namespace retrec
