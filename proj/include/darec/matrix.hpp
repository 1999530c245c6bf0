#pragma once

#include <cstddef>
#include <vector>

#include "darec/rng.hpp"

namespace darec {

// Dense row-major matrix of doubles. All model state and intermediate math
// lives here; 32-bit floats appear only at the file boundary (see dataio).
class Mat {
public:
    Mat() : rows_(0), cols_(0) {}
    Mat(std::size_t rows, std::size_t cols)
        : rows_(rows), cols_(cols), v_(rows * cols, 0.0) {}

    static Mat filled(std::size_t rows, std::size_t cols, double value);
    static Mat identity(std::size_t n);
    static Mat gaussian(std::size_t rows, std::size_t cols, double mean,
                        double stddev, Rng& rng);

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return v_.size(); }
    bool empty() const { return v_.empty(); }

    double* data() { return v_.data(); }
    const double* data() const { return v_.data(); }
    double* row(std::size_t i) { return v_.data() + i * cols_; }
    const double* row(std::size_t i) const { return v_.data() + i * cols_; }
    double& operator()(std::size_t i, std::size_t j) { return v_[i * cols_ + j]; }
    double operator()(std::size_t i, std::size_t j) const { return v_[i * cols_ + j]; }

    void set_zero();
    bool all_finite() const;

    bool operator==(const Mat& o) const {
        return rows_ == o.rows_ && cols_ == o.cols_ && v_ == o.v_;
    }

private:
    std::size_t rows_, cols_;
    std::vector<double> v_;
};

// C = A * B
Mat matmul(const Mat& a, const Mat& b);
// C = A * B^T
Mat matmul_nt(const Mat& a, const Mat& b);
// C = A^T * B
Mat matmul_tn(const Mat& a, const Mat& b);

void add_inplace(Mat& a, const Mat& b);           // a += b
void add_scaled_inplace(Mat& a, const Mat& b, double s);  // a += s*b
void scale_inplace(Mat& a, double s);

Mat vstack(const Mat& top, const Mat& bottom);
Mat take_rows(const Mat& m, const std::vector<std::uint32_t>& idx);

double row_norm(const Mat& m, std::size_t i);
double max_abs_diff(const Mat& a, const Mat& b);
double frobenius_sq(const Mat& m);

}  // namespace darec
