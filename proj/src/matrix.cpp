#include "darec/matrix.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstring>
#include <stdexcept>

#include "darec/kernels.hpp"

namespace darec {

Mat Mat::filled(std::size_t rows, std::size_t cols, double value) {
    Mat m(rows, cols);
    std::fill(m.v_.begin(), m.v_.end(), value);
    return m;
}

Mat Mat::identity(std::size_t n) {
    Mat m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
}

Mat Mat::gaussian(std::size_t rows, std::size_t cols, double mean, double stddev,
                  Rng& rng) {
    Mat m(rows, cols);
    for (auto& x : m.v_) x = rng.normal(mean, stddev);
    return m;
}

void Mat::set_zero() { std::fill(v_.begin(), v_.end(), 0.0); }

bool Mat::all_finite() const {
    for (double x : v_)
        if (!std::isfinite(x)) return false;
    return true;
}

Mat matmul(const Mat& a, const Mat& b) {
    if (a.cols() != b.rows()) throw std::invalid_argument("matmul: shape mismatch");
    Mat c(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        double* ci = c.row(i);
        const double* ai = a.row(i);
        for (std::size_t k = 0; k < a.cols(); ++k) {
            kernels::axpy(ai[k], b.row(k), ci, b.cols());
        }
    }
    return c;
}

Mat matmul_nt(const Mat& a, const Mat& b) {
    if (a.cols() != b.cols()) throw std::invalid_argument("matmul_nt: shape mismatch");
    Mat c(a.rows(), b.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        const double* ai = a.row(i);
        double* ci = c.row(i);
        for (std::size_t j = 0; j < b.rows(); ++j) {
            ci[j] = kernels::dot(ai, b.row(j), a.cols());
        }
    }
    return c;
}

Mat matmul_tn(const Mat& a, const Mat& b) {
    if (a.rows() != b.rows()) throw std::invalid_argument("matmul_tn: shape mismatch");
    Mat c(a.cols(), b.cols());
    for (std::size_t r = 0; r < a.rows(); ++r) {
        const double* ar = a.row(r);
        const double* br = b.row(r);
        for (std::size_t i = 0; i < a.cols(); ++i) {
            kernels::axpy(ar[i], br, c.row(i), b.cols());
        }
    }
    return c;
}

void add_inplace(Mat& a, const Mat& b) {
    assert(a.rows() == b.rows() && a.cols() == b.cols());
    kernels::axpy(1.0, b.data(), a.data(), a.size());
}

void add_scaled_inplace(Mat& a, const Mat& b, double s) {
    assert(a.rows() == b.rows() && a.cols() == b.cols());
    kernels::axpy(s, b.data(), a.data(), a.size());
}

void scale_inplace(Mat& a, double s) { kernels::scal(s, a.data(), a.size()); }

Mat vstack(const Mat& top, const Mat& bottom) {
    if (top.cols() != bottom.cols() && !top.empty() && !bottom.empty())
        throw std::invalid_argument("vstack: column mismatch");
    const std::size_t cols = top.empty() ? bottom.cols() : top.cols();
    Mat m(top.rows() + bottom.rows(), cols);
    std::memcpy(m.data(), top.data(), top.size() * sizeof(double));
    std::memcpy(m.data() + top.size(), bottom.data(), bottom.size() * sizeof(double));
    return m;
}

Mat take_rows(const Mat& m, const std::vector<std::uint32_t>& idx) {
    Mat out(idx.size(), m.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        std::memcpy(out.row(i), m.row(idx[i]), m.cols() * sizeof(double));
    }
    return out;
}

double row_norm(const Mat& m, std::size_t i) {
    return std::sqrt(kernels::dot(m.row(i), m.row(i), m.cols()));
}

double max_abs_diff(const Mat& a, const Mat& b) {
    assert(a.rows() == b.rows() && a.cols() == b.cols());
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        worst = std::max(worst, std::abs(a.data()[i] - b.data()[i]));
    return worst;
}

double frobenius_sq(const Mat& m) { return kernels::dot(m.data(), m.data(), m.size()); }

}  // namespace darec
