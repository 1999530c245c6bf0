#pragma once

#include <cstddef>
#include <string>

namespace darec::kernels {

// Dense double-precision primitives behind the linear-algebra layer.
// A scalar reference lane always exists; AVX2 (x86-64) and NEON (aarch64)
// lanes are selected at runtime when the CPU supports them. The active lane
// can be forced with set_backend() or the DAREC_KERNELS environment variable
// (values: scalar, avx2, neon).
enum class Backend { Scalar, Avx2, Neon };

struct Ops {
    double (*dot)(const double* x, const double* y, std::size_t n);
    double (*sq_dist)(const double* x, const double* y, std::size_t n);
    double (*sum)(const double* x, std::size_t n);
    void (*axpy)(double a, const double* x, double* y, std::size_t n);
    void (*scal)(double a, double* x, std::size_t n);
};

Backend active();
std::string backend_name(Backend b);
bool backend_supported(Backend b);
// Throws std::runtime_error if the lane is not available on this CPU/build.
void set_backend(Backend b);
const Ops& ops();

inline double dot(const double* x, const double* y, std::size_t n) {
    return ops().dot(x, y, n);
}
inline double sq_dist(const double* x, const double* y, std::size_t n) {
    return ops().sq_dist(x, y, n);
}
inline double sum(const double* x, std::size_t n) { return ops().sum(x, n); }
inline void axpy(double a, const double* x, double* y, std::size_t n) {
    ops().axpy(a, x, y, n);
}
inline void scal(double a, double* x, std::size_t n) { ops().scal(a, x, n); }

// Lane tables, exposed for equivalence tests.
const Ops& scalar_ops();
#if defined(DAREC_HAVE_AVX2_TU)
const Ops& avx2_ops();
#endif
#if defined(DAREC_HAVE_NEON_TU)
const Ops& neon_ops();
#endif

}  // namespace darec::kernels
