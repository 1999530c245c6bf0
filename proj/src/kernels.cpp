#include "darec/kernels.hpp"

#include <cstdlib>
#include <stdexcept>

namespace darec::kernels {
namespace {

Backend detect_backend() {
    const char* forced = std::getenv("DAREC_KERNELS");
    if (forced) {
        const std::string s(forced);
        if (s == "scalar") return Backend::Scalar;
        if (s == "avx2" && backend_supported(Backend::Avx2)) return Backend::Avx2;
        if (s == "neon" && backend_supported(Backend::Neon)) return Backend::Neon;
        return Backend::Scalar;
    }
#if defined(DAREC_HAVE_AVX2_TU)
    if (__builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma"))
        return Backend::Avx2;
#endif
#if defined(DAREC_HAVE_NEON_TU)
    return Backend::Neon;
#endif
    return Backend::Scalar;
}

Backend g_backend = detect_backend();

}  // namespace

bool backend_supported(Backend b) {
    switch (b) {
        case Backend::Scalar:
            return true;
        case Backend::Avx2:
#if defined(DAREC_HAVE_AVX2_TU)
            return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
            return false;
#endif
        case Backend::Neon:
#if defined(DAREC_HAVE_NEON_TU)
            return true;
#else
            return false;
#endif
    }
    return false;
}

Backend active() { return g_backend; }

std::string backend_name(Backend b) {
    switch (b) {
        case Backend::Scalar: return "scalar";
        case Backend::Avx2: return "avx2";
        case Backend::Neon: return "neon";
    }
    return "unknown";
}

void set_backend(Backend b) {
    if (!backend_supported(b))
        throw std::runtime_error("kernel backend not available: " + backend_name(b));
    g_backend = b;
}

const Ops& ops() {
    switch (g_backend) {
#if defined(DAREC_HAVE_AVX2_TU)
        case Backend::Avx2: return avx2_ops();
#endif
#if defined(DAREC_HAVE_NEON_TU)
        case Backend::Neon: return neon_ops();
#endif
        default: return scalar_ops();
    }
}

}  // namespace darec::kernels
