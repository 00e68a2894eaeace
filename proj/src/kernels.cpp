#include "rsnas/kernels.hpp"

#include "rsnas/common.hpp"

namespace rsnas::kern {

namespace {

constexpr KernelTable kScalarTable = {
    scalar::axpy, scalar::scale, scalar::vadd, scalar::vmul, scalar::relu_fwd,
    scalar::relu_bwd, scalar::affine, scalar::addc, scalar::vmac,
    scalar::dot, scalar::sum, scalar::sumsq,
};

#if RSNAS_HAVE_AVX2
constexpr KernelTable kAvx2Table = {
    avx2::axpy, avx2::scale, avx2::vadd, avx2::vmul, avx2::relu_fwd,
    avx2::relu_bwd, avx2::affine, avx2::addc, avx2::vmac,
    avx2::dot, avx2::sum, avx2::sumsq,
};
#endif

Backend g_active = detect_backend();

} // namespace

bool backend_available(Backend b) {
    switch (b) {
    case Backend::Scalar: return true;
    case Backend::Avx2:
#if RSNAS_HAVE_AVX2
        return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
        return false;
#endif
    }
    return false;
}

Backend detect_backend() {
    return backend_available(Backend::Avx2) ? Backend::Avx2 : Backend::Scalar;
}

void set_backend(Backend b) {
    RSNAS_CHECK(backend_available(b), "kernel backend '", backend_name(b),
                "' is not available on this machine");
    g_active = b;
}

Backend active_backend() { return g_active; }

const KernelTable& table_for(Backend b) {
    RSNAS_CHECK(backend_available(b), "kernel backend '", backend_name(b),
                "' is not available on this machine");
#if RSNAS_HAVE_AVX2
    if (b == Backend::Avx2) return kAvx2Table;
#endif
    return kScalarTable;
}

const KernelTable& table() { return table_for(g_active); }

const char* backend_name(Backend b) {
    switch (b) {
    case Backend::Scalar: return "scalar";
    case Backend::Avx2: return "avx2";
    }
    return "?";
}

Backend backend_from_name(const std::string& name) {
    if (name == "scalar") return Backend::Scalar;
    if (name == "avx2") return Backend::Avx2;
    if (name == "auto") return detect_backend();
    throw std::invalid_argument(cat("unknown kernel backend '", name, "' (scalar|avx2|auto)"));
}

void axpy_strided(float* y, std::size_t ystride, const float* x, std::size_t xstride,
                  float a, std::size_t n) {
    if (ystride == 1 && xstride == 1) {
        table().axpy(y, x, a, n);
        return;
    }
    for (std::size_t i = 0; i < n; ++i) y[i * ystride] += a * x[i * xstride];
}

float dot_strided(const float* x, std::size_t xstride, const float* y, std::size_t ystride,
                  std::size_t n) {
    if (xstride == 1 && ystride == 1) return table().dot(x, y, n);
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        acc += static_cast<double>(x[i * xstride]) * y[i * ystride];
    return static_cast<float>(acc);
}

} // namespace rsnas::kern
